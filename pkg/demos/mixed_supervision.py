"""Train segmenters with expert-only, pseudo-only and mixed supervision on synthetic shapes.

    python demos/mixed_supervision.py --out /tmp/mixseg-demo

The weak pool here uses the corrupted masks shipped with the synthetic data,
so no classifier is needed. At the default budget the mixed model usually
scores highest; very short runs can rank them differently.
"""
import argparse
from pathlib import Path

from mixseg.core import load_manifest
from mixseg.evaluation import evaluate
from mixseg.segmentation import SegConfig, SupervisionPools, train_segmentation
from mixseg.synthdata import SYNTH_TAXONOMY, SynthConfig, generate_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/mixseg-demo")
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()

    manifest = generate_dataset(SynthConfig(n_images=200, seed=0), Path(args.out) / "data")
    samples = load_manifest(manifest)
    test = [s for s in samples if s.split == "test"]
    train = [s for s in samples if s.split != "test"]
    pools = SupervisionPools(expert=train[:20], pseudo=train[20:])
    print(f"{len(pools.expert)} expert, {len(pools.pseudo)} weak, {len(test)} test images")

    for p in (0.0, 0.9, 1.0):
        ck = train_segmentation(pools, SegConfig(p_expert=p, epochs=args.epochs, steps_per_epoch=40), SYNTH_TAXONOMY)
        rep = evaluate(ck, test, ci_level=None)
        per_class = " ".join(f"{k}={v:.3f}" for k, v in rep.per_class.items())
        print(f"p={p:<4} mIoU={rep.miou:.3f}  {per_class}")


if __name__ == "__main__":
    main()
