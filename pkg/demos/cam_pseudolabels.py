"""From image-level labels to pixel pseudo-labels: classifier, Grad-CAM, calibrated thresholds.

    python demos/cam_pseudolabels.py --out /tmp/mixseg-cams

Writes a pseudo-label store and prints how well the thresholded heatmaps
overlap the expert masks they were never trained on.
"""
import argparse
from pathlib import Path

import numpy as np

from mixseg.classifier import ClassifierConfig, generate_heatmaps, train_classifier
from mixseg.core import dataset_iou, load_manifest
from mixseg.pseudolabels import DEFAULT_GRID, calibrate_thresholds, generate_pseudolabels, write_pseudolabel_store
from mixseg.synthdata import SYNTH_TAXONOMY, SynthConfig, generate_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/mixseg-cams")
    args = ap.parse_args()
    out = Path(args.out)

    samples = load_manifest(generate_dataset(SynthConfig(n_images=200, seed=1), out / "data"))
    train = [s for s in samples if s.split == "train"]
    non_test = [s for s in samples if s.split != "test"]
    ck = train_classifier(train, ClassifierConfig(learning_rate=1e-3, epochs=8), SYNTH_TAXONOMY)

    heat = generate_heatmaps(ck, non_test)
    expert = non_test[:20]
    table = calibrate_thresholds(heat[:20], [s.expert_masks for s in expert], DEFAULT_GRID, SYNTH_TAXONOMY)
    print("thresholds", table.thresholds, f"calibration mIoU {table.achieved_miou:.3f}")

    masks, _ = generate_pseudolabels("cam-threshold", non_test, heat, table, SYNTH_TAXONOMY)
    store = write_pseudolabel_store(out / "pseudo", masks, SYNTH_TAXONOMY, "cam-threshold", table)
    rest = [s for s in non_test[20:] if masks[s.id] is not None]
    for c, name in enumerate(SYNTH_TAXONOMY.names):
        r = dataset_iou([masks[s.id][c] for s in rest], [s.expert_masks[c] for s in rest], name)
        print(f"{name:>10}: pseudo-label IoU {r.iou or 0:.3f}")
    print("store written to", store)


if __name__ == "__main__":
    main()
