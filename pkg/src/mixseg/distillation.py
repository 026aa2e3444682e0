"""Teacher-student self-distillation on unlabeled images."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import MetricsLog, ModelCheckpoint, as_checkpoint
from .classifier import images_tensor
from .core import ImageSample, TrainingError, ValidationError
from .segmentation import SegConfig, build_segmenter, init_encoder, predict_logits, segmentation_meta
from .nets import state_arrays

SOFT_EPS = 1e-6


@dataclass
class DistillConfig:
    temperature: float = 10.0
    learning_rate: float = 1e-3
    data_fraction: float = 1.0
    # tempered BCE gives weak gradients; small batches and more passes make up for it
    batch_size: int = 4
    epochs: int = 30
    encoder_init: str = "random"
    init_path: str | None = None
    seed: int = 0

    def validate(self) -> "DistillConfig":
        if not self.temperature > 0:
            raise ValidationError("temperature must be > 0")
        if not 0 < self.data_fraction <= 1:
            raise ValidationError("data_fraction must lie in (0, 1]")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        return self


def soften(logits, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    return 1.0 / (1.0 + np.exp(-z))


def teacher_soft_labels(teacher_ckpt, images: Sequence[np.ndarray], temperature: float = 10.0) -> list[np.ndarray]:
    """sigmoid(teacher_logit / temperature) per pixel and class."""
    if not temperature > 0:
        raise ValidationError("temperature must be > 0")
    ck = as_checkpoint(teacher_ckpt)
    out = []
    for im in images:
        shape = ck.metadata.get("image_shape")
        if shape is not None and tuple(np.shape(im)) != tuple(shape):
            raise ValidationError(f"image shape {np.shape(im)} does not match teacher input {tuple(shape)}")
        out.append(soften(predict_logits(ck, [im])[0], temperature))
    return out


def distill_loss(student_logits, teacher_soft, temperature: float) -> torch.Tensor:
    """Mean BCE between teacher soft labels and the softened student probabilities."""
    z = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_soft).to(z.dtype)
    if z.shape != t.shape:
        raise ValidationError(f"student {tuple(z.shape)} and teacher {tuple(t.shape)} shapes differ")
    t = t.clamp(SOFT_EPS, 1 - SOFT_EPS)
    return F.binary_cross_entropy_with_logits(z / temperature, t)


def binary_entropy(p) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), SOFT_EPS, 1 - SOFT_EPS)
    return float(np.mean(-(p * np.log(p) + (1 - p) * np.log1p(-p))))


def subsample(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded subset indices; a larger fraction with the same seed is a superset."""
    k = int(np.floor(fraction * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:k])


# ---------------------------------------------------------------- soft-label store

def write_soft_store(out_dir, ids: Sequence[str], soft: Sequence[np.ndarray], teacher_hash: str,
                     temperature: float) -> Path:
    """16-bit PNG planes (value / 65535) plus a store manifest."""
    out = Path(out_dir)
    (out / "soft").mkdir(parents=True, exist_ok=True)
    records = []
    for sid, planes in zip(ids, soft):
        q = np.round(np.clip(planes, 0, 1) * 65535).astype(np.uint16)
        paths = []
        for c, plane in enumerate(q):
            p = f"soft/{sid}__{c}.png"
            Image.fromarray(plane).save(out / p)
            paths.append(p)
        records.append({"id": sid, "planes": paths})
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "store.json").write_text(json.dumps({"teacher_hash": teacher_hash, "temperature": temperature},
                                               sort_keys=True) + "\n")
    return out


def read_soft_store(store_dir) -> dict[str, np.ndarray]:
    root = Path(store_dir)
    out = {}
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if line.strip():
            r = json.loads(line)
            out[r["id"]] = np.stack([np.asarray(Image.open(root / p), dtype=np.float64) / 65535 for p in r["planes"]])
    return out


# ---------------------------------------------------------------- training

def train_student(teacher_ckpt, unlabeled_samples: Sequence[ImageSample], config: DistillConfig,
                  log: MetricsLog | None = None, soft_labels: Sequence[np.ndarray] | None = None) -> ModelCheckpoint:
    """Train a same-architecture student on cached teacher soft labels."""
    config.validate()
    log = log or MetricsLog()
    teacher = as_checkpoint(teacher_ckpt)
    idx = subsample(len(unlabeled_samples), config.data_fraction, config.seed)
    if len(idx) == 0:
        raise ValidationError("subsampling selected no unlabeled images")
    chosen = [unlabeled_samples[i] for i in idx]
    if soft_labels is None:
        soft = teacher_soft_labels(teacher, [s.image for s in chosen], config.temperature)
    else:
        soft = [soft_labels[i] for i in idx]

    tmeta = teacher.metadata
    seg_cfg = SegConfig(decoder_id=tmeta.get("decoder_id", "deeplab-lite"),
                        encoder_id=tmeta.get("architecture_id", "small-cnn"),
                        encoder_init=config.encoder_init, init_path=config.init_path,
                        learning_rate=config.learning_rate, batch_size=config.batch_size,
                        epochs=config.epochs, p_expert=1.0, seed=config.seed)
    C = len(tmeta["taxonomy"])
    if config.encoder_init == "teacher":
        model = build_segmenter(seg_cfg, C)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in teacher.tensors.items()})
        provenance = {"encoder_init": "teacher", "init_hash": teacher.digest()}
        seg_cfg.encoder_init = "random"
    else:
        weights, provenance = init_encoder(seg_cfg.encoder_id, config.encoder_init, config.init_path, config.seed)
        model = build_segmenter(seg_cfg, C, weights)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x_all = images_tensor([s.image for s in chosen])
    t_all = torch.as_tensor(np.stack(soft), dtype=torch.float32)
    rng = np.random.default_rng(config.seed)
    it = 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(chosen))
        for s in range(0, len(order), config.batch_size):
            b = torch.as_tensor(order[s:s + config.batch_size])
            loss = distill_loss(model(x_all[b]), t_all[b], config.temperature)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite distillation loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            log.append(iteration=it, epoch=epoch, loss=loss.item(), lr=config.learning_rate)
    model.eval()
    meta = segmentation_meta(seg_cfg, teacher.taxonomy, provenance, iteration=it,
                             teacher_hash=teacher.digest(), data_fraction=config.data_fraction,
                             temperature=config.temperature, n_unlabeled=len(chosen),
                             distill_config=asdict(config))
    return ModelCheckpoint(meta, state_arrays(model))
