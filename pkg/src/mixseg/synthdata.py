"""Deterministic synthetic multi-label shape datasets.

Each image is a noisy background with zero or more of four shape classes
composited on top (overlaps allowed). Expert masks are the exact analytic
rasterizations; weak masks are dilated, salt-noised copies standing in for
coarse saliency pseudo-labels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ClassTaxonomy, ValidationError, save_taxonomy, write_image, write_manifest, write_mask

SYNTH_TAXONOMY = ClassTaxonomy(("ellipse", "rectangle", "ring", "blob"))

# mean intensity each class is painted with
_INTENSITY = {"ellipse": 0.85, "rectangle": 0.55, "ring": 0.95, "blob": 0.70}


@dataclass
class SynthConfig:
    n_images: int = 400
    image_size: tuple[int, int] = (64, 64)
    classes: tuple[str, ...] = SYNTH_TAXONOMY.names
    class_prevalence: tuple[float, ...] = (0.5, 0.5, 0.5, 0.5)
    dilation_radius: int = 2
    flip_rate: float = 0.05
    weak_masks: bool = True
    seed: int = 0

    def validate(self) -> "SynthConfig":
        self.image_size = tuple(int(v) for v in self.image_size)
        self.classes = tuple(self.classes)
        self.class_prevalence = tuple(float(v) for v in self.class_prevalence)
        if min(self.image_size) < 16:
            raise ValidationError(f"image_size {self.image_size} below 16x16")
        if unknown := set(self.classes) - set(SYNTH_TAXONOMY.names):
            raise ValidationError(f"unknown synthetic classes {sorted(unknown)}")
        if len(self.class_prevalence) != len(self.classes):
            raise ValidationError("class_prevalence needs one entry per class")
        if any(not 0 <= p <= 1 for p in self.class_prevalence):
            raise ValidationError("class prevalence must lie in [0, 1]")
        if self.dilation_radius < 0:
            raise ValidationError("dilation_radius must be >= 0")
        if not 0 <= self.flip_rate < 1:
            raise ValidationError("flip_rate must lie in [0, 1)")
        return self

    @property
    def taxonomy(self) -> ClassTaxonomy:
        return ClassTaxonomy(self.classes)


def _centers(H, W):
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    return rr + 0.5, cc + 0.5


def rasterize(spec: dict, H: int, W: int) -> np.ndarray:
    """Binary mask of pixels whose centre lies inside the shape (boundary inclusive)."""
    r, c = _centers(H, W)
    kind = spec["kind"]
    if kind == "ellipse":
        cy, cx, ry, rx, th = spec["cy"], spec["cx"], spec["ry"], spec["rx"], spec["theta"]
        dy, dx = r - cy, c - cx
        u = dy * np.cos(th) + dx * np.sin(th)
        v = -dy * np.sin(th) + dx * np.cos(th)
        m = (u / ry) ** 2 + (v / rx) ** 2 <= 1
    elif kind == "rectangle":
        cy, cx, hy, hx, th = spec["cy"], spec["cx"], spec["hy"], spec["hx"], spec["theta"]
        dy, dx = r - cy, c - cx
        u = dy * np.cos(th) + dx * np.sin(th)
        v = -dy * np.sin(th) + dx * np.cos(th)
        m = (np.abs(u) <= hy) & (np.abs(v) <= hx)
    elif kind == "ring":
        d = np.hypot(r - spec["cy"], c - spec["cx"])
        m = (d >= spec["r_in"]) & (d <= spec["r_out"])
    elif kind == "blob":
        m = np.zeros((H, W), bool)
        for cy, cx, rad in spec["disks"]:
            m |= np.hypot(r - cy, c - cx) <= rad
    else:
        raise ValidationError(f"unknown shape kind {kind!r}")
    return m.astype(np.uint8)


def _sample_shape(kind: str, H: int, W: int, rng: np.random.Generator) -> dict:
    s = min(H, W)
    cy = float(rng.uniform(0.25, 0.75) * H)
    cx = float(rng.uniform(0.25, 0.75) * W)
    if kind == "ellipse":
        return dict(kind=kind, cy=cy, cx=cx, ry=float(rng.uniform(0.10, 0.18) * s),
                    rx=float(rng.uniform(0.06, 0.12) * s), theta=float(rng.uniform(0, np.pi)))
    if kind == "rectangle":
        return dict(kind=kind, cy=cy, cx=cx, hy=float(rng.uniform(0.08, 0.16) * s),
                    hx=float(rng.uniform(0.08, 0.16) * s), theta=float(rng.uniform(0, np.pi / 2)))
    if kind == "ring":
        r_out = float(rng.uniform(0.12, 0.20) * s)
        return dict(kind=kind, cy=cy, cx=cx, r_out=r_out, r_in=float(r_out * rng.uniform(0.45, 0.65)))
    if kind == "blob":
        disks = []
        for _ in range(3):
            disks.append([float(cy + rng.normal(0, 0.05 * s)), float(cx + rng.normal(0, 0.05 * s)),
                          float(rng.uniform(0.05, 0.09) * s)])
        return dict(kind=kind, disks=disks)
    raise ValidationError(f"unknown shape kind {kind!r}")


def corrupt_mask(mask, dilation_radius: int, flip_rate: float, seed) -> np.ndarray:
    """Dilate with a (2r+1)x(2r+1) square, then flip each pixel with probability ``flip_rate``."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("corrupt_mask expects a binary mask")
    if dilation_radius < 0:
        raise ValidationError("dilation_radius must be >= 0")
    if not 0 <= flip_rate < 1:
        raise ValidationError("flip_rate must lie in [0, 1)")
    out = m.astype(bool)
    if dilation_radius > 0:
        k = 2 * dilation_radius + 1
        out = ndimage.binary_dilation(out, structure=np.ones((k, k), bool))
    if flip_rate > 0:
        rng = np.random.default_rng(seed)
        out = out ^ (rng.random(out.shape) < flip_rate)
    return out.astype(np.uint8)


def render_sample(config: SynthConfig, seed_seq: np.random.SeedSequence):
    """Image, expert masks, shape specs and weak masks for one sample."""
    H, W = config.image_size
    shape_rng, noise_seq, weak_seq = seed_seq.spawn(3)
    rng = np.random.default_rng(shape_rng)
    image = 0.15 + 0.04 * np.random.default_rng(noise_seq).standard_normal((H, W))
    masks = np.zeros((len(config.classes), H, W), np.uint8)
    specs = {}
    for ci, (name, prev) in enumerate(zip(config.classes, config.class_prevalence)):
        if rng.random() >= prev:
            continue
        # resample until the rasterization is nonempty
        while True:
            spec = _sample_shape(name, H, W, rng)
            m = rasterize(spec, H, W)
            if m.any():
                break
        masks[ci] = m
        specs[name] = spec
        image[m.astype(bool)] = _INTENSITY[name] + 0.05 * rng.standard_normal(int(m.sum()))
    image = np.clip(image, 0, 1)
    weak = np.zeros_like(masks)
    weak_seeds = weak_seq.spawn(len(config.classes))
    for ci in range(len(config.classes)):
        if masks[ci].any():
            weak[ci] = corrupt_mask(masks[ci], config.dilation_radius, config.flip_rate, weak_seeds[ci])
    return image, masks, specs, weak


def generate_dataset(config: SynthConfig, out_dir) -> Path:
    """Write images, masks and a manifest under ``out_dir``; return the manifest path."""
    config.validate()
    if config.n_images < 5:
        raise ValidationError("n_images must be at least 5 so every split is nonempty")
    out = Path(out_dir)
    for sub in ("images", "masks", "weak"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    n = config.n_images
    root = np.random.SeedSequence(config.seed)
    split_seq, *image_seqs = root.spawn(n + 1)
    order = np.random.default_rng(split_seq).permutation(n)
    n_train, n_valid = int(round(0.7 * n)), int(round(0.1 * n))
    split = np.empty(n, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:n_train + n_valid]] = "valid"
    split[order[n_train + n_valid:]] = "test"
    width = len(str(n - 1))
    records, shapes = [], {}
    for i in range(n):
        sid = f"img{i:0{width}d}"
        image, masks, specs, weak = render_sample(config, image_seqs[i])
        write_image(out / "images" / f"{sid}.png", image)
        rec = {"id": sid, "image": f"images/{sid}.png", "split": str(split[i]),
               "labels": {}, "expert_masks": {}}
        if config.weak_masks:
            rec["pseudo_masks"] = {}
        for ci, name in enumerate(config.classes):
            present = bool(masks[ci].any())
            rec["labels"][name] = "pos" if present else "neg"
            write_mask(out / "masks" / f"{sid}__{ci}.png", masks[ci])
            rec["expert_masks"][name] = f"masks/{sid}__{ci}.png"
            if config.weak_masks and present:
                write_mask(out / "weak" / f"{sid}__{ci}.png", weak[ci])
                rec["pseudo_masks"][name] = f"weak/{sid}__{ci}.png"
        records.append(rec)
        shapes[sid] = specs
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    save_taxonomy(out / "taxonomy.json", config.taxonomy)
    (out / "shapes.json").write_text(json.dumps({"image_size": list(config.image_size), "shapes": shapes}, sort_keys=True))
    (out / "synth_config.json").write_text(json.dumps(asdict(config), sort_keys=True))
    return manifest
