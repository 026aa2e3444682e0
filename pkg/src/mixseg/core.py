"""Domain types, class taxonomy, manifests and the IoU metric primitives."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image


class ValidationError(ValueError):
    """Bad input: shapes, ranges, missing files, malformed records."""


class TrainingError(RuntimeError):
    """A training run could not continue (e.g. the loss went non-finite)."""


LABEL_STATES = ("pos", "neg", "unk")
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class ClassTaxonomy:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValidationError("taxonomy needs at least one class")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValidationError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate class names in {names}")

    @property
    def count(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]


CHEST_XRAY_TAXONOMY = ClassTaxonomy((
    "Airspace Opacity",
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Lung Lesion",
    "Pleural Effusion",
    "Pneumothorax",
    "Support Devices",
))
DEFAULT_TAXONOMY = CHEST_XRAY_TAXONOMY


def as_maskset(masks, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a (C, H, W) binary stack and return it as uint8."""
    m = np.asarray(masks)
    if m.ndim != 3:
        raise ValidationError(f"mask set must be (C, H, W), got shape {m.shape}")
    if shape is not None and m.shape[1:] != tuple(shape):
        raise ValidationError(f"mask set spatial shape {m.shape[1:]} != image shape {tuple(shape)}")
    _check_binary(m)
    return m.astype(np.uint8, copy=False)


def _check_binary(m: np.ndarray):
    if m.dtype == bool:
        return
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("masks must be binary {0, 1}")


@dataclass
class ImageSample:
    id: str
    image: np.ndarray
    labels: dict[str, str]
    expert_masks: np.ndarray | None = None
    pseudo_masks: np.ndarray | None = None
    split: str = "train"

    def positive(self, taxonomy: ClassTaxonomy) -> np.ndarray:
        """Boolean vector of positive image-level labels; unknown counts as negative."""
        return np.array([self.labels.get(n, "neg") == "pos" for n in taxonomy.names])

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.image.shape)


UNDEFINED = None


@dataclass(frozen=True)
class IoUResult:
    class_id: str
    intersection: int
    union: int

    @property
    def iou(self) -> float | None:
        """intersection / union, or ``UNDEFINED`` (None) when the union is empty."""
        if self.union == 0:
            return UNDEFINED
        return self.intersection / self.union

    @property
    def defined(self) -> bool:
        return self.union > 0


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    _check_binary(pred)
    _check_binary(gt)
    return pred.astype(bool), gt.astype(bool)


def iou(pred, gt, class_id: str = "") -> IoUResult:
    p, g = _binary_pair(pred, gt)
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return IoUResult(class_id, inter, union)


def dataset_iou(preds: Sequence, gts: Sequence, class_id: str = "") -> IoUResult:
    """Dataset-level IoU: summed intersections over summed unions."""
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if len(preds) == 0:
        raise ValidationError("dataset_iou needs at least one pair")
    inter = union = 0
    for p, g in zip(preds, gts):
        r = iou(p, g)
        inter += r.intersection
        union += r.union
    return IoUResult(class_id, inter, union)


def miou(per_class: Iterable[IoUResult | float | None]) -> float:
    """Mean of the defined per-class IoUs. Undefined entries are skipped."""
    vals = []
    for r in per_class:
        v = r.iou if isinstance(r, IoUResult) else r
        if v is not None and not (isinstance(v, float) and math.isnan(v)):
            vals.append(float(v))
    if not vals:
        raise ValidationError("every per-class IoU is undefined")
    return float(np.mean(vals))


# ---------------------------------------------------------------- PNG i/o

def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError(f"{path}: expected 8-bit grayscale PNG, got {arr.dtype} {arr.shape}")
    return arr.astype(np.float32) / 255.0


def write_image(path, image: np.ndarray):
    img = np.asarray(image)
    if img.min() < 0 or img.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError(f"{path}: expected 8-bit grayscale mask")
    if not np.isin(arr, (0, 255)).all():
        raise ValidationError(f"{path}: mask values must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def write_mask(path, mask: np.ndarray):
    m = np.asarray(mask)
    _check_binary(m)
    Image.fromarray((m.astype(np.uint8) * 255), mode="L").save(path)


# ---------------------------------------------------------------- manifests

TAXONOMY_SIDECAR = "taxonomy.json"


def save_taxonomy(path, taxonomy: ClassTaxonomy):
    Path(path).write_text(json.dumps({"names": list(taxonomy.names)}) + "\n")


def taxonomy_for(manifest_path) -> ClassTaxonomy:
    """Taxonomy stored next to a manifest, falling back to the chest X-ray default."""
    side = Path(manifest_path).parent / TAXONOMY_SIDECAR
    if side.exists():
        return ClassTaxonomy(tuple(json.loads(side.read_text())["names"]))
    return DEFAULT_TAXONOMY


def _load_masks(root: Path, rec_id: str, mapping, taxonomy, shape, kind):
    if mapping is None:
        return None
    if not isinstance(mapping, Mapping):
        raise ValidationError(f"record {rec_id!r}: {kind} must be a map of class -> path")
    masks = np.zeros((taxonomy.count, *shape), dtype=np.uint8)
    for name, rel in mapping.items():
        c = _class_index(taxonomy, name, rec_id)
        p = root / rel
        if not p.exists():
            raise ValidationError(f"record {rec_id!r}: missing {kind} file {rel}")
        try:
            m = read_mask(p)
        except ValidationError as e:
            raise ValidationError(f"record {rec_id!r}: {e}") from None
        if m.shape != tuple(shape):
            raise ValidationError(f"record {rec_id!r}: {kind} {name!r} shape {m.shape} != image {shape}")
        masks[c] = m
    return masks


def _class_index(taxonomy, name, rec_id):
    try:
        return taxonomy.index(name)
    except ValidationError:
        raise ValidationError(f"record {rec_id!r}: unknown class name {name!r}") from None


def load_manifest(path, taxonomy: ClassTaxonomy | None = None) -> list[ImageSample]:
    """Read and validate a newline-delimited JSON manifest.

    Paths inside records are relative to the manifest's directory. Masks not
    listed for a class load as empty planes.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    taxonomy = taxonomy or taxonomy_for(path)
    root = path.parent
    samples, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}:{lineno}: not valid JSON ({e.msg})") from None
        rec_id = rec.get("id")
        if not isinstance(rec_id, str) or not rec_id:
            raise ValidationError(f"{path}:{lineno}: record without an id")
        if rec_id in seen:
            raise ValidationError(f"record {rec_id!r}: duplicate id")
        seen.add(rec_id)
        split = rec.get("split")
        if split not in SPLITS:
            raise ValidationError(f"record {rec_id!r}: bad split {split!r}")
        img_path = root / str(rec.get("image", ""))
        if not rec.get("image") or not img_path.exists():
            raise ValidationError(f"record {rec_id!r}: missing image file {rec.get('image')}")
        try:
            image = read_image(img_path)
        except ValidationError as e:
            raise ValidationError(f"record {rec_id!r}: {e}") from None
        labels = rec.get("labels", {})
        for name, state in labels.items():
            _class_index(taxonomy, name, rec_id)
            if state not in LABEL_STATES:
                raise ValidationError(f"record {rec_id!r}: label state {state!r} for {name!r}")
        samples.append(ImageSample(
            id=rec_id,
            image=image,
            labels=dict(labels),
            expert_masks=_load_masks(root, rec_id, rec.get("expert_masks"), taxonomy, image.shape, "expert mask"),
            pseudo_masks=_load_masks(root, rec_id, rec.get("pseudo_masks"), taxonomy, image.shape, "pseudo mask"),
            split=split,
        ))
    return samples


def write_manifest(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def split_samples(samples: Iterable[ImageSample], split: str) -> list[ImageSample]:
    return [s for s in samples if s.split == split]


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]. A constant plane maps to ones if positive, else zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo > 0:
        return (x - lo) / (hi - lo)
    return (x > 0).astype(np.float64)
