"""Scoring checkpoints, bootstrap intervals, comparison with shipped reference
tables, and static report plots."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np
import torch

from .checkpoint import ModelCheckpoint, as_checkpoint
from .core import ClassTaxonomy, ImageSample, IoUResult, ValidationError, iou, miou
from .segmentation import predict_logits


@dataclass
class EvaluationReport:
    per_class: dict[str, float | None]
    miou: float
    n_images: int
    checkpoint_hash: str = ""
    config_hash: str = ""
    counts: dict[str, list[int]] = field(default_factory=dict)
    ci: dict[str, list[float]] | None = None
    ci_level: float | None = None

    @property
    def classes(self) -> list[str]:
        return list(self.per_class)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        validate_report(d)
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_class", "miou", "n_images", "checkpoint_hash", "config_hash"],
    "properties": {
        "per_class": {"type": "object", "additionalProperties": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        "miou": {"type": "number", "minimum": 0, "maximum": 1},
        "n_images": {"type": "integer", "minimum": 0},
        "checkpoint_hash": {"type": "string"},
        "config_hash": {"type": "string"},
        "counts": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
        "ci": {"type": ["object", "null"]},
        "ci_level": {"type": ["number", "null"]},
    },
    "additionalProperties": False,
}


def validate_report(d: dict):
    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValidationError(f"malformed evaluation report: {e.message}") from None


# ---------------------------------------------------------------- bootstrap

def bootstrap_ci(per_image_scores, level: float = 0.95, resamples: int = 1000, seed: int = 0,
                 statistic: Callable[[np.ndarray], float] | None = None) -> tuple[float, float]:
    """Percentile bootstrap interval of ``statistic`` (default: mean) over resampled rows."""
    x = np.asarray(per_image_scores, dtype=np.float64)
    if len(x) < 2:
        raise ValidationError("bootstrap_ci needs at least 2 scores")
    if not 0 <= level < 1:
        raise ValidationError("level must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(resamples, len(x)))
    if statistic is None:
        stats = x[idx].mean(axis=1) if x.ndim == 1 else np.array([x[i].mean() for i in idx])
    else:
        stats = np.array([statistic(x[i]) for i in idx])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _ratio(counts: np.ndarray) -> float:
    """Summed intersection over summed union for (n, 2) rows; NaN if empty union."""
    inter, union = counts.sum(axis=0)
    return inter / union if union else float("nan")


def _miou_stat(counts: np.ndarray) -> float:
    """(n, C, 2) -> mean of defined per-class dataset IoUs."""
    vals = [_ratio(counts[:, c]) for c in range(counts.shape[1])]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------- evaluate

def evaluate(checkpoint, test_samples: Sequence[ImageSample], cutoff: float = 0.5,
             taxonomy: ClassTaxonomy | None = None, ci_level: float | None = None,
             resamples: int = 1000, seed: int = 0, batch: int = 32) -> EvaluationReport:
    """Dataset-level per-class IoU of thresholded predictions against expert masks."""
    if not test_samples:
        raise ValidationError("evaluate needs a nonempty test set")
    # a plain callable image -> (C, H, W) masks stands in for a checkpoint
    ck = checkpoint if callable(checkpoint) and not isinstance(checkpoint, torch.nn.Module) else None
    if ck is None:
        ck = checkpoint if isinstance(checkpoint, torch.nn.Module) else as_checkpoint(checkpoint)
        if isinstance(ck, torch.nn.Module):
            module = ck
            ck = lambda image: (1 / (1 + np.exp(-predict_logits(module, [image])[0])) > cutoff).astype(np.uint8)
    if taxonomy is None:
        taxonomy = ck.taxonomy if isinstance(ck, ModelCheckpoint) else None
    if taxonomy is None:
        raise ValidationError("evaluate needs a taxonomy")
    if any(s.expert_masks is None for s in test_samples):
        raise ValidationError("every test sample needs expert masks")
    C = taxonomy.count
    counts = np.zeros((len(test_samples), C, 2), dtype=np.int64)
    for start in range(0, len(test_samples), batch):
        chunk = test_samples[start:start + batch]
        if isinstance(ck, ModelCheckpoint):
            z = predict_logits(ck, [s.image for s in chunk])
            preds = (1.0 / (1.0 + np.exp(-z)) > cutoff).astype(np.uint8)
        else:
            preds = [ck(s.image) for s in chunk]
        for k, (s, p) in enumerate(zip(chunk, preds)):
            if np.shape(p) != np.shape(s.expert_masks):
                raise ValidationError(f"prediction for {s.id!r} has shape {np.shape(p)}, expected {np.shape(s.expert_masks)}")
            for c in range(C):
                r = iou(p[c], s.expert_masks[c])
                counts[start + k, c] = (r.intersection, r.union)
    totals = counts.sum(axis=0)
    results = [IoUResult(n, int(i), int(u)) for n, (i, u) in zip(taxonomy.names, totals)]
    report = EvaluationReport(
        per_class={r.class_id: r.iou for r in results},
        miou=miou(results),
        n_images=len(test_samples),
        checkpoint_hash=ck.digest() if isinstance(ck, ModelCheckpoint) else "",
        config_hash=ck.metadata.get("config_hash", "") if isinstance(ck, ModelCheckpoint) else "",
        counts={r.class_id: [r.intersection, r.union] for r in results},
    )
    if ci_level is not None and len(test_samples) >= 2:
        report.ci = {}
        for c, name in enumerate(taxonomy.names):
            if results[c].defined:
                report.ci[name] = list(bootstrap_ci(counts[:, c], ci_level, resamples, seed, _ratio))
        report.ci["miou"] = list(bootstrap_ci(counts, ci_level, resamples, seed, _miou_stat))
        report.ci_level = ci_level
    return report


def trial_ci(trial_mious: Sequence[float], level: float = 0.95, resamples: int = 1000, seed: int = 0):
    """Interval over repeated trials instead of over test images."""
    return bootstrap_ci(trial_mious, level, resamples, seed)


# ---------------------------------------------------------------- reference tables

@dataclass(frozen=True)
class ReferenceTable:
    name: str
    title: str
    provenance: str
    rows: dict

    def row(self, key: str) -> dict:
        if key not in self.rows:
            raise ValidationError(f"table {self.name!r} has no row {key!r}")
        return self.rows[key]


def _reference_doc() -> dict:
    text = resources.files("mixseg").joinpath("data/reference_tables.json").read_text()
    return json.loads(text)


def load_reference_tables() -> dict[str, ReferenceTable]:
    doc = _reference_doc()
    return {k: ReferenceTable(k, v["title"], v["provenance"], v["rows"]) for k, v in doc["tables"].items()}


def radiologist_reference() -> dict:
    return _reference_doc()["radiologist"]


def reported_claims() -> dict:
    return _reference_doc()["claims"]


def report_from_row(table: ReferenceTable, row: str) -> EvaluationReport:
    r = table.row(row)
    return EvaluationReport(per_class=dict(r.get("per_class", {})), miou=float(r["miou"]), n_images=0,
                            checkpoint_hash=f"reference:{table.name}:{row}", config_hash="")


def compare_reference(report: EvaluationReport, table: ReferenceTable, row: str,
                      baseline: float | None = None, target: float | None = None) -> dict:
    """Deltas of ``report`` against a reference row.

    ``relative_change`` is (ours - row) / row on mIoU. When ``baseline`` and
    ``target`` mIoUs are given, ``gap_closure`` is (ours - baseline) /
    (target - baseline), or None if target equals baseline.
    """
    ref = table.row(row)
    ref_pc = ref.get("per_class") or {}
    deltas = {}
    if ref_pc and report.per_class:
        if set(ref_pc) != set(report.per_class):
            raise ValidationError(f"class mismatch: report {sorted(report.per_class)} vs row {sorted(ref_pc)}")
        for c in report.per_class:
            ours, theirs = report.per_class[c], ref_pc[c]
            deltas[c] = None if ours is None or theirs is None else ours - theirs
    ref_miou = float(ref["miou"])
    doc = {
        "table": table.name,
        "row": row,
        "provenance": ref.get("provenance", table.provenance),
        "miou": report.miou,
        "reference_miou": ref_miou,
        "miou_delta": report.miou - ref_miou,
        "relative_change": (report.miou - ref_miou) / ref_miou if ref_miou else None,
        "per_class_delta": deltas,
    }
    if baseline is not None and target is not None:
        doc["gap_closure"] = None if target == baseline else (report.miou - baseline) / (target - baseline)
    return doc


# ---------------------------------------------------------------- plots

PLOT_STYLES = ("p-sweep", "init", "radiologist")


def emit_plots(series: Sequence[dict], out_dir, style: str = "p-sweep", title: str | None = None) -> dict:
    """Render one figure plus a newline-delimited sidecar of the plotted numbers.

    Each series is ``{"name": str, "x": [...], "y": [...]}``; for bar styles
    ``x`` holds category labels.
    """
    if not series:
        raise ValidationError("emit_plots needs at least one series")
    if style not in PLOT_STYLES:
        raise ValidationError(f"unknown plot style {style!r}; known: {PLOT_STYLES}")
    for s in series:
        if len(s["x"]) != len(s["y"]):
            raise ValidationError(f"series {s['name']!r}: x and y lengths differ")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        sidecar = out / f"{style}.jsonl"
        with open(sidecar, "w") as fh:
            for s in series:
                fh.write(json.dumps({"name": s["name"], "x": list(s["x"]), "y": list(s["y"])}) + "\n")
        fig, ax = plt.subplots(figsize=(6, 4))
        if style == "p-sweep":
            for s in series:
                ax.plot(s["x"], s["y"], marker="o", label=s["name"])
            ax.set_xlabel("p (probability of an expert-labelled sample)")
            ax.set_ylabel("IoU")
        else:
            cats = list(dict.fromkeys(c for s in series for c in s["x"]))
            width = 0.8 / len(series)
            for k, s in enumerate(series):
                pos = [cats.index(c) + k * width for c in s["x"]]
                ax.bar(pos, s["y"], width=width, label=s["name"])
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(cats))])
            ax.set_xticklabels(cats, rotation=30, ha="right")
            ax.set_ylabel("IoU" if style == "init" else "relative IoU")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        image = out / f"{style}.png"
        fig.savefig(image, dpi=100, metadata={"Software": None})
        plt.close(fig)
    except OSError as e:
        raise RuntimeError(f"cannot write plots to {out}: {e}") from None
    return {"image": str(image), "sidecar": str(sidecar)}


def read_sidecar(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
