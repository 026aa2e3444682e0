"""Run configuration, resumable stage orchestration and the p-sweep driver."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import MetricsLog, ModelCheckpoint, config_hash
from .classifier import ClassifierConfig, generate_heatmaps, train_classifier
from .core import ClassTaxonomy, ImageSample, ValidationError, load_manifest, taxonomy_for
from .distillation import DistillConfig, teacher_soft_labels, train_student, write_soft_store
from .evaluation import EvaluationReport, emit_plots, evaluate, trial_ci
from .pseudolabels import (DEFAULT_GRID, IrnetConfig, ThresholdTable, attach_pseudolabels, calibrate_thresholds,
                           generate_pseudolabels, train_irnet, write_pseudolabel_store)
from .segmentation import SegConfig, SupervisionPools, train_segmentation
from .synthdata import SynthConfig, generate_dataset

log = logging.getLogger(__name__)

ARTIFACT_ENV = "MIXSEG_ARTIFACT_ROOT"
P_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 0.85, 0.9, 1.0)


@dataclass
class PoolConfig:
    expert_pool_size: int = 20
    weak_pool_size: int | None = None
    weak_source: str = "store"          # "store" (generated pseudo-labels) or "synthetic" (corrupted masks)
    pseudo_method: str = "cam-threshold"

    def validate(self) -> "PoolConfig":
        if self.expert_pool_size < 0:
            raise ValidationError("expert_pool_size must be >= 0")
        if self.weak_pool_size is not None and self.weak_pool_size < 1:
            raise ValidationError("weak_pool_size must be >= 1")
        if self.weak_source not in ("store", "synthetic"):
            raise ValidationError("weak_source must be 'store' or 'synthetic'")
        if self.pseudo_method not in ("cam-threshold", "irnet"):
            raise ValidationError("pseudo_method must be 'cam-threshold' or 'irnet'")
        return self


@dataclass
class EvalConfig:
    cutoff: float = 0.5
    ci_level: float = 0.95
    resamples: int = 1000
    p_values: tuple[float, ...] = P_GRID
    trials: int = 3
    threshold_grid: tuple[float, ...] = DEFAULT_GRID

    def validate(self) -> "EvalConfig":
        self.p_values = tuple(float(p) for p in self.p_values)
        self.threshold_grid = tuple(float(t) for t in self.threshold_grid)
        if not 0 <= self.cutoff <= 1:
            raise ValidationError("cutoff must lie in [0, 1]")
        if any(not 0 <= p <= 1 for p in self.p_values):
            raise ValidationError("p_values must lie in [0, 1]")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")
        return self


@dataclass
class Paths:
    data_root: str | None = None
    artifact_root: str = "artifacts"


@dataclass
class RunMeta:
    run_id: str = "run"


SECTIONS = {
    "run": RunMeta,
    "paths": Paths,
    "synthdata": SynthConfig,
    "classifier": ClassifierConfig,
    "irnet": IrnetConfig,
    "segmentation": SegConfig,
    "pools": PoolConfig,
    "distillation": DistillConfig,
    "evaluation": EvalConfig,
}


@dataclass
class RunConfig:
    run: RunMeta = field(default_factory=RunMeta)
    paths: Paths = field(default_factory=Paths)
    synthdata: SynthConfig = field(default_factory=SynthConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    irnet: IrnetConfig = field(default_factory=IrnetConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    pools: PoolConfig = field(default_factory=PoolConfig)
    distillation: DistillConfig = field(default_factory=DistillConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def section_hash(self, *names) -> str:
        return config_hash({n: asdict(getattr(self, n)) for n in names})

    @property
    def artifact_dir(self) -> Path:
        return Path(self.paths.artifact_root) / self.run.run_id

    @property
    def data_dir(self) -> Path:
        return Path(self.paths.data_root) if self.paths.data_root else self.artifact_dir / "data"


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Strict parse of sectioned key/value text; values are JSON where they parse as JSON."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ValidationError(f"{source}: {e}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ValidationError(f"{source}: unknown sections {unknown}")
    cfg = RunConfig()
    bad = []
    for name, cls in SECTIONS.items():
        if not cp.has_section(name):
            continue
        allowed = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in cp.items(name):
            if key not in allowed:
                bad.append(f"{name}.{key}")
                continue
            kwargs[key] = _parse_value(raw)
        try:
            setattr(cfg, name, cls(**{**asdict(getattr(cfg, name)), **kwargs}))
        except TypeError as e:
            raise ValidationError(f"{source}: section [{name}]: {e}") from None
    if bad:
        raise ValidationError(f"{source}: unknown keys {bad}")
    return cfg


def _validate(cfg: RunConfig) -> RunConfig:
    for name in ("synthdata", "classifier", "irnet", "segmentation", "pools", "distillation", "evaluation"):
        section = getattr(cfg, name)
        try:
            section.validate()
        except ValidationError as e:
            raise ValidationError(f"[{name}] {e}") from None
        except TypeError as e:
            raise ValidationError(f"[{name}] bad value type: {e}") from None
    if not cfg.run.run_id or "/" in cfg.run.run_id:
        raise ValidationError("run_id must be a non-empty name without '/'")
    for name in ("segmentation", "distillation"):
        p = getattr(cfg, name).init_path
        if p is not None and not Path(p).exists():
            raise ValidationError(f"[{name}] init_path {p} does not exist")
    if os.environ.get(ARTIFACT_ENV):
        cfg.paths.artifact_root = os.environ[ARTIFACT_ENV]
    return cfg


def validate_config(path=None) -> RunConfig:
    """Load, default-fill and validate a run config file (``None`` gives pure defaults)."""
    if path is None:
        return _validate(RunConfig())
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file {p} does not exist")
    return _validate(parse_config_text(p.read_text(), str(p)))


def serialize_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, values in cfg.to_dict().items():
        cp[name] = {k: json.dumps(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------- ledger

def file_hash(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    elif p.exists():
        h.update(p.read_bytes())
    else:
        return "missing"
    return h.hexdigest()[:16]


class RunLedger:
    """Append-only stage completion records with input/output hashes."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(l) for l in self.path.read_text().splitlines() if l.strip()]

    def lookup(self, key: str) -> dict | None:
        for rec in reversed(self.records()):
            if rec["key"] == key:
                return rec
        return None

    def is_current(self, key: str) -> bool:
        rec = self.lookup(key)
        if rec is None:
            return False
        return all(file_hash(p) == h for p, h in rec["outputs"].items())

    def append(self, stage: str, key: str, inputs: dict, outputs: dict, config_digest: str):
        rec = {"stage": stage, "key": key, "inputs": inputs, "outputs": outputs,
               "config_hash": config_digest, "timestamp": time.time()}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


# ---------------------------------------------------------------- workspace

class Workspace:
    """Artifact locations and dataset views for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.artifact_dir
        self.root.mkdir(parents=True, exist_ok=True)
        self.ledger = RunLedger(self.root / "ledger.jsonl")
        self._samples = None

    # locations
    @property
    def manifest(self) -> Path:
        return self.cfg.data_dir / "manifest.jsonl"

    classifier_ckpt = property(lambda self: self.root / "classifier.ckpt")
    cams = property(lambda self: self.root / "cams.npz")
    thresholds = property(lambda self: self.root / "thresholds.json")
    irnet_ckpt = property(lambda self: self.root / "irnet.ckpt")
    student_ckpt = property(lambda self: self.root / "distill" / "student.ckpt")

    def pseudo_store(self, method=None) -> Path:
        return self.root / "pseudo" / (method or self.cfg.pools.pseudo_method)

    def seg_ckpt(self, p: float, trial: int = 0) -> Path:
        return self.root / "seg" / f"p{p:g}_t{trial}.ckpt"

    def report_path(self, name: str) -> Path:
        return self.root / "reports" / f"{name}.json"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.jsonl"

    # data
    @property
    def taxonomy(self) -> ClassTaxonomy:
        return taxonomy_for(self.manifest)

    def samples(self) -> list[ImageSample]:
        if self._samples is None:
            self._samples = load_manifest(self.manifest)
        return self._samples

    def split(self, name: str) -> list[ImageSample]:
        return [s for s in self.samples() if s.split == name]

    def expert_pool(self) -> list[ImageSample]:
        return self.split("train")[: self.cfg.pools.expert_pool_size]

    def weak_candidates(self) -> list[ImageSample]:
        """Non-test images outside the expert pool."""
        expert = {s.id for s in self.expert_pool()}
        return [s for s in self.samples() if s.split != "test" and s.id not in expert]

    def weak_pool(self, trial: int = 0) -> list[ImageSample]:
        cand = self.weak_candidates()
        if self.cfg.pools.weak_source == "store":
            store = self.pseudo_store()
            if not store.exists():
                raise ValidationError(f"pseudo-label store {store} missing; run gen-pseudolabels first")
            cand = [_copy_sample(s) for s in cand]
            for s in cand:
                s.pseudo_masks = None
            attach_pseudolabels(cand, store, self.taxonomy)
        n = self.cfg.pools.weak_pool_size
        if n is None or n >= len(cand):
            return cand
        idx = np.sort(np.random.default_rng([self.cfg.segmentation.seed, trial]).permutation(len(cand))[:n])
        return [cand[i] for i in idx]

    def pools(self, trial: int = 0) -> SupervisionPools:
        return SupervisionPools(self.expert_pool(), self.weak_pool(trial))


def _copy_sample(s: ImageSample) -> ImageSample:
    return ImageSample(s.id, s.image, dict(s.labels), s.expert_masks, s.pseudo_masks, s.split)


def _summary(stage: str, **kw) -> dict:
    return {"stage": stage, **kw}


def _staged(ws: Workspace, stage: str, sections: Sequence[str], inputs: Sequence[Path], outputs: Sequence[Path],
            force: bool, extra=None):
    """Ledger key for a stage and whether it can be skipped."""
    in_hashes = {str(p): file_hash(p) for p in inputs}
    key = config_hash({"stage": stage, "config": ws.cfg.section_hash(*sections), "inputs": in_hashes, "extra": extra})
    skip = not force and all(Path(p).exists() for p in outputs) and ws.ledger.is_current(key)
    return key, in_hashes, skip


def _record(ws: Workspace, stage: str, key: str, in_hashes: dict, outputs: Sequence[Path], sections):
    ws.ledger.append(stage, key, in_hashes, {str(p): file_hash(p) for p in outputs}, ws.cfg.section_hash(*sections))


# ---------------------------------------------------------------- stages

def stage_synth_data(ws: Workspace, force=False) -> dict:
    out = ws.cfg.data_dir
    key, ins, skip = _staged(ws, "synth-data", ["synthdata"], [], [out / "manifest.jsonl"], force)
    if skip:
        return _summary("synth-data", skipped=True, manifest=str(ws.manifest))
    generate_dataset(ws.cfg.synthdata, out)
    _record(ws, "synth-data", key, ins, [out], ["synthdata"])
    return _summary("synth-data", manifest=str(ws.manifest), n_images=ws.cfg.synthdata.n_images)


def stage_train_classifier(ws: Workspace, force=False) -> dict:
    out = ws.classifier_ckpt
    key, ins, skip = _staged(ws, "train-classifier", ["classifier"], [ws.manifest], [out], force)
    if skip:
        return _summary("train-classifier", skipped=True, checkpoint=str(out))
    train = ws.split("train")
    ck = train_classifier(train, ws.cfg.classifier, ws.taxonomy, MetricsLog(ws.log_path("classifier")),
                          checkpoint_dir=ws.root / "classifier_snapshots")
    ck.save(out)
    _record(ws, "train-classifier", key, ins, [out], ["classifier"])
    return _summary("train-classifier", checkpoint=str(out), iterations=ck.metadata["iteration"])


def _cam_samples(ws: Workspace) -> list[ImageSample]:
    return [s for s in ws.samples() if s.split != "test"]


def stage_gen_cams(ws: Workspace, force=False) -> dict:
    out = ws.cams
    key, ins, skip = _staged(ws, "gen-cams", [], [ws.manifest, ws.classifier_ckpt], [out], force)
    if skip:
        return _summary("gen-cams", skipped=True, cams=str(out))
    if not ws.classifier_ckpt.exists():
        raise ValidationError("classifier checkpoint missing; run train-classifier first")
    samples = _cam_samples(ws)
    maps = generate_heatmaps(ws.classifier_ckpt, samples, ws.taxonomy)
    np.savez_compressed(out, **{s.id: m.astype(np.float32) for s, m in zip(samples, maps)})
    _record(ws, "gen-cams", key, ins, [out], [])
    return _summary("gen-cams", cams=str(out), n_images=len(samples))


def load_cams(ws: Workspace) -> dict[str, np.ndarray]:
    if not ws.cams.exists():
        raise ValidationError("CAM archive missing; run gen-cams first")
    with np.load(ws.cams) as z:
        return {k: z[k].astype(np.float64) for k in z.files}


def stage_calibrate(ws: Workspace, force=False) -> dict:
    out = ws.thresholds
    key, ins, skip = _staged(ws, "calibrate-thresholds", ["pools", "evaluation"], [ws.manifest, ws.cams], [out], force)
    if skip:
        return _summary("calibrate-thresholds", skipped=True, thresholds=str(out))
    cams = load_cams(ws)
    expert = ws.expert_pool()
    if not expert:
        raise ValidationError("calibration needs at least one expert-labelled training image")
    table = calibrate_thresholds([cams[s.id] for s in expert], [s.expert_masks for s in expert],
                                 ws.cfg.evaluation.threshold_grid, ws.taxonomy)
    table.save(out)
    _record(ws, "calibrate-thresholds", key, ins, [out], ["pools", "evaluation"])
    return _summary("calibrate-thresholds", thresholds=table.thresholds, achieved_miou=table.achieved_miou)


def stage_train_irnet(ws: Workspace, force=False) -> dict:
    out = ws.irnet_ckpt
    key, ins, skip = _staged(ws, "train-irnet", ["irnet", "pools"], [ws.manifest, ws.cams], [out], force)
    if skip:
        return _summary("train-irnet", skipped=True, checkpoint=str(out))
    cams = load_cams(ws)
    weak = ws.weak_candidates()
    ck = train_irnet([s.image for s in weak], [cams[s.id] for s in weak], ws.cfg.irnet,
                     MetricsLog(ws.log_path("irnet")))
    ck.save(out)
    _record(ws, "train-irnet", key, ins, [out], ["irnet", "pools"])
    return _summary("train-irnet", checkpoint=str(out), initial_loss=ck.metadata["initial_loss"],
                    final_loss=ck.metadata["final_loss"])


def stage_gen_pseudolabels(ws: Workspace, method=None, force=False) -> dict:
    method = method or ws.cfg.pools.pseudo_method
    out = ws.pseudo_store(method)
    inputs = [ws.manifest, ws.cams, ws.thresholds] + ([ws.irnet_ckpt] if method == "irnet" else [])
    key, ins, skip = _staged(ws, "gen-pseudolabels", ["pools", "irnet"], inputs, [out], force, method)
    if skip:
        return _summary("gen-pseudolabels", skipped=True, store=str(out))
    if not ws.thresholds.exists():
        raise ValidationError("threshold table missing; run calibrate-thresholds first")
    if method == "irnet" and not ws.irnet_ckpt.exists():
        raise ValidationError("IRNet checkpoint missing; run train-irnet first")
    cams = load_cams(ws)
    table = ThresholdTable.load(ws.thresholds)
    weak = ws.weak_candidates()
    expert = ws.expert_pool()
    masks, used = generate_pseudolabels(
        method, weak, [cams[s.id] for s in weak], table, ws.taxonomy,
        irnet_ckpt=ws.irnet_ckpt if method == "irnet" else None, irnet_config=ws.cfg.irnet,
        calibration=(expert, [cams[s.id] for s in expert]) if method == "irnet" else None)
    write_pseudolabel_store(out, masks, ws.taxonomy, method, used, ws.cfg.section_hash("pools", "irnet"),
                            {k: v for k, v in ins.items()})
    _record(ws, "gen-pseudolabels", key, ins, [out], ["pools", "irnet"])
    return _summary("gen-pseudolabels", store=str(out), method=method,
                    n_masked=sum(m is not None for m in masks.values()))


def _seg_config(ws: Workspace, p: float, trial: int) -> SegConfig:
    base = asdict(ws.cfg.segmentation)
    base.update(p_expert=float(p), seed=int(ws.cfg.segmentation.seed + 1000 * trial))
    return SegConfig(**base).validate()


def stage_train_seg(ws: Workspace, p: float, trial: int = 0, force=False) -> dict:
    out = ws.seg_ckpt(p, trial)
    inputs = [ws.manifest] + ([ws.pseudo_store()] if ws.cfg.pools.weak_source == "store" else [])
    key, ins, skip = _staged(ws, "train-seg", ["segmentation", "pools"], inputs, [out], force, [p, trial])
    if skip:
        return _summary("train-seg", skipped=True, checkpoint=str(out), p=p, trial=trial)
    cfg = _seg_config(ws, p, trial)
    pools = ws.pools(trial)
    ck = train_segmentation(pools, cfg, ws.taxonomy, MetricsLog(ws.log_path(f"seg_p{p:g}_t{trial}")))
    ck.save(out)
    _record(ws, "train-seg", key, ins, [out], ["segmentation", "pools"])
    return _summary("train-seg", checkpoint=str(out), p=p, trial=trial, draws=ck.metadata["draw_counts"])


def stage_evaluate(ws: Workspace, checkpoint, name: str, force=False) -> dict:
    out = ws.report_path(name)
    key, ins, skip = _staged(ws, "evaluate", ["evaluation"], [ws.manifest, Path(checkpoint)], [out], force, name)
    if skip:
        rep = EvaluationReport.load(out)
        return _summary("evaluate", skipped=True, report=str(out), miou=rep.miou)
    e = ws.cfg.evaluation
    rep = evaluate(checkpoint, ws.split("test"), e.cutoff, ws.taxonomy, e.ci_level, e.resamples)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    _record(ws, "evaluate", key, ins, [out], ["evaluation"])
    return _summary("evaluate", report=str(out), miou=rep.miou, per_class=rep.per_class)


def stage_distill(ws: Workspace, force=False) -> dict:
    teacher = ws.seg_ckpt(1.0, 0)
    out = ws.student_ckpt
    key, ins, skip = _staged(ws, "distill", ["distillation"], [ws.manifest, teacher], [out], force)
    if skip:
        return _summary("distill", skipped=True, checkpoint=str(out))
    if not teacher.exists():
        raise ValidationError(f"teacher checkpoint {teacher} missing; run train-seg --p 1 first")
    unlabeled = [s for s in ws.samples() if s.split != "test"]
    dc = ws.cfg.distillation
    tck = ModelCheckpoint.load(teacher)
    soft = teacher_soft_labels(tck, [s.image for s in unlabeled], dc.temperature)
    write_soft_store(ws.root / "distill" / "soft", [s.id for s in unlabeled], soft, tck.digest(), dc.temperature)
    ck = train_student(tck, unlabeled, dc, MetricsLog(ws.log_path("distill")), soft_labels=soft)
    ck.save(out)
    _record(ws, "distill", key, ins, [out], ["distillation"])
    return _summary("distill", checkpoint=str(out), n_unlabeled=ck.metadata["n_unlabeled"])


# ---------------------------------------------------------------- p-sweep

def run_p_sweep(ws: Workspace, p_values: Sequence[float] | None = None, n_trials: int | None = None,
                force: bool = False) -> dict:
    """Train and evaluate one model per (p, trial); average IoUs over trials per p."""
    p_values = list(p_values if p_values is not None else ws.cfg.evaluation.p_values)
    n_trials = n_trials or ws.cfg.evaluation.trials
    if n_trials < 1:
        raise ValidationError("n_trials must be >= 1")
    names = list(ws.taxonomy.names)
    cells = []
    for p in p_values:
        for t in range(n_trials):
            stage_train_seg(ws, p, t, force)
            summary = stage_evaluate(ws, ws.seg_ckpt(p, t), f"seg_p{p:g}_t{t}", force)
            rep = EvaluationReport.load(summary["report"])
            cells.append({"p": p, "trial": t, "miou": rep.miou, "per_class": rep.per_class})
    rows = {"Avg. IoU": []}
    for n in names:
        rows[n] = []
    trial_cis = []
    for p in p_values:
        cs = [c for c in cells if c["p"] == p]
        rows["Avg. IoU"].append(float(np.mean([c["miou"] for c in cs])))
        for n in names:
            vals = [c["per_class"][n] for c in cs if c["per_class"][n] is not None]
            rows[n].append(float(np.mean(vals)) if vals else None)
        mious = [c["miou"] for c in cs]
        trial_cis.append(list(trial_ci(mious)) if len(mious) >= 2 else None)
    report = {"p_values": p_values, "n_trials": n_trials, "rows": rows, "trials": cells,
              "trial_ci": trial_cis, "config_hash": ws.cfg.section_hash("segmentation", "pools")}
    path = ws.report_path("p_sweep")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plots = emit_plots([{"name": "mIoU", "x": p_values, "y": rows["Avg. IoU"]}], ws.root / "plots", "p-sweep",
                       title="IoU vs probability of an expert-labelled sample")
    report["report_path"] = str(path)
    report["plots"] = plots
    return report
