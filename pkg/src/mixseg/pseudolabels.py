"""Heatmap -> pseudo-label conversion: per-class threshold calibration and
IRNet-style refinement (displacement field + class-boundary affinities)."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F

from .checkpoint import MetricsLog, ModelCheckpoint, as_checkpoint, config_hash
from .classifier import images_tensor, upsample_bilinear
from .core import (ClassTaxonomy, ImageSample, TrainingError, ValidationError, miou,
                   minmax_normalize, read_mask, write_mask)
from .nets import IrnetNet, state_arrays

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
LOG_EPS = 1e-6


# ---------------------------------------------------------------- thresholds

@dataclass
class ThresholdTable:
    thresholds: dict[str, float]
    grid: list[float]
    achieved_miou: float | None = None
    per_class_iou: dict[str, float | None] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)

    def vector(self, taxonomy: ClassTaxonomy) -> np.ndarray:
        missing = [n for n in taxonomy.names if n not in self.thresholds]
        if missing:
            raise ValidationError(f"threshold table has no entry for classes {missing}")
        return np.array([self.thresholds[n] for n in taxonomy.names])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        d = json.loads(text)
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        return cls.from_json(Path(path).read_text())


def threshold_cam(heatmap, t: float) -> np.ndarray:
    """Binary mask of pixels strictly above ``t``."""
    if not 0 <= t <= 1:
        raise ValidationError(f"threshold {t} outside [0, 1]")
    return (np.asarray(heatmap) > t).astype(np.uint8)


def _better(a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Exact comparison of inter/union ratios; an empty union counts as 0."""
    (ia, ua), (ib, ub) = a, b
    return ia * max(ub, 1) > ib * max(ua, 1)


def calibrate_thresholds(heatmaps: Sequence[np.ndarray], expert_masks: Sequence[np.ndarray],
                         grid: Sequence[float] = DEFAULT_GRID,
                         taxonomy: ClassTaxonomy | None = None) -> ThresholdTable:
    """Pick, per class, the grid threshold maximizing dataset-level IoU.

    Ties go to the smallest threshold. A class with no positive expert pixel
    anywhere gets the grid maximum and is listed in ``flagged``.
    """
    if len(heatmaps) == 0 or len(heatmaps) != len(expert_masks):
        raise ValidationError("calibration needs >= 1 sample with expert masks, one heatmap set each")
    grid = sorted(float(g) for g in grid)
    if not grid or any(not 0 <= g <= 1 for g in grid):
        raise ValidationError("threshold grid must be nonempty with values in [0, 1]")
    H = np.stack([np.asarray(h, dtype=np.float64) for h in heatmaps])
    M = np.stack([np.asarray(m).astype(bool) for m in expert_masks])
    if H.shape != M.shape:
        raise ValidationError(f"heatmaps {H.shape} and masks {M.shape} differ in shape")
    C = H.shape[1]
    names = taxonomy.names if taxonomy is not None else tuple(str(c) for c in range(C))
    thresholds, ious, flagged = {}, {}, []
    for c, name in enumerate(names):
        gt = M[:, c]
        if not gt.any():
            thresholds[name] = grid[-1]
            ious[name] = None
            flagged.append(name)
            continue
        best_t, best = grid[0], None
        for t in grid:
            pred = H[:, c] > t
            score = (int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt)))
            if best is None or _better(score, best):
                best_t, best = t, score
        thresholds[name] = best_t
        ious[name] = best[0] / best[1] if best[1] else 0.0
    defined = [v for v in ious.values() if v is not None]
    return ThresholdTable(thresholds, grid, miou(defined) if defined else None, ious, flagged)


# ---------------------------------------------------------------- pixel pairs

@dataclass
class PixelPairSets:
    """Neighbouring pixel pairs as integer rows ``(b, r_i, c_i, r_j, c_j)``."""

    fg: np.ndarray
    bg: np.ndarray
    neg: np.ndarray

    def sizes(self):
        return len(self.fg), len(self.bg), len(self.neg)


@lru_cache(maxsize=None)
def neighbor_offsets(radius: int) -> np.ndarray:
    """Unordered neighbour offsets (dr, dc) with 0 < |d| <= radius, one per direction pair."""
    out = []
    for dr in range(0, radius + 1):
        for dc in range(-radius, radius + 1):
            if (dr == 0 and dc <= 0) or dr * dr + dc * dc > radius * radius:
                continue
            out.append((dr, dc))
    return np.array(out, dtype=np.int64)


def pair_labels(cams: np.ndarray, fg_threshold: float, bg_threshold: float) -> np.ndarray:
    """Per-pixel pseudo class: k+1 for foreground class k, 0 background, -1 ignored."""
    cams = np.asarray(cams)
    top = cams.max(axis=0)
    lab = np.full(top.shape, -1, dtype=np.int64)
    lab[top < bg_threshold] = 0
    fg = top > fg_threshold
    lab[fg] = cams.argmax(axis=0)[fg] + 1
    return lab


def build_pairs(labels: np.ndarray, radius: int, batch_index: int = 0) -> PixelPairSets:
    h, w = labels.shape
    fg, bg, neg = [], [], []
    for dr, dc in neighbor_offsets(radius):
        r0, r1 = 0, h - dr
        c0, c1 = max(0, -dc), min(w, w - dc)
        if r1 <= r0 or c1 <= c0:
            continue
        rr, cc = np.mgrid[r0:r1, c0:c1]
        rr, cc = rr.ravel(), cc.ravel()
        li, lj = labels[rr, cc], labels[rr + dr, cc + dc]
        ok = (li >= 0) & (lj >= 0)
        rows = np.stack([np.full(rr.shape, batch_index), rr, cc, rr + dr, cc + dc], 1)
        same = ok & (li == lj)
        fg.append(rows[same & (li > 0)])
        bg.append(rows[same & (li == 0)])
        neg.append(rows[ok & (li != lj)])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros((0, 5), np.int64)
    return PixelPairSets(cat(fg), cat(bg), cat(neg))


def _as_pairs(pairs) -> np.ndarray:
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, np.shape(pairs)[-1] if np.size(pairs) else 4)
    if p.shape[1] == 4:
        p = np.concatenate([np.zeros((len(p), 1), np.int64), p], 1)
    return p


def _batched(t, spatial_dims):
    t = torch.as_tensor(t)
    return t[None] if t.dim() == spatial_dims else t


# ---------------------------------------------------------------- losses

def displacement_loss_fg(D, pairs) -> torch.Tensor:
    """Mean L1 gap between coordinate offsets x_j - x_i and field offsets D(x_j) - D(x_i)."""
    D = _batched(D, 3)
    p = _as_pairs(pairs)
    if len(p) == 0:
        log.warning("empty foreground pair set; displacement_loss_fg contributes 0")
        return D.sum() * 0
    b, ri, ci, rj, cj = (torch.as_tensor(p[:, k]) for k in range(5))
    delta = D[b, :, rj, cj] - D[b, :, ri, ci]
    coord = torch.stack([rj - ri, cj - ci], 1).to(D.dtype)
    return (coord - delta).abs().sum(1).mean()


def displacement_loss_bg(D, pairs) -> torch.Tensor:
    """Mean L1 norm of D(x_j) - D(x_i) over background pairs."""
    D = _batched(D, 3)
    p = _as_pairs(pairs)
    if len(p) == 0:
        log.warning("empty background pair set; displacement_loss_bg contributes 0")
        return D.sum() * 0
    b, ri, ci, rj, cj = (torch.as_tensor(p[:, k]) for k in range(5))
    return (D[b, :, rj, cj] - D[b, :, ri, ci]).abs().sum(1).mean()


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line from (r0, c0) to (r1, c1), both endpoints included."""
    pts = []
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    err = dr + dc
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc


def line_path(i, j) -> list[tuple[int, int]]:
    """Direction-independent rasterized path: always drawn from the lexicographically smaller end."""
    i, j = tuple(int(v) for v in i), tuple(int(v) for v in j)
    a, b = (i, j) if i <= j else (j, i)
    return bresenham(*a, *b)


@lru_cache(maxsize=4096)
def _offset_path(dr: int, dc: int) -> tuple[tuple[int, int], ...]:
    return tuple(bresenham(0, 0, dr, dc))


def pairwise_affinity(B, i, j) -> float:
    """a_ij = 1 - max of the boundary map along the rasterized line between i and j."""
    B = np.asarray(B)
    return float(1.0 - max(B[r, c] for r, c in line_path(i, j)))


def _path_index(p: np.ndarray, h: int, w: int) -> np.ndarray:
    """(N, L) flat pixel indices along each pair's canonical path (padded by repetition)."""
    a, b = p[:, 1:3], p[:, 3:5]
    swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
    start = np.where(swap[:, None], b, a)
    off = np.where(swap[:, None], a - b, b - a)
    uniq, inv = np.unique(off, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    paths = [_offset_path(int(dr), int(dc)) for dr, dc in uniq]
    L = max(len(q) for q in paths)
    table = np.array([list(q) + [q[-1]] * (L - len(q)) for q in paths], dtype=np.int64)  # (U, L, 2)
    pts = start[:, None, :] + table[inv]
    return pts[..., 0] * w + pts[..., 1]


def affinities(B, pairs) -> torch.Tensor:
    """Vectorized a_ij for every pair; differentiable w.r.t. ``B``."""
    B = _batched(B, 2)
    p = _as_pairs(pairs)
    if len(p) == 0:
        return B.new_zeros(0)
    h, w = B.shape[-2:]
    idx = torch.as_tensor(_path_index(p, h, w))
    flat = B.reshape(B.shape[0], -1)[torch.as_tensor(p[:, 0])]
    return 1 - torch.gather(flat, 1, idx).max(dim=1).values


def boundary_loss(B, fg, bg, neg, eps: float = LOG_EPS) -> torch.Tensor:
    """Affinity cross-entropy: same-label pairs pulled to a=1 (fg and bg halves), others to a=0."""
    B = _batched(B, 2)
    sets = [_as_pairs(s) for s in (fg, bg, neg)]
    if all(len(s) == 0 for s in sets):
        raise ValidationError("boundary_loss needs at least one nonempty pair set")
    total = B.sum() * 0
    for k, s in enumerate(sets):
        if len(s) == 0:
            continue
        a = affinities(B, s).clamp(eps, 1 - eps)
        if k < 2:
            total = total - torch.log(a).sum() / (2 * len(s))
        else:
            total = total - torch.log(1 - a).sum() / len(s)
    return total


def irnet_total_loss(parts):
    """Unweighted sum of the foreground, background and boundary terms."""
    if isinstance(parts, dict):
        parts = (parts["fg"], parts["bg"], parts["boundary"])
    fg, bg, bd = parts
    return fg + bg + bd


# ---------------------------------------------------------------- IRNet training

@dataclass
class IrnetConfig:
    architecture_id: str = "small-cnn"
    fg_attention_threshold: float = 0.3
    bg_attention_threshold: float = 0.05
    neighbor_radius: int = 5
    learning_rate: float = 0.1
    lr_decay: float = 0.9
    batch_size: int = 16
    epochs: int = 3
    propagation_iterations: int = 8
    affinity_exponent: float = 8.0
    restrict_to_instances: bool = True
    seed: int = 0

    def validate(self) -> "IrnetConfig":
        if not 0 <= self.bg_attention_threshold < self.fg_attention_threshold <= 1:
            raise ValidationError("need 0 <= bg_attention_threshold < fg_attention_threshold <= 1")
        if self.neighbor_radius < 1:
            raise ValidationError("neighbor_radius must be >= 1")
        if self.propagation_iterations < 0:
            raise ValidationError("propagation_iterations must be >= 0")
        if not self.learning_rate >= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("bad irnet optimizer settings")
        return self


def _feature_cams(cams: np.ndarray, size) -> np.ndarray:
    t = torch.as_tensor(np.asarray(cams, dtype=np.float64))[None]
    return F.adaptive_avg_pool2d(t, tuple(size))[0].numpy()


def _irnet_terms(model, x, pair_sets):
    D, B = model(x)
    fg = displacement_loss_fg(D, pair_sets.fg)
    bg = displacement_loss_bg(D, pair_sets.bg)
    if any(pair_sets.sizes()):
        bd = boundary_loss(B, pair_sets.fg, pair_sets.bg, pair_sets.neg)
    else:
        bd = B.sum() * 0
    return fg, bg, bd


def _merge(sets: list[PixelPairSets]) -> PixelPairSets:
    return PixelPairSets(*(np.concatenate([getattr(s, k) for s in sets]) for k in ("fg", "bg", "neg")))


def irnet_dataset_loss(model, images, pair_sets: list[PixelPairSets]) -> float:
    """Total loss over the whole set, evaluated one image at a time."""
    vals = []
    with torch.no_grad():
        for im, ps in zip(images, pair_sets):
            vals.append(float(irnet_total_loss(_irnet_terms(model, images_tensor([im]), ps))))
    return float(np.mean(vals))


def train_irnet(images: Sequence[np.ndarray], cams: Sequence[np.ndarray], config: IrnetConfig,
                log_: MetricsLog | None = None) -> ModelCheckpoint:
    """SGD with polynomial learning-rate decay on the summed IRNet losses."""
    config.validate()
    if len(images) == 0 or len(images) != len(cams):
        raise ValidationError("train_irnet needs one CAM stack per image")
    log_ = log_ or MetricsLog()
    torch.manual_seed(config.seed)
    model = IrnetNet(config.architecture_id)
    with torch.no_grad():
        feat_size = model(images_tensor(images[:1]))[1].shape[-2:]
    labels = [pair_labels(_feature_cams(c, feat_size), config.fg_attention_threshold,
                          config.bg_attention_threshold) for c in cams]
    if not any((lab > 0).any() for lab in labels):
        raise ValidationError("no training image has any foreground pixel above fg_attention_threshold")
    pair_sets = [build_pairs(lab, config.neighbor_radius) for lab in labels]
    initial = irnet_dataset_loss(model.eval(), images, pair_sets)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(images)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    x_all = images_tensor(images)
    it = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            lr = config.learning_rate * (1 - it / total_steps) ** config.lr_decay
            for g in opt.param_groups:
                g["lr"] = lr
            sets = []
            for b, k in enumerate(idx):
                ps = pair_sets[k]
                sets.append(PixelPairSets(*(np.concatenate([np.full((len(a), 1), b), a[:, 1:]], 1)
                                            for a in (ps.fg, ps.bg, ps.neg))))
            fg, bg, bd = _irnet_terms(model, x_all[torch.as_tensor(idx)], _merge(sets))
            loss = irnet_total_loss((fg, bg, bd))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite IRNet loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            log_.append(iteration=it, loss=loss.item(), fg=fg.item(), bg=bg.item(), boundary=bd.item(), lr=lr)
    model.eval()
    final = irnet_dataset_loss(model, images, pair_sets)
    meta = {
        "kind": "irnet",
        "architecture_id": config.architecture_id,
        "seed": config.seed,
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "iteration": it,
        "initial_loss": initial,
        "final_loss": final,
    }
    return ModelCheckpoint(meta, state_arrays(model))


# ---------------------------------------------------------------- refinement

def instance_map(D) -> np.ndarray:
    """Group pixels whose displaced positions round to the same integer cell.

    Ids are contiguous from 0 in row-major order of first occurrence.
    """
    D = np.asarray(D, dtype=np.float64)
    _, h, w = D.shape
    rr, cc = np.mgrid[0:h, 0:w]
    tr = np.clip(np.rint(rr + D[0]), 0, h - 1).astype(np.int64)
    tc = np.clip(np.rint(cc + D[1]), 0, w - 1).astype(np.int64)
    key = (tr * w + tc).ravel()
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    rank = np.empty(len(first), np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv.reshape(-1)].reshape(h, w)


def transition_matrix(B, radius: int, beta: float) -> sp.csr_matrix:
    """Row-stochastic sparse matrix of a_ij**beta over pixels within ``radius`` (self included).

    Rows whose affinities are all zero become identity rows.
    """
    B = np.asarray(B, dtype=np.float64)
    h, w = B.shape
    n = h * w
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [(1 - B).ravel() ** beta]
    offs = neighbor_offsets(radius)
    pairs = []
    for dr, dc in offs:
        rr, cc = np.mgrid[0:h - dr, max(0, -dc):min(w, w - dc)]
        if rr.size:
            pairs.append(np.stack([np.zeros(rr.size, np.int64), rr.ravel(), cc.ravel(), rr.ravel() + dr, cc.ravel() + dc], 1))
    if pairs:
        p = np.concatenate(pairs)
        a = affinities(torch.as_tensor(B), p).numpy() ** beta
        i = p[:, 1] * w + p[:, 2]
        j = p[:, 3] * w + p[:, 4]
        rows += [i, j]
        cols += [j, i]
        vals += [a, a]
    T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    sums = np.asarray(T.sum(axis=1)).ravel()
    dead = sums <= 0
    if dead.any():
        T = T + sp.csr_matrix((np.ones(dead.sum()), (np.flatnonzero(dead), np.flatnonzero(dead))), shape=(n, n))
        sums[dead] = 1.0
    return sp.diags(1.0 / sums) @ T


def propagate_attention(cam, B, config: IrnetConfig, normalize: bool = True) -> np.ndarray:
    """Apply the transition matrix ``propagation_iterations`` times to the flattened CAM."""
    if config.propagation_iterations < 0:
        raise ValidationError("propagation_iterations must be >= 0")
    cam = np.asarray(cam, dtype=np.float64)
    if config.propagation_iterations == 0:
        return cam.copy()
    T = transition_matrix(B, config.neighbor_radius, config.affinity_exponent)
    v = cam.ravel()
    for _ in range(config.propagation_iterations):
        v = T @ v
    v = v.reshape(cam.shape)
    return minmax_normalize(v) if normalize else v


def irnet_outputs(irnet_ckpt, image) -> tuple[np.ndarray, np.ndarray]:
    model = as_checkpoint(irnet_ckpt).module()
    with torch.no_grad():
        D, B = model(images_tensor([image]))
    return D[0].double().numpy(), B[0].double().numpy()


def refine_heatmaps(irnet_ckpt, image, heatmaps: np.ndarray, config: IrnetConfig) -> np.ndarray:
    """Propagate every nonzero CAM plane through the learned affinities."""
    D, B = irnet_outputs(irnet_ckpt, image)
    size = B.shape
    # the displacement loss trains D(x_j) - D(x_i) toward x_j - x_i, i.e. D points
    # away from the centroid; grouping needs centroid-pointing vectors
    inst = instance_map(-D)
    out = np.zeros_like(np.asarray(heatmaps, dtype=np.float64))
    for c, plane in enumerate(heatmaps):
        if not np.any(plane):
            continue
        small = _feature_cams(plane[None], size)[0]
        ref = propagate_attention(small, B, config, normalize=False)
        if config.restrict_to_instances:
            seeds = small > config.fg_attention_threshold
            if seeds.any():
                ref = np.where(np.isin(inst, np.unique(inst[seeds])), ref, 0.0)
        up = upsample_bilinear(ref, plane.shape)
        out[c] = minmax_normalize(np.maximum(up, 0)) if up.any() else 0.0
    return out


# ---------------------------------------------------------------- generation + store

def generate_pseudolabels(method: str, samples: Sequence[ImageSample], heatmaps: Sequence[np.ndarray],
                          thresholds: ThresholdTable, taxonomy: ClassTaxonomy,
                          irnet_ckpt=None, irnet_config: IrnetConfig | None = None,
                          calibration: tuple[Sequence[ImageSample], Sequence[np.ndarray]] | None = None):
    """Binary pseudo masks per sample (None when the sample has no positive class).

    Returns ``(masks_by_id, thresholds_used)``. The irnet method refines the
    planes first and recalibrates thresholds on refined calibration planes
    when ``calibration`` (expert samples and their heatmaps) is given.
    """
    if method not in ("cam-threshold", "irnet"):
        raise ValidationError(f"unknown pseudo-label method {method!r}")
    if thresholds is None:
        raise ValidationError("generate_pseudolabels needs a threshold table")
    if len(samples) != len(heatmaps):
        raise ValidationError("one heatmap set per sample required")
    if method == "irnet":
        if irnet_ckpt is None:
            raise ValidationError("method 'irnet' needs an IRNet checkpoint")
        ck = as_checkpoint(irnet_ckpt)
        irnet_config = irnet_config or IrnetConfig(**ck.metadata.get("config", {}))
        heatmaps = [refine_heatmaps(ck, s.image, h, irnet_config) for s, h in zip(samples, heatmaps)]
        if calibration is not None:
            cal_samples, cal_maps = calibration
            refined = [refine_heatmaps(ck, s.image, h, irnet_config) for s, h in zip(cal_samples, cal_maps)]
            thresholds = calibrate_thresholds(refined, [s.expert_masks for s in cal_samples],
                                              thresholds.grid, taxonomy)
    t = thresholds.vector(taxonomy)
    out = {}
    for s, h in zip(samples, heatmaps):
        pos = s.positive(taxonomy)
        if not pos.any():
            out[s.id] = None
            continue
        m = np.zeros((taxonomy.count,) + s.shape, np.uint8)
        for c in np.flatnonzero(pos):
            m[c] = threshold_cam(h[c], t[c])
        out[s.id] = m
    return out, thresholds


STORE_MANIFEST = "store.json"


def write_pseudolabel_store(out_dir, masks_by_id: dict, taxonomy: ClassTaxonomy, method: str,
                            thresholds: ThresholdTable, config_digest: str = "",
                            source_hashes: dict | None = None) -> Path:
    """Write PNG masks for positive classes plus a manifest mirroring the dataset one."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for sid in sorted(masks_by_id):
        m = masks_by_id[sid]
        rec = {"id": sid}
        if m is not None:
            rec["pseudo_masks"] = {}
            for c, name in enumerate(taxonomy.names):
                if m[c].any():
                    path = f"masks/{sid}__{c}.png"
                    write_mask(out / path, m[c])
                    rec["pseudo_masks"][name] = path
        records.append(rec)
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "method": method,
        "taxonomy": list(taxonomy.names),
        "thresholds": asdict(thresholds),
        "config_hash": config_digest,
        "source_hashes": source_hashes or {},
    }
    (out / STORE_MANIFEST).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_pseudolabel_store(store_dir, taxonomy: ClassTaxonomy, shapes: dict[str, tuple[int, int]] | None = None) -> dict:
    """id -> (C, H, W) masks, or None for samples without pseudo masks."""
    root = Path(store_dir)
    if not (root / "manifest.jsonl").exists():
        raise ValidationError(f"{root} is not a pseudo-label store")
    out = {}
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        pm = rec.get("pseudo_masks")
        if pm is None:
            out[rec["id"]] = None
            continue
        planes = {taxonomy.index(n): read_mask(root / p) for n, p in pm.items()}
        if shapes and rec["id"] in shapes:
            shape = tuple(shapes[rec["id"]])
        elif planes:
            shape = next(iter(planes.values())).shape
        else:
            raise ValidationError(f"record {rec['id']!r}: cannot infer mask shape")
        m = np.zeros((taxonomy.count,) + shape, np.uint8)
        for c, plane in planes.items():
            if plane.shape != shape:
                raise ValidationError(f"record {rec['id']!r}: pseudo mask shape {plane.shape} != {shape}")
            m[c] = plane
        out[rec["id"]] = m
    return out


def attach_pseudolabels(samples: Sequence[ImageSample], store_dir, taxonomy: ClassTaxonomy) -> list[ImageSample]:
    masks = load_pseudolabel_store(store_dir, taxonomy, {s.id: s.shape for s in samples})
    for s in samples:
        if s.id in masks:
            s.pseudo_masks = masks[s.id]
    return list(samples)
