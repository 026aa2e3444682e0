import math

import numpy as np
import pytest
import torch

from mixseg.core import ClassTaxonomy, ImageSample, ValidationError, dataset_iou
from mixseg.pseudolabels import (IrnetConfig, ThresholdTable, affinities, boundary_loss, build_pairs,
                                 calibrate_thresholds, displacement_loss_bg, displacement_loss_fg,
                                 generate_pseudolabels, instance_map, irnet_total_loss, load_pseudolabel_store,
                                 neighbor_offsets, pair_labels, pairwise_affinity, propagate_attention,
                                 threshold_cam, train_irnet, transition_matrix, write_pseudolabel_store)
from oracles import central_difference, rel_err

GRID9 = [round(0.1 * k, 1) for k in range(1, 10)]


def _exhaustive_best(heat, gt, grid):
    """Independent grid search using floating IoU and first-maximum selection."""
    scores = []
    for t in grid:
        r = dataset_iou([h > t for h in heat], list(gt))
        scores.append(r.iou or 0.0)
    best = max(scores)
    return grid[scores.index(best)], best


# ---------------------------------------------------------------- thresholds

def test_threshold_cam_strict():
    h = np.array([[0.2, 0.5, 0.9]])
    assert threshold_cam(h, 0.5).tolist() == [[0, 0, 1]]
    assert threshold_cam(h, 1.0).sum() == 0
    assert threshold_cam(h, 0.0).tolist() == [[1, 1, 1]]
    with pytest.raises(ValidationError):
        threshold_cam(h, 1.5)


def test_calibration_band_tie_break():
    gt = np.zeros((1, 6, 6), np.uint8)
    gt[0, 1:4, 2:5] = 1
    # strict ">" puts a background sitting exactly on a grid point inside the band
    heat = np.where(gt, 0.8, 0.2)
    table = calibrate_thresholds([heat], [gt], GRID9)
    assert table.thresholds["0"] == 0.2 == _exhaustive_best([heat[0]], [gt[0]], GRID9)[0]
    assert table.achieved_miou == 1.0
    heat = np.where(gt, 0.8, 0.25)
    table = calibrate_thresholds([heat], [gt], GRID9)
    assert table.thresholds["0"] == 0.3 == _exhaustive_best([heat[0]], [gt[0]], GRID9)[0]


def test_calibration_identity_heatmap_takes_grid_min():
    gt = np.zeros((1, 5, 5), np.uint8)
    gt[0, :2] = 1
    assert calibrate_thresholds([gt.astype(float)], [gt], GRID9).thresholds["0"] == 0.1


def test_calibration_zero_heatmaps():
    gt = np.ones((1, 4, 4), np.uint8)
    t = calibrate_thresholds([np.zeros((1, 4, 4))], [gt], GRID9)
    assert t.thresholds["0"] == 0.1 and t.achieved_miou == 0.0


def test_calibration_flags_empty_class():
    gt = np.zeros((2, 4, 4), np.uint8)
    gt[0, 0, 0] = 1
    t = calibrate_thresholds([np.full((2, 4, 4), 0.5)], [gt], GRID9, ClassTaxonomy(("a", "b")))
    assert t.thresholds["b"] == 0.9 and t.flagged == ["b"]


def test_calibration_matches_exhaustive_on_random(rng):
    for trial in range(5):
        gt = (rng.random((4, 2, 8, 8)) < 0.3).astype(np.uint8)
        heat = np.clip(0.5 * gt + 0.6 * rng.random(gt.shape), 0, 1)
        table = calibrate_thresholds(list(heat), list(gt), GRID9)
        for c in range(2):
            t, _ = _exhaustive_best(heat[:, c], gt[:, c], GRID9)
            assert table.thresholds[str(c)] == t


def test_calibration_fixed_point(rng):
    gt = (rng.random((5, 3, 10, 10)) < 0.3).astype(np.uint8)
    heat = np.clip(0.5 * gt + 0.6 * rng.random(gt.shape), 0, 1)
    first = calibrate_thresholds(list(heat), list(gt))
    masks = [np.stack([threshold_cam(h[c], first.thresholds[str(c)]) for c in range(3)]) for h in heat]
    second = calibrate_thresholds([m.astype(float) for m in masks], [
        np.stack([threshold_cam(h[c], first.thresholds[str(c)]) for c in range(3)]) for h in heat])
    again = calibrate_thresholds(list(heat), list(gt))
    assert again.thresholds == first.thresholds
    assert set(second.thresholds.values()) == {min(second.grid)}


def test_threshold_table_round_trip(tmp_path):
    t = ThresholdTable({"a": 0.3}, [0.1, 0.3], 0.5, {"a": 0.5}, [])
    t.save(tmp_path / "t.json")
    assert ThresholdTable.load(tmp_path / "t.json") == t


# ---------------------------------------------------------------- displacement losses

def test_fg_loss_examples():
    D = torch.zeros(2, 3, 3)
    assert float(displacement_loss_fg(D, [[0, 0, 1, 0]])) == 1.0
    rr, cc = torch.meshgrid(torch.arange(3.0), torch.arange(3.0), indexing="ij")
    neg = -torch.stack([rr, cc])
    assert float(displacement_loss_fg(neg, [[0, 0, 2, 1]])) == 2 * 3
    assert float(displacement_loss_fg(-neg, [[0, 0, 2, 1], [1, 1, 0, 2]])) == 0.0


def test_bg_loss_examples():
    assert float(displacement_loss_bg(torch.zeros(2, 3, 3), [[0, 0, 1, 1]])) == 0.0
    const = torch.ones(2, 3, 3) * torch.tensor([1.5, -2.0])[:, None, None]
    assert float(displacement_loss_bg(const, [[0, 0, 2, 2]])) == 0.0
    D = torch.zeros(2, 2, 2)
    D[:, 1, 1] = torch.tensor([2.0, -1.0])
    assert float(displacement_loss_bg(D, [[0, 0, 1, 1]])) == 3.0


def test_empty_pair_sets_contribute_zero(caplog):
    D = torch.ones(2, 3, 3)
    assert float(displacement_loss_fg(D, np.zeros((0, 4)))) == 0.0
    assert float(displacement_loss_bg(D, np.zeros((0, 4)))) == 0.0
    assert "empty" in caplog.text


# ---------------------------------------------------------------- affinity

def test_affinity_examples():
    B = np.zeros((5, 5))
    assert pairwise_affinity(B, (0, 0), (4, 3)) == 1.0
    B[1, 1] = 0.7
    assert pairwise_affinity(B, (0, 0), (2, 2)) == pytest.approx(0.3)
    assert pairwise_affinity(B, (1, 1), (1, 1)) == pytest.approx(0.3)


def test_affinity_symmetry(rng):
    B = rng.random((12, 12))
    for _ in range(1000):
        i, j = tuple(rng.integers(0, 12, 2)), tuple(rng.integers(0, 12, 2))
        assert pairwise_affinity(B, i, j) == pairwise_affinity(B, j, i)


def test_vectorized_affinities_match_scalar(rng):
    B = rng.random((9, 9))
    lab = rng.integers(-1, 3, (9, 9))
    ps = build_pairs(lab, 3)
    allp = np.concatenate([ps.fg, ps.bg, ps.neg])
    vec = affinities(torch.tensor(B), allp).numpy()
    for row, a in zip(allp[:300], vec[:300]):
        assert a == pairwise_affinity(B, row[1:3], row[3:5])
        assert vec.shape == (len(allp),)


def test_pair_sets_disjoint_within_radius(rng):
    lab = rng.integers(-1, 3, (8, 8))
    ps = build_pairs(lab, 2)
    keys = [set(map(tuple, s[:, 1:].tolist())) for s in (ps.fg, ps.bg, ps.neg)]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])
    for s in (ps.fg, ps.bg, ps.neg):
        d2 = (s[:, 3] - s[:, 1]) ** 2 + (s[:, 4] - s[:, 2]) ** 2
        assert ((d2 > 0) & (d2 <= 4)).all()
    # brute-force count of unordered labelled pairs within radius 2
    pts = [(r, c) for r in range(8) for c in range(8) if lab[r, c] >= 0]
    n = sum(1 for a in range(len(pts)) for b in range(a + 1, len(pts))
            if 0 < (pts[a][0] - pts[b][0]) ** 2 + (pts[a][1] - pts[b][1]) ** 2 <= 4)
    assert sum(ps.sizes()) == n


def test_neighbor_offsets_unordered():
    offs = {tuple(o) for o in neighbor_offsets(3)}
    assert not any((-a, -b) in offs for a, b in offs)
    assert len(offs) == sum(1 for a in range(-3, 4) for b in range(-3, 4) if 0 < a * a + b * b <= 9) // 2


def test_pair_labels_thresholds():
    cams = np.array([[[0.5, 0.1, 0.01]], [[0.2, 0.4, 0.02]]])
    assert pair_labels(cams, 0.3, 0.05).tolist() == [[1, 2, 0]]
    assert pair_labels(cams, 0.45, 0.05).tolist() == [[1, -1, 0]]


# ---------------------------------------------------------------- boundary loss

def test_boundary_loss_examples():
    B = torch.zeros(4, 4)
    # a = 1 is clamped to 1 - eps, so "zero" means within eps
    assert float(boundary_loss(B, [[0, 0, 1, 1]], [[2, 2, 3, 3]], np.zeros((0, 4)))) == pytest.approx(0, abs=2e-6)
    ones = torch.ones(4, 4)
    v = float(boundary_loss(ones, np.zeros((0, 4)), np.zeros((0, 4)), [[0, 0, 1, 1]]))
    assert 0 <= v < 1e-5
    half = torch.full((4, 4), 0.5)
    v = float(boundary_loss(half, [[0, 0, 0, 1]], np.zeros((0, 4)), [[2, 2, 3, 3]]))
    assert v == pytest.approx(1.5 * math.log(2))
    with pytest.raises(ValidationError):
        boundary_loss(B, np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))


def test_boundary_loss_nonnegative(rng):
    for _ in range(20):
        B = torch.tensor(rng.random((6, 6)))
        ps = build_pairs(rng.integers(-1, 3, (6, 6)), 2)
        assert float(boundary_loss(B, ps.fg, ps.bg, ps.neg)) >= 0


def test_total_loss_additivity():
    assert irnet_total_loss((0, 0, 0)) == 0
    assert irnet_total_loss((1, 2, 3)) == 6
    D = torch.zeros(2, 3, 3)
    fg = displacement_loss_fg(D, [[0, 0, 1, 0]])
    half = torch.full((4, 4), 0.5)
    bd = boundary_loss(half, [[0, 0, 0, 1]], np.zeros((0, 4)), [[2, 2, 3, 3]])
    assert float(irnet_total_loss({"fg": fg, "bg": 0.0, "boundary": bd})) == pytest.approx(1 + 1.5 * math.log(2))


# ---------------------------------------------------------------- gradient checks

def _check_grad(loss_fn, x0, rng, n_entries=10):
    x = torch.tensor(x0, requires_grad=True)
    (g,) = torch.autograd.grad(loss_fn(x), x)
    arr = np.array(x0)
    f = lambda a: float(loss_fn(torch.tensor(a)))
    flat_idx = rng.choice(arr.size, size=min(n_entries, arr.size), replace=False)
    for fi in flat_idx:
        idx = np.unravel_index(fi, arr.shape)
        fd = central_difference(f, arr, idx)
        an = float(g[idx])
        assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd)) + 1e-7, (idx, an, fd)


def test_displacement_gradients(rng):
    for _ in range(10):
        D = rng.standard_normal((2, 5, 5))
        lab = rng.integers(-1, 3, (5, 5))
        ps = build_pairs(lab, 2)
        if len(ps.fg):
            _check_grad(lambda t: displacement_loss_fg(t, ps.fg), D, rng)
        if len(ps.bg):
            _check_grad(lambda t: displacement_loss_bg(t, ps.bg), D, rng)


def test_boundary_gradients(rng):
    for _ in range(10):
        B = rng.uniform(0.05, 0.95, (6, 6))
        ps = build_pairs(rng.integers(-1, 3, (6, 6)), 2)
        _check_grad(lambda t: boundary_loss(t, ps.fg, ps.bg, ps.neg), B, rng, n_entries=12)


# ---------------------------------------------------------------- instance map and propagation

def test_instance_map_cases():
    assert instance_map(np.zeros((2, 3, 3))).max() == 8
    rr, cc = np.mgrid[0:4, 0:4]
    to_center = np.stack([1 - rr, 1 - cc]).astype(float)
    assert (instance_map(to_center) == 0).all()
    D = np.zeros((2, 4, 4))
    D[0] = 1 - rr
    D[1] = np.where(cc < 2, 1 - cc, 3 - cc)
    expected = np.where(cc < 2, 0, 1)
    assert np.array_equal(instance_map(D), expected)


def test_transition_row_stochastic(rng):
    for beta in (1.0, 8.0):
        T = transition_matrix(rng.random((7, 9)), 3, beta)
        assert np.abs(np.asarray(T.sum(axis=1)).ravel() - 1).max() < 1e-9


def test_propagation_identities(rng):
    cam = rng.random((5, 5))
    cfg0 = IrnetConfig(propagation_iterations=0)
    assert np.array_equal(propagate_attention(cam, rng.random((5, 5)), cfg0), cam)
    cfg = IrnetConfig(neighbor_radius=2, propagation_iterations=3)
    # boundary 1 everywhere: every path (self included) has a = 0
    out = propagate_attention(cam, np.ones((5, 5)), cfg, normalize=False)
    assert np.allclose(out, cam)
    with pytest.raises(ValidationError):
        propagate_attention(cam, np.ones((5, 5)), IrnetConfig(propagation_iterations=-1))


def test_two_pixel_uniform_propagation():
    cfg = IrnetConfig(neighbor_radius=1, propagation_iterations=1, affinity_exponent=1.0)
    out = propagate_attention(np.array([[1.0, 0.0]]), np.zeros((1, 2)), cfg, normalize=False)
    assert np.allclose(out, [[0.5, 0.5]])


# ---------------------------------------------------------------- training and generation

def _toy_irnet_data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    images, cams = [], []
    for _ in range(n):
        im = 0.1 * rng.random((32, 32))
        cam = np.zeros((1, 32, 32))
        r, c = rng.integers(4, 18, 2)
        im[r:r + 10, c:c + 10] = 0.9
        cam[0, r + 2:r + 8, c + 2:c + 8] = 1.0
        images.append(im)
        cams.append(cam)
    return images, cams


def test_irnet_training_reduces_loss_and_is_deterministic():
    images, cams = _toy_irnet_data()
    cfg = IrnetConfig(neighbor_radius=2, batch_size=3, epochs=4, learning_rate=0.05)
    a = train_irnet(images, cams, cfg)
    b = train_irnet(images, cams, cfg)
    assert a.metadata["final_loss"] <= a.metadata["initial_loss"]
    assert a.to_bytes() == b.to_bytes()


def test_irnet_config_and_data_errors():
    images, cams = _toy_irnet_data(2)
    with pytest.raises(ValidationError):
        train_irnet(images, cams, IrnetConfig(fg_attention_threshold=0.05, bg_attention_threshold=0.3))
    with pytest.raises(ValidationError):
        train_irnet(images, [np.zeros_like(c) for c in cams], IrnetConfig())


def _gen_samples(rng, n=4):
    tax = ClassTaxonomy(("a", "b"))
    out, heat = [], []
    for i in range(n):
        labels = {"a": "pos" if i % 2 == 0 else "neg", "b": "pos" if i < 2 else "unk"}
        out.append(ImageSample(f"x{i}", rng.random((8, 8)), labels))
        heat.append(rng.random((2, 8, 8)))
    out.append(ImageSample("none", rng.random((8, 8)), {"a": "neg", "b": "neg"}))
    heat.append(rng.random((2, 8, 8)))
    return out, heat, tax


def test_cam_threshold_generation_and_store(tmp_path, rng):
    samples, heat, tax = _gen_samples(rng)
    table = ThresholdTable({"a": 0.4, "b": 0.7}, [0.4, 0.7])
    masks, used = generate_pseudolabels("cam-threshold", samples, heat, table, tax)
    assert used is table
    for s, h in zip(samples[:-1], heat):
        if not s.positive(tax).any():
            assert masks[s.id] is None
            continue
        for c, name in enumerate(tax.names):
            want = threshold_cam(h[c], table.thresholds[name]) if s.labels[name] == "pos" else 0
            assert np.array_equal(masks[s.id][c], np.zeros((8, 8)) + want)
    assert masks["none"] is None
    store = write_pseudolabel_store(tmp_path / "store", masks, tax, "cam-threshold", table)
    assert not list((store / "masks").glob("none__*"))
    back = load_pseudolabel_store(store, tax, {s.id: s.shape for s in samples})
    assert back["none"] is None
    for k, m in masks.items():
        if m is not None:
            assert np.array_equal(back[k], m)


def test_irnet_method_needs_checkpoint(rng):
    samples, heat, tax = _gen_samples(rng)
    with pytest.raises(ValidationError):
        generate_pseudolabels("irnet", samples, heat, ThresholdTable({"a": 0.4, "b": 0.7}, [0.4]), tax)


def test_irnet_generation_runs():
    images, cams = _toy_irnet_data(4)
    cfg = IrnetConfig(neighbor_radius=2, batch_size=2, epochs=1, propagation_iterations=2)
    ck = train_irnet(images, cams, cfg)
    tax = ClassTaxonomy(("sq",))
    samples = [ImageSample(f"i{k}", im, {"sq": "pos"}, expert_masks=(c > 0).astype(np.uint8))
               for k, (im, c) in enumerate(zip(images, cams))]
    table = ThresholdTable({"sq": 0.5}, [0.3, 0.5, 0.7])
    masks, used = generate_pseudolabels("irnet", samples, cams, table, tax, irnet_ckpt=ck, irnet_config=cfg,
                                        calibration=(samples[:2], cams[:2]))
    assert used.grid == [0.3, 0.5, 0.7]
    assert all(m.shape == (1, 32, 32) and set(np.unique(m)) <= {0, 1} for m in masks.values())
