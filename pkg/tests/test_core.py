import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mixseg.core import (CHEST_XRAY_TAXONOMY, UNDEFINED, ClassTaxonomy, IoUResult, ValidationError, dataset_iou, iou,
                         load_manifest, miou, read_mask, write_mask)
from mixseg.synthdata import SynthConfig, generate_dataset
from oracles import naive_iou

masks8 = arrays(np.uint8, (8, 8), elements=st.integers(0, 1))


def test_default_taxonomy_order():
    assert CHEST_XRAY_TAXONOMY.names == (
        "Airspace Opacity", "Atelectasis", "Cardiomegaly", "Consolidation", "Edema",
        "Enlarged Cardiomediastinum", "Lung Lesion", "Pleural Effusion", "Pneumothorax", "Support Devices")
    assert CHEST_XRAY_TAXONOMY.count == 10


@pytest.mark.parametrize("names", [(), ("a", "a"), ("a", "")])
def test_taxonomy_rejects_bad_names(names):
    with pytest.raises(ValidationError):
        ClassTaxonomy(names)


def test_iou_identity_and_empty():
    a = np.zeros((4, 4), np.uint8)
    a[1:3, 1:3] = 1
    assert iou(a, a).iou == 1.0
    r = iou(np.zeros((3, 3)), np.zeros((3, 3)))
    assert r.iou is UNDEFINED and not r.defined


def test_iou_offset_blocks():
    pred = np.zeros((3, 3), np.uint8)
    gt = np.zeros((3, 3), np.uint8)
    pred[0:2, 0:2] = 1
    gt[1:3, 1:3] = 1
    r = iou(pred, gt)
    assert (r.intersection, r.union) == naive_iou(pred, gt) == (1, 7)
    assert r.iou == pytest.approx(1 / 7)


def test_iou_errors():
    with pytest.raises(ValidationError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        iou(np.full((2, 2), 0.5), np.zeros((2, 2)))


def test_dataset_iou_aggregates_counts():
    a1 = np.zeros((3, 3), np.uint8)
    b1 = np.zeros((3, 3), np.uint8)
    a1[0:2, 0:2] = 1
    b1[1:3, 1:3] = 1
    a2 = np.zeros((3, 3), np.uint8)
    a2[0, :] = 1
    r = dataset_iou([a1, a2], [b1, a2])
    assert (r.intersection, r.union) == (4, 10)
    assert r.iou == pytest.approx(0.4)
    assert dataset_iou([a2, a2], [a2, a2]).iou == 1.0
    assert dataset_iou([np.zeros((2, 2))], [np.zeros((2, 2))]).iou is UNDEFINED
    with pytest.raises(ValidationError):
        dataset_iou([], [])


def test_miou_rules():
    vals = [0.415, 0.324, 0.470, 0.112, 0.258, 0.547, 0.135, 0.269, 0.159, 0.297]
    assert round(miou(vals), 3) == 0.299
    assert miou([IoUResult("a", 3, 3)] * 4) == 1.0
    assert miou([0.2, 0.4, UNDEFINED]) == pytest.approx(0.3)
    with pytest.raises(ValidationError):
        miou([UNDEFINED, UNDEFINED])


@settings(max_examples=200, deadline=None)
@given(masks8, masks8)
def test_iou_properties(a, b):
    r = iou(a, b)
    assert (r.intersection, r.union) == naive_iou(a, b)
    s = iou(b, a)
    assert (s.intersection, s.union) == (r.intersection, r.union)
    if r.defined:
        assert 0 <= r.iou <= 1
    if a.any():
        assert iou(a, a).iou == 1
    d = dataset_iou([a], [b])
    assert (d.intersection, d.union) == (r.intersection, r.union)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(1, 12))
def test_miou_of_constant(v, C):
    assert miou([v] * C) == pytest.approx(v)


def test_mask_png_round_trip(tmp_path):
    m = (np.arange(36).reshape(6, 6) % 3 == 0).astype(np.uint8)
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


def test_mask_loader_rejects_grey_values(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((4, 4), 128, np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(ValidationError):
        read_mask(tmp_path / "bad.png")


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert load_manifest(tmp_path / "manifest.jsonl") == []


def _manifest_copy(src, dst, edit):
    recs = [json.loads(l) for l in src.read_text().splitlines() if l.strip()]
    edit(recs)
    dst.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return dst


def test_manifest_errors_name_record(small_dataset, tmp_path):
    manifest, _ = small_dataset
    root = manifest.parent

    def missing_mask(recs):
        recs[2]["expert_masks"]["ellipse"] = "masks/does_not_exist.png"

    bad = _manifest_copy(manifest, root / "bad_missing.jsonl", missing_mask)
    with pytest.raises(ValidationError, match=json.loads(manifest.read_text().splitlines()[2])["id"]):
        load_manifest(bad)

    def dup(recs):
        recs[1]["id"] = recs[0]["id"]

    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(_manifest_copy(manifest, root / "bad_dup.jsonl", dup))

    def unknown(recs):
        recs[0]["labels"]["hexagon"] = "pos"

    with pytest.raises(ValidationError, match="hexagon"):
        load_manifest(_manifest_copy(manifest, root / "bad_class.jsonl", unknown))


def test_manifest_shape_mismatch(small_dataset, tmp_path):
    manifest, samples = small_dataset
    root = manifest.parent
    write_mask(root / "masks" / "tiny.png", np.zeros((5, 5), np.uint8))

    def edit(recs):
        recs[0]["expert_masks"]["ring"] = "masks/tiny.png"

    with pytest.raises(ValidationError, match=samples[0].id):
        load_manifest(_manifest_copy(manifest, root / "bad_shape.jsonl", edit))


def test_generated_manifest_round_trip(tmp_path):
    cfg = SynthConfig(n_images=12, image_size=(24, 24), seed=5)
    manifest = generate_dataset(cfg, tmp_path)
    samples = load_manifest(manifest)
    assert len(samples) == 12
    shapes = json.loads((tmp_path / "shapes.json").read_text())["shapes"]
    from mixseg.synthdata import rasterize

    for s in samples:
        for ci, name in enumerate(cfg.classes):
            expected = rasterize(shapes[s.id][name], 24, 24) if name in shapes[s.id] else np.zeros((24, 24))
            assert np.array_equal(s.expert_masks[ci], expected)
