import numpy as np
import pytest
import torch

from mixseg.checkpoint import MetricsLog, ModelCheckpoint
from mixseg.classifier import ClassifierConfig, train_classifier
from mixseg.core import ClassTaxonomy, ImageSample, ValidationError
from mixseg.nets import ClassifierNet, state_arrays
from mixseg.segmentation import (SegConfig, SupervisionPools, dice_loss, export_encoder, init_encoder,
                                 mixed_sampler, predict_logits, predict_masks, train_segmentation)

TAX = ClassTaxonomy(("ellipse", "rectangle", "ring", "blob"))


class CountingSample:
    """Test double that counts reads of its mask fields."""

    def __init__(self, sample):
        self._s = sample
        self.reads = {"expert": 0, "pseudo": 0}

    @property
    def image(self):
        return self._s.image

    @property
    def id(self):
        return self._s.id

    @property
    def expert_masks(self):
        self.reads["expert"] += 1
        return self._s.expert_masks

    @property
    def pseudo_masks(self):
        self.reads["pseudo"] += 1
        return self._s.pseudo_masks


def _pools(samples, n_expert=6):
    train = [s for s in samples if s.split != "test"]
    return SupervisionPools(train[:n_expert], train[n_expert:])


# ---------------------------------------------------------------- sampler

def test_sampler_degenerate_pools():
    pools = SupervisionPools(["e1", "e2"], ["w1", "w2", "w3"])
    s0 = mixed_sampler(pools, 0.0, 1)
    assert all(next(s0)[0] == "pseudo" for _ in range(500))
    s1 = mixed_sampler(pools, 1.0, 1)
    assert all(next(s1)[0] == "expert" for _ in range(500))


def test_sampler_fraction_and_reproducibility():
    pools = SupervisionPools(list(range(5)), list(range(100, 130)))
    draws = [next(s) for s in [mixed_sampler(pools, 0.9, 7)] for _ in range(10_000)]
    frac = np.mean([k == "expert" for k, _ in draws])
    assert 0.88 <= frac <= 0.92
    assert abs(frac - 0.9) <= 4 * np.sqrt(0.9 * 0.1 / 10_000)
    again = mixed_sampler(pools, 0.9, 7)
    assert [next(again) for _ in range(10_000)] == draws


def test_sampler_uniform_within_pool():
    pools = SupervisionPools([0, 1, 2, 3], [9])
    s = mixed_sampler(pools, 1.0, 3)
    counts = np.bincount([next(s)[1] for _ in range(8000)], minlength=4)
    assert (np.abs(counts - 2000) < 4 * np.sqrt(8000 * 0.25 * 0.75)).all()


def test_sampler_pool_errors():
    with pytest.raises(ValidationError):
        next(mixed_sampler(SupervisionPools([], [1]), 0.5, 0))
    with pytest.raises(ValidationError):
        next(mixed_sampler(SupervisionPools([1], []), 0.5, 0))
    with pytest.raises(ValidationError):
        next(mixed_sampler(SupervisionPools([1], [1]), 1.3, 0))


# ---------------------------------------------------------------- dice

def test_dice_examples():
    t = (np.random.default_rng(0).random((3, 5, 5)) < 0.5).astype(float)
    assert float(dice_loss(torch.tensor(t), torch.tensor(t))) == 0.0
    ones = torch.ones(1, 2, 2)
    assert float(dice_loss(torch.zeros(1, 2, 2, dtype=torch.float64), ones)) == pytest.approx(0.8)
    assert float(dice_loss(torch.zeros(2, 3, 3), torch.zeros(2, 3, 3))) == 0.0
    with pytest.raises(ValidationError):
        dice_loss(torch.full((1, 2, 2), 1.5), ones)
    with pytest.raises(ValidationError):
        dice_loss(torch.zeros(1, 2, 2), torch.zeros(1, 3, 3))


def test_dice_range(rng):
    for _ in range(20):
        p = torch.tensor(rng.random((2, 4, 4)))
        t = torch.tensor((rng.random((2, 4, 4)) < 0.4).astype(float))
        assert 0 <= float(dice_loss(p, t)) <= 1


def test_dice_gradient(rng):
    for _ in range(10):
        p0 = rng.uniform(0.05, 0.95, (1, 4, 4))
        t = torch.tensor((rng.random((1, 4, 4)) < 0.5).astype(float))
        p = torch.tensor(p0, requires_grad=True)
        (g,) = torch.autograd.grad(dice_loss(p, t), p)
        h = 1e-6
        for idx in np.ndindex(p0.shape):
            up, dn = p0.copy(), p0.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (float(dice_loss(torch.tensor(up), t)) - float(dice_loss(torch.tensor(dn), t))) / (2 * h)
            an = float(g[idx])
            assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd)) + 1e-9


# ---------------------------------------------------------------- encoder init

def test_random_init_deterministic():
    a, pa = init_encoder("small-cnn", "random", seed=4)
    b, _ = init_encoder("small-cnn", "random", seed=4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert pa["encoder_init"] == "random"


def _classifier_ck(arch="small-cnn"):
    torch.manual_seed(0)
    net = ClassifierNet(arch, 4, (16, 16))
    return ModelCheckpoint({"kind": "classifier", "architecture_id": arch, "taxonomy": list(TAX.names),
                            "image_shape": [16, 16]}, state_arrays(net))


def test_classifier_checkpoint_init_copies_encoder(tmp_path):
    ck = _classifier_ck()
    path = ck.save(tmp_path / "cls.ckpt")
    w, prov = init_encoder("small-cnn", "classifier-checkpoint", path)
    for k, v in w.items():
        assert np.array_equal(v, ck.tensors["encoder." + k])
    assert prov["init_hash"] == ck.digest()


def test_init_architecture_mismatch(tmp_path):
    path = _classifier_ck("linear").save(tmp_path / "lin.ckpt")
    with pytest.raises(ValidationError, match="linear.*small-cnn"):
        init_encoder("small-cnn", "classifier-checkpoint", path)


def test_exported_encoder_file_and_corruption(tmp_path):
    path = export_encoder(_classifier_ck(), tmp_path / "enc.ckpt", "moco")
    w, _ = init_encoder("small-cnn", "moco-file", path)
    assert w
    raw = bytearray(path.read_bytes())
    raw[3] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        init_encoder("small-cnn", "moco-file", bad)


def test_seg_config_validation():
    with pytest.raises(ValidationError):
        SegConfig(p_expert=1.3).validate()
    with pytest.raises(ValidationError):
        SegConfig(encoder_init="imagenet-file").validate()
    with pytest.raises(ValidationError):
        SegConfig(init_path="x.ckpt").validate()


# ---------------------------------------------------------------- training

def test_full_supervision_loss_decreases(small_dataset):
    _, samples = small_dataset
    cfg = SegConfig(p_expert=1.0, epochs=10, steps_per_epoch=4, batch_size=4)
    ck = train_segmentation(_pools(samples), cfg, TAX)
    e = ck.metadata["epoch_losses"]
    assert np.mean(np.diff(e) < 0) >= 0.8


def test_training_deterministic_and_logs_draws(small_dataset, tmp_path):
    _, samples = small_dataset
    cfg = SegConfig(p_expert=0.5, epochs=1, steps_per_epoch=3, batch_size=4, seed=2)
    log = MetricsLog(tmp_path / "seg.jsonl")
    a = train_segmentation(_pools(samples), cfg, TAX, log)
    b = train_segmentation(_pools(samples), cfg, TAX)
    assert a.to_bytes() == b.to_bytes()
    assert sum(log.column("expert_draws")) + sum(log.column("pseudo_draws")) == 12
    assert a.metadata["p_expert"] == 0.5 and a.metadata["init"]["encoder_init"] == "random"


def test_draw_fraction_over_many_draws(small_dataset):
    _, samples = small_dataset
    cfg = SegConfig(p_expert=0.5, epochs=1, steps_per_epoch=250, batch_size=8)
    log = MetricsLog()
    train_segmentation(_pools(samples), cfg, TAX, log)
    e, w = sum(log.column("expert_draws")), sum(log.column("pseudo_draws"))
    assert e + w == 2000
    assert 0.45 <= e / 2000 <= 0.55


@pytest.mark.parametrize("p,untouched", [(1.0, "pseudo"), (0.0, "expert")])
def test_untouched_pool_never_read(small_dataset, p, untouched):
    _, samples = small_dataset
    train = [CountingSample(s) for s in samples if s.split != "test"]
    pools = SupervisionPools(train[:5], train[5:])
    train_segmentation(pools, SegConfig(p_expert=p, epochs=1, steps_per_epoch=2, batch_size=4), TAX)
    assert sum(s.reads[untouched] for s in train) == 0
    assert sum(s.reads["expert" if untouched == "pseudo" else "pseudo"] for s in train) > 0


def test_nonfinite_loss_reports_iteration(small_dataset):
    from mixseg.core import TrainingError

    _, samples = small_dataset
    bad = [ImageSample(s.id, s.image * np.nan, s.labels, s.expert_masks) for s in samples[:4]]
    with pytest.raises(TrainingError, match="iteration 0"):
        train_segmentation(SupervisionPools(bad, []), SegConfig(p_expert=1.0, epochs=1, steps_per_epoch=1), TAX)


# ---------------------------------------------------------------- prediction

class ConstLogit(torch.nn.Module):
    def __init__(self, value, C=1):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(float(value)))
        self.C = C

    def forward(self, x):
        return self.w * torch.ones(x.shape[0], self.C, *x.shape[-2:])


def test_predict_masks_cutoffs():
    img = np.zeros((6, 6))
    assert predict_masks(ConstLogit(2.0), img).all()
    assert not predict_masks(ConstLogit(2.0), img, cutoff=1.0).any()
    assert predict_masks(ConstLogit(-30.0), img, cutoff=0.0).all()
    assert not predict_masks(ConstLogit(2.0), img, cutoff=0.9).any()
    with pytest.raises(ValidationError):
        predict_masks(ConstLogit(0.0), np.zeros((2, 3, 3)))


def test_checkpoint_round_trip_predictions(small_dataset, tmp_path):
    _, samples = small_dataset
    ck = train_segmentation(_pools(samples), SegConfig(p_expert=1.0, epochs=1, steps_per_epoch=2), TAX)
    path = ck.save(tmp_path / "seg.ckpt")
    loaded = ModelCheckpoint.load(path)
    assert loaded.to_bytes() == ck.to_bytes()
    probe = [samples[0].image]
    assert np.array_equal(predict_logits(ck, probe), predict_logits(loaded, probe))
