"""Multi-label segmentation under full, weak or mixed supervision."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import MetricsLog, ModelCheckpoint, as_checkpoint, config_hash
from .classifier import images_tensor
from .core import ClassTaxonomy, ImageSample, TrainingError, ValidationError
from .nets import DECODERS, make_encoder, state_arrays

ENCODER_INITS = ("random", "imagenet-file", "moco-file", "classifier-checkpoint")
DICE_EPS = 1.0
SMALL_DATA_LIMIT = 1000


@dataclass
class SegConfig:
    decoder_id: str = "deeplab-lite"
    encoder_id: str = "small-cnn"
    encoder_init: str = "random"
    init_path: str | None = None
    learning_rate: float | None = None
    batch_size: int = 8
    epochs: int = 10
    steps_per_epoch: int | None = None
    p_expert: float = 0.9
    seed: int = 0

    def validate(self) -> "SegConfig":
        if not 0 <= self.p_expert <= 1:
            raise ValidationError(f"p_expert {self.p_expert} outside [0, 1]")
        if self.encoder_init not in ENCODER_INITS:
            raise ValidationError(f"encoder_init must be one of {ENCODER_INITS}")
        if (self.encoder_init != "random") != (self.init_path is not None):
            raise ValidationError("init_path is required exactly when encoder_init is not 'random'")
        if self.decoder_id not in DECODERS:
            raise ValidationError(f"unknown decoder {self.decoder_id!r}; known: {sorted(DECODERS)}")
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValidationError("steps_per_epoch must be >= 1")
        return self


@dataclass
class SupervisionPools:
    expert: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)

    def check(self, p_expert: float) -> "SupervisionPools":
        if p_expert > 0 and not self.expert:
            raise ValidationError(f"p_expert={p_expert} needs a nonempty expert pool")
        if p_expert < 1 and not self.pseudo:
            raise ValidationError(f"p_expert={p_expert} needs a nonempty pseudo-label pool")
        return self

    def __len__(self):
        return len(self.expert) + len(self.pseudo)


def mixed_sampler(pools: SupervisionPools, p_expert: float, rng_seed) -> Iterator[tuple[str, object]]:
    """Endless stream of ``(pool_name, sample)``.

    Each draw independently picks the expert pool with probability
    ``p_expert``, then a uniform member of that pool (with replacement).
    """
    if not 0 <= p_expert <= 1:
        raise ValidationError(f"p_expert {p_expert} outside [0, 1]")
    pools.check(p_expert)
    rng = np.random.default_rng(rng_seed)
    while True:
        if rng.random() < p_expert:
            yield "expert", pools.expert[rng.integers(len(pools.expert))]
        else:
            yield "pseudo", pools.pseudo[rng.integers(len(pools.pseudo))]


def dice_loss(pred_probs, target, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - class-averaged smoothed dice. Accepts (C, H, W) or batched (B, C, H, W)."""
    p = torch.as_tensor(pred_probs)
    t = torch.as_tensor(target).to(p.dtype)
    if p.shape != t.shape:
        raise ValidationError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ")
    if p.dim() == 3:
        p, t = p[None], t[None]
    with torch.no_grad():
        if p.numel() and (p.min() < 0 or p.max() > 1):
            raise ValidationError("dice_loss expects probabilities in [0, 1]")
    inter = (p * t).sum(dim=(2, 3))
    denom = p.sum(dim=(2, 3)) + t.sum(dim=(2, 3))
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


# ---------------------------------------------------------------- encoder init

def export_encoder(checkpoint, path, source: str) -> Path:
    """Write the encoder subtree of any checkpoint as a standalone encoder weight file."""
    ck = as_checkpoint(checkpoint)
    tensors = {k[len("encoder."):]: v for k, v in ck.tensors.items() if k.startswith("encoder.")}
    meta = {"kind": "encoder", "architecture_id": ck.metadata["architecture_id"], "source": source,
            "parent_hash": ck.digest()}
    return ModelCheckpoint(meta, tensors).save(path)


def init_encoder(encoder_id: str, encoder_init: str, init_path=None, seed: int = 0) -> tuple[dict, dict]:
    """Encoder weights plus a provenance record."""
    if encoder_init not in ENCODER_INITS:
        raise ValidationError(f"encoder_init must be one of {ENCODER_INITS}")
    if encoder_init == "random":
        torch.manual_seed(seed)
        enc = make_encoder(encoder_id)
        return state_arrays(enc), {"encoder_init": "random", "seed": seed}
    if init_path is None:
        raise ValidationError(f"encoder_init {encoder_init!r} needs init_path")
    ck = ModelCheckpoint.load(init_path)
    arch = ck.metadata.get("architecture_id")
    if arch != encoder_id:
        raise ValidationError(f"architecture mismatch: init source is {arch!r}, encoder is {encoder_id!r}")
    kind = ck.metadata.get("kind")
    if encoder_init == "classifier-checkpoint" and kind != "classifier":
        raise ValidationError(f"{init_path} is a {kind!r} checkpoint, not a classifier")
    if kind == "encoder":
        weights = dict(ck.tensors)
    else:
        weights = {k[len("encoder."):]: v for k, v in ck.tensors.items() if k.startswith("encoder.")}
    expected = set(make_encoder(encoder_id).state_dict())
    if set(weights) != expected:
        raise ValidationError(f"{init_path}: encoder tensors do not match architecture {encoder_id!r}")
    return weights, {"encoder_init": encoder_init, "init_path": str(init_path), "init_hash": ck.digest()}


def build_segmenter(config: SegConfig, num_classes: int, encoder_weights: dict | None = None) -> nn.Module:
    torch.manual_seed(config.seed)
    model = DECODERS[config.decoder_id](config.encoder_id, num_classes)
    if encoder_weights is not None:
        model.encoder.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in encoder_weights.items()})
    return model


# ---------------------------------------------------------------- training

def _target(kind: str, sample, C: int) -> np.ndarray:
    m = sample.expert_masks if kind == "expert" else sample.pseudo_masks
    if m is None:
        # no pseudo masks stored: an image with no positive finding
        return np.zeros((C,) + tuple(np.shape(sample.image)), np.float32)
    return np.asarray(m, dtype=np.float32)


def segmentation_meta(config: SegConfig, taxonomy: ClassTaxonomy, provenance: dict, **extra) -> dict:
    cfg = asdict(config)
    return {
        "kind": "segmentation",
        "architecture_id": config.encoder_id,
        "decoder_id": config.decoder_id,
        "taxonomy": list(taxonomy.names),
        "taxonomy_hash": taxonomy.digest(),
        "seed": config.seed,
        "p_expert": config.p_expert,
        "init": provenance,
        "config": cfg,
        "config_hash": config_hash(cfg),
        **extra,
    }


def train_segmentation(pools: SupervisionPools, config: SegConfig, taxonomy: ClassTaxonomy,
                       log: MetricsLog | None = None) -> ModelCheckpoint:
    """Adam on class-averaged dice loss over batches from ``mixed_sampler``."""
    config.validate()
    pools.check(config.p_expert)
    log = log or MetricsLog()
    weights, provenance = init_encoder(config.encoder_id, config.encoder_init, config.init_path, config.seed)
    model = build_segmenter(config, taxonomy.count, weights)
    lr = config.learning_rate
    if lr is None:
        lr = 1e-3 if len(pools) < SMALL_DATA_LIMIT else 1e-4
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps = config.steps_per_epoch or -(-len(pools) // config.batch_size)
    stream = mixed_sampler(pools, config.p_expert, config.seed)
    C = taxonomy.count
    counts = {"expert": 0, "pseudo": 0}
    epoch_means = []
    it = 0
    model.train()
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps):
            draws = [next(stream) for _ in range(config.batch_size)]
            x = images_tensor([s.image for _, s in draws])
            y = torch.as_tensor(np.stack([_target(k, s, C) for k, s in draws]))
            n_exp = sum(k == "expert" for k, _ in draws)
            counts["expert"] += n_exp
            counts["pseudo"] += len(draws) - n_exp
            loss = dice_loss(torch.sigmoid(model(x)), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            losses.append(loss.item())
            log.append(iteration=it, epoch=epoch, loss=loss.item(), lr=lr,
                       expert_draws=n_exp, pseudo_draws=len(draws) - n_exp)
        epoch_means.append(float(np.mean(losses)))
    model.eval()
    meta = segmentation_meta(config, taxonomy, provenance, iteration=it, learning_rate=lr,
                             draw_counts=counts, epoch_losses=epoch_means)
    return ModelCheckpoint(meta, state_arrays(model))


# ---------------------------------------------------------------- inference

def _param_dtype(model):
    for p in model.parameters():
        return p.dtype
    return torch.float32


def predict_logits(checkpoint, images) -> np.ndarray:
    """(N, C, H, W) float64 logits; ``checkpoint`` may also be a live module."""
    model = checkpoint.eval() if isinstance(checkpoint, nn.Module) else as_checkpoint(checkpoint).module()
    imgs = [np.asarray(im) for im in images]
    if any(im.ndim != 2 for im in imgs):
        raise ValidationError("images must be 2-D arrays")
    with torch.no_grad():
        z = model(images_tensor(imgs, _param_dtype(model)))
    return z.double().numpy()


def predict_masks(checkpoint, image, cutoff: float = 0.5) -> np.ndarray:
    """Binary (C, H, W) mask set: sigmoid probability strictly above ``cutoff``."""
    if np.asarray(image).ndim != 2:
        raise ValidationError(f"expected a 2-D image, got shape {np.shape(image)}")
    ck = checkpoint if isinstance(checkpoint, nn.Module) else as_checkpoint(checkpoint)
    if isinstance(ck, ModelCheckpoint):
        shape = ck.metadata.get("image_shape")
        if shape is not None and tuple(np.shape(image)) != tuple(shape):
            raise ValidationError(f"image shape {np.shape(image)} does not match checkpoint input {tuple(shape)}")
    z = predict_logits(ck, [image])[0]
    return (1.0 / (1.0 + np.exp(-z)) > cutoff).astype(np.uint8)


def make_oracle_checkpoint(samples: Sequence[ImageSample], taxonomy: ClassTaxonomy) -> ModelCheckpoint:
    """Lookup-table 'model' that returns each sample's expert masks (evaluation stub)."""
    from .nets import image_key

    keys = np.stack([np.frombuffer(image_key(s.image), np.uint8) for s in samples])
    masks = np.stack([np.asarray(s.expert_masks, np.uint8) for s in samples])
    meta = {"kind": "segmentation", "decoder_id": "oracle-lookup", "architecture_id": "none",
            "taxonomy": list(taxonomy.names), "taxonomy_hash": taxonomy.digest()}
    return ModelCheckpoint(meta, {"keys": keys, "masks": masks})
