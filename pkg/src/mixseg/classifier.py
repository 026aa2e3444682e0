"""Multi-label image classifier training and Grad-CAM saliency extraction."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import MetricsLog, ModelCheckpoint, as_checkpoint, config_hash
from .core import ClassTaxonomy, ImageSample, TrainingError, ValidationError, minmax_normalize
from .nets import ClassifierNet, state_arrays


@dataclass
class ClassifierConfig:
    architecture_id: str = "small-cnn"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 3
    checkpoint_every: int = 4800
    seed: int = 0

    def validate(self) -> "ClassifierConfig":
        if not self.learning_rate > 0:
            raise ValidationError("classifier learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("classifier batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("classifier epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")
        return self


def images_tensor(images, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return torch.as_tensor(arr, dtype=dtype)[:, None]


def classifier_loss(model: nn.Module, x: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean multi-label binary cross-entropy on logits."""
    return F.binary_cross_entropy_with_logits(model(x), targets)


def _snapshot(model, meta, iteration):
    return ModelCheckpoint({**meta, "iteration": iteration}, state_arrays(model))


def train_classifier(train_samples: Sequence[ImageSample], config: ClassifierConfig,
                     taxonomy: ClassTaxonomy, log: MetricsLog | None = None,
                     checkpoint_dir=None) -> ModelCheckpoint:
    config.validate()
    if not train_samples:
        raise ValidationError("train_classifier got an empty training set")
    log = log or MetricsLog()
    shape = train_samples[0].shape
    if any(s.shape != shape for s in train_samples):
        raise ValidationError("all classifier training images must share one shape")

    torch.manual_seed(config.seed)
    model = ClassifierNet(config.architecture_id, taxonomy.count, shape)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(config.adam_beta1, config.adam_beta2))
    x_all = images_tensor([s.image for s in train_samples])
    y_all = torch.as_tensor(np.stack([s.positive(taxonomy) for s in train_samples]), dtype=torch.float32)
    rng = np.random.default_rng(config.seed)
    meta = {
        "kind": "classifier",
        "architecture_id": config.architecture_id,
        "taxonomy": list(taxonomy.names),
        "taxonomy_hash": taxonomy.digest(),
        "image_shape": list(shape),
        "seed": config.seed,
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
    }
    it = 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_samples))
        for start in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            loss = classifier_loss(model, x_all[idx], y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            log.append(iteration=it, loss=loss.item(), lr=config.learning_rate, epoch=epoch)
            if checkpoint_dir is not None and it % config.checkpoint_every == 0:
                _snapshot(model, meta, it).save(Path(checkpoint_dir) / f"classifier_iter{it:07d}.ckpt")
    model.eval()
    return _snapshot(model, meta, it)


def _model(obj) -> nn.Module:
    if isinstance(obj, nn.Module):
        return obj.eval()
    return as_checkpoint(obj).module()


def _check_shape(model, image):
    expected = getattr(model, "expected_shape", None)
    if np.asarray(image).ndim != 2:
        raise ValidationError(f"expected a 2-D image, got shape {np.shape(image)}")
    if expected is not None and tuple(np.shape(image)) != tuple(expected):
        raise ValidationError(f"image shape {np.shape(image)} does not match model input {tuple(expected)}")


def predict_probs(checkpoint, image) -> np.ndarray:
    """Per-class sigmoid probabilities for one image."""
    model = _model(checkpoint)
    if isinstance(checkpoint, (ModelCheckpoint, str, Path)):
        ck = as_checkpoint(checkpoint)
        shape = ck.metadata.get("image_shape")
        if shape is not None and tuple(np.shape(image)) != tuple(shape):
            raise ValidationError(f"image shape {np.shape(image)} does not match checkpoint input {tuple(shape)}")
    _check_shape(model, image)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        z = model(images_tensor([image], dtype))[0]
    return torch.sigmoid(z).double().numpy()


@dataclass
class CamContext:
    """Inputs of the Grad-CAM weighting for one image.

    feature_maps: (K, h, w); class_scores: (C,) logits;
    gradients: (C, K, h, w) = d score_c / d feature_maps.
    """

    feature_maps: np.ndarray
    class_scores: np.ndarray
    gradients: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        """Spatially averaged gradients, (C, K); Z = h * w."""
        return self.gradients.mean(axis=(2, 3))

    def cam(self, class_index: int) -> np.ndarray:
        """ReLU of the alpha-weighted feature-map sum at feature resolution."""
        weighted = np.tensordot(self.alphas[class_index], self.feature_maps, axes=1)
        return np.maximum(weighted, 0)


def cam_context(model: nn.Module, image, classes: Sequence[int] | None = None) -> CamContext:
    dtype = next(model.parameters()).dtype
    x = images_tensor([image], dtype)
    with torch.no_grad():
        feats = model.features(x)
    feats = feats.detach().requires_grad_(True)
    scores = model.classify(feats)[0]
    C = scores.shape[0]
    classes = range(C) if classes is None else classes
    grads = np.zeros((C,) + tuple(feats.shape[1:]), dtype=np.float64)
    for c in classes:
        (g,) = torch.autograd.grad(scores[c], feats, retain_graph=True)
        grads[c] = g[0].double().numpy()
    return CamContext(feats[0].detach().double().numpy(), scores.detach().double().numpy(), grads)


def upsample_bilinear(plane: np.ndarray, size) -> np.ndarray:
    """Half-pixel-centre bilinear resize (align_corners=False)."""
    t = torch.as_tensor(np.asarray(plane, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


def grad_cam(checkpoint, image, class_index: int) -> np.ndarray:
    """Grad-CAM heatmap for one class, upsampled to the image and min-max normalized."""
    model = _model(checkpoint)
    _check_shape(model, image)
    C = model.head.out_features if hasattr(model, "head") else None
    if C is not None and not 0 <= class_index < C:
        raise ValidationError(f"class_index {class_index} out of range for {C} classes")
    ctx = cam_context(model, image, [class_index])
    if not 0 <= class_index < ctx.class_scores.shape[0]:
        raise ValidationError(f"class_index {class_index} out of range")
    return _finish(ctx.cam(class_index), np.shape(image))


def _finish(cam: np.ndarray, size) -> np.ndarray:
    if not cam.any():
        return np.zeros(size)
    return minmax_normalize(upsample_bilinear(cam, size))


def generate_heatmaps(checkpoint, samples: Sequence[ImageSample], taxonomy: ClassTaxonomy | None = None) -> list[np.ndarray]:
    """(C, H, W) heatmaps per sample; only positively labelled classes get a CAM.

    Images are processed one at a time, so a sample's heatmaps never depend
    on what else is in ``samples``.
    """
    ck = checkpoint if isinstance(checkpoint, nn.Module) else as_checkpoint(checkpoint)
    model = _model(ck)
    if taxonomy is None:
        taxonomy = ck.taxonomy
    out = []
    for s in samples:
        pos = np.flatnonzero(s.positive(taxonomy))
        planes = np.zeros((taxonomy.count,) + s.shape)
        if len(pos):
            _check_shape(model, s.image)
            ctx = cam_context(model, s.image, pos.tolist())
            for c in pos:
                planes[c] = _finish(ctx.cam(c), s.shape)
        out.append(planes)
    return out
