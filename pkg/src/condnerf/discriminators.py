"""Patch discriminator and the auxiliary class/style classifier."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .nn import Conv2d, Linear, Module

log = logging.getLogger(__name__)


@contextlib.contextmanager
def frozen(*modules):
    """Treat the modules' parameters as constants inside the block."""
    params = [p for m in modules if m is not None for p in m.parameters()]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


@dataclass(frozen=True)
class PatchDiscriminatorConfig:
    patch_size: int = 32
    widths: tuple = (64, 128, 256, 512)

    def __post_init__(self):
        if self.patch_size % (2 ** len(self.widths)):
            raise ContractError("patch size must be divisible by 2**len(widths)")


class PatchDiscriminator(Module):
    """Stride-2 conv stack (spectral + instance normalized, ReLU) -> one logit per patch."""

    def __init__(self, config, rng):
        self.config = config
        self.convs = []
        c_in = 3
        for w in config.widths:
            self.convs.append(Conv2d(c_in, w, 4, rng, stride=2, padding=1, spectral_norm=True))
            c_in = w
        side = config.patch_size // 2 ** len(config.widths)
        self.head = Linear(side * side * c_in, 1, rng, scale=np.sqrt(1.0 / (side * side * c_in)))

    def power_iterate(self, iterations=1):
        for conv in self.convs:
            conv.spectral.power_iterate(conv.weight, iterations)

    def __call__(self, patch):
        patch = ad.as_tensor(patch)
        K = self.config.patch_size
        if patch.ndim != 4 or patch.shape[1:] != (K, K, 3):
            raise ContractError(f"discriminator expects (B, {K}, {K}, 3) patches, got {patch.shape}")
        h = patch * 2.0 - 1.0
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i > 0 and h.shape[1] * h.shape[2] > 1:
                h = ad.instance_norm(h)
            h = ad.relu(h)
        B = patch.shape[0]
        return ad.reshape(self.head(ad.reshape(h, (B, -1))), (B,))


@dataclass(frozen=True)
class ClassifierConfig:
    n_classes: int = 4
    n_styles: int = 4
    resolution: int = 64
    widths: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        if self.resolution % (2 ** len(self.widths)):
            raise ContractError("classifier resolution must be divisible by 2**blocks")


class AuxClassifier(Module):
    """VGG-style blocks (conv3x3, ReLU, conv3x3, ReLU, maxpool), global pooling, class and style heads."""

    def __init__(self, config, rng):
        self.config = config
        self.blocks = []
        c_in = 3
        for w in config.widths:
            self.blocks.append(Conv2d(c_in, w, 3, rng, padding=1))
            self.blocks.append(Conv2d(w, w, 3, rng, padding=1))
            c_in = w
        self.class_head = Linear(c_in, config.n_classes, rng, scale=0.01)
        self.style_head = Linear(c_in, config.n_styles, rng, scale=0.01)
        self.trained = False

    @property
    def feature_dim(self):
        return self.config.widths[-1]

    def features(self, images):
        """Penultimate activations (B, feature_dim) for (B, res, res, 3) images in [0, 1]."""
        images = ad.as_tensor(images)
        r = self.config.resolution
        if images.ndim != 4 or images.shape[1:] != (r, r, 3):
            raise ContractError(f"classifier expects (B, {r}, {r}, 3) input, got {images.shape}")
        h = images * 2.0 - 1.0
        for k in range(0, len(self.blocks), 2):
            h = ad.relu(self.blocks[k](h))
            h = ad.relu(self.blocks[k + 1](h))
            h = ad.max_pool2d(h)
        return ad.mean(h, axis=(1, 2))

    def __call__(self, images):
        f = self.features(images)
        return self.class_head(f), self.style_head(f)

    def prepare(self, images):
        """Resize (B, H, W, 3) images or patches to the classifier resolution."""
        r = self.config.resolution
        return ad.resize_bilinear(images, r, r)


def check_cells(class_ids, style_ids, n_classes, n_styles, minimum=2):
    counts = np.zeros((n_classes, n_styles), dtype=int)
    np.add.at(counts, (np.asarray(class_ids), np.asarray(style_ids)), 1)
    for i in range(n_classes):
        for j in range(n_styles):
            if counts[i, j] < minimum:
                raise ContractError(f"cell (class={i}, style={j}) has {counts[i, j]} examples, need >= {minimum}")


def accuracy(classifier, images, class_ids, style_ids, batch_size=64):
    """Class and style accuracy on already-resized images."""
    hits_c = hits_s = 0
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            lc, ls = classifier(images[s : s + batch_size])
            hits_c += int((lc.values.argmax(1) == class_ids[s : s + batch_size]).sum())
            hits_s += int((ls.values.argmax(1) == style_ids[s : s + batch_size]).sum())
    n = max(len(images), 1)
    return hits_c / n, hits_s / n


def pretrain_classifier(
    classifier, images, class_ids, style_ids, steps, rng, batch_size=16, learning_rate=1e-3,
    min_per_cell=2, eval_every=0, eval_set=None, callback=None,
):
    """Fit both heads with summed softmax cross-entropy.

    Args:
        images: (n, H, W, 3) floats in [0, 1]; resized to the classifier resolution.
        eval_every / eval_set: optionally record held-out accuracy every k steps
            on ``(images, class_ids, style_ids)``.

    Returns:
        History dict with per-step ``loss`` and, when evaluating, ``accuracy`` rows
        of (step, class_acc, style_acc).
    """
    cfg = classifier.config
    class_ids = np.asarray(class_ids, dtype=np.int64)
    style_ids = np.asarray(style_ids, dtype=np.int64)
    if len(images) == 0:
        raise ContractError("cannot pretrain on an empty dataset")
    check_cells(class_ids, style_ids, cfg.n_classes, cfg.n_styles, min_per_cell)
    with ad.no_grad():
        data = np.concatenate(
            [classifier.prepare(images[s : s + 256]).values for s in range(0, len(images), 256)]
        )
    if eval_set is not None:
        with ad.no_grad():
            ev_images = classifier.prepare(eval_set[0]).values
        ev_c, ev_s = np.asarray(eval_set[1]), np.asarray(eval_set[2])
    params = classifier.parameters()
    state = ad.RmsPropState(learning_rate)
    history = {"loss": [], "accuracy": []}
    for step in range(steps):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        lc, ls = classifier(data[idx])
        loss = ad.softmax_cross_entropy(lc, class_ids[idx]) + ad.softmax_cross_entropy(ls, style_ids[idx])
        ad.backward(loss)
        ad.rmsprop_step(params, state)
        history["loss"].append(float(loss.values))
        if eval_every and eval_set is not None and (step + 1) % eval_every == 0:
            acc = accuracy(classifier, ev_images, ev_c, ev_s)
            history["accuracy"].append((step + 1, *acc))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.values)
        if callback is not None:
            callback(step, float(loss.values))
    classifier.trained = True
    return history
