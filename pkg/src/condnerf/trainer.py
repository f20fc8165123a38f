"""Adversarial and reconstruction training of the conditional field.

One adversarial iteration renders a batch of fake patches once, updates the
patch discriminator on (real, fake) and then updates the generator against
the discriminator and the frozen auxiliary classifier.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .discriminators import PatchDiscriminator, PatchDiscriminatorConfig, frozen
from .errors import ContractError, NumericError
from .field import ConditionalField, FieldConfig
from .geometry import PosePrior, extract_patch, sample_pattern, sample_pose
from .renderer import SamplingConfig, render_patch

log = logging.getLogger(__name__)

MODES = ("adversarial", "reconstruction")
ABLATIONS = ("no_label_input", "no_array_output", "no_classifier")
LOG_HEADER = "iter\tl_adv\tl_cls\tl_sty\tr1\ttotal\tseconds"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "adversarial"
    lambda_cls: float = 2.0
    lambda_sty: float = 3.0
    lambda_r1: float = 10.0
    batch_size: int = 8
    lr_generator: float = 5e-4
    lr_discriminator: float = 1e-4
    iterations: int = 10000
    seed: int = 0
    patch_size: int = 32
    footprint: tuple = (0.125, 1.0)
    r1_epsilon: float = 1e-3
    fine_network: bool = False  # separate field for the hierarchical pass
    train_classifier: bool = False  # keep fitting the classifier on real images during training
    lr_classifier: float = 1e-4
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sampling: SamplingConfig = dc_field(default_factory=SamplingConfig)
    discriminator: PatchDiscriminatorConfig = dc_field(default_factory=PatchDiscriminatorConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if min(self.lambda_cls, self.lambda_sty, self.lambda_r1) < 0:
            raise ContractError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ContractError("batch size must be >= 1 and iterations >= 0")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ContractError("learning rates must be positive")
        if self.mode == "adversarial" and self.discriminator.patch_size != self.patch_size:
            raise ContractError("discriminator patch size must match the rendered patch size")


def ablation_config(which, base=None):
    """Copy of ``base`` with one conditioning mechanism disabled."""
    base = base or TrainConfig()
    if which == "no_label_input":
        return dataclasses.replace(base, field=dataclasses.replace(base.field, label_input=False))
    if which == "no_array_output":
        return dataclasses.replace(base, field=dataclasses.replace(base.field, array_output=False))
    if which == "no_classifier":
        return dataclasses.replace(base, lambda_cls=0.0, lambda_sty=0.0)
    raise ContractError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")


@dataclass
class StepReport:
    iteration: int
    l_adv: float
    l_cls: float
    l_sty: float
    r1: float
    total: float
    loss_d: float
    seconds: float

    def __post_init__(self):
        for name in ("l_adv", "l_cls", "l_sty", "r1", "total", "loss_d", "seconds"):
            if not np.isfinite(getattr(self, name)):
                raise NumericError(name)

    def log_line(self):
        return "\t".join(
            [str(self.iteration)] + [repr(float(v)) for v in (self.l_adv, self.l_cls, self.l_sty, self.r1, self.total, self.seconds)]
        )


class TrainingAborted(NumericError):
    """A step produced a non-finite value; ``replay_path`` holds the state needed to replay it."""

    def __init__(self, op, replay_path):
        super().__init__(op)
        self.replay_path = replay_path

    def __str__(self):
        return f"non-finite value in {self.op}; replay state written to {self.replay_path}"


@dataclass
class TrainState:
    config: TrainConfig
    field: ConditionalField
    intrinsics: object
    prior: PosePrior
    classifier: object = None
    discriminator: PatchDiscriminator = None
    opt_g: ad.RmsPropState = None
    opt_d: ad.RmsPropState = None
    iteration: int = 0
    replay_dir: Path = None
    fine_field: ConditionalField = None
    opt_c: ad.RmsPropState = None

    def generator_parameters(self):
        params = self.field.trainable_parameters()
        if self.fine_field is not None:
            # the fine field shares the coarse field's label embedding
            seen = {id(p) for p in params}
            params = params + [p for p in self.fine_field.trainable_parameters() if id(p) not in seen]
        return params


def build_state(config, intrinsics, classifier=None, prior=None, replay_dir=None):
    """Fresh field (and discriminator in adversarial mode) seeded from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    field = ConditionalField(config.field, rng)
    disc = PatchDiscriminator(config.discriminator, rng) if config.mode == "adversarial" else None
    fine = ConditionalField(config.field, rng) if config.fine_network and config.sampling.hierarchical else None
    if fine is not None:
        fine.embedding = field.embedding
    return TrainState(
        config, field, intrinsics, prior or PosePrior(), classifier, disc,
        ad.RmsPropState(config.lr_generator), ad.RmsPropState(config.lr_discriminator),
        replay_dir=Path(replay_dir) if replay_dir else None, fine_field=fine,
        opt_c=ad.RmsPropState(config.lr_classifier),
    )


# losses ----------------------------------------------------------------------


def _finite(name, x):
    v = x.values if isinstance(x, ad.Tensor) else np.asarray(x)
    if not np.all(np.isfinite(v)):
        raise NumericError(name)


def gan_losses(d_real, d_fake, grad_norm2, lambda_r1=10.0):
    """Nonsaturating generator loss and R1-regularized discriminator loss, averaged over the batch.

    loss_G = softplus(-d_f); loss_D = softplus(d_f) + softplus(-d_r) + lambda_r1 * grad_norm2.
    """
    _finite("d_real", d_real)
    _finite("d_fake", d_fake)
    _finite("grad_norm2", grad_norm2)
    d_real, d_fake, grad_norm2 = ad.as_tensor(d_real), ad.as_tensor(d_fake), ad.as_tensor(grad_norm2)
    if np.any(grad_norm2.values < 0):
        raise ContractError("squared gradient norm must be nonnegative")
    loss_g = ad.mean(ad.softplus(-d_fake))
    loss_d = ad.mean(ad.softplus(d_fake)) + ad.mean(ad.softplus(-d_real))
    if lambda_r1:
        loss_d = loss_d + lambda_r1 * ad.mean(grad_norm2)
    return loss_g, loss_d


def input_gradient(discriminator, real):
    """d(sum of logits)/d(input) with parameters held constant; (B, ...) array."""
    x = ad.Tensor(real, requires_grad=True)
    modules = [discriminator] if hasattr(discriminator, "parameters") else []
    with frozen(*modules):
        ad.backward(ad.sum(discriminator(x)))
    return x.grad if x.grad is not None else np.zeros_like(x.values)


def r1_penalty(discriminator, real):
    """Batch mean of the squared L2 norm of dD/dx on real inputs."""
    _finite("real patch", real)
    g = input_gradient(discriminator, real).astype(np.float64)
    return float(np.mean(np.sum(g.reshape(len(g), -1) ** 2, axis=1)))


def _unit_directions(grad):
    B = len(grad)
    flat = grad.reshape(B, -1).astype(np.float64)
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    return np.where(norm > 0, flat / np.maximum(norm, 1e-30), 0.0).reshape(grad.shape)


def r1_surrogate(discriminator, real, grad, epsilon=1e-3, d_real=None):
    """Differentiable stand-in for the R1 term with respect to the discriminator parameters.

    With u the detached unit input gradient, ((D(x + eps*u) - D(x)) / eps)^2
    approaches ||dD/dx||^2 and its parameter gradient approaches that of the
    exact penalty. Returns per-sample values (B,).
    """
    real = np.asarray(real)
    if d_real is None:
        d_real = discriminator(real)
    shifted = discriminator((real + epsilon * _unit_directions(grad)).astype(real.dtype))
    return ad.square((shifted - d_real) * (1.0 / epsilon))


def discriminator_step(discriminator, optimizer, real, fake, lambda_r1=10.0, epsilon=1e-3):
    """One R1-regularized update; returns (loss_D with the exact penalty, exact R1 value).

    Fake, real and shifted real inputs go through the discriminator as one batch.
    """
    if hasattr(discriminator, "power_iterate"):
        discriminator.power_iterate()
    real = np.asarray(real)
    B = len(real)
    grad = input_gradient(discriminator, real) if lambda_r1 else np.zeros_like(real)
    r1 = float(np.mean(np.sum(grad.reshape(B, -1).astype(np.float64) ** 2, axis=1)))
    stack = [np.asarray(fake, dtype=real.dtype), real]
    if lambda_r1:
        stack.append((real + epsilon * _unit_directions(grad)).astype(real.dtype))
    logits = discriminator(np.concatenate(stack))
    d_fake, d_real = logits[:B], logits[B : 2 * B]
    loss = ad.mean(ad.softplus(d_fake)) + ad.mean(ad.softplus(-d_real))
    reported = float(loss.values) + lambda_r1 * r1
    if lambda_r1:
        slope = (logits[2 * B :] - d_real) * (1.0 / epsilon)
        loss = loss + lambda_r1 * ad.mean(ad.square(slope))
    ad.backward(loss)
    ad.rmsprop_step(discriminator.parameters(), optimizer)
    return reported, r1


def _classifier_losses(state, images, class_ids, style_ids):
    """Cross-entropies of the frozen classifier on rendered patches (zeros when unused)."""
    cfg = state.config
    clf = state.classifier
    if clf is None or (cfg.lambda_cls == 0 and cfg.lambda_sty == 0):
        zero = ad.Tensor(0.0)
        return zero, zero
    if not clf.trained:
        raise ContractError("the auxiliary classifier must be pretrained before training the field")
    lc, ls = clf(clf.prepare(images))
    return ad.softmax_cross_entropy(lc, class_ids), ad.softmax_cross_entropy(ls, style_ids)


def _classifier_step(state, batch):
    clf = state.classifier
    lc, ls = clf(clf.prepare(batch.images))
    loss = ad.softmax_cross_entropy(lc, batch.class_ids) + ad.softmax_cross_entropy(ls, batch.style_ids)
    ad.backward(loss)
    ad.rmsprop_step(clf.parameters(), state.opt_c)


@contextmanager
def _replay_guard(state, rng):
    """Turn numeric failures into TrainingAborted after writing the pre-step rng state."""
    snapshot = rng.bit_generator.state
    try:
        yield
    except NumericError as exc:
        if isinstance(exc, TrainingAborted):
            raise
        path = _write_replay(state, snapshot, str(exc.op))
        raise TrainingAborted(exc.op, path) from exc


def _write_replay(state, rng_state, op):
    directory = state.replay_dir or Path.cwd()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"replay-{state.iteration:06d}.json"

    def plain(o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return str(o)

    payload = {
        "iteration": state.iteration,
        "op": op,
        "config": dataclasses.asdict(state.config),
        "rng_state": rng_state,
    }
    path.write_text(json.dumps(payload, indent=2, default=plain))
    return str(path)


def sample_latents(config, batch, rng):
    zs = rng.standard_normal((batch, config.field.shape_dim))
    za = rng.standard_normal((batch, config.field.appearance_dim))
    return zs.astype(ad.default_dtype()), za.astype(ad.default_dtype())


def canonical_latents(config, batch):
    """Fixed codes used when fitting posed images (no latent inference)."""
    dt = ad.default_dtype()
    return np.ones((batch, config.field.shape_dim), dt), np.ones((batch, config.field.appearance_dim), dt)


def _coarse_distillation(coarse, target):
    """MSE pulling a separate coarse network toward ``target`` (0 without one).

    The coarse pass of a separate fine network only proposes sample locations,
    so it gets no gradient from the main losses. It is fitted to the fine
    render (adversarial mode) or to the real patch (reconstruction mode).
    """
    if coarse is None:
        return 0.0
    diff = coarse - target
    return ad.mean(diff * diff)


def train_step_adversarial(state, batch, rng):
    """One discriminator update followed by one generator update.

    The requested labels are those of the real batch, so they follow the
    dataset's label distribution.
    """
    cfg = state.config
    if state.discriminator is None:
        raise ContractError("adversarial steps need a discriminator")
    if cfg.lambda_cls or cfg.lambda_sty:
        if state.classifier is None or not state.classifier.trained:
            raise ContractError("adversarial training with classifier losses needs a pretrained classifier")
    if len(batch.images) == 0:
        raise ContractError("empty batch")
    start = time.perf_counter()
    with _replay_guard(state, rng):
        B = len(batch.images)
        intr = state.intrinsics
        class_ids, style_ids = batch.class_ids, batch.style_ids
        zs, za = sample_latents(cfg, B, rng)
        poses = [sample_pose(state.prior, rng) for _ in range(B)]
        patterns = [sample_pattern(intr.width, intr.height, cfg.patch_size, cfg.footprint, rng) for _ in range(B)]
        fake, coarse = render_patch(
            state.field, intr, poses, patterns, zs, za, class_ids, style_ids, cfg.sampling, rng,
            fine_field=state.fine_field, return_coarse=True,
        )
        real = np.stack([extract_patch(img, p) for img, p in zip(batch.images, patterns)]).astype(fake.dtype)

        loss_d, r1 = discriminator_step(
            state.discriminator, state.opt_d, real, fake.values, cfg.lambda_r1, cfg.r1_epsilon
        )

        with frozen(state.discriminator, state.classifier):
            d_fake = state.discriminator(fake)
            l_adv = ad.mean(ad.softplus(-d_fake))
            l_cls, l_sty = _classifier_losses(state, fake, class_ids, style_ids)
            total = l_adv + cfg.lambda_cls * l_cls + cfg.lambda_sty * l_sty
            ad.backward(total + _coarse_distillation(coarse, fake.values))
        ad.rmsprop_step(state.generator_parameters(), state.opt_g)
        if cfg.train_classifier and state.classifier is not None:
            _classifier_step(state, batch)
    state.iteration += 1
    return StepReport(
        state.iteration, float(l_adv.values), float(l_cls.values), float(l_sty.values), r1,
        float(total.values), loss_d, time.perf_counter() - start,
    )


def train_step_reconstruction(state, batch, rng):
    """Fit rendered patches at the annotated poses with MSE plus the classifier losses.

    The MSE term is reported in the ``l_adv`` column. No discriminator is used.
    """
    cfg = state.config
    if batch.poses is None or any(p is None for p in batch.poses):
        raise ContractError("reconstruction needs a pose for every image")
    start = time.perf_counter()
    with _replay_guard(state, rng):
        B = len(batch.images)
        intr = state.intrinsics
        zs, za = canonical_latents(cfg, B)
        patterns = [sample_pattern(intr.width, intr.height, cfg.patch_size, cfg.footprint, rng) for _ in range(B)]
        real = np.stack([extract_patch(img, p) for img, p in zip(batch.images, patterns)])
        fake, coarse = render_patch(
            state.field, intr, list(batch.poses), patterns, zs, za, batch.class_ids, batch.style_ids, cfg.sampling, rng,
            fine_field=state.fine_field, return_coarse=True,
        )
        target = real.astype(fake.dtype)
        diff = fake - target
        mse = ad.mean(diff * diff)
        with frozen(state.classifier):
            l_cls, l_sty = _classifier_losses(state, fake, batch.class_ids, batch.style_ids)
            total = mse + cfg.lambda_cls * l_cls + cfg.lambda_sty * l_sty
            ad.backward(total + _coarse_distillation(coarse, target))
        ad.rmsprop_step(state.generator_parameters(), state.opt_g)
    state.iteration += 1
    return StepReport(
        state.iteration, float(mse.values), float(l_cls.values), float(l_sty.values), 0.0,
        float(total.values), 0.0, time.perf_counter() - start,
    )


# run loop -------------------------------------------------------------------


@contextmanager
def training_lock(directory):
    """Exclusive lock file so only one trainer writes to an output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "train.lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise FileExistsError(f"another trainer holds {path}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def run_training(state, dataset, iterations, rng, log_path=None, callback=None, batch_sampler=None):
    """Run ``iterations`` steps, appending one tab-separated line per step to ``log_path``."""
    from .dataset import sample_batch

    step = train_step_adversarial if state.config.mode == "adversarial" else train_step_reconstruction
    sampler = batch_sampler or (lambda: sample_batch(dataset, state.config.batch_size, rng))
    reports = []
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = open(log_path, "a", encoding="utf-8", newline="\n")
        if new:
            log_file.write(LOG_HEADER + "\n")
    try:
        for _ in range(iterations):
            report = step(state, sampler(), rng)
            reports.append(report)
            if log_file is not None:
                log_file.write(report.log_line() + "\n")
                log_file.flush()
            if report.iteration % 500 == 0:
                log.info("iter %d total %.4f loss_d %.4f", report.iteration, report.total, report.loss_d)
            if callback is not None:
                callback(report)
    finally:
        if log_file is not None:
            log_file.close()
    return reports


def read_metrics_log(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ContractError(f"{path}: not a metrics log")
    return np.array([[float(v) for v in line.split("\t")] for line in lines[1:]]).reshape(-1, 7)
