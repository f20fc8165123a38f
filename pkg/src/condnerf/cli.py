"""Command-line entry point: dataset, pretrain, train, render and eval subcommands.

Exit codes: 0 success, 2 invalid flags or inputs, 3 file errors, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import (
    Checkpoint, config_from_meta, config_to_meta, load_checkpoint, load_module_tensors, module_tensors,
    save_checkpoint,
)
from .dataset import (
    ManifestRow, generate_dataset, load_dataset, write_camera, write_manifest, write_ppm,
)
from .discriminators import AuxClassifier, ClassifierConfig, PatchDiscriminatorConfig, accuracy, pretrain_classifier
from .encoding import EncodingConfig
from .errors import ContractError, NumericError
from .field import ConditionalField, FieldConfig
from .geometry import Intrinsics, Pose, PosePrior
from .metrics import FeatureStats, extract_features, frechet_distance, kid, psnr, ssim
from .renderer import SamplingConfig, render_images
from .trainer import (
    ABLATIONS, TrainConfig, TrainingAborted, ablation_config, build_state, canonical_latents, run_training,
    sample_latents, training_lock,
)

log = logging.getLogger("condnerf")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SWEEPS = ("none", "yaw-turntable", "pitch-sweep", "depth", "shift", "color-interp", "density-interp")
SWEEP_DEFAULTS = {
    "yaw-turntable": [-180.0, -135.0, -90.0, -45.0, 0.0, 45.0, 90.0, 135.0],
    "pitch-sweep": [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0],
    "depth": [3.5, 4.0, 4.5, 5.0],
    "shift": [-1.0, -0.5, 0.0, 0.5, 1.0],
}


class UsageError(Exception):
    """Bad flag combination detected after argument parsing."""


def float_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must be nonempty")
    return values


def float_pair(text):
    values = float_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return tuple(values)


# parser ---------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (every output is a function of it)")
    p.add_argument("--config", type=Path, help="key=value file of flag defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="condnerf", description="Label-conditioned radiance fields on desk-scale data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate a labeled, posed image set")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--classes", type=int, default=4, help="number of shape classes (<= 4)")
    p.add_argument("--styles", type=int, default=4, help="number of color styles (<= 4)")
    p.add_argument("--poses", type=int, default=50, help="poses per (class, style) cell")
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--radius", type=float, default=4.0, help="camera distance")
    p.add_argument("--fov", type=float, default=50.0, help="horizontal field of view in degrees")
    p.add_argument("--scale", type=float, default=1.0, help="object scale in (0, 1]")
    p.add_argument("--no-shading", action="store_true", help="flat colors instead of headlight shading")
    _common(p)

    p = sub.add_parser("pretrain", help="pretrain the auxiliary class/style classifier")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="classifier checkpoint path")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--lr", type=float, default=1e-3, help="RMSprop learning rate")
    p.add_argument("--resolution", type=int, default=64, help="classifier input resolution")
    p.add_argument("--holdout", type=float, default=0.1, help="fraction of images held out for accuracy")
    _common(p)

    p = sub.add_parser("train", help="train the conditional field")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory (field.ckpt, metrics.tsv)")
    p.add_argument("--classifier", type=Path, help="pretrained classifier checkpoint")
    p.add_argument("--mode", choices=("adversarial", "reconstruction"), default="adversarial", help="training mode")
    p.add_argument("--ablation", choices=ABLATIONS, help="disable one conditioning mechanism")
    p.add_argument("--iterations", type=int, default=10000, help="training iterations")
    p.add_argument("--batch", type=int, default=8, help="batch size")
    p.add_argument("--lr-g", type=float, default=5e-4, help="generator learning rate")
    p.add_argument("--lr-d", type=float, default=1e-4, help="discriminator learning rate")
    p.add_argument("--lambda-cls", type=float, default=2.0, help="class loss weight")
    p.add_argument("--lambda-sty", type=float, default=3.0, help="style loss weight")
    p.add_argument("--lambda-r1", type=float, default=10.0, help="R1 penalty weight")
    p.add_argument("--patch", type=int, default=32, help="patch size in pixels")
    p.add_argument("--footprint", type=float_pair, default=(0.125, 1.0), help="patch span range as image fractions, lo,hi")
    p.add_argument("--n-coarse", type=int, default=32, help="stratified samples per ray")
    p.add_argument("--n-fine", type=int, default=32, help="importance samples per ray")
    p.add_argument("--no-hierarchical", action="store_true", help="coarse samples only")
    p.add_argument("--fine-network", action="store_true", help="separate field for the hierarchical pass")
    p.add_argument("--train-classifier", action="store_true", help="keep updating the classifier on real images")
    p.add_argument("--width", type=int, default=128, help="field trunk width")
    p.add_argument("--depth", type=int, default=4, help="field trunk depth")
    p.add_argument("--latent-dim", type=int, default=128, help="shape and appearance code size")
    p.add_argument("--position-freqs", type=int, default=10, help="position encoding frequencies")
    p.add_argument("--direction-freqs", type=int, default=4, help="direction encoding frequencies")
    p.add_argument("--disc-widths", type=float_list, default=[64, 128, 256, 512], help="discriminator channel widths")
    _common(p)

    p = sub.add_parser("render", help="render a label/pose sweep from a field checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True, help="field checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--class", dest="class_id", type=int, default=0, help="class label")
    p.add_argument("--style", dest="style_id", type=int, default=0, help="style label")
    p.add_argument("--sweep", choices=SWEEPS, default="none", help="what to vary across frames")
    p.add_argument("--values", type=float_list, help="sweep values (degrees, radii or shifts)")
    p.add_argument("--from", dest="from_id", type=int, help="first label of an interpolation")
    p.add_argument("--to", dest="to_id", type=int, help="second label of an interpolation")
    p.add_argument("--lambdas", type=float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0], help="interpolation coefficients")
    p.add_argument("--size", type=int, default=64, help="output resolution")
    p.add_argument("--theta", type=float, default=30.0, help="yaw in degrees")
    p.add_argument("--phi", type=float, default=20.0, help="pitch in degrees")
    p.add_argument("--radius", type=float, default=4.0, help="camera distance")
    p.add_argument("--shift", type=float, default=0.0, help="lateral shift")
    p.add_argument("--fov", type=float, default=50.0, help="horizontal field of view in degrees")
    _common(p)

    p = sub.add_parser("eval", help="compare a generated image set with a real one")
    p.add_argument("--real", type=Path, required=True, help="real dataset directory")
    p.add_argument("--generated", type=Path, required=True, help="generated dataset directory")
    p.add_argument("--classifier", type=Path, help="classifier checkpoint (needed for FID/KID)")
    p.add_argument("--out", type=Path, help="also write the report here")
    _common(p)
    return parser


LIST_FLAGS = ("--values", "--lambdas", "--footprint", "--disc-widths")


def _attach_list_values(argv):
    """Rewrite ``--values -1,0,1`` as ``--values=-1,0,1``.

    argparse would otherwise read a list that starts with a minus sign as a flag.
    """
    out = []
    it = iter(argv)
    for token in it:
        if token in LIST_FLAGS:
            value = next(it, None)
            out.append(token if value is None else f"{token}={value}")
        else:
            out.append(token)
    return out


def _config_defaults(parser, argv):
    """Parse ``argv`` after installing values from ``--config`` as subcommand defaults."""
    argv = _attach_list_values(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for lineno, line in enumerate(known.config.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        dest = key.strip().lstrip("-").replace("-", "_")
        dest = {"class": "class_id", "style": "style_id", "from": "from_id", "to": "to_id"}.get(dest, dest)
        if not sep or dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{known.config}:{lineno}: unknown setting {key.strip()!r}")
        action = actions[dest]
        value = value.strip()
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = value.lower() in ("1", "true", "yes", "on")
            continue
        try:
            converted = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{known.config}:{lineno}: {exc}") from None
        if action.choices and converted not in action.choices:
            raise UsageError(f"{known.config}:{lineno}: {value!r} not one of {list(action.choices)}")
        defaults[dest] = converted
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


# checkpoints ------------------------------------------------------------------


def classifier_checkpoint(classifier, seed, steps):
    meta = OrderedDict(kind="classifier", seed=str(seed), iteration=str(steps))
    meta.update(config_to_meta("classifier", classifier.config))
    return Checkpoint(meta, module_tensors("classifier", classifier))


def load_classifier(path):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "classifier":
        raise ContractError(f"{path} is not a classifier checkpoint")
    clf = AuxClassifier(config_from_meta(ClassifierConfig, "classifier", ckpt.meta), np.random.default_rng(0))
    load_module_tensors("classifier", clf, ckpt.tensors)
    clf.trained = True
    return clf


def field_checkpoint(state, seed):
    cfg = state.config
    meta = OrderedDict(kind="field", mode=cfg.mode, seed=str(seed), iteration=str(state.iteration))
    meta.update(config_to_meta("field", cfg.field))
    meta.update(config_to_meta("sampling", cfg.sampling))
    meta.update(config_to_meta("prior", state.prior))
    tensors = module_tensors("field", state.field)
    if state.fine_field is not None:
        tensors.update(module_tensors("fine", state.fine_field))
    return Checkpoint(meta, tensors)


def load_field(path):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "field":
        raise ContractError(f"{path} is not a field checkpoint")
    fcfg = config_from_meta(FieldConfig, "field", ckpt.meta)
    field = ConditionalField(fcfg, np.random.default_rng(0))
    load_module_tensors("field", field, ckpt.tensors)
    fine = None
    if any(k.startswith("fine.") for k in ckpt.tensors):
        fine = ConditionalField(fcfg, np.random.default_rng(0))
        load_module_tensors("fine", fine, ckpt.tensors)
    return field, fine, config_from_meta(SamplingConfig, "sampling", ckpt.meta), ckpt.meta


# commands ---------------------------------------------------------------------


def cmd_dataset(args):
    ds = generate_dataset(
        args.out, args.classes, args.styles, args.poses, args.size, args.seed, radius=args.radius,
        fov=args.fov, scale=args.scale, shading=not args.no_shading,
    )
    print(f"wrote {len(ds)} images to {args.out}")


def _split(n, fraction, rng):
    order = rng.permutation(n)
    k = int(round(n * fraction))
    return order[k:], order[:k]


def cmd_pretrain(args):
    ds = load_dataset(args.data)
    if not 0 <= args.holdout < 1:
        raise UsageError("--holdout must lie in [0, 1)")
    rng = np.random.default_rng(args.seed)
    train_idx, held_idx = _split(len(ds), args.holdout, rng)
    clf = AuxClassifier(ClassifierConfig(ds.n_classes, ds.n_styles, args.resolution), rng)
    tr = ds.subset(train_idx)
    history = pretrain_classifier(clf, tr.images, tr.class_ids, tr.style_ids, args.steps, rng, args.batch, args.lr)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, classifier_checkpoint(clf, args.seed, args.steps))
    print(f"loss\t{history['loss'][-1]!r}" if history["loss"] else "loss\tnan")
    if len(held_idx):
        held = ds.subset(held_idx)
        with ad.no_grad():
            images = clf.prepare(held.images).values
        acc_c, acc_s = accuracy(clf, images, held.class_ids, held.style_ids)
        print(f"heldout_class_accuracy\t{acc_c!r}\nheldout_style_accuracy\t{acc_s!r}")


def train_config_from_args(args, ds):
    enc = EncodingConfig(args.position_freqs, args.direction_freqs)
    fcfg = FieldConfig(
        ds.n_classes, ds.n_styles, shape_dim=args.latent_dim, appearance_dim=args.latent_dim, width=args.width,
        depth=args.depth, color_width=max(args.width // 2, 1), encoding=enc,
    )
    cfg = TrainConfig(
        mode=args.mode, lambda_cls=args.lambda_cls, lambda_sty=args.lambda_sty, lambda_r1=args.lambda_r1,
        batch_size=args.batch, lr_generator=args.lr_g, lr_discriminator=args.lr_d, iterations=args.iterations,
        seed=args.seed, patch_size=args.patch, footprint=args.footprint, field=fcfg,
        fine_network=args.fine_network, train_classifier=args.train_classifier,
        sampling=SamplingConfig(args.n_coarse, args.n_fine, not args.no_hierarchical),
        discriminator=PatchDiscriminatorConfig(args.patch, tuple(int(w) for w in args.disc_widths)),
    )
    return ablation_config(args.ablation, cfg) if args.ablation else cfg


def cmd_train(args):
    ds = load_dataset(args.data)
    cfg = train_config_from_args(args, ds)
    needs_clf = cfg.lambda_cls > 0 or cfg.lambda_sty > 0
    classifier = load_classifier(args.classifier) if args.classifier else None
    if needs_clf and classifier is None:
        if cfg.mode == "adversarial" or ds.n_classes > 1 or ds.n_styles > 1:
            raise UsageError("--classifier is required unless the classifier losses are disabled")
    prior = _dataset_prior(ds)
    rng = np.random.default_rng(args.seed)
    with training_lock(args.out):
        state = build_state(cfg, ds.intrinsics, classifier, prior, replay_dir=args.out)
        try:
            run_training(state, ds, cfg.iterations, rng, args.out / "metrics.tsv")
        finally:
            save_checkpoint(args.out / "field.ckpt", field_checkpoint(state, args.seed))
    print(f"trained {state.iteration} iterations; checkpoint {args.out / 'field.ckpt'}")


def _dataset_prior(ds):
    def span(values):
        return (float(min(values)), float(max(values)))

    rows = ds.rows
    return PosePrior(
        theta=span([r.theta for r in rows]), phi=span([r.phi for r in rows]),
        radius=span([r.radius for r in rows]), shift=span([r.shift for r in rows]),
    )


def render_frames(args):
    """List of (pose, class_id, style_id, class_mix, style_mix) per output frame."""
    base = dict(radius=args.radius, theta=args.theta, phi=args.phi, shift=args.shift)
    frames = []
    if args.sweep == "none":
        frames.append((Pose(**base), args.class_id, args.style_id, None, None))
    elif args.sweep in SWEEP_DEFAULTS:
        key = {"yaw-turntable": "theta", "pitch-sweep": "phi", "depth": "radius", "shift": "shift"}[args.sweep]
        for v in args.values or SWEEP_DEFAULTS[args.sweep]:
            frames.append((Pose(**{**base, key: v}), args.class_id, args.style_id, None, None))
    else:
        if args.from_id is None or args.to_id is None:
            raise UsageError(f"--sweep {args.sweep} needs --from and --to")
        for lam in args.lambdas:
            if not 0 <= lam <= 1:
                raise UsageError(f"interpolation coefficient {lam} outside [0, 1]")
            if args.sweep == "color-interp":
                frames.append((Pose(**base), args.class_id, args.from_id, None, (args.to_id, lam)))
            else:
                frames.append((Pose(**base), args.from_id, args.style_id, (args.to_id, lam), None))
    return frames


def cmd_render(args):
    if args.sweep not in SWEEP_DEFAULTS and args.values is not None:
        raise UsageError("--values applies only to pose sweeps")
    field, fine, sampling, meta = load_field(args.checkpoint)
    frames = render_frames(args)
    intr = Intrinsics.from_fov(args.size, args.size, args.fov)
    cfg = TrainConfig(mode=meta.get("mode", "adversarial"), field=field.config)
    rng = np.random.default_rng(args.seed)
    if cfg.mode == "reconstruction":
        zs, za = canonical_latents(cfg, 1)
    else:
        zs, za = sample_latents(cfg, 1, rng)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "images").mkdir(exist_ok=True)
    rows = []
    width = max(3, len(str(len(frames) - 1)))
    for k, (pose, cid, sid, cmix, smix) in enumerate(frames):
        frame_rng = np.random.default_rng([args.seed, k])
        img = render_images(field, intr, [pose], zs, za, [cid], [sid], sampling, frame_rng, cmix, smix, fine)[0]
        rel = f"images/{k:0{width}d}.ppm"
        write_ppm(args.out / rel, img)
        rows.append(ManifestRow(rel, cid, sid, pose.theta, pose.phi, pose.radius, pose.shift))
    write_manifest(args.out / "manifest.tsv", rows)
    write_camera(args.out / "camera.txt", intr)
    print(f"wrote {len(rows)} frames to {args.out}")


def evaluate_sets(real, gen, classifier=None):
    """Report rows (metric, value) comparing two labeled image sets."""
    report = [("n_real", len(real)), ("n_generated", len(gen))]
    if classifier is not None:
        fr = extract_features(real.images, classifier)
        fg = extract_features(gen.images, classifier)
        if len(fr) >= 2 and len(fg) >= 2:
            report.append(("fid", frechet_distance(FeatureStats.from_features(fr), FeatureStats.from_features(fg))))
            report.append(("kid", kid(fr, fg)))
        for c, s in sorted(set(gen.label_pairs()) & set(real.label_pairs())):
            mr = (real.class_ids == c) & (real.style_ids == s)
            mg = (gen.class_ids == c) & (gen.style_ids == s)
            report.append((f"n[c{c},s{s}]", int(mg.sum())))
            if mr.sum() >= 2 and mg.sum() >= 2:
                d = frechet_distance(FeatureStats.from_features(fr[mr]), FeatureStats.from_features(fg[mg]))
                report.append((f"fid[c{c},s{s}]", d))
    if len(real) == len(gen) and real.images.shape == gen.images.shape:
        p = [psnr(a, b) for a, b in zip(real.images, gen.images)]
        report.append(("psnr", float(np.mean(p))))
        report.append(("ssim", float(np.mean([ssim(a, b) for a, b in zip(real.images, gen.images)]))))
    return report


def cmd_eval(args):
    real = load_dataset(args.real)
    gen = load_dataset(args.generated)
    classifier = load_classifier(args.classifier) if args.classifier else None
    lines = [f"{k}\t{v!r}" for k, v in evaluate_sets(real, gen, classifier)]
    text = "metric\tvalue\n" + "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")


COMMANDS = {"dataset": cmd_dataset, "pretrain": cmd_pretrain, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = _config_defaults(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"numeric abort: {exc}\nreplay state: {exc.replay_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric abort: non-finite value in {exc.op}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
