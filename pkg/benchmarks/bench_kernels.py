"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--no-step]

Prints the best-of-N wall time per kernel call for each backend, the speedup,
and the time of one small adversarial training step under each backend.
"""

import argparse
import tempfile
import timeit

import numpy as np

from condnerf import kernels


def kernel_cases(rng):
    """(name, zero-argument callable) pairs at training-step sizes."""
    rays, samples = 8 * 32 * 32, 64
    sigma = rng.random((rays, samples)).astype(np.float32) * 3
    rgb = rng.random((rays, samples, 3)).astype(np.float32)
    delta = np.full((rays, samples), 3.0 / samples, np.float32)
    color, t_final, weights = kernels.composite_forward(sigma, rgb, delta)
    g_color = rng.standard_normal(color.shape).astype(np.float32)
    g_t = rng.standard_normal(t_final.shape).astype(np.float32)
    edges = np.sort(rng.random((rays, 33)), axis=1)
    w = rng.random((rays, 32))
    u = rng.random((rays, 32))
    image = rng.random((64, 64, 3))
    px, py = rng.random(32 * 32 * 8) * 63, rng.random(32 * 32 * 8) * 63
    x = rng.standard_normal((8, 32, 32, 64)).astype(np.float32)
    cols = kernels.im2col(x, 4, 4, 2, 1)
    return [
        ("composite_forward", lambda: kernels.composite_forward(sigma, rgb, delta)),
        ("composite_backward", lambda: kernels.composite_backward(sigma, rgb, delta, weights, t_final, g_color, g_t)),
        ("sample_pdf", lambda: kernels.sample_pdf(edges, w, u)),
        ("bilinear_sample", lambda: kernels.bilinear_sample(image, px, py)),
        ("im2col", lambda: kernels.im2col(x, 4, 4, 2, 1)),
        ("col2im", lambda: kernels.col2im(cols, x.shape, 4, 4, 2, 1)),
    ]


def best_time(fn, repeat):
    fn()  # warm up
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def training_step_case(tmp):
    from condnerf.dataset import generate_dataset, sample_batch
    from condnerf.discriminators import AuxClassifier, ClassifierConfig, PatchDiscriminatorConfig
    from condnerf.encoding import EncodingConfig
    from condnerf.field import FieldConfig
    from condnerf.renderer import SamplingConfig
    from condnerf.trainer import TrainConfig, build_state, train_step_adversarial

    ds = generate_dataset(tmp, 2, 2, 4, size=32, seed=0)
    clf = AuxClassifier(ClassifierConfig(2, 2, 32, (16, 32)), np.random.default_rng(0))
    clf.trained = True
    cfg = TrainConfig(
        batch_size=4, patch_size=16,
        field=FieldConfig(2, 2, shape_dim=32, appearance_dim=32, width=64, depth=3, color_width=32,
                          encoding=EncodingConfig(6, 2)),
        sampling=SamplingConfig(16, 16), discriminator=PatchDiscriminatorConfig(16, (32, 64, 128)),
    )
    state = build_state(cfg, ds.intrinsics, clf)
    rng = np.random.default_rng(0)
    return lambda: train_step_adversarial(state, sample_batch(ds, 4, rng), rng)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    parser.add_argument("--no-step", action="store_true", help="skip the end-to-end training step")
    args = parser.parse_args()

    names = sorted(kernels.BACKENDS)
    if "cython" not in names:
        print("compiled extension not built; only the numpy backend is available")
    previous = kernels.backend()
    rows = {}
    try:
        for name in names:
            kernels.use_backend(name)
            for label, fn in kernel_cases(np.random.default_rng(0)):
                rows.setdefault(label, {})[name] = best_time(fn, args.repeat)
            if not args.no_step:
                with tempfile.TemporaryDirectory() as tmp:
                    rows.setdefault("train_step_adversarial", {})[name] = best_time(training_step_case(tmp), args.repeat)
    finally:
        kernels.use_backend(previous)

    header = f"{'kernel':<24}" + "".join(f"{n + ' ms':>14}" for n in names)
    if "cython" in names:
        header += f"{'speedup':>10}"
    print(header)
    for label, times in rows.items():
        line = f"{label:<24}" + "".join(f"{times[n] * 1e3:>14.3f}" for n in names)
        if "cython" in names:
            line += f"{times['numpy'] / times['cython']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
