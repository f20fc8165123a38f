"""Independent reference implementations shared by the test modules."""

import numpy as np

from condnerf import autodiff as ad


def numerical_grad(fn, x, h=1e-4):
    """Central differences of scalar ``fn`` w.r.t. every entry of float64 array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn()
        x[i] = old - h
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_gradients(build, arrays, h=1e-4):
    """Compare autodiff gradients of ``build(*tensors)`` (a scalar tensor) with central differences.

    Returns the worst relative error over all inputs, using the norm-based
    measure ||ga - gn|| / max(||ga|| + ||gn||, tiny) per input.
    """
    worst = 0.0
    with ad.precision(np.float64):
        tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
        out = build(*tensors)
        ad.backward(out)
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.values)

            def f():
                with ad.no_grad():
                    return float(build(*tensors).values)

            numeric = numerical_grad(f, t.values, h)
            denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-10)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def brute_composite(sigma, rgb, delta):
    """Term-by-term discrete volume rendering for a single ray."""
    color = np.zeros(3)
    trans = 1.0
    weights = []
    for s, c, d in zip(sigma, rgb, delta):
        alpha = 1.0 - np.exp(-s * d)
        weights.append(trans * alpha)
        color = color + trans * alpha * np.asarray(c)
        trans = trans * (1.0 - alpha)
    return color, trans, np.array(weights)


def brute_ssim(a, b, max_value=1.0, win=8):
    """Straight-line windowed SSIM with uniform 8x8 windows over (H, W, C) images."""
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    H, W, C = a.shape
    vals = []
    for ch in range(C):
        for i in range(H - win + 1):
            for j in range(W - win + 1):
                x = a[i : i + win, j : j + win, ch].ravel()
                y = b[i : i + win, j : j + win, ch].ravel()
                mx, my = x.mean(), y.mean()
                vx = ((x - mx) ** 2).mean()
                vy = ((y - my) ** 2).mean()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def brute_kid(x, y):
    """O(n^2) double loop for the polynomial-kernel MMD estimator."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    d = x.shape[1]

    def k(a, b):
        return (float(a @ b) / d + 1.0) ** 3

    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    if m == n:
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n) if i != j) / (m * (m - 1))
    else:
        sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def fid_oracle(m1, c1, m2, c2):
    """Frechet distance with the cross term from scipy's general matrix square root."""
    from scipy.linalg import sqrtm

    cross = sqrtm(c1 @ c2)
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * np.trace(cross).real)


# gradient-check cases ---------------------------------------------------------


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _separated(rng, shape):
    """Distinct values at least 0.05 apart (keeps max-pool argmax stable under perturbation)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - n * 0.025


def projected(out):
    """Scalar sum(out * R) with a fixed random R so no gradient cancels by symmetry."""
    r = np.random.default_rng(12345).standard_normal(out.shape)
    return ad.sum(out * r)


OP_CASES = {
    "add": (lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": (lambda a, b: a - b, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))]),
    "mul": (lambda a, b: a * b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "div": (lambda a, b: a / b, lambda r: [r.standard_normal((3, 2)), _away_from_zero(r, (3, 2), 0.5)]),
    "neg": (lambda a: -a, lambda r: [r.standard_normal(5)]),
    "matmul": (ad.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "matmul_batched": (ad.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
    "relu": (ad.relu, lambda r: [_away_from_zero(r, (4, 3))]),
    "sigmoid": (ad.sigmoid, lambda r: [r.standard_normal((4, 3)) * 3]),
    "tanh": (ad.tanh, lambda r: [r.standard_normal((4, 3))]),
    "exp": (ad.exp, lambda r: [r.standard_normal((3, 3))]),
    "log": (ad.log, lambda r: [r.uniform(0.2, 3.0, (3, 3))]),
    "sin": (ad.sin, lambda r: [r.standard_normal((3, 3)) * 2]),
    "cos": (ad.cos, lambda r: [r.standard_normal((3, 3)) * 2]),
    "softplus": (ad.softplus, lambda r: [r.standard_normal((3, 4)) * 4]),
    "square": (ad.square, lambda r: [r.standard_normal((3, 4))]),
    "sqrt": (ad.sqrt, lambda r: [r.uniform(0.2, 3.0, (3, 4))]),
    "sum": (lambda a: ad.sum(a, axis=1), lambda r: [r.standard_normal((3, 4, 2))]),
    "mean": (lambda a: ad.mean(a, axis=(0, 2)), lambda r: [r.standard_normal((3, 4, 2))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "slice": (lambda a: a[1:, ::2], lambda r: [r.standard_normal((4, 5))]),
    "gather": (lambda a: a[np.array([0, 2, 2, 1])], lambda r: [r.standard_normal((3, 2))]),
    "take_along_axis": (
        lambda a: ad.take_along_axis(a, np.array([[2, 0, 1], [1, 2, 0]]), axis=1),
        lambda r: [r.standard_normal((2, 3))],
    ),
    "reshape": (lambda a: ad.reshape(a, (3, 4)), lambda r: [r.standard_normal((2, 6))]),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "softmax_cross_entropy": (
        lambda a: ad.softmax_cross_entropy(a, np.array([0, 2, 1, 2])),
        lambda r: [r.standard_normal((4, 3)) * 2],
    ),
    "conv2d": (
        lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.standard_normal((2, 6, 6, 2)), r.standard_normal((4, 4, 2, 3)) * 0.3, r.standard_normal(3)],
    ),
    "conv2d_same": (
        lambda x, w: ad.conv2d(x, w, None, stride=1, padding=1),
        lambda r: [r.standard_normal((1, 5, 4, 2)), r.standard_normal((3, 3, 2, 2)) * 0.3],
    ),
    "max_pool2d": (ad.max_pool2d, lambda r: [_separated(r, (2, 4, 4, 2))]),
    "instance_norm": (ad.instance_norm, lambda r: [r.standard_normal((2, 3, 3, 2))]),
    "resize_bilinear": (lambda a: ad.resize_bilinear(a, 5, 7), lambda r: [r.standard_normal((1, 3, 4, 2))]),
}


def mlp_case(rng, sizes=(4, 16, 4, 1), batch=5):
    """Parameters and input of a ReLU/tanh MLP; returns (build, arrays)."""
    arrays = [rng.standard_normal((batch, sizes[0]))]
    for a, b in zip(sizes[:-1], sizes[1:]):
        arrays += [rng.standard_normal((a, b)) / np.sqrt(a), rng.standard_normal(b) * 0.1]

    def build(x, *params):
        h = x
        n = len(params) // 2
        for k in range(n):
            h = ad.matmul(h, params[2 * k]) + params[2 * k + 1]
            if k < n - 1:
                h = ad.tanh(h) if k % 2 else ad.softplus(h)
        return ad.sum(h * h)

    return build, arrays


class PinnedRng:
    """Stand-in for ``numpy.random.Generator`` whose ``random`` always returns ``value``."""

    def __init__(self, value):
        self.value = value

    def random(self, size=None):
        return np.full(size, self.value, dtype=np.float64)


def constant_density_ray(sigma, length, a, b):
    """Closed form of the volume integral for constant density and color a + b*s along s in [0, length]."""
    decay = np.exp(-sigma * length)
    return a * (1 - decay) + b * (1 - decay * (1 + sigma * length)) / sigma


def convergence_error(n, sigma=1.5, t_near=2.0, t_far=5.0, a=0.2, b=0.25):
    """Absolute color error of the discrete estimator with ``n`` bin-start samples on the closed-form ray."""
    from condnerf.renderer import composite, deltas, stratified_sample

    t = stratified_sample(t_near, t_far, n, 1, PinnedRng(0.0))
    s = t - t_near
    rgb = np.repeat((a + b * s)[..., None], 3, axis=-1)
    with ad.precision(np.float64):
        color, _, _ = composite(np.full_like(t, sigma), rgb, deltas(t, t_far))
    exact = constant_density_ray(sigma, t_far - t_near, a, b)
    return float(np.abs(color.values[0, 0] - exact))
