"""Shared test oracles: finite differences, naive layer implementations,
and random small-network builders.

The oracles here deliberately avoid the library's compute paths: naive
loops and direct formulas only, in float64.
"""

import numpy as np

from relguide import kernels
from relguide.engine import Tensor
from relguide.network import LayerSpec, Model, build_model, forward_inference


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_diff(f, arr, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. every element of
    `arr` (mutated in place and restored)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        out[i] = (up - dn) / (2 * h)
    return g


def grad_mismatches(analytic, fd, fd_half, rel_tol=1e-3, abs_tol=1e-5, abs_cutoff=1e-6):
    """Indices where the analytic gradient disagrees with central
    differences at both step sizes.

    Elements with |analytic| < abs_cutoff are compared absolutely at
    abs_tol, the rest relatively at rel_tol. Matching either step size
    passes (a kink between h/2 and h invalidates only the larger step),
    and elements where the two estimates disagree with each other by >1%
    are excluded outright: the step crossed a ReLU/maxpool kink and finite
    differences cannot adjudicate there.
    """
    analytic = np.asarray(analytic, dtype=np.float64)

    def bad_vs(est):
        small = np.abs(analytic) < abs_cutoff
        bad_small = small & (np.abs(analytic - est) > abs_tol)
        denom = np.maximum(np.abs(est), 1e-300)
        bad_rel = ~small & (np.abs(analytic - est) / denom > rel_tol)
        return bad_small | bad_rel

    scale = np.maximum(np.abs(fd), np.abs(fd_half))
    unstable = np.abs(fd - fd_half) > 0.01 * np.maximum(scale, 1e-4)
    return np.argwhere(bad_vs(fd) & bad_vs(fd_half) & ~unstable)


def check_gradients(f, arrays, analytic, h=1e-3, rel_tol=1e-3, abs_tol=1e-5, abs_cutoff=1e-6):
    """Assert every array's analytic gradient matches central differences.

    `arrays` and `analytic` are parallel lists; f() re-evaluates the scalar
    after each perturbation.
    """
    for arr, ana in zip(arrays, analytic):
        fd = central_diff(f, arr, h)
        fd_half = central_diff(f, arr, h / 2)
        bad = grad_mismatches(ana, fd, fd_half, rel_tol, abs_tol, abs_cutoff)
        assert bad.size == 0, (
            f"gradient mismatch at {bad[:5].tolist()}: "
            f"analytic {np.asarray(ana).reshape(-1)[:5]}, fd {fd.reshape(-1)[:5]}"
        )


# ---------------------------------------------------------------------------
# naive layer oracles
# ---------------------------------------------------------------------------

def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct summation cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c_out, c_in, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    _, h, wd = x.shape
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += x[ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                out[co, i, j] = acc + b[co]
    return out


def naive_maxpool(x, window, stride):
    """Exhaustive window max in float64."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    for ci in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ci, i, j] = x[ci, i * stride : i * stride + window, j * stride : j * stride + window].max()
    return out


def naive_softmax_ce(logits, label):
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    z = np.exp(logits - m)
    return float(np.log(z.sum()) - (logits[label] - m))


# ---------------------------------------------------------------------------
# random model builders
# ---------------------------------------------------------------------------

def random_conv_net(rng, with_bias=True, n_classes=2, input_hw=6, in_channels=2,
                    depth=None, with_pool=None):
    """A small random conv/relu[/pool]/flatten/dense stack plus a matching
    random input; parameter count stays in the hundreds."""
    depth = depth if depth is not None else int(rng.integers(1, 3))
    with_pool = bool(rng.integers(0, 2)) if with_pool is None else with_pool
    layers = []
    ch = in_channels
    hw = input_hw
    for _ in range(depth):
        out_ch = int(rng.integers(2, 5))
        layers.append(LayerSpec("conv", channels=out_ch, kernel=3, stride=1, padding=1))
        layers.append(LayerSpec("relu"))
        ch = out_ch
    if with_pool and hw >= 4:
        layers.append(LayerSpec("maxpool", window=2, stride=2))
        hw //= 2
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=n_classes))
    model = build_model(layers, (in_channels, input_hw, input_hw),
                        seed=int(rng.integers(0, 2**31)), n_classes=n_classes)
    if not with_bias:
        for name in model.param_names():
            if name.endswith(".bias"):
                model.params[name].data[:] = 0
    else:
        for name in model.param_names():
            if name.endswith(".bias"):
                model.params[name].data[:] = rng.normal(0, 0.1, model.params[name].data.shape)
    x = rng.normal(0, 1.0, (in_channels, input_hw, input_hw)).astype(np.float32)
    return model, x


def random_dense_net(rng, widths=None, input_len=4, with_bias=True, n_classes=2):
    widths = widths if widths is not None else [int(rng.integers(3, 7))]
    layers = []
    for wdt in widths:
        layers.append(LayerSpec("dense", units=wdt))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", units=n_classes))
    model = build_model(layers, (input_len,), seed=int(rng.integers(0, 2**31)), n_classes=n_classes)
    for name in model.param_names():
        if name.endswith(".bias"):
            if with_bias:
                model.params[name].data[:] = rng.normal(0, 0.1, model.params[name].data.shape)
            else:
                model.params[name].data[:] = 0
    x = rng.normal(0, 1.0, input_len).astype(np.float32)
    return model, x


def params_of(model):
    return [model.params[n] for n in model.param_names()]


def min_kink_margin(model, x) -> float:
    """Distance of the forward pass from the nearest ReLU/maxpool
    nondifferentiability: the smallest |pre-activation| at any ReLU and the
    smallest live top-2 gap in any pool window. Finite differences are only
    meaningful when the step stays below this margin."""
    _, acts, _ = forward_inference(model, x)
    margin = np.inf
    for li, spec in enumerate(model.layers):
        if spec.kind == "relu":
            margin = min(margin, float(np.abs(acts[li]).min()))
        elif spec.kind == "maxpool":
            win = kernels.pool_windows(acts[li], spec.window, spec.stride)
            srt = np.sort(win.reshape(win.shape[0], win.shape[1], -1), axis=1)
            top, second = srt[:, -1], srt[:, -2]
            live = top > 0  # all-zero windows are flat, hence stable
            if live.any():
                margin = min(margin, float((top[live] - second[live]).min()))
    return margin


def sample_smooth_net(rng, make, margin=5e-3, tries=40):
    """Draw (model, x) from `make` until the forward pass keeps a safe
    distance from every kink."""
    for _ in range(tries):
        model, x = make(rng)
        if min_kink_margin(model, x) > margin:
            return model, x
    raise AssertionError(f"no kink-free sample found in {tries} tries")
