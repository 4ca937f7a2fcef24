"""Layer-wise relevance propagation, a squared-gradient sensitivity
baseline, and heatmap export.

Relevance is redistributed from an output neuron back through the layer
stack. Two propagation rules are provided per linear/conv layer:

* epsilon rule: each input unit j receives ``a_j * w_jk / (z_k + eps*sign(z_k))``
  of the relevance at output unit k, with a scale-adaptive stabilizer
  ``eps = eps_scale * mean|z|``.
* alpha/beta rule: positive and negative pre-activation contributions are
  redistributed separately with weights alpha and -beta (alpha - beta = 1).
  The split is by weight sign, which identifies contribution sign when the
  layer's inputs are nonnegative — true for every conv layer here (images
  in [0,1], then post-ReLU/pool activations), the setting this rule is
  meant for.

ReLU and dropout pass relevance through unchanged, max pooling routes it to
the recorded argmax (winner-take-all), flatten reshapes. Biases absorb
their share of relevance rather than redistributing it, so conservation is
exact only on bias-free networks.

Two implementations of the same rules exist on purpose:

* :func:`relevance_graph` builds the propagation out of autodiff primitives
  on a traced forward graph. That makes the input relevance — and anything
  derived from it, such as a mask-attention score inside a loss — a
  differentiable function of the model parameters.
* :func:`relevance_stack` propagates a whole stack of relevance seeds at
  once on plain ndarrays. It serves batched per-unit decompositions and
  fast evaluation loops.

The two paths share their kernels and stabilizer arithmetic and are
cross-checked in the test suite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine, kernels
from .engine import Tensor
from .errors import ConfigError, NumericalError
from .network import ActivationTrace, Model, forward_inference, forward_with_trace

DEFAULT_EPS_SCALE = 1e-6


@dataclass
class LRPRuleConfig:
    """Which propagation rule applies to dense and conv layers.

    The default composite uses the epsilon rule on dense layers and
    alpha1/beta0 on conv layers. ``epsilon`` is a scale: the effective
    stabilizer is ``epsilon * mean|z|`` per layer.
    """

    dense_rule: str = "epsilon"
    conv_rule: str = "alphabeta"
    epsilon: float = DEFAULT_EPS_SCALE
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        for rule in (self.dense_rule, self.conv_rule):
            if rule not in ("epsilon", "alphabeta"):
                raise ConfigError(f"unknown LRP rule {rule!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if abs(self.alpha - self.beta - 1.0) > 1e-9:
            raise ConfigError(f"alpha - beta must equal 1, got {self.alpha} - {self.beta}")
        if self.alpha < 1:
            raise ConfigError("alpha must be >= 1")

    def rule_for(self, kind: str) -> str:
        return self.dense_rule if kind == "dense" else self.conv_rule

    @classmethod
    def uniform(cls, rule: str, **kw) -> "LRPRuleConfig":
        return cls(dense_rule=rule, conv_rule=rule, **kw)


@dataclass
class RelevanceMap:
    """Per-trace-position relevance arrays (entry 0 is the input relevance,
    shaped like the input) plus the class the propagation started from."""

    relevances: list
    target_class: int

    @property
    def input_relevance(self) -> np.ndarray:
        return self.relevances[0]


# ---------------------------------------------------------------------------
# graph route (differentiable)
# ---------------------------------------------------------------------------

def _epsilon_graph(r, z, weight_t, a_in, rules, geom=None):
    """Epsilon-rule redistribution of relevance r at one linear layer's
    output to its input, as a graph expression. For conv layers r/z are in
    (C_out, L) matrix form, `weight_t` is the flattened kernel and `geom`
    folds the result back to (C,H,W)."""
    s = engine.stabilized_ratio(r, z, rules.epsilon)
    c = engine.matmul(engine.transpose2d(weight_t), s)
    if geom is not None:
        cc, hh, ww, k, stride, padding, _, _ = geom
        c = engine.col2im_op(c, cc, hh, ww, k, stride, padding)
    return engine.mul(a_in, c)


def _part_preactivation_graph(w_part, sign, ctx, kind):
    """Pre-activations restricted to one sign of the weights/bias."""
    bias, lin_in = ctx["bias"], ctx["lin_in"]
    b_pos = engine.relu(bias)
    b_part = b_pos if sign > 0 else engine.sub(bias, b_pos)
    if kind == "conv":
        zp = engine.matmul(w_part, lin_in)
        return engine.add(zp, engine.reshape(b_part, (b_part.data.shape[0], 1)))
    return engine.add(engine.matmul(w_part, lin_in), b_part)


def relevance_graph(
    model: Model, trace: ActivationTrace, target_class: int, rules: Optional[LRPRuleConfig] = None
) -> list:
    """Relevance tensors (graph nodes) for every trace position, seeded with
    the onehot-masked logit of `target_class`."""
    rules = rules or LRPRuleConfig()
    logits = trace.tensors[-1]
    k = logits.data.shape[0]
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} out of range for {k} outputs")
    onehot = np.zeros(k, dtype=logits.data.dtype)
    onehot[target_class] = 1
    r = engine.mul(logits, Tensor(onehot, dtype=None))
    rel = [None] * len(trace.tensors)
    rel[-1] = r
    for li in reversed(range(len(model.layers))):
        spec = model.layers[li]
        cache = trace.caches[li]
        if spec.kind == "conv":
            geom = cache["geom"]
            rmat = engine.reshape(r, cache["zmat"].data.shape)
            if rules.rule_for("conv") == "epsilon":
                r = _epsilon_graph(rmat, cache["zmat"], cache["wm"], cache["in"], rules, geom)
            else:
                ctx = {
                    "bias": model.params[f"layer{li}.bias"],
                    "lin_in": cache["cols"],
                    "in": cache["in"],
                }
                r = _alphabeta_graph(rmat, cache["wm"], ctx, rules, "conv", geom)
        elif spec.kind == "dense":
            z = trace.tensors[li + 1]
            w = model.params[f"layer{li}.weight"]
            ctx = {
                "bias": model.params[f"layer{li}.bias"],
                "lin_in": cache["in"],
                "in": cache["in"],
            }
            if rules.rule_for("dense") == "epsilon":
                r = _epsilon_graph(r, z, w, cache["in"], rules)
            else:
                r = _alphabeta_graph(r, w, ctx, rules, "dense")
        elif spec.kind == "maxpool":
            r = engine.pool_route(r, cache["idx"], cache["in_hw"], spec.window, spec.stride)
        elif spec.kind == "flatten":
            r = engine.reshape(r, cache["in_shape"])
        # relu / dropout: relevance passes through unchanged
        if not np.isfinite(r.data).all():
            raise NumericalError(
                f"non-finite relevance at layer {li} ({spec.kind}); stabilizer too small"
            )
        rel[li] = r
    return rel


def _alphabeta_graph(rmat, weight_t, ctx, rules, kind, geom=None):
    c = None
    w_pos = engine.relu(weight_t)
    w_neg = engine.sub(weight_t, w_pos)
    for w_part, sign, coef in ((w_pos, 1, rules.alpha), (w_neg, -1, -rules.beta)):
        if coef == 0.0:
            continue
        z_part = _part_preactivation_graph(w_part, sign, ctx, kind)
        s = engine.stabilized_ratio(rmat, z_part, rules.epsilon, sign=sign)
        term = engine.matmul(engine.transpose2d(w_part), s)
        if geom is not None:
            cc, hh, ww, k, stride, padding, _, _ = geom
            term = engine.col2im_op(term, cc, hh, ww, k, stride, padding)
        term = engine.mul(engine.const(np.asarray(coef, dtype=term.data.dtype), dtype=None), term)
        c = term if c is None else engine.add(c, term)
    return engine.mul(ctx["in"], c)


def lrp(model: Model, x, target_class: int, rules: Optional[LRPRuleConfig] = None) -> RelevanceMap:
    """Full relevance map for one input, propagated from `target_class`."""
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"target class {target_class} out of range")
    _, trace = forward_with_trace(model, x, training=False)
    rel = relevance_graph(model, trace, target_class, rules)
    return RelevanceMap([r.data.copy() for r in rel], target_class)


# ---------------------------------------------------------------------------
# stacked ndarray route
# ---------------------------------------------------------------------------

_stab_denominator = kernels.stab_denominator


def _safe_ratio(r: np.ndarray, denom: np.ndarray) -> np.ndarray:
    nonzero = denom != 0
    return np.where(nonzero, r / np.where(nonzero, denom, 1), 0)


def relevance_stack(
    model: Model,
    acts: list,
    caches: list,
    start_index: int,
    seeds: np.ndarray,
    rules: Optional[LRPRuleConfig] = None,
) -> np.ndarray:
    """Propagate `seeds` (M stacked relevance maps at trace position
    `start_index`) down to the input. Returns (M, C, H, W).

    Relevance propagation is linear in the relevance for fixed activations,
    so all M maps share one pass over the layers.
    """
    rules = rules or LRPRuleConfig()
    if not 0 <= start_index < len(acts):
        raise IndexError(f"trace index {start_index} out of range")
    m = seeds.shape[0]
    if seeds.shape[1:] != acts[start_index].shape:
        raise ConfigError(
            f"seed shape {seeds.shape[1:]} does not match trace entry {acts[start_index].shape}"
        )
    r = seeds
    for li in reversed(range(start_index)):
        spec = model.layers[li]
        cache = caches[li]
        if spec.kind == "conv":
            r = _conv_backshare_stack(r, model, li, cache, rules)
        elif spec.kind == "dense":
            r = _dense_backshare_stack(r, model, li, cache, acts[li + 1], rules)
        elif spec.kind == "maxpool":
            h, w = cache["in_hw"]
            r = kernels.pool_scatter(r, cache["idx"], h, w, spec.window, spec.stride)
        elif spec.kind == "flatten":
            r = r.reshape((m,) + cache["in_shape"])
        if not np.isfinite(r).all():
            raise NumericalError(
                f"non-finite relevance at layer {li} ({spec.kind}); stabilizer too small"
            )
    return r


def _conv_backshare_stack(r, model, li, cache, rules):
    wm = cache["wm"]
    cols = cache["cols"]
    zmat = cache["zmat"]
    c_in, h, w, k, stride, padding, ho, wo = cache["geom"]
    m = r.shape[0]
    rmat = r.reshape(m, zmat.shape[0], zmat.shape[1])

    def backproject(w_part, s):
        # (M, C_out, L) x (C_out, Ckk) -> (M, Ckk, L)
        ccols = np.tensordot(s, w_part, axes=(1, 0)).transpose(0, 2, 1)
        return kernels.col2im_stack(
            np.ascontiguousarray(ccols), c_in, h, w, k, stride, padding
        )

    if rules.rule_for("conv") == "epsilon":
        s = _safe_ratio(rmat, _stab_denominator(zmat, rules.epsilon))
        return backproject(wm, s) * cache["in"][None]

    bias = model.params[f"layer{li}.bias"].data
    out = None
    for w_part, b_part, sign, coef in _split_parts(wm, bias, rules):
        z_part = w_part @ cols + b_part[:, None]
        s = _safe_ratio(rmat, _stab_denominator(z_part, rules.epsilon, sign))
        term = coef * backproject(w_part, s)
        out = term if out is None else out + term
    return out * cache["in"][None]


def _dense_backshare_stack(r, model, li, cache, z, rules):
    w = model.params[f"layer{li}.weight"].data
    a = cache["in"]
    if rules.rule_for("dense") == "epsilon":
        s = _safe_ratio(r, _stab_denominator(z, rules.epsilon))
        return (s @ w) * a[None]
    bias = model.params[f"layer{li}.bias"].data
    out = None
    for w_part, b_part, sign, coef in _split_parts(w, bias, rules):
        z_part = w_part @ a + b_part
        s = _safe_ratio(r, _stab_denominator(z_part, rules.epsilon, sign))
        term = coef * (s @ w_part)
        out = term if out is None else out + term
    return out * a[None]


def _split_parts(w, bias, rules):
    w_pos = np.maximum(w, 0)
    b_pos = np.maximum(bias, 0)
    parts = []
    if rules.alpha != 0.0:
        parts.append((w_pos, b_pos, 1, np.asarray(rules.alpha, dtype=w.dtype)))
    if rules.beta != 0.0:
        parts.append((w - w_pos, bias - b_pos, -1, np.asarray(-rules.beta, dtype=w.dtype)))
    return parts


def input_relevance(
    model: Model, x: np.ndarray, target_class: int, rules: Optional[LRPRuleConfig] = None
) -> np.ndarray:
    """Input relevance via the stacked route (fast, non-differentiable)."""
    logits, acts, caches = forward_inference(model, x)
    seeds = np.zeros((1,) + logits.shape, dtype=logits.dtype)
    seeds[0, target_class] = logits[target_class]
    return relevance_stack(model, acts, caches, len(model.layers), seeds, rules)[0]


# ---------------------------------------------------------------------------
# sensitivity baseline
# ---------------------------------------------------------------------------

def sensitivity_map(model: Model, x, target_class: int) -> np.ndarray:
    """Elementwise squared gradient of the target logit w.r.t. the input."""
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"target class {target_class} out of range")
    logits, trace = forward_with_trace(model, x, training=False)
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    onehot[target_class] = 1
    target = engine.sum_all(engine.mul(logits, Tensor(onehot, dtype=None)))
    grads = engine.backward(target)
    g = engine.grad_for(grads, trace.tensors[0])
    return g * g


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------

def render_heatmap(relevance: np.ndarray, path) -> None:
    """Write an 8-bit grayscale PGM (P5) of the positive relevance plus a CSV
    of the raw channel-summed values (one image row per line)."""
    rel = np.asarray(relevance)
    if rel.ndim == 3:
        rel2d = rel.sum(axis=0)
    elif rel.ndim == 2:
        rel2d = rel
    else:
        raise ConfigError(f"expected (C,H,W) or (H,W) relevance, got {rel.shape}")
    h, w = rel2d.shape
    pos = np.maximum(rel2d, 0)
    peak = pos.max()
    if peak > 0:
        img = np.round(255.0 * pos / peak).astype(np.uint8)
    else:
        img = np.zeros((h, w), dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    csv_path = os.path.splitext(str(path))[0] + ".csv"
    with open(csv_path, "w") as f:
        for row in rel2d:
            f.write(",".join(f"{float(v):.9g}" for v in row))
            f.write("\n")


def read_heatmap_csv(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([np.float32(v) for v in line.split(",")])
    return np.asarray(rows, dtype=np.float32)
