"""Losses, their analytic gradients, and the Adam optimizer.

All losses return ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction. Reductions are sums over pixels and levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def l2_loss(pred: np.ndarray, target: np.ndarray):
    """Sum of squared residuals and its gradient 2 r."""
    pred, target = np.asarray(pred), np.asarray(target)
    _same_shape(pred, target, "l2_loss")
    r = pred - target
    return float(np.sum(r * r)), 2 * r


def last_layer_l2_grads(z: np.ndarray, w: np.ndarray, b: float, g: np.ndarray):
    """Closed-form l2 gradients of a 1x1 conv + ReLU output layer.

    ``z`` has shape (sH, sW, K), ``w`` has length K and ``g`` is the target
    map. With r = relu(z . w + b) - g:

        d/dw_k = 2 sum_ij [r + g > 0] r z_k
        d/db   = 2 sum_ij [r + g > 0] r
    """
    z, w, g = np.asarray(z), np.asarray(w), np.asarray(g)
    if z.ndim != 3 or w.shape != (z.shape[2],) or g.shape != z.shape[:2]:
        raise ShapeMismatch(
            f"last_layer_l2_grads: z {z.shape}, w {w.shape}, g {g.shape} are inconsistent"
        )
    pre = z @ w + b
    r = np.maximum(pre, 0) - g
    active = (r + g) > 0
    act_r = np.where(active, r, 0)
    grad_w = 2 * np.einsum("ij,ijk->k", act_r, z)
    grad_b = 2 * float(act_r.sum())
    return grad_w, grad_b


def huber(r: np.ndarray, delta: float = 0.2):
    """Elementwise Huber loss (summed) and its gradient, clipped to [-delta, delta]."""
    r = np.asarray(r)
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r))
    return float(loss.sum()), grad.astype(r.dtype, copy=False)


def cost_weight(c_pred: float, c_gt: float, alpha: float = 2.0, beta: float = 2.0) -> float:
    """Per-example weight alpha * (1 - exp(-beta * |c - c_gt| / max(1, c_gt)))."""
    rel = abs(c_pred - c_gt) / max(1.0, c_gt)
    return alpha * -math.expm1(-beta * rel)


@dataclass(frozen=True)
class HuberParams:
    delta: float = 0.2
    alpha: float = 2.0
    beta: float = 2.0

    def __post_init__(self):
        if min(self.delta, self.alpha, self.beta) <= 0:
            raise ValueError("Huber parameters must be positive")


@dataclass
class LossReport:
    loss_value: float
    residual: np.ndarray
    lam: float
    per_level_losses: np.ndarray
    grad: np.ndarray


def _values(m):
    return np.asarray(getattr(m, "values", m))


def structured_loss(pred, target, p: HuberParams = HuberParams(), weighted: bool = True) -> LossReport:
    """Cost-sensitive Huber loss over a (D, h, w) stack.

    The weight is computed from the predicted and true counts and then held
    constant, so the returned gradient is ``lam * huber'(r)``. With
    ``weighted=False`` the weight is fixed to 1.
    """
    pv, tv = _values(pred), _values(target)
    _same_shape(pv, tv, "structured_loss")
    r = pv - tv.astype(pv.dtype, copy=False)
    lam = cost_weight(float(pv.sum()), float(tv.sum()), p.alpha, p.beta) if weighted else 1.0
    per_level = np.array([huber(r[d], p.delta)[0] for d in range(r.shape[0])])
    _, g = huber(r, p.delta)
    grad = (g * pv.dtype.type(lam)).astype(pv.dtype, copy=False)
    return LossReport(lam * float(per_level.sum()), r, lam, per_level, grad)


def l2_report(pred, target) -> LossReport:
    """``l2_loss`` on a level stack, packaged like ``structured_loss``."""
    pv, tv = _values(pred), _values(target)
    _same_shape(pv, tv, "l2_report")
    r = pv - tv.astype(pv.dtype, copy=False)
    per_level = np.array([float(np.sum(r[d] * r[d])) for d in range(r.shape[0])])
    return LossReport(float(per_level.sum()), r, 1.0, per_level, 2 * r)


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def init_for(self, params) -> None:
        self.first_moment = [np.zeros_like(p) for p in params]
        self.second_moment = [np.zeros_like(p) for p in params]
        self.step_count = 0


def adam_step(params, grads, state: AdamState, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, applied in place to each array in ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch("one gradient per parameter is required")
    if not state.first_moment:
        state.init_for(params)
    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch(f"adam_step: param {p.shape}, grad {g.shape}, moment {m.shape}")
        dt = p.dtype.type
        if weight_decay:
            g = g + dt(weight_decay) * p
        m *= dt(state.beta1)
        m += dt(1.0 - state.beta1) * g
        v *= dt(state.beta2)
        v += dt(1.0 - state.beta2) * (g * g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        p -= dt(state.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
