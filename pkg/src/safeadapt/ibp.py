"""Interval bound propagation over a box of actor parameters.

Given a centre parameter vector and nonnegative half-widths ``alpha``, every
weight and bias lives in ``[centre - alpha, centre + alpha]``. Propagating
those intervals through the network with a concrete state as input yields a
sound enclosure of the logits of every network in the box. The safe-action
probability mass is increasing in safe logits and decreasing in unsafe ones,
so plugging safe lower bounds and unsafe upper bounds into the tempered
softmax gives a sound lower bound on the safety surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .envs import SafetyDataset
from .policy_net import MlpSpec, ParamVector, unpack


class EmptyDatasetError(ValueError):
    """No safety-critical states: the whole parameter space is trivially safe."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("interval bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    def contains(self, v: float) -> bool:
        return self.lo <= v <= self.hi


@dataclass
class Orthotope:
    """The box ``{theta : center - half_widths <= theta <= center + half_widths}``."""

    center: ParamVector
    half_widths: np.ndarray

    def __post_init__(self):
        self.half_widths = np.asarray(self.half_widths, dtype=np.float64)
        if self.half_widths.shape != self.center.values.shape:
            raise ValueError("half-widths must match the centre's parameter count")
        if np.any(self.half_widths < 0) or not np.all(np.isfinite(self.half_widths)):
            raise ValueError("half-widths must be finite and nonnegative")

    @property
    def spec(self) -> MlpSpec:
        return self.center.spec

    @property
    def lower(self) -> np.ndarray:
        return self.center.values - self.half_widths

    @property
    def upper(self) -> np.ndarray:
        return self.center.values + self.half_widths

    def contains(self, values: np.ndarray) -> bool:
        return bool(np.all(values >= self.lower) and np.all(values <= self.upper))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` parameter vectors drawn uniformly from the box."""
        u = rng.uniform(-1.0, 1.0, size=(n, self.half_widths.size))
        return np.clip(self.center.values + u * self.half_widths, self.lower, self.upper)


@dataclass(frozen=True)
class StateBounds:
    logit_lo: np.ndarray
    logit_hi: np.ndarray
    surrogate_lb: float
    hard_cert: bool

    @property
    def intervals(self) -> list[Interval]:
        return [Interval(float(a), float(b)) for a, b in zip(self.logit_lo, self.logit_hi)]

    def to_json(self, state_key=None) -> dict:
        d = {
            "logit_lo": self.logit_lo.tolist(),
            "logit_hi": self.logit_hi.tolist(),
            "surrogate_lb": float(self.surrogate_lb),
            "hard_cert": bool(self.hard_cert),
        }
        if state_key is not None:
            d = {"state_key": state_key, **d}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StateBounds":
        return cls(np.asarray(d["logit_lo"], float), np.asarray(d["logit_hi"], float),
                   float(d["surrogate_lb"]), bool(d["hard_cert"]))


_EPS = np.finfo(np.float64).eps


def _rounding_slack(x_lo, x_hi, w_abs, b_abs):
    """Outward margin covering float rounding in one affine layer.

    A length-n dot product computed in floating point is within
    ``(n + 2) * eps * sum |w_i x_i|`` of the exact value; the margin is doubled
    so it also covers the rounding of an ordinary forward pass at any point of
    the box. It is treated as a constant by the backward pass.
    """
    x_abs = np.maximum(np.abs(x_lo), np.abs(x_hi))
    n_in = x_abs.shape[1]
    return 2.0 * (n_in + 2) * _EPS * (x_abs @ w_abs.T + b_abs)


def interval_affine(W_center, W_half, b_center, b_half, x_lo, x_hi=None, backend=None):
    """Sound enclosure of ``W x + b`` for interval weights, biases and inputs.

    ``x_lo``/``x_hi`` may be a single vector or a batch ``(N, in)``; omitting
    ``x_hi`` means a concrete input.
    """
    W_half = np.asarray(W_half, dtype=np.float64)
    b_half = np.asarray(b_half, dtype=np.float64)
    if np.any(W_half < 0) or np.any(b_half < 0):
        raise ValueError("half-widths must be nonnegative")
    single = np.ndim(x_lo) == 1
    x_lo = np.ascontiguousarray(np.atleast_2d(x_lo), dtype=np.float64)
    x_hi = x_lo if x_hi is None else np.ascontiguousarray(np.atleast_2d(x_hi), dtype=np.float64)
    W_center = np.asarray(W_center, dtype=np.float64)
    b_center = np.asarray(b_center, dtype=np.float64)
    core = kernels.core if backend is None else kernels.load_backend(backend)
    lo, hi = core.interval_linear(
        x_lo, x_hi,
        np.ascontiguousarray(W_center - W_half), np.ascontiguousarray(W_center + W_half),
        np.ascontiguousarray(b_center - b_half), np.ascontiguousarray(b_center + b_half),
    )
    slack = _rounding_slack(x_lo, x_hi, np.abs(W_center) + W_half, np.abs(b_center) + b_half)
    lo, hi = lo - slack, hi + slack
    return (lo[0], hi[0]) if single else (lo, hi)


def interval_relu(lo, hi):
    return np.maximum(lo, 0.0), np.maximum(hi, 0.0)


class _Propagation:
    """One IBP pass over a batch of concrete inputs, kept for the backward pass."""

    def __init__(self, center: ParamVector, alpha: np.ndarray, X: np.ndarray, core):
        spec = center.spec
        self.spec = spec
        self.core = core
        self.records = []
        h_lo = h_hi = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        for k, ((Wc, bc), (Wa, ba)) in enumerate(zip(center.layers(), unpack(alpha, spec))):
            w_lo = np.ascontiguousarray(Wc - Wa)
            w_hi = np.ascontiguousarray(Wc + Wa)
            lo, hi = core.interval_linear(h_lo, h_hi, w_lo, w_hi, bc - ba, bc + ba)
            slack = _rounding_slack(h_lo, h_hi, np.abs(Wc) + Wa, np.abs(bc) + ba)
            lo, hi = lo - slack, hi + slack
            self.records.append((h_lo, h_hi, w_lo, w_hi, lo, hi))
            if k < spec.n_layers - 1:
                h_lo, h_hi = interval_relu(lo, hi)
        self.lo, self.hi = lo, hi

    def alpha_grad(self, g_lo: np.ndarray, g_hi: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the half-widths of a function of (logit_lo, logit_hi)."""
        out = np.zeros(self.spec.n_params)
        grads = unpack(out, self.spec)
        g_lo = np.ascontiguousarray(g_lo)
        g_hi = np.ascontiguousarray(g_hi)
        for k in range(len(self.records) - 1, -1, -1):
            x_lo, x_hi, w_lo, w_hi, _, _ = self.records[k]
            gx_lo, gx_hi, gw_lo, gw_hi = self.core.interval_linear_backward(
                x_lo, x_hi, w_lo, w_hi, g_lo, g_hi, k > 0, k > 0
            )
            gW, gb = grads[k]
            # lower bounds move with -alpha, upper bounds with +alpha
            gW[:] = gw_hi - gw_lo
            gb[:] = g_hi.sum(axis=0) - g_lo.sum(axis=0)
            if k > 0:
                pre_lo, pre_hi = self.records[k - 1][4], self.records[k - 1][5]
                g_lo = np.ascontiguousarray(gx_lo * (pre_lo > 0.0))
                g_hi = np.ascontiguousarray(gx_hi * (pre_hi > 0.0))
        return out


def logit_bounds(orthotope: Orthotope, x: np.ndarray, backend=None):
    """Per-action logit intervals ``(lo, hi)`` valid for every network in the box."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != orthotope.spec.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != {orthotope.spec.input_dim}")
    core = kernels.core if backend is None else kernels.load_backend(backend)
    prop = _Propagation(orthotope.center, orthotope.half_widths, x, core)
    return (prop.lo[0], prop.hi[0]) if x.ndim == 1 else (prop.lo, prop.hi)


def _check_masks(masks: np.ndarray) -> None:
    if np.any(~masks.any(axis=-1)) or np.any(masks.all(axis=-1)):
        raise ValueError("safe mask must be neither empty nor full")


def _surrogate_terms(lo, hi, masks, beta):
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    z = np.where(masks, beta * lo, beta * hi)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    S = np.where(masks, e, 0.0).sum(axis=1)
    U = np.where(masks, 0.0, e).sum(axis=1)
    return e, S, U, masks


def surrogate_lower_bound(lo, hi, safe_mask, beta: float):
    """``S / (S + U)`` with safe lower and unsafe upper logit bounds.

    Vectorised over a leading batch axis; returns a float for a single state.
    """
    if not beta > 0:
        raise ValueError("inverse temperature must be positive")
    _check_masks(np.atleast_2d(np.asarray(safe_mask, dtype=bool)))
    _, S, U, _ = _surrogate_terms(lo, hi, safe_mask, beta)
    # shave a few ulps so the bound also holds against a rounded softmax
    p = S / (S + U) * (1.0 - 16.0 * _EPS)
    return float(p[0]) if np.ndim(lo) == 1 else p


def _surrogate_grad(lo, hi, masks, beta):
    e, S, U, masks = _surrogate_terms(lo, hi, masks, beta)
    tot2 = ((S + U) ** 2)[:, None]
    g_lo = np.where(masks, beta * e * U[:, None] / tot2, 0.0)
    g_hi = np.where(masks, 0.0, -beta * e * S[:, None] / tot2)
    return S / (S + U), g_lo, g_hi


def _log_odds_grad(lo, hi, masks, beta):
    """``log S - log U`` per state and its gradients; monotone in the surrogate bound."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    masks = np.atleast_2d(masks)
    zs = np.where(masks, beta * lo, -np.inf)
    zu = np.where(masks, -np.inf, beta * hi)
    ms = zs.max(axis=1, keepdims=True)
    mu = zu.max(axis=1, keepdims=True)
    es = np.exp(zs - ms)
    eu = np.exp(zu - mu)
    S = es.sum(axis=1, keepdims=True)
    U = eu.sum(axis=1, keepdims=True)
    value = (ms + np.log(S) - mu - np.log(U))[:, 0]
    return value, beta * es / S, -beta * eu / U


def hard_certificate(lo, hi, safe_mask):
    """True iff some safe action's lower bound beats every unsafe upper bound."""
    masks = np.atleast_2d(np.asarray(safe_mask, dtype=bool))
    _check_masks(masks)
    best_safe = np.where(masks, np.atleast_2d(lo), -np.inf).max(axis=1)
    worst_unsafe = np.where(masks, -np.inf, np.atleast_2d(hi)).max(axis=1)
    cert = best_safe > worst_unsafe
    return bool(cert[0]) if np.ndim(lo) == 1 else cert


def soft_min(values: np.ndarray, kappa: float):
    """``-log(sum exp(-kappa v)) / kappa`` (never above the true min) and its weights."""
    m = values.min()
    w = np.exp(-kappa * (values - m))
    total = w.sum()
    return m - np.log(total) / kappa, w / total


class IbpCertifier:
    """Bound oracle for one actor centre, safety dataset and inverse temperature."""

    def __init__(self, center: ParamVector, dataset: SafetyDataset | tuple, beta: float,
                 backend: str | None = None):
        if isinstance(dataset, SafetyDataset):
            X, masks = dataset.states, dataset.masks
        else:
            X, masks = dataset
        if len(X) == 0:
            raise EmptyDatasetError("safety dataset is empty")
        if X.shape[1] != center.spec.input_dim:
            raise ValueError("dataset encoding does not match the actor input")
        masks = np.asarray(masks, dtype=bool)
        _check_masks(masks)
        if not beta > 0:
            raise ValueError("inverse temperature must be positive")
        self.center = center
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.masks = masks
        self.beta = float(beta)
        self.core = kernels.core if backend is None else kernels.load_backend(backend)

    @property
    def n_params(self) -> int:
        return self.center.spec.n_params

    def state_bounds(self, alpha: np.ndarray):
        prop = _Propagation(self.center, alpha, self.X, self.core)
        lb = surrogate_lower_bound(prop.lo, prop.hi, self.masks, self.beta)
        lb = np.atleast_1d(lb)
        cert = np.atleast_1d(hard_certificate(prop.lo, prop.hi, self.masks))
        return prop, lb, cert

    def check(self, alpha: np.ndarray):
        """Exact min bound, hard-certificate rate and per-state bounds."""
        prop, lb, cert = self.state_bounds(alpha)
        per_state = [
            StateBounds(prop.lo[n].copy(), prop.hi[n].copy(), float(lb[n]), bool(cert[n]))
            for n in range(len(lb))
        ]
        return float(lb.min()), float(cert.mean()), per_state

    def evaluate(self, alpha: np.ndarray, kappa: float | None = None, log_odds: bool = False):
        """Aggregated bound and its subgradient w.r.t. ``alpha``.

        ``kappa=None`` aggregates with the exact min (lowest index wins ties);
        otherwise a soft-min with sharpness ``kappa`` is used. With
        ``log_odds`` the per-state quantity is ``log(p / (1 - p))`` instead of
        ``p``: same ordering, but its gradient does not vanish as ``p -> 0``.
        """
        prop = _Propagation(self.center, alpha, self.X, self.core)
        fn = _log_odds_grad if log_odds else _surrogate_grad
        p, g_lo, g_hi = fn(prop.lo, prop.hi, self.masks, self.beta)
        if kappa is None:
            idx = int(np.argmin(p))
            w = np.zeros_like(p)
            w[idx] = 1.0
            value = float(p[idx])
        else:
            value, w = soft_min(p, kappa)
        return value, prop.alpha_grad(g_lo * w[:, None], g_hi * w[:, None])


def dataset_lower_bound(orthotope: Orthotope, dataset: SafetyDataset, beta: float,
                        backend=None):
    """``(min over states of the surrogate bound, per-state bounds)``."""
    cert = IbpCertifier(orthotope.center, dataset, beta, backend)
    global_lb, _, per_state = cert.check(orthotope.half_widths)
    return global_lb, per_state


def lower_bound_subgradient(orthotope: Orthotope, dataset: SafetyDataset, beta: float,
                            backend=None) -> np.ndarray:
    """Subgradient of the min-aggregated bound w.r.t. the half-widths."""
    cert = IbpCertifier(orthotope.center, dataset, beta, backend)
    return cert.evaluate(orthotope.half_widths)[1]
