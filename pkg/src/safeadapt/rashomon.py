"""Certified parameter boxes: threshold, temperature search, primal-dual solver.

The solver maximizes ``sum(log alpha)`` subject to the IBP surrogate bound of
the box staying above the threshold. It runs a projected primal-dual loop on
``u = log(alpha)``; every ``checkpoint_every`` iterations the current box is
re-evaluated with the exact min bound and the hard certificate, and only
those exact checks can accept a box. The initial widths are shrunk by powers
of ten until they pass the exact check, so the loop starts from a feasible box. A final bisection on a uniform scale of
the last accepted box pushes it to the constraint boundary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import SafetyDataset
from .ibp import (
    EmptyDatasetError,
    IbpCertifier,
    Orthotope,
    StateBounds,
    surrogate_lower_bound,
)
from .optim import Adam
from .policy_net import ParamVector, forward

log = logging.getLogger(__name__)


class CertificationRefused(RuntimeError):
    """No certifiable box exists under the configured search (the ``⊥`` outcome)."""

    def __init__(self, reason: str, state_index: int | None = None):
        super().__init__(reason if state_index is None else f"{reason} (state {state_index})")
        self.reason = reason
        self.state_index = state_index


class NumericalError(RuntimeError):
    pass


@dataclass
class RashomonConfig:
    n_iters: int = 5000
    checkpoint_every: int = 100
    min_acc_increment: float = 0.0
    beta_range: tuple[float, float] = (10.0, 1000.0)
    beta_grid: int = 32
    hard_threshold: float = 1.0
    primal_lr: float = 1e-2
    dual_lr: float = 1e-2
    lambda_init: float = 1.0
    alpha_init: float = 1e-4
    alpha_floor: float = 1e-12
    alpha_max: float = 10.0
    softmin_kappa: float | None = 50.0
    accept_margin: float = 1e-9
    dual_slack: float = 0.05
    refine_steps: int = 40

    def __post_init__(self):
        self.beta_range = tuple(float(b) for b in self.beta_range)
        if self.n_iters <= 0 or self.checkpoint_every <= 0:
            raise ValueError("n_iters and checkpoint_every must be positive")
        if not 0 < self.beta_range[0] <= self.beta_range[1]:
            raise ValueError("temperature range must be positive and ordered")
        if not 0 < self.hard_threshold <= 1:
            raise ValueError("hard threshold must lie in (0, 1]")
        if not 0 < self.alpha_floor <= self.alpha_init <= self.alpha_max:
            raise ValueError("need 0 < alpha_floor <= alpha_init <= alpha_max")
        if self.primal_lr <= 0 or self.dual_lr < 0:
            raise ValueError("step sizes must be positive")
        if self.dual_slack < 0:
            raise ValueError("dual slack must be nonnegative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["beta_range"] = list(self.beta_range)
        return d


@dataclass
class Certificate:
    orthotope: Orthotope
    beta: float
    delta_star: float
    per_state: list[StateBounds]
    global_lb: float
    hard_cert_rate: float
    iteration: int
    state_keys: list | None = None
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def alpha(self) -> np.ndarray:
        return self.orthotope.half_widths

    @property
    def center(self) -> ParamVector:
        return self.orthotope.center

    def to_json(self, center_checkpoint: str = "") -> dict:
        keys = self.state_keys or [None] * len(self.per_state)
        return {
            "beta": self.beta,
            "delta_star": self.delta_star,
            "alpha": self.alpha.tolist(),
            "center_checkpoint": str(center_checkpoint),
            "global_lb": self.global_lb,
            "hard_cert_rate": self.hard_cert_rate,
            "iteration": self.iteration,
            "per_state": [b.to_json(k) for b, k in zip(self.per_state, keys)],
        }

    @classmethod
    def from_json(cls, d: dict, center: ParamVector | None = None,
                  base_dir: str | Path | None = None) -> "Certificate":
        if center is None:
            path = Path(d["center_checkpoint"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            center = ParamVector.load(path)
        per_state = [StateBounds.from_json(s) for s in d["per_state"]]
        keys = [s.get("state_key") for s in d["per_state"]]
        return cls(Orthotope(center, np.asarray(d["alpha"], float)), float(d["beta"]),
                   float(d["delta_star"]), per_state, float(d["global_lb"]),
                   float(d["hard_cert_rate"]), int(d["iteration"]),
                   keys if any(k is not None for k in keys) else None)

    def save(self, path: str | Path, center_checkpoint: str = "") -> None:
        Path(path).write_text(json.dumps(self.to_json(center_checkpoint)))


def delta_star(dataset: SafetyDataset | np.ndarray, min_acc_increment: float = 0.0) -> float:
    """``M / (1 + M) + increment`` with ``M`` the largest safe-set size."""
    masks = dataset.masks if isinstance(dataset, SafetyDataset) else np.asarray(dataset, bool)
    if len(masks) == 0:
        raise EmptyDatasetError("safety dataset is empty")
    m = int(masks.sum(axis=1).max())
    return m / (1.0 + m) + min_acc_increment


def search_inverse_temperature(center: ParamVector, dataset: SafetyDataset, delta: float,
                               beta_range=(10.0, 1000.0), n_grid: int = 32,
                               margin: float = 1e-9) -> float:
    """Smallest grid ``beta`` whose centre surrogate exceeds ``delta`` at every state."""
    if len(dataset) == 0:
        raise EmptyDatasetError("safety dataset is empty")
    logits = forward(center, center.spec, dataset.states)
    masks = dataset.masks
    worst = None
    for beta in np.geomspace(beta_range[0], beta_range[1], n_grid):
        mass = surrogate_lower_bound(logits, logits, masks, float(beta))
        if mass.min() > delta + margin:
            return float(beta)
        worst = int(np.argmin(mass))
    raise CertificationRefused("no inverse temperature satisfies the surrogate threshold", worst)


@dataclass
class SolverResult:
    alpha: np.ndarray
    global_lb: float
    hard_cert_rate: float
    per_state: list
    iteration: int
    history: list[dict]


def solve_box(certifier, delta: float, config: RashomonConfig,
              alpha0: np.ndarray | None = None) -> SolverResult:
    """Primal-dual box maximization against any bound oracle.

    ``certifier`` needs ``n_params``,
    ``evaluate(alpha, kappa, log_odds=True) -> (value, grad)`` and
    ``check(alpha) -> (exact_min, hard_rate, per_state)``. Gradient steps use
    the log-odds of the bound against ``logit(delta)``, which defines the same
    feasible set; acceptance always uses the exact probability bound.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    # aim slightly inside the feasible set so iterates settle on the accepting side
    target = float(np.log(delta / (1.0 - delta))) + config.dual_slack
    n = certifier.n_params
    lo_u, hi_u = np.log(config.alpha_floor), np.log(config.alpha_max)
    u = np.full(n, np.log(config.alpha_init)) if alpha0 is None else np.log(alpha0)
    u = np.clip(u, lo_u, hi_u)
    lam = config.lambda_init
    opt = Adam(lr=config.primal_lr)
    accepted = None
    history = []

    def try_accept(alpha, it):
        nonlocal accepted
        lb, rate, per_state = certifier.check(alpha)
        if not np.isfinite(lb):
            raise NumericalError(f"non-finite bound at iteration {it}")
        ok = lb > delta + config.accept_margin and rate >= config.hard_threshold
        history.append({"iteration": it, "global_lb": lb, "hard_cert_rate": rate,
                        "lambda": lam, "mean_log_alpha": float(np.log(alpha).mean()),
                        "accepted": bool(ok)})
        if ok:
            accepted = (alpha.copy(), lb, rate, per_state, it)
        return ok

    # start from a feasible box: shrink the initial widths until the exact check passes
    while not try_accept(np.exp(u), 0):
        if np.all(u <= lo_u):
            raise CertificationRefused("even the smallest box fails the certified threshold")
        u = np.maximum(u - np.log(10.0), lo_u)

    for it in range(1, config.n_iters + 1):
        alpha = np.exp(u)
        g, g_alpha = certifier.evaluate(alpha, config.softmin_kappa, log_odds=True)
        if not (np.isfinite(g) and np.all(np.isfinite(g_alpha))):
            raise NumericalError(f"non-finite bound or gradient at iteration {it}")
        # ascent on mean(log alpha) + lam * (g - target), through alpha = exp(u)
        grad_u = 1.0 / n + lam * g_alpha * alpha
        opt.step(u, -grad_u)
        np.clip(u, lo_u, hi_u, out=u)
        lam = max(0.0, lam - config.dual_lr * (g - target))
        if it % config.checkpoint_every == 0 or it == config.n_iters:
            try_accept(np.exp(u), it)

    alpha, lb, rate, per_state, it = accepted
    alpha, lb, rate, per_state = _refine_scale(certifier, alpha, lb, rate, per_state,
                                               delta, config)
    return SolverResult(alpha, lb, rate, per_state, it, history)


def _refine_scale(certifier, alpha, lb, rate, per_state, delta, config):
    """Largest uniform ``exp(s) * alpha`` (s >= 0) that still passes the exact check."""
    if config.refine_steps <= 0:
        return alpha, lb, rate, per_state

    def scaled(s):
        return np.clip(alpha * np.exp(s), config.alpha_floor, config.alpha_max)

    def feasible(s):
        res = certifier.check(scaled(s))
        ok = res[0] > delta + config.accept_margin and res[1] >= config.hard_threshold
        return ok, res

    best = (alpha, lb, rate, per_state)
    lo, hi = 0.0, None
    s = 0.125
    while hi is None:
        ok, res = feasible(s)
        if ok:
            lo, best = s, (scaled(s), *res)
            if np.all(scaled(s) >= config.alpha_max):
                return best
            s *= 2.0
        else:
            hi = s
    for _ in range(config.refine_steps):
        mid = 0.5 * (lo + hi)
        ok, res = feasible(mid)
        if ok:
            lo, best = mid, (scaled(mid), *res)
        else:
            hi = mid
    return best


def max_lid(center: ParamVector, dataset: SafetyDataset, config: RashomonConfig,
            beta: float | None = None) -> Certificate:
    """Certified box around ``center`` for the safety dataset, or ``CertificationRefused``."""
    delta = delta_star(dataset, config.min_acc_increment)
    if beta is None:
        beta = search_inverse_temperature(center, dataset, delta, config.beta_range,
                                          config.beta_grid, config.accept_margin)
    certifier = IbpCertifier(center, dataset, beta)
    res = solve_box(certifier, delta, config)
    keys = [e.state_key.to_json() for e in dataset.entries]
    return Certificate(Orthotope(center.copy(), res.alpha), beta, delta, res.per_state,
                       res.global_lb, res.hard_cert_rate, res.iteration, keys, res.history)


@dataclass
class VerificationReport:
    ok: bool
    global_lb: float
    delta_star: float
    hard_cert_rate: float
    margins: np.ndarray
    n_samples: int
    sample_violations: list[tuple[int, int]]
    failing_state: int | None
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "global_lb": self.global_lb,
            "delta_star": self.delta_star,
            "hard_cert_rate": self.hard_cert_rate,
            "margins": self.margins.tolist(),
            "n_samples": self.n_samples,
            "sample_violations": [list(v) for v in self.sample_violations],
            "failing_state": self.failing_state,
            "reason": self.reason,
        }


def verify_certificate(cert: Certificate, dataset: SafetyDataset, n_samples: int = 1000,
                       rng: np.random.Generator | None = None,
                       hard_threshold: float = 1.0) -> VerificationReport:
    """Recompute every bound from scratch and sample the box for greedy violations."""
    rng = np.random.default_rng(0) if rng is None else rng
    certifier = IbpCertifier(cert.center, dataset, cert.beta)
    lb, rate, per_state = certifier.check(cert.alpha)
    margins = np.array([b.surrogate_lb for b in per_state]) - cert.delta_star
    masks = dataset.masks
    X = dataset.states
    spec = cert.center.spec
    violations = []
    for i, theta in enumerate(cert.orthotope.sample(rng, n_samples)):
        greedy = np.argmax(forward(theta, spec, X), axis=1)
        bad = np.nonzero(~masks[np.arange(len(X)), greedy])[0]
        violations.extend((i, int(s)) for s in bad)
    failing, reason = None, ""
    if violations:
        failing, reason = violations[0][1], "sampled parameters chose an unsafe greedy action"
    elif not lb > cert.delta_star:
        failing, reason = int(np.argmin(margins)), "bound does not exceed the threshold"
    elif rate < hard_threshold:
        failing = next(i for i, b in enumerate(per_state) if not b.hard_cert)
        reason = "hard certificate fails"
    return VerificationReport(failing is None, lb, cert.delta_star, rate, margins,
                              n_samples, violations, failing, reason)
