from __future__ import annotations

import numpy as np
import pytest

from safeadapt import kernels
from safeadapt.policy_net import MlpSpec, ParamVector, orthogonal_init


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Every interval-kernel backend importable in this build."""
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_net(rng: np.random.Generator, input_dim=5, hidden=(6, 5), output_dim=4,
               scale=1.0) -> ParamVector:
    spec = MlpSpec(input_dim, hidden, output_dim)
    return ParamVector(spec, scale * rng.standard_normal(spec.n_params))


def init_net(rng: np.random.Generator, input_dim=18, hidden=(16, 16)) -> ParamVector:
    return orthogonal_init(MlpSpec(input_dim, hidden, 4), rng, output_gain=1.0)


@pytest.fixture
def make_net():
    return random_net


class ToyCertifier:
    """One parameter, logits ``(theta - alpha, 0)`` at worst, safe action 0."""

    n_params = 1

    def __init__(self, theta=2.0, beta=1.0):
        self.theta, self.beta = theta, beta

    def _p(self, alpha):
        return 1.0 / (1.0 + np.exp(-self.beta * (self.theta - alpha[0])))

    def evaluate(self, alpha, kappa=None, log_odds=False):
        if log_odds:
            return self.beta * (self.theta - alpha[0]), np.array([-self.beta])
        p = self._p(alpha)
        return p, np.array([-self.beta * p * (1 - p)])

    def check(self, alpha):
        return float(self._p(alpha)), float(self.theta - alpha[0] > 0), []


@pytest.fixture
def toy_certifier():
    return ToyCertifier


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """``record(criterion, ok, detail)`` prints one pass/fail line and keeps it for the summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
