from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from safeadapt import kernels


def corner_oracle(x_lo, x_hi, w_lo, w_hi, b_lo, b_hi):
    """Sum over terms of the min / max of the four corner products."""
    N, n_in = x_lo.shape
    n_out = w_lo.shape[0]
    lo = np.tile(b_lo, (N, 1)).astype(float)
    hi = np.tile(b_hi, (N, 1)).astype(float)
    for n in range(N):
        for i in range(n_out):
            for j in range(n_in):
                c = [w * x for w in (w_lo[i, j], w_hi[i, j]) for x in (x_lo[n, j], x_hi[n, j])]
                lo[n, i] += min(c)
                hi[n, i] += max(c)
    return lo, hi


def random_problem(rng, N=4, n_in=7, n_out=5, zero_frac=0.0):
    a, b = rng.standard_normal((2, N, n_in))
    x_lo, x_hi = np.minimum(a, b), np.maximum(a, b)
    # a mix of sign classes: nonnegative, nonpositive, straddling, degenerate
    x_lo[:, 0] = np.abs(x_lo[:, 0])
    x_hi[:, 0] = x_lo[:, 0] + 0.5
    x_hi[:, 1] = -np.abs(x_hi[:, 1])
    x_lo[:, 1] = x_hi[:, 1] - 0.5
    x_hi[:, 2] = x_lo[:, 2]
    if zero_frac:
        z = rng.random((N, n_in)) < zero_frac
        x_lo[z] = x_hi[z] = 0.0
    c = rng.standard_normal((n_out, n_in))
    h = np.abs(rng.standard_normal((n_out, n_in))) * 0.3
    bc = rng.standard_normal(n_out)
    bh = np.abs(rng.standard_normal(n_out)) * 0.3
    return x_lo, x_hi, c - h, c + h, bc - bh, bc + bh


class TestForward:
    def test_matches_corner_oracle(self, backend):
        core = kernels.load_backend(backend)
        rng = np.random.default_rng(0)
        for _ in range(20):
            prob = random_problem(rng, zero_frac=0.2)
            lo, hi = core.interval_linear(*prob)
            elo, ehi = corner_oracle(*prob)
            np.testing.assert_allclose(lo, elo, atol=1e-12)
            np.testing.assert_allclose(hi, ehi, atol=1e-12)

    def test_backends_agree(self):
        if len(kernels.available_backends()) < 2:
            pytest.skip("compiled backend not built")
        rng = np.random.default_rng(1)
        prob = random_problem(rng, 16, 30, 20, zero_frac=0.3)
        a = kernels.load_backend("cython").interval_linear(*prob)
        b = kernels.load_backend("numpy").interval_linear(*prob)
        for u, v in zip(a, b):
            np.testing.assert_allclose(u, v, atol=1e-12)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.load_backend("fortran")


class TestBackward:
    @staticmethod
    def loss(core, prob, g_lo, g_hi):
        lo, hi = core.interval_linear(*prob)
        return float((g_lo * lo).sum() + (g_hi * hi).sum())

    def test_finite_differences(self, backend):
        core = kernels.load_backend(backend)
        rng = np.random.default_rng(3)
        h = 1e-7
        for _ in range(5):
            prob = list(random_problem(rng, 3, 6, 4))
            g_lo, g_hi = rng.standard_normal((2, 3, 4))
            gx_lo, gx_hi, gw_lo, gw_hi = core.interval_linear_backward(
                prob[0], prob[1], prob[2], prob[3], g_lo, g_hi, True)
            for k, analytic in ((2, gw_lo), (3, gw_hi)):
                for idx in np.ndindex(analytic.shape):
                    p, m = [a.copy() for a in prob], [a.copy() for a in prob]
                    p[k][idx] += h
                    m[k][idx] -= h
                    fd = (self.loss(core, p, g_lo, g_hi) - self.loss(core, m, g_lo, g_hi)) / (2 * h)
                    assert abs(fd - analytic[idx]) < 1e-5
            # inputs: perturb lo and hi together on degenerate entries to stay valid
            for k, analytic in ((0, gx_lo), (1, gx_hi)):
                for idx in np.ndindex(analytic.shape):
                    if idx[1] == 2:
                        continue
                    p, m = [a.copy() for a in prob], [a.copy() for a in prob]
                    p[k][idx] += h
                    m[k][idx] -= h
                    fd = (self.loss(core, p, g_lo, g_hi) - self.loss(core, m, g_lo, g_hi)) / (2 * h)
                    assert abs(fd - analytic[idx]) < 1e-5

    def test_backends_agree(self):
        if len(kernels.available_backends()) < 2:
            pytest.skip("compiled backend not built")
        rng = np.random.default_rng(4)
        prob = random_problem(rng, 10, 25, 12, zero_frac=0.3)
        g_lo, g_hi = rng.standard_normal((2, 10, 12))
        g_lo[:, :3] = 0.0
        for flags in ((True, False), (True, True)):
            a = kernels.load_backend("cython").interval_linear_backward(
                *prob[:4], g_lo, g_hi, *flags)
            b = kernels.load_backend("numpy").interval_linear_backward(
                *prob[:4], g_lo, g_hi, *flags)
            for u, v in zip(a, b):
                np.testing.assert_allclose(u, v, atol=1e-12)

    def test_skip_zero_inputs(self, backend):
        core = kernels.load_backend(backend)
        rng = np.random.default_rng(5)
        prob = random_problem(rng, 4, 8, 3, zero_frac=0.4)
        g_lo, g_hi = rng.standard_normal((2, 4, 3))
        full = core.interval_linear_backward(*prob[:4], g_lo, g_hi, True, False)
        skip = core.interval_linear_backward(*prob[:4], g_lo, g_hi, True, True)
        zero = (prob[0] == 0) & (prob[1] == 0)
        assert zero.any()
        for a, b in zip(full[:2], skip[:2]):
            np.testing.assert_allclose(a[~zero], b[~zero], atol=1e-12)
            assert not b[zero].any()
        for a, b in zip(full[2:], skip[2:]):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_pure_python_switch():
    env = dict(os.environ, SAFEADAPT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from safeadapt import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"
