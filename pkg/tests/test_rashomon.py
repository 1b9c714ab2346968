from __future__ import annotations

import json

import numpy as np
import pytest

from safeadapt.envs import build_safety_dataset, make_env
from safeadapt.ibp import EmptyDatasetError, IbpCertifier, Orthotope
from safeadapt.policy_net import MlpSpec, ParamVector, forward
from safeadapt.rashomon import (
    Certificate,
    CertificationRefused,
    RashomonConfig,
    delta_star,
    max_lid,
    search_inverse_temperature,
    solve_box,
    verify_certificate,
)


def table_policy(dataset, env, margin=2.0, unsafe_at=None) -> ParamVector:
    """Linear actor on the one-hot encoding: +margin on safe actions, -margin on unsafe."""
    spec = MlpSpec(env.obs_dim, (), 4)
    values = np.zeros(spec.n_params)
    W = values[:4 * env.obs_dim].reshape(4, env.obs_dim)
    for i, e in enumerate(dataset.entries):
        col = np.where(e.safe_mask, margin, -margin)
        if i == unsafe_at:
            col = -col
        W[:, e.state_key.cell] = col
    return ParamVector(spec, values)


@pytest.fixture(scope="module")
def fl_setup():
    env = make_env("standard_4x4", 1)
    ds = build_safety_dataset(env)
    return env, ds, table_policy(ds, env)


@pytest.fixture(scope="module")
def fl_cert(fl_setup):
    _, ds, center = fl_setup
    return max_lid(center, ds, RashomonConfig(n_iters=300))


class TestDeltaStar:
    @pytest.mark.parametrize("sizes,expected", [([1, 1, 1], 0.5), ([3, 1], 0.75), ([1, 2], 2 / 3)])
    def test_examples(self, sizes, expected):
        masks = np.zeros((len(sizes), 4), bool)
        for i, m in enumerate(sizes):
            masks[i, :m] = True
        assert delta_star(masks) == pytest.approx(expected, abs=1e-15)
        assert delta_star(masks, 0.01) == pytest.approx(expected + 0.01)

    def test_increasing(self):
        vals = []
        for m in range(1, 9):
            mk = np.zeros((1, 9), bool)
            mk[0, :m] = True
            vals.append(delta_star(mk))
            assert vals[-1] == pytest.approx(m / (1 + m))
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            delta_star(np.zeros((0, 4), bool))


class TestTemperatureSearch:
    def test_margin_one_qualifies(self, fl_setup):
        env, ds, _ = fl_setup
        c = table_policy(ds, env, margin=0.5)  # safe/unsafe gap 1.0
        beta = search_inverse_temperature(c, ds, delta_star(ds))
        assert 10.0 <= beta <= 1000.0
        grid = np.geomspace(10, 1000, 32)
        assert beta in grid
        # the previous grid point must not qualify
        k = int(np.argmin(np.abs(grid - beta)))
        if k > 0:
            with pytest.raises(CertificationRefused):
                search_inverse_temperature(c, ds, delta_star(ds), (grid[0], grid[k - 1]), k)

    def test_large_margin_takes_grid_minimum(self, fl_setup):
        env, ds, _ = fl_setup
        assert search_inverse_temperature(table_policy(ds, env, 5.0), ds, delta_star(ds)) == 10.0

    def test_unsafe_greedy_refused(self, fl_setup):
        env, ds, _ = fl_setup
        c = table_policy(ds, env, unsafe_at=2)
        with pytest.raises(CertificationRefused) as info:
            search_inverse_temperature(c, ds, delta_star(ds))
        assert info.value.state_index == 2


class TestSolver:
    def test_closed_form_toy(self, toy_certifier):
        res = solve_box(toy_certifier(2.0, 1.0), 0.6, RashomonConfig(n_iters=2000))
        assert abs(res.alpha[0] - (2 - np.log(1.5))) < 1e-2
        assert res.global_lb > 0.6

    def test_infeasible_toy_refused(self, toy_certifier):
        with pytest.raises(CertificationRefused):
            solve_box(toy_certifier(-1.0, 1.0), 0.6, RashomonConfig(n_iters=200))

    def test_bad_threshold(self, toy_certifier):
        with pytest.raises(ValueError):
            solve_box(toy_certifier(), 1.0, RashomonConfig(n_iters=10))

    @pytest.mark.parametrize("bad", [dict(n_iters=0), dict(beta_range=(0, 10)),
                                     dict(hard_threshold=0.0), dict(alpha_init=0.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            RashomonConfig(**bad)


class TestMaxLid:
    def test_certificate_postconditions(self, fl_setup, fl_cert):
        _, ds, _ = fl_setup
        cert = fl_cert
        assert cert.delta_star == delta_star(ds)
        assert cert.global_lb > cert.delta_star + 1e-9
        assert cert.hard_cert_rate == 1.0
        assert np.all(cert.alpha > 0)
        fresh = IbpCertifier(cert.center, ds, cert.beta).check(cert.alpha)
        assert fresh[0] > cert.delta_star and fresh[1] == 1.0
        assert cert.iteration % 100 == 0 or cert.iteration == 300

    def test_sampled_theorem_property(self, fl_setup, fl_cert):
        _, ds, _ = fl_setup
        report = verify_certificate(fl_cert, ds, 1000, np.random.default_rng(0))
        assert report.ok and report.sample_violations == []
        assert np.all(report.margins > 0)

    def test_scaling_down_stays_feasible(self, fl_setup, fl_cert):
        _, ds, _ = fl_setup
        cert = IbpCertifier(fl_cert.center, ds, fl_cert.beta)
        for c in (1.0, 0.7, 0.3, 0.01):
            lb, rate, _ = cert.check(c * fl_cert.alpha)
            assert lb > fl_cert.delta_star and rate == 1.0

    def test_determinism(self, fl_setup, fl_cert):
        _, ds, center = fl_setup
        again = max_lid(center, ds, RashomonConfig(n_iters=300))
        assert again.alpha.tobytes() == fl_cert.alpha.tobytes()
        assert again.global_lb == fl_cert.global_lb

    def test_unsafe_center_refused(self, fl_setup):
        env, ds, _ = fl_setup
        with pytest.raises(CertificationRefused):
            max_lid(table_policy(ds, env, unsafe_at=0), ds, RashomonConfig(n_iters=100))

    def test_zero_box_verifies(self, fl_setup):
        _, ds, center = fl_setup
        cert = Certificate(Orthotope(center, np.zeros(center.spec.n_params)), 10.0,
                           delta_star(ds), [], 0.0, 1.0, 0)
        assert verify_certificate(cert, ds, 50).ok

    def test_inflated_box_rejected_with_state(self, fl_setup, fl_cert):
        _, ds, _ = fl_setup
        bad = Certificate(Orthotope(fl_cert.center, 50.0 * fl_cert.alpha), fl_cert.beta,
                          fl_cert.delta_star, [], 0.0, 1.0, 0)
        report = verify_certificate(bad, ds, 200, np.random.default_rng(1))
        assert not report.ok
        assert 0 <= report.failing_state < len(ds) and report.reason

    def test_json_round_trip(self, fl_setup, fl_cert, tmp_path):
        _, ds, center = fl_setup
        center.save(tmp_path / "actor.json")
        fl_cert.save(tmp_path / "cert.json", "actor.json")
        d = json.loads((tmp_path / "cert.json").read_text())
        assert set(d) == {"beta", "delta_star", "alpha", "center_checkpoint", "global_lb",
                          "hard_cert_rate", "iteration", "per_state"}
        back = Certificate.from_json(d, base_dir=tmp_path)
        assert back.alpha.tobytes() == fl_cert.alpha.tobytes()
        assert back.center.values.tobytes() == center.values.tobytes()
        assert back.per_state[0].surrogate_lb == fl_cert.per_state[0].surrogate_lb
        assert back.state_keys == fl_cert.state_keys

    def test_greedy_safe_everywhere_under_samples(self, fl_setup, fl_cert):
        _, ds, _ = fl_setup
        rng = np.random.default_rng(5)
        for theta in fl_cert.orthotope.sample(rng, 200):
            greedy = np.argmax(forward(theta, fl_cert.center.spec, ds.states), axis=1)
            assert ds.masks[np.arange(len(ds)), greedy].all()
