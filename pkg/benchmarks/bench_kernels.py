"""Compare the compiled and numpy interval kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times the raw interval-affine forward/backward kernels on a layer of the
size used by the PoisonedApple actor, then one full bound-plus-subgradient
evaluation over the standard 4x4 FrozenLake safety dataset with a (64, 64)
actor, the inner step of the box solver.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from safeadapt import kernels
from safeadapt.envs import build_safety_dataset, make_env
from safeadapt.ibp import IbpCertifier
from safeadapt.policy_net import MlpSpec, orthogonal_init


def _layer_case(rng, batch=60, n_in=256, n_out=256):
    x = rng.normal(size=(batch, n_in))
    x_lo, x_hi = x - 0.1 * rng.random(x.shape), x + 0.1 * rng.random(x.shape)
    x_lo[:, ::3] = np.maximum(x_lo[:, ::3], 0.0)  # mix of sign cases
    w = rng.normal(size=(n_out, n_in))
    r = 0.01 * rng.random(w.shape)
    b = rng.normal(size=n_out)
    g = rng.normal(size=(batch, n_out))
    return (x_lo, x_hi, w - r, w + r, b, b), (g, -g)


def _time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    (x_lo, x_hi, w_lo, w_hi, b_lo, b_hi), (g_lo, g_hi) = _layer_case(rng)

    env = make_env("standard_4x4", 1)
    ds = build_safety_dataset(env)
    actor = orthogonal_init(MlpSpec(env.obs_dim, (64, 64), 4), rng)
    alpha = np.full(actor.spec.n_params, 1e-3)

    backends = kernels.available_backends()
    results = {}
    for name in backends:
        core = kernels.load_backend(name)
        cert = IbpCertifier(actor, ds, 10.0, backend=name)
        results[name] = {
            "layer forward": _time(lambda: core.interval_linear(x_lo, x_hi, w_lo, w_hi,
                                                                b_lo, b_hi), args.repeat),
            "layer backward": _time(lambda: core.interval_linear_backward(
                x_lo, x_hi, w_lo, w_hi, g_lo, g_hi), args.repeat),
            "bound + subgradient": _time(lambda: cert.evaluate(alpha, log_odds=True),
                                         args.repeat),
        }

    print(f"{'case':<22}" + "".join(f"{b:>14}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for case in results[backends[0]]:
        cells = "".join(f"{results[b][case] * 1e3:>12.2f}ms" for b in backends)
        extra = ""
        if len(backends) > 1:
            extra = f"   {results['numpy'][case] / results['cython'][case]:>6.1f}x"
        print(f"{case:<22}{cells}{extra}")
    if len(backends) == 1:
        print("compiled extension not built; run: python3 setup.py build_ext --inplace")


if __name__ == "__main__":
    main()
