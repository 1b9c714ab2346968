"""Safety and performance metrics, plus the per-seed table aggregator."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from .envs import GridEnv, SafetyDataset
from .policy_net import ParamVector
from .ppo import critical_state_rate, greedy_episode

METHODS = ("Source", "UnsafeAdapt", "EWC", "SafeAdapt")
METRIC_NAMES = ("phi_sc", "phi_traj", "total_reward", "success_rate")


@dataclass
class MetricRow:
    env: str
    layout: str
    seed: int
    method: str
    task: int
    phi_sc: float
    phi_traj: float
    total_reward: float
    success_rate: float
    provably_safe: bool
    status: str = "ok"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.task not in (1, 2):
            raise ValueError("task must be 1 or 2")
        for name in ("phi_sc", "phi_traj", "success_rate"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.provably_safe and self.method not in ("Source", "SafeAdapt"):
            raise ValueError("only Source and SafeAdapt can be provably safe")

    @classmethod
    def failed(cls, env, layout, seed, method, task, status) -> "MetricRow":
        nan = float("nan")
        return cls(env, layout, seed, method, task, nan, nan, nan, nan, False, status)


def critical_state_safety_rate(actor: ParamVector, dataset: SafetyDataset) -> float:
    """Fraction of dataset states whose greedy action is safe."""
    if len(dataset) == 0:
        raise ValueError("safety dataset is empty")
    return critical_state_rate(actor, dataset)


def trajectory_safety_rate(actor: ParamVector, env: GridEnv, episodes: int = 1) -> float:
    """Fraction of greedy episodes that never take an unsafe step."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    return float(np.mean([not greedy_episode(actor, env)[2] for _ in range(episodes)]))


def episode_metrics(actor: ParamVector, env: GridEnv, episodes: int = 1):
    """``(mean greedy return, success rate)``."""
    runs = [greedy_episode(actor, env) for _ in range(episodes)]
    return float(np.mean([r[0] for r in runs])), float(np.mean([r[1] for r in runs]))


def evaluate_policy(actor: ParamVector, env1: GridEnv, env2: GridEnv, dataset: SafetyDataset,
                    env_name: str, layout: str, seed: int, method: str,
                    provably_safe: bool, episodes: int = 1) -> list[MetricRow]:
    """One row per task. Safety metrics refer to the source task in both rows."""
    phi_sc = critical_state_safety_rate(actor, dataset)
    phi_traj = trajectory_safety_rate(actor, env1, episodes)
    rows = []
    for task, env in ((1, env1), (2, env2)):
        reward, success = episode_metrics(actor, env, episodes)
        rows.append(MetricRow(env_name, layout, seed, method, task, phi_sc, phi_traj,
                              reward, success, provably_safe))
    return rows


def _row_key(r: MetricRow):
    return (r.env, r.layout, r.seed, METHODS.index(r.method), r.task)


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(MetricRow)]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in sorted(rows, key=_row_key):
        d = asdict(r)
        for k in METRIC_NAMES:
            d[k] = repr(float(d[k]))
        writer.writerow(d)
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricRow]:
    out = []
    for d in csv.DictReader(io.StringIO(text)):
        out.append(MetricRow(
            d["env"], d["layout"], int(d["seed"]), d["method"], int(d["task"]),
            float(d["phi_sc"]), float(d["phi_traj"]), float(d["total_reward"]),
            float(d["success_rate"]), d["provably_safe"] == "True", d["status"],
        ))
    return out


def aggregate(rows: list[MetricRow]) -> list[dict]:
    """Mean and population std per (env, layout, method, task) over successful seeds."""
    groups: dict[tuple, list[MetricRow]] = {}
    for r in sorted(rows, key=_row_key):
        if r.status == "ok":
            groups.setdefault((r.env, r.layout, r.method, r.task), []).append(r)
    out = []
    for (env, layout, method, task), grp in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1], METHODS.index(kv[0][2]), kv[0][3])
    ):
        entry = {"env": env, "layout": layout, "method": method, "task": task,
                 "n_seeds": len(grp)}
        for name in METRIC_NAMES:
            vals = np.array([getattr(r, name) for r in grp], dtype=np.float64)
            entry[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out.append(entry)
    return out


def format_table(agg: list[dict]) -> str:
    lines = [f"{'method':<12}{'task':>5}  " + "  ".join(f"{m:>14}" for m in METRIC_NAMES)]
    for e in agg:
        cells = "  ".join(f"{e[m]['mean']:>6.2f} ± {e[m]['std']:<5.2f}" for m in METRIC_NAMES)
        lines.append(f"{e['method']:<12}{e['task']:>5}  {cells}")
    return "\n".join(lines)
