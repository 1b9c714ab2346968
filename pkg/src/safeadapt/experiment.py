"""Per-seed pipeline: source training, certification, adaptation, evaluation.

Artifacts live under ``<out>/<experiment>/<seed>/<stage>/``. Each stage
writes a manifest of file checksums plus the hash of the config sections it
depends on, so an interrupted run resumes from the first incomplete stage.
"""

from __future__ import annotations

import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .adapt import (
    MODES,
    AdaptConfig,
    ContainmentError,
    adapt_ewc,
    adapt_safe,
    adapt_unsafe,
    fisher_diag,
)
from .config import ExperimentConfig, stream
from .envs import (
    GridEnv,
    SafetyDataset,
    build_safety_dataset,
    enumerate_states,
    make_env,
)
from .ibp import Orthotope
from .metrics import MetricRow, aggregate, evaluate_policy, rows_from_csv, rows_to_csv
from .policy_net import ParamVector
from .ppo import critical_state_rate, greedy_episode, safety_finetune, train_source
from .rashomon import (
    Certificate,
    CertificationRefused,
    delta_star,
    max_lid,
    search_inverse_temperature,
    verify_certificate,
)

log = logging.getLogger(__name__)

METHOD_DIRS = {"UnsafeAdapt": "adapt_unsafe", "EWC": "adapt_ewc", "SafeAdapt": "adapt_safe"}
MODE_METHOD = {"safe": "SafeAdapt", "unsafe": "UnsafeAdapt", "ewc": "EWC"}


class StageError(RuntimeError):
    """A stage could not run; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def save_params(path: Path, params: ParamVector) -> None:
    storage.write_json(path, params.to_json(), "params")


def load_params(path: Path) -> ParamVector:
    return ParamVector.from_json(storage.read_json(path, "params"))


def load_dataset(path: Path) -> SafetyDataset:
    return SafetyDataset.from_json(storage.read_json(path, "dataset"))


def load_certificate(path: Path) -> Certificate:
    d = storage.read_json(path, "certificate")
    return Certificate.from_json(d, base_dir=Path(path).parent)


@dataclass
class SeedRun:
    cfg: ExperimentConfig
    seed: int
    out_root: Path

    @property
    def exp_dir(self) -> Path:
        return self.out_root / self.cfg.name

    @property
    def dir(self) -> Path:
        return self.exp_dir / str(self.seed)

    def stage_dir(self, stage: str) -> Path:
        return self.dir / stage

    def envs(self) -> tuple[GridEnv, GridEnv]:
        kw = self.cfg.env_kwargs
        return make_env(self.cfg.layout, 1, **kw), make_env(self.cfg.layout, 2, **kw)

    def _hash(self, stage: str) -> str:
        sections = {
            "source": ("ppo", "finetune"),
            "certify": ("ppo", "finetune", "rashomon", "verify_samples"),
            "adapt": ("ppo", "finetune", "rashomon", "verify_samples", "adapt"),
        }[stage]
        upstream = {
            "source": (),
            "certify": ("source/actor.json", "source/dataset.json"),
            "adapt": ("source/actor.json", "source/critic.json", "certify/certificate.json"),
        }[stage]
        # a rerun upstream stage invalidates everything built on its outputs
        digests = [storage.checksum(self.dir / f) if (self.dir / f).exists() else "-"
                   for f in upstream]
        return "-".join([self.cfg.section_hash(*sections), *(x[:16] for x in digests)])

    # ---- source ---------------------------------------------------------
    def source(self, force: bool = False) -> dict:
        d = self.stage_dir("source")
        h = self._hash("source")
        if not force and storage.stage_complete(d, h):
            return storage.read_json(d / "source.json", "source_status")
        env1, _ = self.envs()
        actor, critic, train_log = train_source(env1, self.cfg.hidden, self.cfg.ppo,
                                                stream(self.seed, "source"))
        dataset = build_safety_dataset(env1)
        status = {"status": "ok", "finetune_epochs": 0, "beta": None}
        if len(dataset) == 0:
            log.warning("seed %d: no safety-critical states; every parameter is safe", self.seed)
            ft_actor, ft_log = actor, []
        else:
            ft_actor, ft_log, reached = safety_finetune(
                actor, dataset, self.cfg.finetune, stream(self.seed, "finetune"), env1
            )
            status["finetune_epochs"] = len(ft_log) - 1
            try:
                status["beta"] = search_inverse_temperature(
                    ft_actor, dataset, delta_star(dataset), self.cfg.rashomon.beta_range,
                    self.cfg.rashomon.beta_grid)
            except CertificationRefused:
                reached = False
            if not reached:
                status["status"] = "assumption_failed"
        reward, success, _, _ = greedy_episode(ft_actor, env1)
        status.update({
            "phi_sc": critical_state_rate(ft_actor, dataset) if len(dataset) else 1.0,
            "task1_greedy_reward": reward,
            "task1_success": bool(success),
            "train_steps": train_log[-1]["step"] if train_log else 0,
        })
        d.mkdir(parents=True, exist_ok=True)
        save_params(d / "actor_pretrained.json", actor)
        save_params(d / "actor.json", ft_actor)
        save_params(d / "critic.json", critic)
        storage.write_json(d / "dataset.json", dataset.to_json(), "dataset")
        storage.write_csv(d / "train_log.csv", train_log)
        storage.write_csv(d / "finetune_log.csv", ft_log, ["epoch", "loss", "phi_sc"])
        storage.write_json(d / "source.json", status, "source_status")
        storage.write_manifest(d, "source", h)
        if status["status"] != "ok":
            log.warning("seed %d: source policy fails the surrogate assumption", self.seed)
        return status

    # ---- certify --------------------------------------------------------
    def certify(self, force: bool = False) -> dict:
        """Returns ``{"status": "certified"|"refused", ...}``."""
        src = self.stage_dir("source")
        if not (src / "source.json").exists():
            raise StageError("certify", f"seed {self.seed}: source checkpoint missing")
        d = self.stage_dir("certify")
        h = self._hash("certify")
        if not force and storage.stage_complete(d, h):
            if (d / "certificate.json").exists():
                return {"status": "certified", "path": str(d / "certificate.json")}
            return storage.read_json(d / "refusal.json", "refusal")
        for stale in ("certificate.json", "refusal.json", "bounds.json", "verification.json"):
            (d / stale).unlink(missing_ok=True)
        d.mkdir(parents=True, exist_ok=True)
        status = storage.read_json(src / "source.json", "source_status")
        center = load_params(src / "actor.json")
        dataset = load_dataset(src / "dataset.json")
        result = self._certify(center, dataset, status, d)
        storage.write_manifest(d, "certify", h)
        return result

    def _refuse(self, d: Path, reason: str, dataset: SafetyDataset, idx) -> dict:
        key = dataset.entries[idx].state_key.to_json() if idx is not None else None
        rec = {"status": "refused", "reason": reason, "failing_state": key}
        storage.write_json(d / "refusal.json", rec, "refusal")
        log.warning("seed %d: certification refused: %s", self.seed, reason)
        return rec

    def _certify(self, center, dataset, status, d) -> dict:
        if status["status"] != "ok":
            return self._refuse(d, "source policy does not satisfy the surrogate assumption",
                                dataset, None)
        if len(dataset) == 0:
            alpha = np.full(center.spec.n_params, self.cfg.rashomon.alpha_max)
            cert = Certificate(Orthotope(center, alpha), 1.0, 0.5, [], 1.0, 1.0, 0)
        else:
            try:
                cert = max_lid(center, dataset, self.cfg.rashomon)
            except CertificationRefused as exc:
                return self._refuse(d, exc.reason, dataset, exc.state_index)
            report = verify_certificate(cert, dataset, self.cfg.verify_samples,
                                        stream(self.seed, "certify"),
                                        self.cfg.rashomon.hard_threshold)
            storage.write_json(d / "verification.json", report.to_json(), "verification")
            if not report.ok:
                return self._refuse(d, f"verification failed: {report.reason}", dataset,
                                    report.failing_state)
        cert_json = cert.to_json("../source/actor.json")
        storage.write_json(d / "certificate.json", cert_json, "certificate")
        storage.write_json(d / "bounds.json", cert_json["per_state"], "bounds")
        storage.write_csv(d / "solver_log.csv", cert.history,
                          ["iteration", "global_lb", "hard_cert_rate", "lambda",
                           "mean_log_alpha", "accepted"])
        return {"status": "certified", "path": str(d / "certificate.json")}

    # ---- adapt ----------------------------------------------------------
    def adapt(self, mode: str, force: bool = False) -> dict:
        if mode not in MODES:
            raise ValueError(f"unknown adaptation mode {mode!r}")
        src = self.stage_dir("source")
        if not (src / "actor.json").exists():
            raise StageError(f"adapt_{mode}", f"seed {self.seed}: source checkpoint missing")
        source_status = storage.read_json(src / "source.json", "source_status")
        d = self.stage_dir(f"adapt_{mode}")
        h = self._hash("adapt")
        if not force and storage.stage_complete(d, h):
            return storage.read_json(d / "status.json", "adapt_status")
        # outputs from an outdated run must not survive a skip below
        shutil.rmtree(d, ignore_errors=True)
        if source_status["status"] != "ok":
            log.warning("seed %d: skipping %s adaptation after source failure", self.seed, mode)
            return {"mode": mode, "skipped": True}
        cert = None
        cert_path = self.stage_dir("certify") / "certificate.json"
        if mode == "safe":
            if not cert_path.exists():
                if (self.stage_dir("certify") / "refusal.json").exists():
                    log.warning("seed %d: certification refused; no SafeAdapt run", self.seed)
                    return {"mode": mode, "skipped": True}
                raise StageError("adapt_safe",
                                 f"seed {self.seed}: safe mode needs a verified certificate")
            cert = load_certificate(cert_path)
        actor = load_params(src / "actor.json")
        critic = load_params(src / "critic.json")
        dataset = load_dataset(src / "dataset.json")
        env1, env2 = self.envs()
        acfg = AdaptConfig(**{**self.cfg.adapt.to_json(), "mode": mode})
        rng = stream(self.seed, "adapt")
        d.mkdir(parents=True, exist_ok=True)
        if mode == "safe":
            new_actor, new_critic, rows = adapt_safe(actor, critic, cert, env2, acfg, rng, dataset)
        elif mode == "unsafe":
            new_actor, new_critic, rows = adapt_unsafe(actor, critic, env2, acfg, rng, dataset)
        else:
            states = np.array([env1.encode(s) for s in enumerate_states(env1)
                               if not env1.is_terminal(s)])
            fisher = fisher_diag(actor, states, acfg.fisher_cap, stream(self.seed, "fisher"))
            storage.write_json(d / "fisher.json", fisher.to_json(), "fisher")
            new_actor, new_critic, rows = adapt_ewc(actor, critic, fisher, env2, acfg, rng,
                                                    dataset)
        _, success2, _, _ = greedy_episode(new_actor, env2)
        status = {
            "mode": mode,
            "steps": rows[-1]["step"] if rows else 0,
            "contained": all(r["contained"] is True for r in rows) if mode == "safe" else None,
            "phi_sc_task1": critical_state_rate(new_actor, dataset) if len(dataset) else 1.0,
            "task2_success": bool(success2),
        }
        save_params(d / "actor.json", new_actor)
        save_params(d / "critic.json", new_critic)
        storage.write_csv(d / "log.csv", rows)
        storage.write_json(d / "status.json", status, "adapt_status")
        storage.write_manifest(d, f"adapt_{mode}", h)
        return status

    # ---- evaluate -------------------------------------------------------
    def evaluate(self) -> list[MetricRow]:
        env1, env2 = self.envs()
        env_name, layout, seed = env1.kind, self.cfg.layout, self.seed
        src = self.stage_dir("source")
        rows: list[MetricRow] = []
        if not (src / "actor.json").exists():
            log.warning("seed %d: source checkpoint missing", seed)
            return [MetricRow.failed(env_name, layout, seed, m, t, "missing")
                    for m in ("Source", "UnsafeAdapt", "EWC", "SafeAdapt") for t in (1, 2)]
        dataset = load_dataset(src / "dataset.json")
        certified = (self.stage_dir("certify") / "certificate.json").exists()
        source_ok = storage.read_json(src / "source.json", "source_status")["status"] == "ok"
        n = self.cfg.eval_episodes
        rows += evaluate_policy(load_params(src / "actor.json"), env1, env2, dataset,
                                env_name, layout, seed, "Source", certified, n)
        for method, sub in METHOD_DIRS.items():
            path = self.stage_dir(sub) / "actor.json"
            if not path.exists():
                status = "missing" if source_ok else "source_failed"
                if method == "SafeAdapt" and source_ok and not certified:
                    status = "refused"
                log.warning("seed %d: no %s checkpoint (%s)", seed, method, status)
                rows += [MetricRow.failed(env_name, layout, seed, method, t, status)
                         for t in (1, 2)]
                continue
            safe = False
            if method == "SafeAdapt" and certified:
                st = storage.read_json(self.stage_dir(sub) / "status.json", "adapt_status")
                safe = bool(st["contained"])
            rows += evaluate_policy(load_params(path), env1, env2, dataset, env_name, layout,
                                    seed, method, safe, n)
        d = self.stage_dir("evaluate")
        d.mkdir(parents=True, exist_ok=True)
        (d / "rows.csv").write_text(rows_to_csv(rows))
        return rows

    def pipeline(self, modes=MODES) -> dict:
        summary = {"seed": self.seed}
        summary["source"] = self.source()["status"]
        summary["certify"] = self.certify()["status"]
        for mode in modes:
            self.adapt(mode)
        summary["rows"] = self.evaluate()
        return summary


def _run_seed(args):
    cfg, seed, out_root, modes = args
    run = SeedRun(cfg, seed, Path(out_root))
    try:
        return run.pipeline(modes)
    except ContainmentError:
        raise
    except Exception as exc:  # recorded as failed rows, not an abort
        log.exception("seed %d failed", seed)
        env_kind = make_env(cfg.layout, 1, **cfg.env_kwargs).kind
        rows = [MetricRow.failed(env_kind, cfg.layout, seed, m, t, f"error: {exc}")
                for m in ("Source", "UnsafeAdapt", "EWC", "SafeAdapt") for t in (1, 2)]
        return {"seed": seed, "source": "error", "certify": "error", "rows": rows}


@dataclass
class ExperimentResult:
    rows: list[MetricRow]
    aggregate: list[dict]
    summaries: list[dict] = field(default_factory=list)

    @property
    def refused_seeds(self) -> list[int]:
        return [s["seed"] for s in self.summaries if s.get("certify") == "refused"]


def write_results(exp_dir: Path, rows: list[MetricRow]) -> list[dict]:
    agg = aggregate(rows)
    exp_dir.mkdir(parents=True, exist_ok=True)
    (exp_dir / "results.csv").write_text(rows_to_csv(rows))
    storage.write_json(exp_dir / "aggregate.json", agg, "aggregate")
    return agg


def read_results(exp_dir: Path) -> list[MetricRow]:
    text = Path(exp_dir, "results.csv").read_text()
    return rows_from_csv(text)


def run_experiment(cfg: ExperimentConfig, seeds: list[int] | None = None,
                   out_root: str | Path | None = None, modes=MODES,
                   jobs: int = 1) -> dict[str, ExperimentResult]:
    """Full pipeline for every seed (and every layout of a sweep)."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    out_root = Path(out_root or cfg.out_dir)
    configs = [cfg.for_layout(l) for l in cfg.layouts] if cfg.layouts else [cfg]
    results = {}
    for c in configs:
        tasks = [(c, s, str(out_root), tuple(modes)) for s in seeds]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                summaries = list(pool.map(_run_seed, tasks))
        else:
            summaries = [_run_seed(t) for t in tasks]
        rows = [r for s in summaries for r in s["rows"]]
        agg = write_results(out_root / c.name, rows)
        results[c.name] = ExperimentResult(rows, agg, summaries)
    return results
