"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 certification
refused for at least one seed, 4 containment invariant breached.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import storage
from .adapt import MODES, ContainmentError
from .config import (
    ConfigError,
    ExperimentConfig,
    list_presets,
    load_config,
    parse_seeds,
)
from .experiment import (
    SeedRun,
    StageError,
    load_certificate,
    load_dataset,
    run_experiment,
    write_results,
)
from .metrics import format_table
from .rashomon import verify_certificate

EXIT_OK, EXIT_CONFIG, EXIT_REFUSED, EXIT_BREACH = 0, 2, 3, 4

log = logging.getLogger("safeadapt")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True,
                   help=f"YAML file or preset name ({', '.join(list_presets())})")
    p.add_argument("--seeds", help="seed list, e.g. 0..9 or 0,2,5 (default: from config)")
    p.add_argument("--out", help="output root directory (default: from config)")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=None,
                       help="apply the config's reduced budgets")
    scale.add_argument("--full-scale", dest="desk_scale", action="store_false",
                       help="ignore the config's reduced budgets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train-source", "train and safety-finetune source policies"),
                            ("certify", "compute and verify certified parameter boxes"),
                            ("evaluate", "evaluate all methods and aggregate results"),
                            ("pipeline", "run every stage in order (resumable)")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "pipeline":
            p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
    p = sub.add_parser("adapt", help="downstream adaptation")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p = sub.add_parser("verify-cert", help="re-verify a certificate file from scratch")
    p.add_argument("--cert", required=True, help="certificate JSON")
    p.add_argument("--dataset", help="safety dataset JSON (default: ../source/dataset.json)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _runs(args, cfg: ExperimentConfig) -> list[SeedRun]:
    seeds = parse_seeds(args.seeds) if args.seeds else cfg.seeds
    out = Path(args.out or cfg.out_dir)
    configs = [cfg.for_layout(l) for l in cfg.layouts] if cfg.layouts else [cfg]
    return [SeedRun(c, s, out) for c in configs for s in seeds]


def _cmd_train_source(args, cfg) -> int:
    for run in _runs(args, cfg):
        st = run.source()
        print(f"{run.cfg.name} seed {run.seed}: source {st['status']} "
              f"(phi_sc={st['phi_sc']:.3f}, task1 reward={st['task1_greedy_reward']:.2f}) "
              f"-> {run.stage_dir('source')}")
    return EXIT_OK


def _cmd_certify(args, cfg) -> int:
    code = EXIT_OK
    for run in _runs(args, cfg):
        res = run.certify()
        if res["status"] == "certified":
            print(f"{run.cfg.name} seed {run.seed}: certified -> {res['path']}")
        else:
            code = EXIT_REFUSED
            print(f"{run.cfg.name} seed {run.seed}: refused ({res['reason']}, "
                  f"state {res['failing_state']})")
    return code


def _cmd_adapt(args, cfg) -> int:
    for run in _runs(args, cfg):
        st = run.adapt(args.mode)
        if st.get("skipped"):
            print(f"{run.cfg.name} seed {run.seed}: {args.mode} adaptation skipped")
        else:
            print(f"{run.cfg.name} seed {run.seed}: {args.mode} steps={st['steps']} "
                  f"phi_sc_task1={st['phi_sc_task1']:.3f} task2_success={st['task2_success']}")
    return EXIT_OK


def _cmd_evaluate(args, cfg) -> int:
    by_exp: dict[Path, list] = {}
    for run in _runs(args, cfg):
        by_exp.setdefault(run.exp_dir, []).extend(run.evaluate())
    for exp_dir, rows in by_exp.items():
        agg = write_results(exp_dir, rows)
        print(f"== {exp_dir.name}\n{format_table(agg)}")
    return EXIT_OK


def _cmd_pipeline(args, cfg) -> int:
    seeds = parse_seeds(args.seeds) if args.seeds else None
    results = run_experiment(cfg, seeds, args.out, jobs=args.jobs)
    code = EXIT_OK
    for name, res in results.items():
        print(f"== {name}\n{format_table(res.aggregate)}")
        if res.refused_seeds:
            print(f"certification refused for seeds {res.refused_seeds}")
            code = EXIT_REFUSED
    return code


def _cmd_verify(args) -> int:
    cert_path = Path(args.cert)
    ds_path = Path(args.dataset) if args.dataset else cert_path.parent.parent / "source" / "dataset.json"
    cert = load_certificate(cert_path)
    dataset = load_dataset(ds_path)
    report = verify_certificate(cert, dataset, args.samples, np.random.default_rng(args.seed))
    out = report.to_json()
    out["margins"] = {"min": float(report.margins.min()) if len(report.margins) else None}
    print(json.dumps(out, indent=1))
    return EXIT_OK if report.ok else EXIT_REFUSED


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify-cert":
            return _cmd_verify(args)
        cfg = load_config(args.config, args.desk_scale)
        handler = {"train-source": _cmd_train_source, "certify": _cmd_certify,
                   "adapt": _cmd_adapt, "evaluate": _cmd_evaluate,
                   "pipeline": _cmd_pipeline}[args.command]
        return handler(args, cfg)
    except ContainmentError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_BREACH
    except (ConfigError, StageError, storage.SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
