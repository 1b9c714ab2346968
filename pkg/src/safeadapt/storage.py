"""Schema-checked persistence and per-stage manifests for resumable runs.

Every JSON artifact is validated against its schema when written and again
when read. A stage directory is complete when its ``manifest.json`` lists
checksums that still match the files on disk and the config hash it was
produced with.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import jsonschema

_NUM = {"type": "number"}
_NUM_ARRAY = {"type": "array", "items": _NUM}
_BOOL_ARRAY = {"type": "array", "items": {"type": "boolean"}}
_STATE_KEY = {
    "type": "object",
    "required": ["cell", "task", "apples"],
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("cell", "task", "apples")},
}
_STATE_BOUNDS = {
    "type": "object",
    "required": ["logit_lo", "logit_hi", "surrogate_lb", "hard_cert"],
    "properties": {
        "state_key": {"anyOf": [_STATE_KEY, {"type": "null"}]},
        "logit_lo": _NUM_ARRAY,
        "logit_hi": _NUM_ARRAY,
        "surrogate_lb": {"type": "number", "minimum": 0, "maximum": 1},
        "hard_cert": {"type": "boolean"},
    },
}

SCHEMAS = {
    "params": {
        "type": "object",
        "required": ["spec", "layout", "values"],
        "properties": {
            "spec": {
                "type": "object",
                "required": ["input_dim", "hidden", "output_dim", "activation"],
            },
            "layout": {"type": "array"},
            "values": _NUM_ARRAY,
        },
    },
    "dataset": {
        "type": "object",
        "required": ["env", "task", "entries"],
        "properties": {
            "env": {"type": "string"},
            "task": {"type": "integer"},
            "entries": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["state_key", "encoding", "safe_mask"],
                    "properties": {"state_key": _STATE_KEY, "encoding": _NUM_ARRAY,
                                   "safe_mask": _BOOL_ARRAY},
                },
            },
        },
    },
    "certificate": {
        "type": "object",
        "required": ["beta", "delta_star", "alpha", "center_checkpoint", "global_lb",
                     "hard_cert_rate", "iteration", "per_state"],
        "properties": {
            "beta": {"type": "number", "exclusiveMinimum": 0},
            "delta_star": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "alpha": {"type": "array", "items": {"type": "number", "minimum": 0}},
            "center_checkpoint": {"type": "string"},
            "global_lb": {"type": "number"},
            "hard_cert_rate": {"type": "number", "minimum": 0, "maximum": 1},
            "iteration": {"type": "integer", "minimum": 0},
            "per_state": {"type": "array", "items": _STATE_BOUNDS},
        },
    },
    "bounds": {"type": "array", "items": _STATE_BOUNDS},
    "refusal": {
        "type": "object",
        "required": ["status", "reason", "failing_state"],
        "properties": {
            "status": {"const": "refused"},
            "reason": {"type": "string"},
            "failing_state": {"anyOf": [_STATE_KEY, {"type": "null"}]},
        },
    },
    "verification": {
        "type": "object",
        "required": ["ok", "global_lb", "delta_star", "hard_cert_rate", "margins",
                     "n_samples", "sample_violations", "failing_state"],
    },
    "source_status": {
        "type": "object",
        "required": ["status", "phi_sc", "task1_greedy_reward", "finetune_epochs"],
        "properties": {"status": {"enum": ["ok", "assumption_failed"]}},
    },
    "fisher": {
        "type": "object",
        "required": ["values", "n_states", "cap"],
        "properties": {"values": {"type": "array", "items": {"type": "number", "minimum": 0}}},
    },
    "adapt_status": {
        "type": "object",
        "required": ["mode", "steps", "contained", "phi_sc_task1"],
    },
    "aggregate": {
        "type": "array",
        "items": {
            "type": "object",
            "required": ["env", "layout", "method", "task", "n_seeds", "phi_sc", "phi_traj",
                         "total_reward", "success_rate"],
        },
    },
    "manifest": {
        "type": "object",
        "required": ["stage", "config_hash", "files"],
        "properties": {
            "stage": {"type": "string"},
            "config_hash": {"type": "string"},
            "files": {"type": "object", "additionalProperties": {"type": "string"}},
        },
    },
}


class SchemaError(ValueError):
    pass


def _clean(obj):
    """JSON has no NaN/inf; store them as null."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def validate(obj, kind: str) -> None:
    try:
        jsonschema.validate(obj, SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"{kind}: {exc.message}") from exc


def write_json(path: str | Path, obj, kind: str) -> Path:
    obj = _clean(obj)
    validate(obj, kind)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1))
    tmp.replace(path)
    return path


def read_json(path: str | Path, kind: str):
    obj = json.loads(Path(path).read_text())
    validate(obj, kind)
    return obj


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", restval="")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def read_csv(path: str | Path, required: list[str] | None = None) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(required or ()) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(stage_dir: Path, stage: str, config_hash: str) -> None:
    files = {p.name: checksum(p) for p in sorted(stage_dir.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    write_json(stage_dir / "manifest.json",
               {"stage": stage, "config_hash": config_hash, "files": files}, "manifest")


def stage_complete(stage_dir: Path, config_hash: str) -> bool:
    mpath = stage_dir / "manifest.json"
    if not mpath.exists():
        return False
    try:
        m = read_json(mpath, "manifest")
    except (SchemaError, json.JSONDecodeError):
        return False
    if m["config_hash"] != config_hash:
        return False
    for name, digest in m["files"].items():
        p = stage_dir / name
        if not p.exists() or checksum(p) != digest:
            return False
    return True
