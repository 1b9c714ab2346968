"""Experiment configuration: YAML presets, validation and desk-scale overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .adapt import AdaptConfig
from .envs import LayoutError, load_layout
from .ppo import FinetuneConfig, PpoConfig
from .rashomon import RashomonConfig


class ConfigError(ValueError):
    pass


def _section_schema(cls) -> dict:
    return {"type": "object", "properties": {f.name: {} for f in fields(cls)},
            "additionalProperties": False}


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "layout", "hidden", "seeds"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "layout": {"type": "string"},
        "layouts": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "env_kwargs": {"type": "object"},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out_dir": {"type": "string"},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "verify_samples": {"type": "integer", "minimum": 0},
        "desk_scale": {"type": "boolean"},
        "desk_overrides": {"type": "object"},
        "ppo": _section_schema(PpoConfig),
        "finetune": _section_schema(FinetuneConfig),
        "rashomon": _section_schema(RashomonConfig),
        "adapt": _section_schema(AdaptConfig),
    },
}


@dataclass
class ExperimentConfig:
    name: str
    layout: str
    hidden: tuple[int, ...]
    seeds: list[int]
    ppo: PpoConfig
    finetune: FinetuneConfig
    rashomon: RashomonConfig
    adapt: AdaptConfig
    env_kwargs: dict = field(default_factory=dict)
    out_dir: str = "runs"
    eval_episodes: int = 1
    verify_samples: int = 1000
    desk_scale: bool = False
    layouts: list[str] | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def for_layout(self, layout: str) -> "ExperimentConfig":
        """Single-layout copy used by sweeps; output goes to ``<name>-<layout>``."""
        raw = copy.deepcopy(self.raw)
        raw.pop("layouts", None)
        raw["layout"] = layout
        raw["name"] = f"{self.name}-{layout}"
        raw["desk_scale"] = False
        return from_dict(raw)

    def section_hash(self, *names: str) -> str:
        """Checksum of selected config sections; stages re-run when it changes."""
        blob = {n: self.raw.get(n) for n in names}
        blob["layout"] = self.layout
        blob["hidden"] = list(self.hidden)
        blob["env_kwargs"] = self.env_kwargs
        text = json.dumps(blob, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d: dict | None, section: str):
    try:
        return cls(**(d or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def from_dict(raw: dict, desk_scale: bool | None = None) -> ExperimentConfig:
    """Validate a config mapping and build the typed configuration."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config does not match schema: {exc.message}") from exc
    use_desk = raw.get("desk_scale", False) if desk_scale is None else desk_scale
    merged = copy.deepcopy(raw)
    if use_desk:
        merged = _deep_merge(merged, raw.get("desk_overrides", {}))
        merged["desk_scale"] = True
    merged.pop("desk_overrides", None)
    layouts = merged.get("layouts") or [merged["layout"]]
    for name in layouts:
        for task in (1, 2):
            try:
                load_layout(name, task)
            except (LayoutError, FileNotFoundError, OSError) as exc:
                raise ConfigError(f"layout {name!r} task {task} unavailable: {exc}") from exc
    cfg = ExperimentConfig(
        name=merged["name"],
        layout=merged["layout"],
        hidden=tuple(merged["hidden"]),
        seeds=list(merged["seeds"]),
        ppo=_build(PpoConfig, merged.get("ppo"), "ppo"),
        finetune=_build(FinetuneConfig, merged.get("finetune"), "finetune"),
        rashomon=_build(RashomonConfig, merged.get("rashomon"), "rashomon"),
        adapt=_build(AdaptConfig, merged.get("adapt"), "adapt"),
        env_kwargs=dict(merged.get("env_kwargs", {})),
        out_dir=merged.get("out_dir", "runs"),
        eval_episodes=merged.get("eval_episodes", 1),
        verify_samples=merged.get("verify_samples", 1000),
        desk_scale=bool(merged.get("desk_scale", False)),
        layouts=merged.get("layouts"),
        raw=merged,
    )
    return cfg


def load_config(path: str | Path, desk_scale: bool | None = None) -> ExperimentConfig:
    """Load a YAML file path or the name of a shipped preset."""
    p = Path(path)
    if not p.exists():
        preset = resources.files("safeadapt.presets") / f"{path}.yaml"
        if not preset.is_file():
            raise ConfigError(f"no config file or preset named {path!r}")
        text = preset.read_text()
    else:
        text = p.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return from_dict(raw, desk_scale)


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("safeadapt.presets").iterdir()
                  if p.name.endswith(".yaml"))


def parse_seeds(text: str) -> list[int]:
    """``"0..9"``, ``"0,3,5"`` or ``"2"`` to a list of seeds."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or any(s < 0 for s in out):
        raise ConfigError(f"bad seed list {text!r}")
    return out


STAGE_STREAMS = {"source": 1, "finetune": 2, "certify": 3, "adapt": 4, "fisher": 5}


def stream(seed: int, stage: str) -> np.random.Generator:
    """Independent generator per (seed, stage), derived by SeedSequence spawn keys."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGE_STREAMS[stage],)))
