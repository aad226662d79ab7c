"""Run configurations, presets and run manifests.

A run config is JSON with three sections, ``network``, ``train`` and ``data``.
Partial configs are merged over the defaults and the fully materialized result
is what gets hashed and written to ``manifest.json``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Union

from . import __version__
from .data import SynthSpec
from .network import DESK, FULL, NetworkConfig
from .train import TrainConfig

DEFAULT_DATA = {"kind": "spheres", "count": 40, "shape": [32, 32, 32], "seed": 1}


def _base(network: NetworkConfig, data_kind: str) -> dict:
    return {"network": network.to_dict(), "train": TrainConfig().to_dict(),
            "data": dict(DEFAULT_DATA, kind=data_kind)}


PRESETS = {
    "desk-spheres": _base(DESK, "spheres"),
    "desk-tubes": _base(DESK, "tubes"),
    "full": {
        "network": FULL.to_dict(),
        "train": TrainConfig(steps=40000, patch=(96, 96, 96), lr=1e-4).to_dict(),
        "data": dict(DEFAULT_DATA, shape=[96, 96, 96]),
    },
}
PRESETS["desk"] = PRESETS["desk-spheres"]


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise KeyError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def resolve(spec: Union[str, Path, dict, None] = None, **overrides) -> dict:
    """Preset name, JSON path or dict -> validated, fully materialized config.

    A JSON file may name a preset to extend via a top-level ``"preset"`` key.
    ``overrides`` are ``section={key: value}`` patches applied last.
    """
    if spec is None:
        spec = "desk-spheres"
    if isinstance(spec, dict):
        raw = dict(spec)
    elif str(spec) in PRESETS:
        raw = {"preset": str(spec)}
    else:
        path = Path(spec)
        if not path.exists():
            raise FileNotFoundError(f"config {spec!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a file")
        raw = json.loads(path.read_text())
    preset = raw.pop("preset", "desk-spheres")
    if preset not in PRESETS:
        raise KeyError(f"unknown preset {preset!r}")
    cfg = _merge(PRESETS[preset], raw)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v})
    # round-trip through the typed configs to validate and normalize
    cfg["network"] = NetworkConfig.from_dict(cfg["network"]).to_dict()
    cfg["train"] = TrainConfig.from_dict(cfg["train"]).to_dict()
    data_spec(cfg)
    return cfg


def network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(cfg["network"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def data_spec(cfg: dict) -> SynthSpec:
    d = cfg["data"]
    return SynthSpec(kind=d["kind"], shape=tuple(d["shape"]), seed=int(d["seed"]))


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def write_manifest(out_dir, cfg: dict, command: str, seed: int) -> Path:
    """Write the single ``manifest.json`` of a run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "seed": seed,
                "version": __version__}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
