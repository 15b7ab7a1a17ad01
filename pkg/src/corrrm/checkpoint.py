"""Versioned JSON checkpoints of the shared state.

Floats are written with ``repr`` so every value round-trips bit-exactly.
Nothing time-dependent is stored, so equal fits give byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .model import GlobalState, LocalState, ModelConfig, Variant

FORMAT = "corrrm-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_to_dict(config: ModelConfig) -> dict:
    out = asdict(config)
    out["variant"] = Variant(config.variant).value
    return out


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def save_checkpoint(path, gs: GlobalState, config: ModelConfig, locals_: LocalState | None = None,
                    extra: dict | None = None):
    doc = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "code_version": __version__,
        "config": config_to_dict(config),
        "extra": extra or {},
        "global": {
            "atom_shape": _arr(gs.atom_shape),
            "atom_rate": _arr(gs.atom_rate),
            "sticks": _arr(gs.sticks),
            "scale": float(gs.scale),
            "locations": _arr(gs.locations),
            "alpha": float(gs.alpha),
            "c": float(gs.c),
        },
    }
    if locals_ is not None:
        doc["locals"] = {"shape_x": _arr(locals_.shape_x), "rate_x": _arr(locals_.rate_x),
                         "d": _arr(locals_.d), "mu": _arr(locals_.mu)}
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    """Return (GlobalState, ModelConfig, LocalState or None, extra)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {doc.get('format_version')} "
                              f"is not supported (expected {FORMAT_VERSION})")
    config = config_from_dict(doc["config"])
    g = doc["global"]
    T, D = config.T, config.D
    try:
        gs = GlobalState(np.array(g["atom_shape"], dtype=float).reshape(T, -1),
                         np.array(g["atom_rate"], dtype=float).reshape(T, -1),
                         np.array(g["sticks"], dtype=float).reshape(T), float(g["scale"]),
                         np.array(g["locations"], dtype=float).reshape(T, D),
                         float(g["alpha"]), float(g["c"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed global state ({exc})") from None
    ls = None
    if "locals" in doc:
        loc = doc["locals"]
        ls = LocalState(np.array(loc["shape_x"], dtype=float).reshape(-1, T),
                        np.array(loc["rate_x"], dtype=float).reshape(-1, T),
                        np.array(loc["d"], dtype=float).reshape(-1, D), np.array(loc["mu"], dtype=float))
    return gs, config, ls, doc.get("extra", {})
