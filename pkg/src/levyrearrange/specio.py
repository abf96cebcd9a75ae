"""Experiment spec files: loading, schema validation and construction of library objects."""

from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .grid import Grid, GridField, field_from_json, make_grid
from .levy import LevyTriple, triple_from_json
from .sampler import MCParams

__all__ = ["SpecError", "load_schema", "validate_spec", "load_spec", "build_grid", "build_field", "build_triple",
           "build_mc", "KINDS"]

KINDS = ("ri-verify", "bll-verify", "trap-verify", "sausage", "capacity", "cap-verify", "selftest")


class SpecError(ValueError):
    """Malformed or invalid experiment spec (exit code 2)."""


@lru_cache(maxsize=None)
def load_schema(name: str = "experiment") -> dict:
    text = resources.files("levyrearrange").joinpath("schema", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_spec(spec: dict) -> dict:
    """Schema check; returns a deep copy so callers may edit freely."""
    v = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(v.iter_errors(spec), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SpecError(f"schema violation at {where}: {e.message}")
    return copy.deepcopy(spec)


def load_spec(path) -> dict:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    if not isinstance(spec, dict):
        raise SpecError("spec must be a JSON object")
    spec = validate_spec(spec)
    spec["_base_dir"] = str(path.parent.resolve())
    return spec


def build_grid(rec: dict) -> Grid:
    if "d" not in rec or "L" not in rec:
        raise SpecError("grid needs d, L and m for this kind")
    return make_grid(int(rec["d"]), float(rec["L"]), int(rec["m"]))


def _vec(v, d: int, what: str) -> list:
    if len(v) != d:
        raise SpecError(f"{what} has length {len(v)}, expected {d}")
    return [float(x) for x in v]


def build_field(rec: dict, grid: Grid, base_dir: str = ".") -> GridField:
    """Rasterize a field record on ``grid``.

    ``box`` and ``ball`` take ``value`` inside and ``background`` elsewhere;
    ``boxes`` adds each box's ``value`` on top of the background.
    """
    kind = rec["type"]
    bg = float(rec.get("background", 0.0))
    d = grid.dim
    if kind in ("box", "ball"):
        if kind == "box":
            ind = grid.box_indicator(_vec(rec["lo"], d, "lo"), _vec(rec["hi"], d, "hi")).values
        else:
            ind = grid.ball_indicator(_vec(rec["center"], d, "center"), float(rec["radius"])).values
        v = float(rec.get("value", 1.0))
        return GridField(grid, np.where(ind > 0, v, bg), bg)
    if kind == "boxes":
        vals = np.full(grid.shape, bg)
        for b in rec["boxes"]:
            vals = vals + grid.box_indicator(_vec(b["lo"], d, "lo"), _vec(b["hi"], d, "hi"),
                                             float(b.get("value", 1.0))).values
        return GridField(grid, vals, bg)
    if kind == "constant":
        return grid.constant(float(rec["value"]), float(rec["background"]) if "background" in rec else None)
    if kind == "values":
        vals = np.array([np.inf if v == "inf" else float(v) for v in rec["values"]], dtype=float)
        if vals.size != grid.size:
            raise SpecError(f"values has {vals.size} entries, grid has {grid.size} cells")
        return GridField(grid, vals.reshape(grid.shape), bg)
    if kind == "file":
        p = Path(rec["path"])
        p = p if p.is_absolute() else Path(base_dir) / p
        try:
            f = field_from_json(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise SpecError(f"cannot load field {p}: {exc}") from exc
        if f.grid != grid:
            raise SpecError(f"field {p} lives on a different grid")
        return f if "background" not in rec else f.with_values(f.values, bg)
    raise SpecError(f"unknown field type {kind!r}")  # pragma: no cover - excluded by the schema


def build_triple(rec: dict, d: int) -> LevyTriple:
    T = triple_from_json(rec)
    if T.dim != d:
        raise SpecError(f"triple has dimension {T.dim}, grid has {d}")
    return T


def build_mc(rec: dict, seed: int, workers: int | None) -> MCParams:
    return MCParams(P=int(rec["P"]), K=int(rec["K"]), seed=int(seed), n=int(rec.get("n", 16)),
                    eps_n=None if "eps_n" not in rec else float(rec["eps_n"]), workers=workers)
