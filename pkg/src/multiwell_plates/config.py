"""Experiment configuration: YAML with sections, strict keys and line-aware errors."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .density import MultiWellModel
from .functionals import MONOMIALS, LoadField, PlateState
from .geometry import Field, MidplaneGrid, isometry_lift_profile, parse_expr, profile_field
from .linalg import Well


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key:
            where += f"{key}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)
        self.key, self.line = key, line


SCHEMA = {
    "seed": None,
    "model": {"wells": None, "density": None, "q": None, "p": None, "well_scale": None},
    "grid": {"x1": None, "x2": None, "nodes": None},
    "regime": {"alpha": None, "h_list": None, "n3": None},
    "load": {"f1": None, "f2": None, "f3": None, "scale": None, "samples": None},
    "state": {"well": None, "u": None, "v": None, "profile": None, "lift": None, "limit": None},
    "converge": {"rel_tol": None, "abs_tol": None, "max_share": None},
    "minimize": {"regime": None, "method": None, "tol": None, "max_iter": None, "r_grid": None,
                 "profile_degree": None, "wells": None},
    "output": {"dir": None},
}
PROFILE_KEYS = {"g", "direction", "amplitude"}


def _collect_marks(node, path: str, marks: dict) -> None:
    """Record the 1-based source line of every key path; reject duplicate keys."""
    marks[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            sub = f"{path}.{k.value}".lstrip(".")
            if k.value in seen:
                raise ConfigError("duplicate key", sub, k.start_mark.line + 1)
            seen.add(k.value)
            marks[sub] = k.start_mark.line + 1
            _collect_marks(v, sub, marks)
            marks[sub] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _collect_marks(v, f"{path}[{i}]", marks)


def _check_keys(data: dict, schema: dict, prefix: str, marks: dict) -> None:
    for key, val in data.items():
        path = f"{prefix}.{key}".lstrip(".")
        if key not in schema:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(schema))})", path, marks.get(path))
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(val, dict):
                raise ConfigError("expected a section", path, marks.get(path))
            _check_keys(val, sub, path, marks)


@dataclass
class ExperimentConfig:
    data: dict
    marks: dict
    source: str = "<string>"

    # -- parsing ------------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", None,
                              None if mark is None else mark.line + 1) from exc
        marks: dict = {}
        if node is not None:
            _collect_marks(node, "", marks)
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping of sections", None, 1)
        _check_keys(data, SCHEMA, "", marks)
        cfg = cls(data, marks, source)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def _err(self, message, path):
        return ConfigError(message, path, self.marks.get(path))

    def get(self, path: str, default=None):
        cur = self.data
        for part in path.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur

    def _number(self, path, default=None, kind=float):
        val = self.get(path, default)
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise self._err("expected a number", path)
        if kind is int and int(val) != val:
            raise self._err("expected an integer", path)
        return kind(val)

    def validate(self) -> None:
        """Build every section once so cross-field errors surface at load time."""
        self.model()
        self.grid()
        if "regime" in self.data:
            self.regime()
        if "load" in self.data:
            self.load()
        if "state" in self.data:
            self.state()

    # -- sections ---------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self._number("seed", 0, int)

    def model(self) -> MultiWellModel:
        rows = self.get("model.wells")
        if not isinstance(rows, list) or not rows:
            raise self._err("expected a list of wells (nine numbers each)", "model.wells")
        wells = []
        for i, row in enumerate(rows):
            path = f"model.wells[{i}]"
            if not isinstance(row, list) or len(row) != 9 or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in row
            ):
                raise self._err(f"well {i} must be nine numbers (row-major 3x3)", path)
            try:
                wells.append(Well(np.array(row, dtype=float).reshape(3, 3)))
            except ValueError as exc:
                raise self._err(f"well {i}: {exc}", path) from exc
        kw = {}
        for key in ("q", "p", "well_scale"):
            val = self._number(f"model.{key}")
            if val is not None:
                kw[key] = val
        density = self.get("model.density", "green_lagrange")
        try:
            return MultiWellModel(tuple(wells), density=density, **kw)
        except ValueError as exc:
            raise self._err(str(exc), "model") from exc

    def grid(self) -> MidplaneGrid:
        b1 = self.get("grid.x1", [-0.5, 0.5])
        b2 = self.get("grid.x2", [-0.5, 0.5])
        nodes = self.get("grid.nodes", [101, 101])
        if isinstance(nodes, int):
            nodes = [nodes, nodes]
        for path, val in (("grid.x1", b1), ("grid.x2", b2), ("grid.nodes", nodes)):
            if not isinstance(val, list) or len(val) != 2:
                raise self._err("expected two numbers", path)
        try:
            return MidplaneGrid(tuple(map(float, b1)), tuple(map(float, b2)), int(nodes[0]), int(nodes[1]))
        except (TypeError, ValueError) as exc:
            raise self._err(str(exc), "grid") from exc

    def regime(self) -> dict:
        alpha = self._number("regime.alpha")
        if alpha is None:
            raise self._err("missing scaling exponent", "regime.alpha")
        if alpha < 2:
            raise self._err("scaling exponent must be at least 2", "regime.alpha")
        hs = self.get("regime.h_list", [0.1, 0.05, 0.025, 0.0125])
        if not isinstance(hs, list) or len(hs) < 4 or any(
            not isinstance(h, (int, float)) or h <= 0 for h in hs
        ) or any(b >= a for a, b in zip(hs, hs[1:])):
            raise self._err("expected at least four strictly decreasing positive thicknesses", "regime.h_list")
        n3 = self._number("regime.n3", 5, int)
        if n3 < 5 or n3 % 2 == 0:
            raise self._err("quadrature node count must be odd and at least 5", "regime.n3")
        return {"alpha": alpha, "h_list": [float(h) for h in hs], "n3": n3}

    def load(self) -> LoadField:
        grid = self.grid()
        samples = self.get("load.samples")
        if samples is not None:
            if any(self.get(f"load.{k}") is not None for k in ("f1", "f2", "f3")):
                raise self._err("give either polynomial components or a samples file", "load")
            path = Path(samples)
            if not path.is_absolute():
                path = Path(self.source).parent / path
            try:
                return LoadField.from_csv(path, grid)
            except (OSError, ValueError) as exc:
                raise self._err(str(exc), "load.samples") from exc
        comps = []
        for k in ("f1", "f2", "f3"):
            comp = self.get(f"load.{k}") or {}
            if not isinstance(comp, dict):
                raise self._err("expected a mapping from monomials to coefficients", f"load.{k}")
            for mono, c in comp.items():
                if mono not in MONOMIALS:
                    raise self._err(f"unknown monomial (allowed: {', '.join(MONOMIALS)})", f"load.{k}.{mono}")
                if isinstance(c, bool) or not isinstance(c, (int, float)):
                    raise self._err("expected a number", f"load.{k}.{mono}")
            comps.append(comp)
        scale = self._number("load.scale", 1.0)
        load = LoadField.from_polynomial(grid, comps, scale)
        if not load.mean_zero:
            raise self._err(f"load must have zero resultant (total {load.total.tolist()})", "load")
        return load

    def _profile(self, path):
        entry = self.get(path)
        if not isinstance(entry, dict) or "g" not in entry:
            raise self._err("expected a mapping with g, direction and optional amplitude", path)
        bad = set(entry) - PROFILE_KEYS
        if bad:
            raise self._err(f"unknown profile keys {sorted(bad)}", path)
        try:
            g = parse_expr(entry["g"])
        except ValueError as exc:
            raise self._err(str(exc), f"{path}.g") from exc
        n = np.asarray(entry.get("direction", [1.0, 0.0]), dtype=float)
        if n.shape != (2,) or np.linalg.norm(n) == 0:
            raise self._err("direction must be a nonzero 2-vector", f"{path}.direction")
        amp = float(entry.get("amplitude", 1.0))
        return g, n / np.linalg.norm(n), amp

    def state(self) -> PlateState:
        grid = self.grid()
        model = self.model()
        j = self._number("state.well", 0, int)
        if not 0 <= j < model.n_wells:
            raise self._err(f"well index out of range (0..{model.n_wells - 1})", "state.well")
        U = model.wells[j].U
        if self.get("state.lift") is not None:
            g, n, amp = self._profile("state.lift")
            # a slope-bound violation is a numerical failure, not a config error
            lift = isometry_lift_profile(g, n, U, grid, amp)
            return PlateState(j, y=lift.y, profile=(g * amp, n))
        if self.get("state.profile") is not None:
            g, n, amp = self._profile("state.profile")
            g = g * amp
            return PlateState(j, None, profile_field(g, n, U, grid), None, (g, n))
        u = self.get("state.u", ["0", "0"])
        v = self.get("state.v", "0")
        if not isinstance(u, list) or len(u) != 2:
            raise self._err("expected two expressions", "state.u")
        try:
            return PlateState(j, Field.from_expr(grid, [str(e) for e in u]), Field.from_expr(grid, str(v)))
        except ValueError as exc:
            raise self._err(str(exc), "state") from exc

    def output_dir(self, override=None) -> Path:
        return Path(override or self.get("output.dir", "out"))

    def with_changes(self, changes: dict) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        for path, val in changes.items():
            cur = data
            parts = path.split(".")
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = val
        return ExperimentConfig.from_text(yaml.safe_dump(data), self.source)
