"""Command-line entry point: qbar, converge, rotations and minimize.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig
from .density import coercivity_constant
from .io import write_json
from .functionals import LoadField
from .minimizer import MinimizationError, MinimizationProblem, Settings, minimize_regime
from .recovery import build_recovery, convergence_report
from .relaxed import build_relaxed
from .rotations import maximize_over_wells

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("multiwell_plates")


def cmd_qbar(cfg: ExperimentConfig, out) -> dict:
    model = cfg.model()
    records = []
    for j in range(model.n_wells):
        form = build_relaxed(model, j)
        records.append({
            "well": j,
            "coefficients": form.coeffs.tolist(),
            "completion_map": form.lmap.tolist(),
            "coercivity": coercivity_constant(form.form, form.U),
        })
    payload = {"density": model.density, "wells": records}
    write_json(out / "qbar.json", payload)
    return payload


def cmd_converge(cfg: ExperimentConfig, out) -> dict:
    model = cfg.model()
    reg = cfg.regime()
    if "state" not in cfg.data:
        raise ConfigError("the converge command needs a state section", "state")
    state = cfg.state()
    family = build_recovery(state, build_relaxed(model, state.j), reg["alpha"])
    limit = cfg._number("state.limit")
    report = convergence_report(
        model, family, reg["h_list"], limit, n3=reg["n3"],
        rel_tol=cfg._number("converge.rel_tol", 0.05),
        abs_tol=cfg._number("converge.abs_tol", 1e-3),
        max_share=cfg._number("converge.max_share", 0.05),
    )
    report.to_csv(out / "convergence.csv")
    payload = report.to_dict()
    write_json(out / "convergence.json", payload)
    return payload


def cmd_rotations(cfg: ExperimentConfig, out) -> dict:
    if "load" not in cfg.data:
        raise ConfigError("the rotations command needs a load section", "load")
    result = maximize_over_wells(cfg.load(), cfg.model().wells)
    payload = result.to_dict()
    write_json(out / "rotations.json", payload)
    return payload


def _settings(cfg: ExperimentConfig) -> Settings:
    s = Settings()
    method = cfg.get("minimize.method", s.method)
    if method not in ("lbfgs", "gd"):
        raise ConfigError("method must be lbfgs or gd", "minimize.method", cfg.marks.get("minimize.method"))
    return Settings(
        method=method,
        tol=cfg._number("minimize.tol", s.tol),
        max_iter=cfg._number("minimize.max_iter", s.max_iter, int),
        r_grid=cfg._number("minimize.r_grid", s.r_grid, int),
        profile_degree=cfg._number("minimize.profile_degree", s.profile_degree, int),
    )


def cmd_minimize(cfg: ExperimentConfig, out) -> dict:
    regime = cfg.get("minimize.regime", "lvk")
    wells = cfg.get("minimize.wells")
    model = cfg.model()
    load = cfg.load() if "load" in cfg.data else LoadField.zero(cfg.grid())
    try:
        problem = MinimizationProblem(regime, model, load, None if wells is None else tuple(wells), _settings(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc), "minimize", cfg.marks.get("minimize")) from exc
    result = minimize_regime(problem)
    best = result.best
    result.write_trace(out / "trace.csv")
    best.state.to_csv(out / "best_state.csv")
    payload = {
        "regime": regime,
        "winners": list(result.winners),
        "best": {
            "well": best.j,
            "index": list(best.index),
            "value": best.value,
            "rotation": np.asarray(best.R).reshape(-1).tolist(),
            "grad_norm": best.grad_norm,
        },
        "ties": [{"well": c.j, "index": list(c.index)} for c in result.ties],
        "cells": result.table(),
    }
    if model.n_wells > 1 and regime != "kl_profile":
        per_well = {}
        for c in result.cells:
            per_well[c.j] = min(per_well.get(c.j, np.inf), c.value)
        payload["per_well"] = {str(k): v for k, v in per_well.items()}
    write_json(out / "minimize.json", payload)
    return payload


COMMANDS = {"qbar": cmd_qbar, "converge": cmd_converge, "rotations": cmd_rotations, "minimize": cmd_minimize}

NUMERIC_ERRORS = (ArithmeticError, np.linalg.LinAlgError, MinimizationError, RuntimeError, ValueError)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="multiwell-plates", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", help="YAML experiment configuration")
    parser.add_argument("--out", help="output directory (overrides output.dir)")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config)
        out = cfg.output_dir(args.out)
        payload = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {k: payload[k] for k in ("winners", "passed", "best") if k in payload}
    print(f"{args.command}: wrote results to {out}" + (f" {summary}" if summary else ""))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
