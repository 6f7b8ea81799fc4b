"""Scenario runner: ``ckdyn run``, ``ckdyn verify`` and ``ckdyn list-scenarios``.

Scenario files are YAML mappings::

    name: fig3_free_trajectories          # required, used for the output folder
    description: free packet trajectories
    params:   {mass: 1, hbar: 1, gamma: 0, epsilon: 1}
    potential: {kind: free}               # or {kind: linear, a: -0.5} / {kind: harmonic, omega0: 0.5}
    gaussian: {sigma0: 1, x0: -10, p0: 5}
    ensemble: {seeding: offsets, offsets: [-3, -2, -1, 0, 1, 2, 3]}
    detector: 0.0                         # needed by arrival / sweep outputs
    time: {t_end: 20, dt: 0.01}           # output sampling
    sweep: {gamma: [0, 0.1, 0.2], epsilon: [1, 0.5, 0]}   # product of axes, optional
    cells: [{gamma: 0.1, a: 0}, ...]      # explicit cells, combined with the epsilon axis
    outputs: [trajectories, arrival, momentum, theta, sweep, fields, residuals]
    arrival_mode: renormalized            # all-arrive | renormalized | both
    momentum_times: [0, 5]
    solver: {dx: 0.01, dt: 0.001, scheme: cn4, sample_times: [1, 2]}
    verify: {closed_form_trajectories: {tol: 1.0e-6}, noncrossing: {}}

Every output is written as CSV with ``#``-prefixed metadata lines and 12
significant digits; binary field dumps are written only for ``fields``.
A ``manifest.json`` lists every file with its SHA-256 checksum and echoes
the scenario.

Exit codes: 0 success, 1 failed verification, 2 scenario/config error,
3 physics validation error, 4 numerical failure. Errors are reported as a
single JSON record on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import analytic as an
from . import pde, stats
from . import trajectories as tr
from .core import (
    CKError,
    Free,
    GaussianSpec,
    Grid,
    Harmonic,
    Linear,
    ModelParams,
    NumericalError,
    ValidationError,
    potential_from_dict,
    validate_params,
)

log = logging.getLogger("ckdyn")

OUTPUT_ENV = "CKDYN_OUTPUT_ROOT"
OUTPUT_KINDS = ("trajectories", "arrival", "momentum", "theta", "sweep", "fields", "residuals")
SCENARIO_KEYS = {"name", "description", "params", "potential", "gaussian", "ensemble", "detector",
                 "time", "sweep", "cells", "outputs", "arrival_mode", "momentum_times", "solver",
                 "verify"}
DIGITS = 12


class ScenarioError(CKError):
    """Malformed scenario file (syntax, unknown keys, missing fields)."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line


# --------------------------------------------------------------------------
# scenario
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str
    params: ModelParams
    potential: object
    gaussian: GaussianSpec
    ensemble: tr.EnsembleSpec = tr.EnsembleSpec()
    detector: Optional[float] = None
    t_end: float = 20.0
    dt: float = 0.01
    cells: tuple = ()
    outputs: tuple = ("trajectories",)
    arrival_mode: str = "renormalized"
    momentum_times: tuple = ()
    solver: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    description: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        n = int(round(self.t_end / self.dt))
        return np.linspace(0.0, n * self.dt, n + 1)

    def cell_params(self, cell: dict) -> ModelParams:
        return self.params.replace(**{k: float(v) for k, v in cell.items() if k in ("gamma", "epsilon")})

    def cell_potential(self, cell: dict):
        if "a" in cell:
            return stats.potential_for(cell["a"])
        return self.potential

    def cell_label(self, cell: dict) -> str:
        parts = [f"g{cell['gamma']:g}", f"e{cell['epsilon']:g}"]
        if "a" in cell:
            parts.append(f"a{cell['a']:g}")
        return "_".join(parts)


def _section(d, key, what, required=False):
    v = d.get(key)
    if v is None:
        if required:
            raise ScenarioError(f"missing required section '{key}'", field=key)
        return {}
    if not isinstance(v, dict):
        raise ScenarioError(f"'{key}' must be a mapping ({what})", field=key)
    return v


def _float_list(v, key):
    if not isinstance(v, (list, tuple)) or not v:
        raise ScenarioError(f"'{key}' must be a non-empty list of numbers", field=key)
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise ScenarioError(f"'{key}' must contain numbers only", field=key) from None


def parse_scenario(d: dict) -> Scenario:
    """Build a :class:`Scenario` from a parsed mapping.

    Schema problems raise :class:`ScenarioError`; physically invalid values
    raise the validation errors of the core module.
    """
    if not isinstance(d, dict):
        raise ScenarioError("scenario must be a mapping")
    unknown = set(d) - SCENARIO_KEYS
    if unknown:
        raise ScenarioError(f"unknown top-level key(s): {', '.join(sorted(unknown))}",
                            field=sorted(unknown)[0])
    name = d.get("name")
    if not isinstance(name, str) or not name:
        raise ScenarioError("missing required 'name'", field="name")
    p = _section(d, "params", "model parameters")
    allowed = {"mass", "hbar", "gamma", "epsilon"}
    if set(p) - allowed:
        raise ScenarioError(f"unknown params key(s): {sorted(set(p) - allowed)}", field="params")
    params = ModelParams(**{k: float(v) for k, v in p.items()})
    pot_d = _section(d, "potential", "potential", required=True)
    try:
        potential = potential_from_dict(pot_d)
    except ValidationError as exc:
        if any(w in str(exc) for w in ("unknown", "requires", "mapping")):
            raise ScenarioError(str(exc), field="potential") from None
        raise
    g = _section(d, "gaussian", "initial packet", required=True)
    if set(g) - {"sigma0", "x0", "p0"}:
        raise ScenarioError(f"unknown gaussian key(s): {sorted(set(g) - {'sigma0', 'x0', 'p0'})}",
                            field="gaussian")
    gaussian = GaussianSpec(**{k: float(v) for k, v in g.items()})
    try:
        ensemble = tr.EnsembleSpec.from_dict(_section(d, "ensemble", "ensemble"))
    except ValidationError as exc:
        raise ScenarioError(str(exc), field="ensemble") from None
    tm = _section(d, "time", "time grid")
    if set(tm) - {"t_end", "dt"}:
        raise ScenarioError("time accepts t_end and dt only", field="time")
    t_end, dt = float(tm.get("t_end", 20.0)), float(tm.get("dt", 0.01))
    if not (t_end > 0 and dt > 0):
        raise ScenarioError("time.t_end and time.dt must be > 0", field="time")
    outputs = d.get("outputs", ["trajectories"])
    if not isinstance(outputs, list) or set(outputs) - set(OUTPUT_KINDS):
        raise ScenarioError(f"outputs must be a list drawn from {OUTPUT_KINDS}", field="outputs")
    detector = d.get("detector")
    if detector is not None:
        detector = float(detector)
    if ({"arrival", "sweep"} & set(outputs)) and detector is None:
        raise ScenarioError("arrival and sweep outputs need a detector position", field="detector")
    mode = d.get("arrival_mode", "renormalized")
    if mode not in stats.MODES + ("both",):
        raise ScenarioError("arrival_mode must be all-arrive, renormalized or both", field="arrival_mode")
    sweep = _section(d, "sweep", "sweep axes")
    if set(sweep) - {"gamma", "epsilon", "a"}:
        raise ScenarioError("sweep accepts gamma, epsilon and a", field="sweep")
    eps_axis = _float_list(sweep["epsilon"], "sweep.epsilon") if "epsilon" in sweep else [params.epsilon]
    cells = []
    if d.get("cells") is not None:
        if not isinstance(d["cells"], list):
            raise ScenarioError("'cells' must be a list of mappings", field="cells")
        for c in d["cells"]:
            if not isinstance(c, dict) or set(c) - {"gamma", "epsilon", "a"}:
                raise ScenarioError("each cell may set gamma, epsilon and a", field="cells")
            for e in ([c["epsilon"]] if "epsilon" in c else eps_axis):
                cell = {"gamma": float(c.get("gamma", params.gamma)), "epsilon": float(e)}
                if "a" in c:
                    cell["a"] = float(c["a"])
                cells.append(cell)
    else:
        gam = _float_list(sweep["gamma"], "sweep.gamma") if "gamma" in sweep else [params.gamma]
        avals = _float_list(sweep["a"], "sweep.a") if "a" in sweep else [None]
        for gv, e, a in itertools.product(gam, eps_axis, avals):
            cell = {"gamma": gv, "epsilon": e}
            if a is not None:
                cell["a"] = a
            cells.append(cell)
    if any("a" in c for c in cells) and isinstance(potential, Harmonic):
        raise ScenarioError("an acceleration axis needs a free or linear potential", field="sweep")
    sc = Scenario(
        name=name, params=params, potential=potential, gaussian=gaussian, ensemble=ensemble,
        detector=detector, t_end=t_end, dt=dt, cells=tuple(cells), outputs=tuple(outputs),
        arrival_mode=mode, momentum_times=tuple(_float_list(d["momentum_times"], "momentum_times"))
        if d.get("momentum_times") else (),
        solver=_section(d, "solver", "PDE solver"), verify=_section(d, "verify", "verification checks"),
        description=str(d.get("description", "")), raw=d,
    )
    for c in sc.cells:
        validate_params(sc.cell_params(c), sc.cell_potential(c))
    return sc


def load_scenario(path_or_name: str) -> Scenario:
    """Load a scenario from a file path or the name of a bundled scenario."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = _bundled().get(path_or_name.removesuffix(".yaml"))
        if bundled is None:
            raise ScenarioError(f"no such scenario file or bundled scenario: {path_or_name}")
        text = bundled.read_text()
    else:
        text = path.read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line=line) from None
    return parse_scenario(d)


def _bundled() -> dict:
    root = resources.files("ckdynamics") / "scenarios"
    return {p.name.removesuffix(".yaml"): p for p in root.iterdir() if p.name.endswith(".yaml")}


# --------------------------------------------------------------------------
# computations per cell (pure; run in worker processes)
# --------------------------------------------------------------------------

@dataclass
class Artifact:
    name: str
    columns: list
    data: np.ndarray
    meta: dict
    binary: Optional[bytes] = None


def _trajectory_ensemble(sc: Scenario, cell: dict, t_grid=None):
    params, pot = sc.cell_params(cell), sc.cell_potential(cell)
    x0, w = tr.seed_ensemble(sc.ensemble, sc.gaussian)
    ts = sc.times if t_grid is None else t_grid
    try:
        ens = tr.integrate_guidance(tr.AnalyticVelocity(pot, sc.gaussian, params), x0, ts, w)
        method = "guidance-rk4"
    except tr.SingularVelocityField:
        ens = tr.integrate_newton(pot, sc.gaussian, params, x0, ts, w, max_step=min(1e-3, sc.dt))
        method = "newton-rk4"
    return ens, method


def _cell_meta(sc, cell):
    params, pot = sc.cell_params(cell), sc.cell_potential(cell)
    return {"scenario": sc.name, "params": params.to_dict(), "potential": pot.to_dict(),
            "gaussian": sc.gaussian.to_dict()}


def _run_cell(sc: Scenario, cell: dict) -> list:
    out = []
    label = sc.cell_label(cell)
    params, pot = sc.cell_params(cell), sc.cell_potential(cell)
    meta = _cell_meta(sc, cell)
    ens = None
    if "trajectories" in sc.outputs or "momentum" in sc.outputs:
        ens, method = _trajectory_ensemble(sc, cell)
    if "trajectories" in sc.outputs:
        n = ens.n_particles
        cols = ["t"] + [f"x_{i}" for i in range(n)] + [f"v_{i}" for i in range(n)]
        m = dict(meta, integrator=method, x_init=ens.x_init.tolist(), weights=ens.weights.tolist(),
                 noncrossing=tr.check_noncrossing(ens).to_dict() if n > 1 else None)
        out.append(Artifact(f"trajectories_{label}.csv", cols, np.column_stack([ens.t, ens.x, ens.v]), m))
    if "arrival" in sc.outputs:
        modes = stats.MODES if sc.arrival_mode == "both" else (sc.arrival_mode,)
        for mode in modes:
            try:
                d = stats.arrival_distribution_current(pot, sc.gaussian, params, sc.detector, mode=mode)
            except (stats.ZeroFlux, stats.IncompleteArrival) as exc:
                out.append(Artifact(f"arrival_{mode}_{label}.csv", ["t", "density"], np.empty((0, 2)),
                                    dict(meta, mode=mode, unreachable=str(exc))))
                continue
            m = dict(meta, X=d.X, mode=mode, route="current", normalization=d.normalization,
                     mean=d.mean, variance=d.variance, peak=d.peak(), fwhm=d.fwhm())
            out.append(Artifact(f"arrival_{mode}_{label}.csv", ["t", "density"],
                                np.column_stack([d.t, d.density]), m))
    if "momentum" in sc.outputs:
        for t in sc.momentum_times:
            md = stats.momentum_distribution(pot, sc.gaussian, params, t)
            h = stats.momentum_histogram_from_ensemble(ens, t, mass=params.mass)
            m = dict(meta, t=t, kind=md.kind, center=md.center, width=md.width,
                     ensemble_mean=h.center, ensemble_std=h.width)
            if md.kind == "gaussian":
                p = md.center + md.width * np.linspace(-6, 6, 481)
                data, cols = np.column_stack([p, md.pdf(p)]), ["p", "density"]
            else:
                data, cols = np.array([[md.center, 1.0]]), ["p", "mass"]
            out.append(Artifact(f"momentum_{label}_t{t:g}.csv", cols, data, m))
    if "fields" in sc.outputs or "residuals" in sc.outputs:
        out.extend(_field_outputs(sc, cell, meta, label))
    return out


def _solver_setup(sc: Scenario, cell: dict, sample_times):
    s = sc.solver
    params, pot = sc.cell_params(cell), sc.cell_potential(cell)
    dx, dt = float(s.get("dx", 0.01)), float(s.get("dt", 1e-3))
    t_end = max(sample_times)
    grid = an.auto_grid(pot, sc.gaussian, params, t_end, dx, margin=float(s.get("margin", 12)))
    cfg = pde.SolverConfig(grid, dt, round(math.ceil(t_end / dt - 1e-9) * dt, 12),
                           scheme=s.get("scheme", "cn4"), boundary=s.get("boundary", "box"),
                           sample_times=tuple(sample_times))
    return cfg, params, pot


def _field_outputs(sc, cell, meta, label):
    out = []
    params, pot = sc.cell_params(cell), sc.cell_potential(cell)
    if params.epsilon == 0:
        return [Artifact(f"fields_{label}.csv", ["x"], np.empty((0, 1)),
                         dict(meta, skipped="no wave equation to solve at epsilon = 0"))]
    dt = float(sc.solver.get("dt", 1e-3))
    req = [float(t) for t in sc.solver.get("sample_times", [1.0, 2.0])]
    stencil = sorted({round(t + k * dt, 12) for t in req for k in range(-2, 3) if t + k * dt >= 0})
    cfg, params, pot = _solver_setup(sc, cell, stencil)
    ev = pde.solve_scaled(cfg, params, pot, an.wavefunction(pot, sc.gaussian, params, cfg.grid, 0.0))
    fields = [ev.at(t) for t in req]
    if "fields" in sc.outputs:
        x = cfg.grid.x
        cols = ["x"] + [f"rho_t{t:g}" for t in req]
        data = np.column_stack([x] + [f.density for f in fields])
        out.append(Artifact(f"fields_{label}.csv", cols, data,
                            dict(meta, grid=cfg.grid.to_dict(), dt=cfg.dt, scheme=cfg.scheme,
                                 max_norm_drift=ev.max_norm_drift)))
        with tempfile.TemporaryDirectory() as tmp:
            pth = pde.write_snapshots(Path(tmp) / "f.ckw", fields, params)
            blob = pth.read_bytes()
        out.append(Artifact(f"fields_{label}.ckw", [], np.empty(0), {}, binary=blob))
    if "residuals" in sc.outputs:
        pols = pde.polar_series(ev, params)
        rows = []
        for t in req:
            idx = [int(np.argmin(np.abs(ev.times - (t + k * dt)))) for k in range(-2, 3)]
            if min(idx) < 0 or t - 2 * dt < 0:
                continue
            r = pde.equation_residuals([pols[i] for i in idx], params, pot)
            rows.append([t, r.continuity[0], r.hamilton_jacobi[0], r.classical_hj[0]])
        out.append(Artifact(f"residuals_{label}.csv", ["t", "continuity", "hamilton_jacobi", "classical_hj"],
                            np.array(rows).reshape(-1, 4), dict(meta, dx=cfg.grid.dx, dt=cfg.dt)))
    return out


def _theta_artifact(sc: Scenario) -> Artifact:
    if not isinstance(sc.potential, Harmonic):
        raise ScenarioError("theta output needs a harmonic potential", field="outputs")
    ts = sc.times
    cols, data = ["t"], [ts]
    for c in sc.cells:
        th = an.dressing_factor(sc.potential, sc.gaussian, sc.cell_params(c), ts)
        cols.append(f"Theta_{sc.cell_label(c)}")
        data.append(np.asarray(th))
    return Artifact("theta.csv", cols, np.column_stack(data),
                    {"scenario": sc.name, "potential": sc.potential.to_dict(), "gaussian": sc.gaussian.to_dict()})


def _sweep_artifacts(sc: Scenario, jobs: int) -> list:
    gam = sorted({c["gamma"] for c in sc.cells})
    eps = sorted({c["epsilon"] for c in sc.cells}, reverse=True)
    avals = sorted({c.get("a", 0.0) for c in sc.cells}, reverse=True)
    modes = stats.MODES if sc.arrival_mode == "both" else (sc.arrival_mode,)
    out = []
    for mode in modes:
        tab = stats.mean_arrival_sweep(sc.gaussian, sc.params, gam, eps, avals, sc.detector, mode, jobs)
        keys = sorted(tab.tau)
        cols = ["gamma"] + [f"tau_eps{e:g}_a{a:g}" for e, a in keys]
        data = np.column_stack([tab.gamma] + [tab.tau[k] for k in keys])
        meta = {"scenario": sc.name, "mode": mode, "X": sc.detector, "gaussian": sc.gaussian.to_dict(),
                "nondecreasing_in_gamma": {f"eps{e:g}_a{a:g}": v for (e, a), v in tab.nondecreasing_in_gamma().items()},
                "unreachable": {f"g{g:g}_e{e:g}_a{a:g}": msg for (e, a, g), msg in tab.failures.items()}}
        out.append(Artifact(f"sweep_{mode}.csv", cols, data, meta))
    return out


def _cell_worker(args):
    sc, cell = args
    return _run_cell(sc, cell)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def write_artifact(outdir: Path, art: Artifact) -> Path:
    path = outdir / art.name
    if art.binary is not None:
        path.write_bytes(art.binary)
        return path
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(art.meta, sort_keys=True, default=_json_default) + "\n")
        fh.write(",".join(art.columns) + "\n")
        if art.data.size:
            np.savetxt(fh, np.asarray(art.data, dtype=float), delimiter=",", fmt=f"%.{DIGITS - 1}e")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def output_root(out: Optional[str], name: str) -> Path:
    if out:
        return Path(out)
    return Path(os.environ.get(OUTPUT_ENV, "ckdyn-out")) / name


def run_scenario(sc: Scenario, outdir: Path, jobs: int = 1) -> dict:
    """Compute every requested output and write files plus ``manifest.json``."""
    outdir.mkdir(parents=True, exist_ok=True)
    per_cell = set(sc.outputs) & {"trajectories", "arrival", "momentum", "fields", "residuals"}
    arts = []
    if per_cell:
        if jobs > 1 and len(sc.cells) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                for res in ex.map(_cell_worker, [(sc, c) for c in sc.cells]):
                    arts.extend(res)
        else:
            for c in sc.cells:
                arts.extend(_run_cell(sc, c))
    if "theta" in sc.outputs:
        arts.append(_theta_artifact(sc))
    if "sweep" in sc.outputs:
        arts.extend(_sweep_artifacts(sc, jobs))
    files = []
    for art in arts:
        p = write_artifact(outdir, art)
        files.append({"path": art.name, "sha256": _sha256(p), "bytes": p.stat().st_size})
    manifest = {
        "scenario": sc.name,
        "version": __version__,
        "parameters": sc.raw,
        "cells": list(sc.cells),
        "files": files,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return manifest


# --------------------------------------------------------------------------
# verification checks
# --------------------------------------------------------------------------

def _row(check, cell, value, tol, passed, detail=""):
    return {"check": check, "cell": cell, "value": None if value is None else float(value),
            "tol": tol, "passed": bool(passed), "detail": detail}


def check_closed_form_trajectories(sc, opts):
    tol = float(opts.get("tol", 1e-6))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        ens, method = _trajectory_ensemble(sc, c)
        ref = tr.closed_form_ensemble(pot, sc.gaussian, params, ens.x_init, ens.t, ens.weights)
        err = float(np.max(np.abs(ens.x - ref.x)))
        rows.append(_row("closed_form_trajectories", sc.cell_label(c), err, tol, err < tol, method))
    return rows


def check_noncrossing(sc, opts):
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        ens, _ = _trajectory_ensemble(sc, c)
        rep = tr.check_noncrossing(ens)
        if isinstance(pot, Harmonic) and params.epsilon == 0:
            # classical oscillator paths meet at focal points
            rows.append(_row("noncrossing", sc.cell_label(c), rep.min_gap, None, not rep.ordered,
                             "classical oscillator: crossing expected"))
        else:
            rows.append(_row("noncrossing", sc.cell_label(c), rep.min_gap, 0.0, rep.ordered))
    return rows


def check_gap_law(sc, opts):
    tol = float(opts.get("tol", 1e-8))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        if isinstance(pot, Harmonic):
            continue
        ens, _ = _trajectory_ensemble(sc, c)
        gaps = tr.neighbour_gaps(ens)
        ratio = gaps / gaps[0]
        sig = an.complex_width(pot, sc.gaussian, params, ens.t).sigma / sc.gaussian.sigma0
        err = float(np.max(np.abs(ratio - np.asarray(sig)[:, None])))
        rows.append(_row("gap_law", sc.cell_label(c), err, tol, err < tol))
    return rows


def check_localization(sc, opts):
    tol = float(opts.get("tol", 1e-3))
    t_end = float(opts.get("t_end", 200.0))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        if not isinstance(pot, Free) or params.gamma == 0:
            continue
        ens, _ = _trajectory_ensemble(sc, c, np.linspace(0.0, t_end, int(t_end / 0.05) + 1))
        err = float(np.max(np.abs(ens.x[-1] - an.localization_point(sc.gaussian, params, ens.x_init))))
        rows.append(_row("localization", sc.cell_label(c), err, tol, err < tol))
    return rows


def check_pde_vs_analytic(sc, opts):
    tol = float(opts.get("tol", 1e-4))
    times = [float(t) for t in opts.get("times", [1.0, 2.0, 5.0])]
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        if params.epsilon == 0:
            continue
        cfg, params, pot = _solver_setup(sc, c, times)
        ev = pde.solve_scaled(cfg, params, pot, an.wavefunction(pot, sc.gaussian, params, cfg.grid, 0.0))
        err = 0.0
        for t in times:
            ref = an.wavefunction_values(pot, sc.gaussian, params, cfg.grid.x, t)
            d = np.abs(ev.at(t).values) - np.abs(ref)
            err = max(err, math.sqrt(float(np.sum(d * d)) * cfg.grid.dx))
        rows.append(_row("pde_vs_analytic", sc.cell_label(c), err, tol, err < tol))
    return rows


def check_equivalence(sc, opts):
    dtol = float(opts.get("density_tol", 1e-4))
    ptol = float(opts.get("phase_tol", 1e-3))
    t_end = float(opts.get("t_end", 2.0))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        if params.epsilon == 0:
            continue
        cfg, params, pot = _solver_setup(sc, c, [t_end])
        cfg = pde.SolverConfig(cfg.grid, cfg.dt, cfg.t_end, scheme=cfg.scheme, sample_times=(0.0, t_end))
        psi0 = an.wavefunction(pot, sc.gaussian, params, cfg.grid, 0.0)
        scaled = pde.solve_scaled(cfg, params, pot, psi0)
        trans = pde.solve_transition(cfg, params, pot, pde.transition_initial(psi0, params))
        a, b = scaled.at(t_end), trans.at(t_end)
        dens = math.sqrt(float(np.sum((a.density - b.density) ** 2)) * cfg.grid.dx)
        mapped = pde.map_transition_series(trans, params)[-1]
        bulk = np.abs(a.values) > 1e-4
        ph = np.angle(mapped.values * np.conj(a.values))[bulk]
        ph0 = np.angle(np.sum(mapped.values[bulk] * np.conj(a.values[bulk])))
        dev = float(np.max(np.abs(np.angle(np.exp(1j * (ph - ph0))))))
        glob = abs(float(ph0))
        label = sc.cell_label(c)
        rows.append(_row("equivalence_density", label, dens, dtol, dens < dtol))
        rows.append(_row("equivalence_phase_map", label, max(dev, glob), ptol, max(dev, glob) < ptol,
                         f"max iterations {max(trans.iterations) if trans.iterations else 0}"))
    return rows


def check_propagator_quadrature(sc, opts):
    tol = float(opts.get("tol", 1e-6))
    n = int(opts.get("n_points", 20))
    rng = np.random.default_rng(int(opts.get("seed", 1)))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        if params.epsilon == 0:
            continue
        worst = 0.0
        for _ in range(n):
            t = float(rng.uniform(0.3, sc.t_end))
            xt = float(an.classical_path(pot, sc.gaussian, params, t).x)
            sig = float(an.complex_width(pot, sc.gaussian, params, t).sigma)
            x = xt + sig * float(rng.uniform(-2, 2))
            try:
                num = complex(an.convolve_propagator(pot, sc.gaussian, params, x, t)[0])
            except an.CausticTime:
                continue
            ref = complex(an.wavefunction_values(pot, sc.gaussian, params, x, t))
            worst = max(worst, abs(num - ref) / abs(ref))
        rows.append(_row("propagator_quadrature", sc.cell_label(c), worst, tol, worst < tol))
    return rows


def check_arrival_dual_route(sc, opts):
    tol = float(opts.get("tol", 0.01))
    n = int(opts.get("n_particles", 10000))
    rows = []
    for c in sc.cells:
        params, pot = sc.cell_params(c), sc.cell_potential(c)
        cur = stats.arrival_distribution_current(pot, sc.gaussian, params, sc.detector)
        x0, w = tr.seed_ensemble(tr.EnsembleSpec(n), sc.gaussian)
        ts = np.linspace(0.0, float(opts.get("t_end", 3 * cur.mean)), int(opts.get("n_times", 3001)))
        ens = tr.integrate_guidance(tr.AnalyticVelocity(pot, sc.gaussian, params), x0, ts, w)
        asym = an.asymptotic_position(pot, sc.gaussian, params, x0)
        trj = stats.arrival_distribution_trajectories(ens, sc.detector, asymptotes=asym)
        rel = abs(trj.mean / cur.mean - 1)
        rows.append(_row("arrival_dual_route", sc.cell_label(c), rel, tol, rel < tol))
    return rows


def check_sweep_monotone(sc, opts):
    gam = sorted({c["gamma"] for c in sc.cells})
    eps = sorted({c["epsilon"] for c in sc.cells})
    avals = sorted({c.get("a", 0.0) for c in sc.cells})
    tab = stats.mean_arrival_sweep(sc.gaussian, sc.params, gam, eps, avals, sc.detector, sc.arrival_mode
                                   if sc.arrival_mode != "both" else "renormalized")
    rows = []
    for (e, a), ok in tab.nondecreasing_in_gamma().items():
        rows.append(_row("sweep_nondecreasing_in_gamma", f"e{e:g}_a{a:g}", None, None, ok))
    for a in avals:
        cols = np.array([tab.tau[(e, a)] for e in eps])
        ok = bool(np.all(np.diff(cols, axis=0) > 0))
        rows.append(_row("sweep_ordered_in_epsilon", f"a{a:g}", None, None, ok))
    return rows


def check_theta_width(sc, opts):
    tol = float(opts.get("tol", 1e-10))
    rows = []
    ts = sc.times
    for c in sc.cells:
        params = sc.cell_params(c)
        if not isinstance(sc.potential, Harmonic) or params.epsilon == 0:
            continue
        th = an.dressing_factor(sc.potential, sc.gaussian, params, ts)
        sig = an.complex_width(sc.potential, sc.gaussian, params, ts).sigma / sc.gaussian.sigma0
        err = float(np.max(np.abs(th - sig)))
        rows.append(_row("theta_width", sc.cell_label(c), err, tol, err < tol))
    return rows


CHECKS = {
    "closed_form_trajectories": check_closed_form_trajectories,
    "noncrossing": check_noncrossing,
    "gap_law": check_gap_law,
    "localization": check_localization,
    "pde_vs_analytic": check_pde_vs_analytic,
    "equivalence": check_equivalence,
    "propagator_quadrature": check_propagator_quadrature,
    "arrival_dual_route": check_arrival_dual_route,
    "sweep_monotone": check_sweep_monotone,
    "theta_width": check_theta_width,
}


def verify_scenario(sc: Scenario) -> list:
    if not sc.verify:
        raise ScenarioError(f"scenario {sc.name} has no 'verify' section", field="verify")
    unknown = set(sc.verify) - set(CHECKS)
    if unknown:
        raise ScenarioError(f"unknown check(s): {', '.join(sorted(unknown))}", field="verify")
    rows = []
    for name, opts in sc.verify.items():
        rows.extend(CHECKS[name](sc, opts or {}))
    return rows


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ScenarioError):
        return 2
    if isinstance(exc, ValidationError):
        return 3
    return 4


def _diagnostic(exc: BaseException, code: int) -> dict:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for k in ("field", "line"):
        v = getattr(exc, k, None)
        if v is not None:
            rec[k] = v
    return rec


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ckdyn", description="Caldirola-Kanai quantum-classical transition scenarios")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write CSV/JSON outputs")
    r.add_argument("scenario", help="scenario file or bundled scenario name")
    r.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<name> or ./ckdyn-out/<name>)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    v = sub.add_parser("verify", help="run the cross-checks attached to a scenario")
    v.add_argument("scenario")
    sub.add_parser("list-scenarios", help="list bundled scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-scenarios":
            for name, path in sorted(_bundled().items()):
                d = yaml.safe_load(path.read_text()) or {}
                print(f"{name}\t{d.get('description', '')}")
            return 0
        sc = load_scenario(args.scenario)
        if args.command == "run":
            if args.jobs < 1:
                raise ScenarioError("--jobs must be >= 1", field="--jobs")
            outdir = output_root(args.out, sc.name)
            man = run_scenario(sc, outdir, args.jobs)
            print(json.dumps({"scenario": sc.name, "out": str(outdir), "files": len(man["files"])}))
            return 0
        rows = verify_scenario(sc)
        for row in rows:
            print(json.dumps(row, default=_json_default))
        failed = [r for r in rows if not r["passed"]]
        print(json.dumps({"scenario": sc.name, "checks": len(rows), "failed": len(failed)}))
        return 1 if failed else 0
    except CKError as exc:
        code = _exit_code(exc)
        print(json.dumps(_diagnostic(exc, code)), file=sys.stderr)
        return code
    except (TypeError, ValueError) as exc:
        # malformed values in an otherwise parseable scenario
        code = 2
        print(json.dumps(_diagnostic(exc, code)), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
