"""Named experiment configurations and the runner that executes them.

A config is a flat INI file holding one scenario.  The ``[scenario]``
header may be omitted; every key is optional and falls back to the
scenario's defaults (``defaults_for``).  Execution-only keys (``workers``,
``backend``) do not enter the config hash, so changing the thread count
cannot change any output byte.

Stages always run in the order solve, decompose, velocities, residuals,
ensemble.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import storage
from .fields import (FIXED_ZERO, NONRELATIVISTIC, PERIODIC, RELATIVISTIC,
                     ComplexWaveField, Grid1D, GridError, PhysicalParams,
                     gradient, make_grid, polar_decompose)
from .identities import (ALL_EQUATIONS, DEFINITIONAL, LIMITING, ORDER_BOUND,
                         SPACELIKE, full_report, heat_evolve,
                         heat_kernel_gaussian, residual_cybernetic, residual_fick,
                         residual_fick_second, residual_nelson_pair,
                         self_study_from_reports, study_from_reports)
from .kleingordon import (CFLError, KGProblem, check_cfl,
                          compute_currents, current_validity, kg_gaussian_packet,
                          kg_plane_wave, kg_superposition, minimal_evac,
                          mode_initial_data, solve_klein_gordon,
                          total_current_residual)
from .manifest import RunManifest
from .schrodinger import (SchrodingerProblem, analytic_box_eigenstate,
                          analytic_free_gaussian, box_energy, normalize,
                          solve_schrodinger)
from .stochastic import run_nelson
from .velocities import VelocityFieldSet, velocity_fields

SCENARIOS = ("free-gaussian", "box-eigenstate", "moving-wall-box", "kg-plane-wave",
             "kg-packet", "vacuum-energy", "decaying-mass", "fick-diffusion")
SCHRODINGER_SCENARIOS = ("free-gaussian", "box-eigenstate")
KG_SCENARIOS = ("kg-plane-wave", "kg-packet", "vacuum-energy", "decaying-mass")
OUTPUT_KINDS = ("fields", "velocities", "residuals", "trajectories", "plotdata")
PLOT_QUANTITIES = ("P", "v", "u", "Q", "M", "ks", "residual-vs-dx")
EXECUTION_KEYS = frozenset({"workers", "backend"})
AUTO = "auto"
SECTION = "scenario"


class ConfigError(ValueError):
    """Invalid or unreadable scenario configuration."""


class ScenarioError(RuntimeError):
    """A stage failed while running a valid configuration."""


# ----------------------------------------------------------------------
# configuration schema


def _auto_float(text):
    if isinstance(text, str) and text.strip().lower() == AUTO:
        return AUTO
    return float(text)


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _words(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(w.strip() for w in str(text).split(",") if w.strip())


def _text(text):
    return str(text).strip()


SCHEMA: dict[str, Callable] = {
    "scenario": _text,
    "seed": _int,
    "workers": _int,
    "backend": _text,
    "hbar": float, "m": float, "c": float, "alpha": float,
    "E_vac": _auto_float, "lambda_decay": float, "v_d": float,
    "x_min": float, "x_max": _auto_float, "n_x": _int,
    "dt": _auto_float, "t_end": float, "boundary": _text,
    "courant": float, "diffusion_number": float,
    "n": _int, "L": float, "wall_gamma": float, "wall_x_ref": float,
    "k": float, "x0": float, "sigma0": float, "k0": float,
    "amp_plus": float, "amp_minus": float, "branch": _int,
    "evac_margin": float, "mask_threshold": float, "node_epsilon": float,
    "save_every": _int, "window": _int, "n_walkers": _int, "n_tracked": _int,
    "levels": _int, "source": _text, "outputs": _words, "equations": _words,
}

COMMON_DEFAULTS = {
    "seed": 0, "workers": 1, "backend": AUTO,
    "hbar": 1.0, "m": 1.0, "c": 1.0, "alpha": 1.0, "E_vac": 0.0,
    "lambda_decay": 0.0, "v_d": 1.0,
    "x_min": -10.0, "x_max": 10.0, "n_x": 512, "dt": 1e-3, "t_end": 1.0,
    "boundary": PERIODIC, "courant": 0.5, "diffusion_number": 1.0 / 6.0,
    "n": 1, "L": 1.0, "wall_gamma": 1.0, "wall_x_ref": 100.0,
    "k": 1.0, "x0": 0.0, "sigma0": 1.0, "k0": 1.0,
    "amp_plus": 1.0, "amp_minus": 0.5, "branch": 1,
    "evac_margin": 1e-6, "mask_threshold": 0.1, "node_epsilon": 1e-6,
    "save_every": 1, "window": 0, "n_walkers": 0, "n_tracked": 0,
    "levels": 0, "source": "solver",
    "outputs": ("fields", "velocities", "residuals", "trajectories"),
    "equations": (),
}

SCENARIO_DEFAULTS = {
    "free-gaussian": {"save_every": 10, "n_walkers": 10000, "n_tracked": 10,
                      "node_epsilon": 1e-3},
    "box-eigenstate": {"x_min": 0.0, "x_max": AUTO, "boundary": FIXED_ZERO,
                       "dt": 1e-4, "t_end": 0.05, "save_every": 50,
                       "node_epsilon": 0.1},
    "moving-wall-box": {"x_min": 50.0, "x_max": 150.0, "n_x": 1000,
                        "boundary": FIXED_ZERO, "L": 200.0 / 3.0, "dt": 1.0,
                        "t_end": 1.0},
    "kg-plane-wave": {"x_min": 0.0, "x_max": 2.0 * math.pi, "n_x": 128,
                      "dt": AUTO, "source": "analytic"},
    "kg-packet": {"x_min": -25.0, "x_max": 25.0, "n_x": 800, "dt": AUTO,
                  "t_end": 2.0, "sigma0": 3.0, "window": 33, "node_epsilon": 1e-3},
    "vacuum-energy": {"x_min": -math.pi, "x_max": math.pi, "n_x": 64, "dt": AUTO,
                      "branch": -1, "E_vac": AUTO},
    "decaying-mass": {"x_min": -25.0, "x_max": 25.0, "n_x": 800, "dt": AUTO,
                      "t_end": 2.0, "sigma0": 3.0, "window": 33,
                      "node_epsilon": 1e-3, "lambda_decay": 0.1},
    "fick-diffusion": {"x_min": -2.0, "x_max": 2.0, "n_x": 2048, "dt": AUTO,
                       "t_end": 0.1, "boundary": FIXED_ZERO, "sigma0": 0.25,
                       "window": 5},
}


def defaults_for(name: str) -> dict:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose one of {', '.join(SCENARIOS)}")
    d = dict(COMMON_DEFAULTS)
    d.update(SCENARIO_DEFAULTS[name])
    d["scenario"] = name
    return d


def _parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[key](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None


@dataclass
class ScenarioConfig:
    """A fully resolved scenario: every schema key has a value."""

    name: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def outputs(self) -> tuple:
        return tuple(self.values["outputs"])

    @property
    def backend(self) -> Optional[str]:
        b = self.values["backend"]
        return None if b == AUTO else b

    @property
    def params(self) -> PhysicalParams:
        v = self.values
        E = v["E_vac"]
        return PhysicalParams(hbar=v["hbar"], m=v["m"], c=v["c"], alpha=v["alpha"],
                              E_vac=0.0 if E == AUTO else E,
                              lambda_decay=v["lambda_decay"], v_d=v["v_d"])

    @property
    def grid(self) -> Grid1D:
        v = self.values
        x_min = v["x_min"]
        x_max = v["x_max"]
        if x_max == AUTO:
            x_max = x_min + v["L"]
        dx = (x_max - x_min) / v["n_x"]
        dt = v["dt"]
        if dt == AUTO:
            if self.name == "fick-diffusion":
                dt = v["diffusion_number"] * dx ** 2 / self.params.D
            else:
                dt = v["courant"] * dx / v["c"]
        steps = max(1, int(round(v["t_end"] / dt)))
        return make_grid(x_min, x_max, v["n_x"], dt, steps + 1, v["boundary"])

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        vals = dict(self.values)
        for key, raw in overrides.items():
            vals[key] = _parse_value(key, raw)
        if vals["scenario"] != self.name:
            return config_from_dict(vals)
        return ScenarioConfig(self.name, vals)

    def canonical(self) -> dict:
        out = {}
        for key in sorted(self.values):
            val = self.values[key]
            out[key] = list(val) if isinstance(val, tuple) else val
        return out

    def config_hash(self) -> str:
        body = {k: v for k, v in self.canonical().items() if k not in EXECUTION_KEYS}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = [f"[{SECTION}]"]
        for key, val in self.canonical().items():
            if key in EXECUTION_KEYS:
                continue
            if isinstance(val, list):
                val = ",".join(val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def config_from_dict(raw: dict) -> ScenarioConfig:
    raw = dict(raw)
    name = raw.get("scenario")
    if not name:
        raise ConfigError("config does not name a scenario")
    name = str(name).strip()
    vals = defaults_for(name)
    for key, val in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        vals[key] = _parse_value(key, val) if isinstance(val, str) else val
    cfg = ScenarioConfig(name, vals)
    validate(cfg)
    return cfg


def parse_config(text: str) -> ScenarioConfig:
    """Parse INI text; the section header is optional."""
    if not text.lstrip().startswith("["):
        text = f"[{SECTION}]\n" + text
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if cp.sections() != [SECTION]:
        raise ConfigError(f"config must hold exactly one [{SECTION}] section, "
                          f"found {cp.sections()}")
    return config_from_dict(dict(cp[SECTION]))


def load_config(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    cfg = parse_config(text)
    if overrides:
        cfg = cfg.with_overrides(overrides)
        validate(cfg)
    return cfg


def default_config(name: str, overrides: Optional[dict] = None) -> ScenarioConfig:
    raw = {"scenario": name}
    raw.update(overrides or {})
    return config_from_dict(raw)


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ScenarioConfig):
    """Check every setting against the scenario's preconditions."""
    v = cfg.values
    name = cfg.name
    _require(name in SCENARIOS, f"unknown scenario {name!r}")
    try:
        params = cfg.params
        grid = cfg.grid
    except (GridError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _require(v["workers"] >= 1, "workers must be >= 1")
    _require(v["backend"] in (AUTO, "python", "compiled"),
             f"backend must be auto, python or compiled, got {v['backend']!r}")
    _require(v["seed"] >= 0, "seed must be non-negative")
    _require(v["t_end"] > 0, "t_end must be positive")
    _require(v["save_every"] >= 1, "save_every must be >= 1")
    _require(v["window"] == 0 or v["window"] >= 3, "window must be 0 (all) or >= 3")
    _require(v["n_walkers"] >= 0 and v["n_tracked"] >= 0, "walker counts must be >= 0")
    _require(v["levels"] == 0 or v["levels"] >= 3,
             "levels must be 0 or >= 3 (a convergence study needs three grids)")
    _require(0.0 < v["node_epsilon"] < 1.0, "node_epsilon must lie in (0, 1)")
    _require(0.0 <= v["mask_threshold"] < 1.0, "mask_threshold must lie in [0, 1)")
    _require(v["source"] in ("solver", "analytic"), "source must be solver or analytic")
    bad = [o for o in v["outputs"] if o not in OUTPUT_KINDS]
    _require(not bad, f"unknown outputs {bad}; choose from {', '.join(OUTPUT_KINDS)}")
    bad = [e for e in v["equations"] if e not in ALL_EQUATIONS]
    _require(not bad, f"unknown equation ids {bad}")
    _require(v["sigma0"] > 0, "sigma0 must be positive")

    if name in SCHRODINGER_SCENARIOS:
        _require(params.m > 0, "the Schroedinger scenarios need m > 0")
    if name == "free-gaussian":
        _require(grid.periodic, "free-gaussian runs on a periodic grid")
    if name == "box-eigenstate":
        _require(v["n"] >= 1, "box level n must be >= 1")
        _require(v["L"] > 0, "box length L must be positive")
        _require(grid.boundary == FIXED_ZERO, "box-eigenstate needs boundary = fixed-zero")
        _require(abs(grid.x_min) <= 1e-12 * v["L"] and
                 abs(grid.x_max - v["L"]) <= 1e-12 * v["L"],
                 f"box grid must span [0, L] = [0, {v['L']}]")
    if name == "moving-wall-box":
        _require(v["n"] >= 1, "box level n must be >= 1")
        _require(v["L"] > 0, "wall length L must be positive")
        _require(v["wall_x_ref"] > 0, "wall_x_ref must be positive")
        _require(v["wall_gamma"] == 0 or grid.x_min > 0,
                 "a power-law wall profile needs x_min > 0")
    if name in KG_SCENARIOS:
        try:
            check_cfl(grid, params)
        except CFLError as exc:
            raise ConfigError(str(exc)) from None
        _require(grid.periodic, f"{name} runs on a periodic grid")
        _require(v["branch"] in (1, -1), "branch must be +1 or -1")
        if name in ("kg-plane-wave", "vacuum-energy"):
            turns = v["k"] * grid.length / (2 * math.pi)
            _require(abs(turns - round(turns)) <= 1e-9 * max(1.0, abs(turns)),
                     f"k = {v['k']} is not commensurate with the period {grid.length}")
    if name == "vacuum-energy":
        _require(v["E_vac"] == AUTO or v["E_vac"] >= 0, "E_vac must be auto or >= 0")
        _require(v["evac_margin"] >= 0, "evac_margin must be >= 0")
    if name == "decaying-mass":
        _require(params.m > 0, "decaying-mass needs m0 = m > 0")
    if name == "fick-diffusion":
        _require(params.m > 0, "fick-diffusion needs m > 0 (D = hbar/2m)")
        ratio = params.D * grid.dt / grid.dx ** 2
        _require(ratio <= 0.5, f"unstable heat step: D*dt/dx^2 = {ratio:.4g} > 1/2 "
                               f"(dt={grid.dt!r}, dx={grid.dx!r})")
    return cfg


# ----------------------------------------------------------------------
# box and moving-wall profiles


@dataclass
class OsmoticProfile:
    """Single-time box profile; ``mask`` marks ``|sin| < threshold``."""

    x: np.ndarray
    P: np.ndarray
    grad_log_P: np.ndarray
    grad_log_P_stencil: np.ndarray
    u: np.ndarray
    u_stencil: np.ndarray
    u_D: np.ndarray
    mask: np.ndarray
    L: Optional[np.ndarray] = None
    m_field: Optional[np.ndarray] = None

    def max_relative_deviation(self, scale: float = 0.0) -> float:
        """Largest ``|u_stencil - u| / max(|u|, scale)`` off the mask.

        A positive ``scale`` (the current velocity for box profiles) keeps
        the zeros of ``u`` from dividing by zero.
        """
        good = ~self.mask
        den = np.maximum(np.abs(self.u), scale)
        good &= den > 0
        if not good.any():
            return float("nan")
        return float(np.max(np.abs(self.u_stencil[good] - self.u[good]) / den[good]))


def _stencil_log_gradient(P, grid):
    """``dP/dx / P`` as ``2 (dR/dx) / R`` with ``R = sqrt(P)``."""
    R = np.sqrt(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 * gradient(R, grid) / R


def box_osmotic_profile(n: int, L: float, params: PhysicalParams, grid: Grid1D,
                        threshold: float = 0.1) -> OsmoticProfile:
    """Density, ``dP/dx / P`` and osmotic velocity of box level ``n``.

    ``u = D dP/dx / P`` equals ``v cot(n pi x / L)`` with
    ``v = hbar (n pi / L) / m``; the
    stencil version differentiates the amplitude ``sqrt(P)``, whose error
    ``1 - sinc(k dx)`` is a quarter of that of differentiating ``P``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"box level n must be a positive integer, got {n}")
    if abs(grid.x_min) > 1e-12 * L or abs(grid.x_max - L) > 1e-12 * L:
        raise ValueError(f"grid must span [0, {L}], got [{grid.x_min}, {grid.x_max}]")
    x = grid.x
    kn = n * np.pi / L
    theta = kn * x
    s = np.sin(theta)
    P = (2.0 / L) * s ** 2
    mask = np.abs(s) < threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        cot = np.cos(theta) / s
    glp = 2.0 * cot * kn
    glp_st = _stencil_log_gradient(P, grid)
    D = params.D
    nan = np.where(mask, np.nan, 0.0)
    return OsmoticProfile(x, P, glp + nan, glp_st + nan, D * glp + nan,
                          D * glp_st + nan, np.zeros_like(x), mask)


@dataclass
class PowerLawWall:
    """Wall length ``L(x) = L_ref (x / x_ref)^gamma``; ``gamma = 1`` gives ``L' = L/x``."""

    L_ref: float
    x_ref: float
    gamma: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.L_ref * (x / self.x_ref) ** self.gamma

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.gamma == 0:
            return np.zeros_like(x)
        return self.gamma * self(x) / x


def moving_wall_fields(n: int, L_profile, params: PhysicalParams, grid: Grid1D,
                       grad_L=None, threshold: float = 0.1) -> OsmoticProfile:
    """Box profile with a slowly varying length ``L(x)``.

    ``L_profile`` is an array of ``L`` on the grid or a callable; its
    gradient comes from ``grad_L``, a ``.gradient`` method, or the stencil.
    The rest mass follows ``m'/m = -L'/L``, normalized to ``params.m`` at the
    centre sample, and ``u_D = D m'/m``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"box level n must be a positive integer, got {n}")
    x = grid.x
    if callable(L_profile):
        Lx = np.asarray(L_profile(x), dtype=float)
        if grad_L is None and hasattr(L_profile, "gradient"):
            grad_L = L_profile.gradient(x)
    else:
        Lx = np.broadcast_to(np.asarray(L_profile, dtype=float), x.shape).copy()
    if not np.all(np.isfinite(Lx)) or np.any(Lx <= 0):
        raise ValueError("L_profile must be positive and finite")
    gL = gradient(Lx, grid) if grad_L is None else np.asarray(grad_L, dtype=float)
    gLL = gL / Lx
    theta = (n * np.pi / Lx) * x
    s = np.sin(theta)
    P = (2.0 / Lx) * s ** 2
    mask = np.abs(s) < threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        cot = np.cos(theta) / s
    glp = -gLL + 2.0 * cot * (n * np.pi / Lx - theta * gLL)
    glp_st = _stencil_log_gradient(P, grid)
    D = params.D
    mid = Lx[Lx.size // 2]
    m_field = params.m * mid / Lx
    nan = np.where(mask, np.nan, 0.0)
    return OsmoticProfile(x, P, glp + nan, glp_st + nan, D * glp + nan,
                          D * glp_st + nan, -D * gLL, mask, Lx, m_field)


@dataclass
class DecayFields:
    m_field: np.ndarray
    fields: VelocityFieldSet
    reports: list
    u_D_expected: float


def decaying_mass_fields(m0: float, lambda_decay: float, v_d: float, polar,
                         params: PhysicalParams) -> DecayFields:
    """Overlay ``m(x) = m0 exp(-lambda x / v_d)`` on a relativistic base field.

    The variable mass is held at ``m0``; the residual entries are those of
    ``residual_cybernetic`` for both branches.
    """
    if not lambda_decay >= 0:
        raise ValueError("lambda_decay must be non-negative")
    if not v_d > 0:
        raise ValueError("v_d must be positive")
    g = polar.grid
    m_x = m0 * np.exp(-lambda_decay * g.x / v_d)
    m_field = np.broadcast_to(m_x, polar.R.shape).copy()
    p = PhysicalParams(hbar=params.hbar, m=m0, c=params.c, alpha=params.alpha,
                       V=params.V, lambda_decay=lambda_decay, v_d=v_d)
    fs = velocity_fields(polar, p, RELATIVISTIC, m_field=m_field, mass=m0)
    reps = []
    for br in ("particle", "antiparticle"):
        for rep in residual_cybernetic(fs, m_field, m0, br, SPACELIKE, lambda_decay, v_d):
            if rep.equation_id not in {r.equation_id for r in reps}:
                reps.append(rep)
    return DecayFields(m_field, fs, reps, -p.D * lambda_decay / v_d)


# ----------------------------------------------------------------------
# stages


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    wave: Optional[ComplexWaveField] = None
    fields: Optional[VelocityFieldSet] = None
    reports: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    nelson: object = None
    convergence: dict = field(default_factory=dict)


def _stage(cfg, stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        raise ScenarioError(f"scenario {cfg.name}, stage {stage}: {exc}") from exc


def _schrodinger_problem(cfg):
    g, p = cfg.grid, cfg.params
    v = cfg.values
    one = g.with_time(g.dt, 1)
    if cfg.name == "free-gaussian":
        psi0 = analytic_free_gaussian(v["x0"], v["sigma0"], v["k0"], p, one).values[0]
    else:
        psi0 = analytic_box_eigenstate(v["n"], v["L"], p, one).values[0]
    return SchrodingerProblem(g, p, normalize(psi0, g))


def _kg_modes(cfg):
    v = cfg.values
    s = v["branch"]
    if cfg.name == "vacuum-energy":
        return [(v["amp_plus"], v["k"], s), (v["amp_minus"], -v["k"], s)]
    return [(1.0, v["k"], s)]


def solve_stage(cfg: ScenarioConfig) -> Optional[ComplexWaveField]:
    """The wave field of the scenario (every ``save_every``-th slice)."""
    name, g, p = cfg.name, cfg.grid, cfg.params
    v = cfg.values
    every = v["save_every"]
    if name in SCHRODINGER_SCENARIOS:
        if v["source"] == "analytic":
            n_out = (g.n_t - 1) // every + 1
            gs = g.with_time(g.dt * every, n_out)
            if name == "free-gaussian":
                return analytic_free_gaussian(v["x0"], v["sigma0"], v["k0"], p, gs)
            return analytic_box_eigenstate(v["n"], v["L"], p, gs)
        return solve_schrodinger(_schrodinger_problem(cfg), every, cfg.backend)
    if name in KG_SCENARIOS:
        if v["source"] == "analytic" and name in ("kg-plane-wave", "vacuum-energy"):
            n_out = (g.n_t - 1) // every + 1
            return kg_superposition(_kg_modes(cfg), p, g.with_time(g.dt * every, n_out))
        if name in ("kg-plane-wave", "vacuum-energy"):
            psi0, dpsi = mode_initial_data(_kg_modes(cfg), p, g)
        else:
            psi0, dpsi = kg_gaussian_packet(v["x0"], v["sigma0"], v["k0"], p, g,
                                            v["branch"])
        return solve_klein_gordon(KGProblem(g, p, psi0, dpsi), every)
    return None


def _window(cfg, f: ComplexWaveField) -> ComplexWaveField:
    w = cfg["window"]
    if w and w < f.grid.n_t:
        return f.slices(f.grid.n_t - w, f.grid.n_t)
    return f


def _convention(cfg):
    return NONRELATIVISTIC if cfg.name in SCHRODINGER_SCENARIOS else RELATIVISTIC


def analysis_fields(cfg: ScenarioConfig, f: ComplexWaveField):
    """Decompose the analysed window and build the velocity fields."""
    w = _window(cfg, f)
    conv = _convention(cfg)
    p = cfg.params
    polar = polar_decompose(w, conv, p.hbar, cfg["node_epsilon"])
    if cfg.name == "decaying-mass":
        dec = decaying_mass_fields(p.m, cfg["lambda_decay"], cfg["v_d"], polar, p)
        return dec.fields, dec
    return velocity_fields(polar, p, conv), None


def _q_ratio(fs):
    Q = fs.quantum_potential
    good = ~fs.mask & np.isfinite(Q)
    if not good.any() or fs.params.m == 0:
        return None
    return float(np.max(np.abs(Q[good])) / (fs.params.m * fs.params.c ** 2))


def _vacuum(cfg, fs):
    polar = fs.polar
    E_min = minimal_evac(polar)
    E = cfg["E_vac"]
    E = E_min + cfg["evac_margin"] if E == AUTO else E
    J, J_vac, J_tot = compute_currents(polar, E, cfg["c"])
    valid = current_validity(polar)
    rep = total_current_residual(J_tot, polar.grid, cfg["c"], valid)
    good = ~polar.invalid
    return rep, J_tot, {"E_vac": E, "minimal_evac": E_min,
                        "min_total_j0": float(J_tot.j0[good].min()),
                        "min_j0": float(J.j0[good].min())}


def _plane_wave_baseline(cfg, fs):
    """``rel_current`` of a plane wave with the packet's carrier on the same grid."""
    g, p = fs.grid, fs.params
    turns = max(1, int(round(cfg["k0"] * g.length / (2 * np.pi))))
    k = 2 * np.pi * turns / g.length
    pw = kg_plane_wave(k, p, g, cfg["branch"], fs.t0)
    pfs = velocity_fields(polar_decompose(pw, RELATIVISTIC, p.hbar), p)
    out = {}
    for br in ("particle", "antiparticle"):
        rep = residual_nelson_pair(pfs, br, SPACELIKE)[1]
        out[br] = rep.residual_max
    return out


def residual_stage(cfg: ScenarioConfig, fs: Optional[VelocityFieldSet], extra=None,
                   f: Optional[ComplexWaveField] = None):
    """Residual reports and scenario summary numbers."""
    name = cfg.name
    eqs = cfg["equations"] or None
    summary: dict = {}
    tables: dict = {}
    reps: list = []
    if fs is not None:
        if name == "decaying-mass":
            reps = full_report(fs, None, extra.m_field, cfg["m"])
            summary["u_D_expected"] = extra.u_D_expected
            good = ~fs.mask
            summary["u_D_mean"] = float(np.mean(fs.u_D[good])) if good.any() else None
        else:
            reps = full_report(fs)
        q = _q_ratio(fs)
        summary["max_Q_over_mc2"] = q
        summary["mask_fraction"] = fs.mask_fraction
        if name == "vacuum-energy":
            rep, J_tot, info = _vacuum(cfg, fs)
            reps.append(rep)
            summary.update(info)
            tables["currents"] = J_tot
        elif fs.mode == RELATIVISTIC:
            J, _, _ = compute_currents(fs.polar, 0.0, cfg["c"])
            tables["currents"] = J
        if name in ("kg-packet", "decaying-mass"):
            base = _plane_wave_baseline(cfg, fs)
            summary["plane_wave_baseline"] = base
            own = {r.equation_id: r.residual_max for r in reps}
            summary["limiting_contrast"] = {
                br: (own.get(f"rel_current_{br}", float("nan")) / base[br]
                     if base[br] > 0 else None) for br in base}
        if name == "box-eigenstate":
            summary.update(_box_summary(cfg, f))
    if name == "box-eigenstate":
        prof = box_osmotic_profile(cfg["n"], cfg["L"], cfg.params,
                                   cfg.grid.with_time(cfg.grid.dt, 1), cfg["mask_threshold"])
        tables["profile"] = prof
        v_box = cfg["hbar"] * cfg["n"] * np.pi / (cfg["L"] * cfg["m"])
        summary["profile_max_relative_deviation"] = prof.max_relative_deviation(v_box)
    if name == "moving-wall-box":
        reps, s2, prof = _moving_wall(cfg)
        summary.update(s2)
        tables["profile"] = prof
    if name == "fick-diffusion":
        reps, s2, heat = _fick(cfg)
        summary.update(s2)
        tables["heat"] = heat
    if eqs is not None:
        reps = [r for r in reps if r.equation_id in eqs]
    return reps, summary, tables


def _box_summary(cfg, f):
    E = box_energy(cfg["n"], cfg["L"], cfg.params)
    out = {"energy_exact": E}
    if f is not None and cfg["source"] == "solver":
        psi0 = f.values[0]
        ov = np.sum(np.conj(psi0)[None, :] * f.values, axis=1) * f.grid.dx
        phase = np.unwrap(np.angle(ov))
        slope = np.polyfit(f.times, phase, 1)[0]
        out["energy_phase_advance"] = float(-slope * cfg["hbar"])
        out["energy_relative_error"] = float(abs(-slope * cfg["hbar"] / E - 1.0))
    return out


def _moving_wall(cfg):
    g = cfg.grid.with_time(cfg.grid.dt, 1)
    wall = PowerLawWall(cfg["L"], cfg["wall_x_ref"], cfg["wall_gamma"])
    prof = moving_wall_fields(cfg["n"], wall, cfg.params, g,
                              threshold=cfg["mask_threshold"])
    good = ~prof.mask
    s = {"mask_fraction": float(np.mean(prof.mask))}
    if good.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(prof.u[good] - prof.u_D[good]) / np.abs(prof.u_D[good])
        rel = rel[np.isfinite(rel)]
        s["max_relative_u_minus_uD"] = float(rel.max()) if rel.size else None
        s["max_abs_u_over_c"] = float(np.max(np.abs(prof.u[good])) / cfg["c"])
        s["max_grad_log_P_stencil_error"] = float(
            np.max(np.abs(prof.grad_log_P_stencil[good] - prof.grad_log_P[good])))
        s["max_abs_grad_L_over_L_times_D"] = float(
            np.max(np.abs(prof.u_D[good])))
    reps = [residual_fick(prof.P, cfg.params, g)]
    return reps, s, prof


def _fick(cfg):
    g, p = cfg.grid, cfg.params
    P0 = heat_kernel_gaussian(g.x, 0.0, cfg["x0"], cfg["sigma0"], p.D)
    if not g.periodic:
        P0[0] = P0[-1] = 0.0
    hist, times = heat_evolve(P0, p, g, max(3, cfg["window"] or 3))
    exact = heat_kernel_gaussian(g.x, times[-1], cfg["x0"], cfg["sigma0"], p.D)
    reps = [residual_fick(hist[-1], p, g),
            residual_fick_second(hist, p, g)]
    err = np.abs(hist[-1] - exact)
    if not g.periodic:
        err = err[1:-1]
    s = {"heat_kernel_max_error": float(err.max()), "t_final": float(times[-1])}
    return reps, s, (g.x, hist[-1], exact, times[-1])


def ensemble_stage(cfg: ScenarioConfig, workers: Optional[int] = None):
    if cfg.name not in SCHRODINGER_SCENARIOS or cfg["n_walkers"] == 0:
        return None
    return run_nelson(_schrodinger_problem(cfg), cfg["n_walkers"], cfg.seed,
                      cfg["save_every"], workers or cfg["workers"], cfg["n_tracked"],
                      cfg.backend)


def compute_scenario(cfg: ScenarioConfig, with_ensemble: bool = True) -> ScenarioResult:
    """Run every stage in memory."""
    res = ScenarioResult(cfg)
    f = _stage(cfg, "solve", solve_stage, cfg)
    res.wave = f
    extra = None
    if f is not None:
        fs, extra = _stage(cfg, "decompose", analysis_fields, cfg, f)
        res.fields = fs
    reps, summary, tables = _stage(cfg, "residuals", residual_stage, cfg, res.fields,
                                   extra, f)
    res.reports, res.summary, res.tables = reps, summary, tables
    if cfg["levels"]:
        res.convergence = _stage(cfg, "convergence", scenario_convergence, cfg,
                                 cfg["levels"], cfg["equations"] or None)
    if with_ensemble:
        res.nelson = _stage(cfg, "ensemble", ensemble_stage, cfg)
        if res.nelson is not None:
            res.summary["max_ks"] = float(np.max(res.nelson.ks))
            res.summary["n_capped"] = int(res.nelson.n_capped)
    return res


# ----------------------------------------------------------------------
# refinement


def refine(cfg: ScenarioConfig, level: int) -> ScenarioConfig:
    """The config with ``dx`` halved ``level`` times, over the same times.

    ``dt`` shrinks with ``dx`` (or ``dx^2`` for explicit diffusion) and the
    analysed window grows so it spans the same absolute times.
    """
    if level == 0:
        return cfg
    g0 = cfg.grid
    vals = dict(cfg.values)
    vals["n_x"] = cfg["n_x"] * 2 ** level
    vals["t_end"] = (g0.n_t - 1) * g0.dt
    if vals["dt"] != AUTO:
        vals["dt"] = cfg["dt"] / 2 ** level
    fine = ScenarioConfig(cfg.name, vals)
    ratio = int(round(g0.dt / fine.grid.dt))
    if cfg["window"]:
        vals["window"] = (cfg["window"] - 1) * ratio + 1
    else:
        vals["window"] = 0
    vals["save_every"] = cfg["save_every"]
    return ScenarioConfig(cfg.name, vals)


def level_reports(cfg: ScenarioConfig, level: int, equations=None) -> list:
    sub = refine(cfg, level)
    f = solve_stage(sub)
    fs, extra = (analysis_fields(sub, f) if f is not None else (None, None))
    reps, _, _ = residual_stage(sub, fs, extra, f)
    if equations:
        reps = [r for r in reps if r.equation_id in equations]
    return reps


def scenario_convergence(cfg: ScenarioConfig, levels: int, equations=None) -> dict:
    """Convergence study of every selected equation over ``levels`` grids.

    Limiting-class equations also get a self-convergence study, since their
    residual tends to a nonzero limit when the quantum potential is not zero.
    """
    if levels < 3:
        raise ConfigError("a convergence study needs at least 3 levels")
    per_level = [level_reports(cfg, lv, equations) for lv in range(levels)]
    ids = [r.equation_id for r in per_level[0]]
    out = {}
    for eq in ids:
        reps = [next(r for r in lvl if r.equation_id == eq) for lvl in per_level]
        entry = {"study": study_from_reports(reps)}
        if eq in LIMITING and cfg.name != "fick-diffusion":
            entry["self"] = self_study_from_reports(reps)
        entry["final"] = reps[-1]
        out[eq] = entry
    return out


def strict_failures(convergence: dict, bound: float = ORDER_BOUND) -> list:
    """Equations of the convergent class whose order misses ``bound``."""
    failed = []
    for eq, entry in convergence.items():
        if eq in DEFINITIONAL:
            continue
        st = entry["study"]
        if st.indeterminate and "non-finite" not in st.flags:
            continue
        if st.order is None or not st.order >= bound:
            failed.append(eq)
    return failed


def convergence_to_json(convergence: dict) -> dict:
    out = {}
    for eq, entry in convergence.items():
        d = {"study": entry["study"].to_dict()}
        if "self" in entry:
            d["self"] = entry["self"].to_dict()
        d["notes"] = list(entry["final"].notes)
        out[eq] = d
    return out


# ----------------------------------------------------------------------
# run directories


def _write_profile(path, prof: OsmoticProfile):
    cols = [prof.x, prof.P, prof.grad_log_P, prof.grad_log_P_stencil, prof.u,
            prof.u_stencil, prof.u_D, prof.mask.astype(float)]
    header = ["x", "P", "grad_log_P", "grad_log_P_stencil", "u", "u_stencil", "uD", "mask"]
    if prof.L is not None:
        cols += [prof.L, prof.m_field]
        header += ["L", "m"]
    return storage.write_table(path, header, cols)


def write_outputs(res: ScenarioResult, run_dir) -> list:
    """Write every requested artifact of ``res`` except the manifest."""
    cfg = res.config
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    outs = cfg.outputs
    written = [run_dir / "config.ini"]
    (run_dir / "config.ini").write_text(cfg.to_ini())
    if "fields" in outs and res.wave is not None:
        written.append(storage.write_field(run_dir / "field.csv", res.wave, cfg.params,
                                           {"convention": _convention(cfg),
                                            "scenario": cfg.name}))
    if "velocities" in outs and res.fields is not None:
        written.append(storage.write_velocities(run_dir / "velocities.csv", res.fields))
        if "currents" in res.tables:
            J = res.tables["currents"]
            written.append(storage.write_currents(run_dir / "currents.csv", res.fields.grid,
                                                  res.fields.t0, J.j0, J.j1))
    if "profile" in res.tables:
        written.append(_write_profile(run_dir / "profile.csv", res.tables["profile"]))
    if "heat" in res.tables:
        x, P, exact, t = res.tables["heat"]
        written.append(storage.write_table(run_dir / "heat.csv", ["x", "P", "P_exact"],
                                            [x, P, exact]))
    if "residuals" in outs:
        body = {"scenario": cfg.name,
                "reports": {r.equation_id: r.to_dict() for r in res.reports},
                "summary": _jsonable(res.summary)}
        written.append(storage.dump_json(body, run_dir / "residuals.json"))
        if res.convergence:
            written.append(storage.dump_json(convergence_to_json(res.convergence),
                                             run_dir / "convergence.json"))
    if "trajectories" in outs and res.nelson is not None:
        nr = res.nelson
        written.append(storage.write_ks_series(run_dir / "ks.csv", nr.times, nr.ks,
                                               nr.n_walkers))
        if nr.trajectories is not None:
            written.append(storage.write_trajectories(run_dir / "trajectories.csv",
                                                      nr.times, nr.trajectories))
    if "plotdata" in outs:
        avail = available_quantities(run_dir)
        written.extend(emit_plotdata(run_dir, avail))
    return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def run_scenario(cfg: ScenarioConfig, out_dir, workers: Optional[int] = None) -> Path:
    """Execute ``cfg`` into ``out_dir`` and write the manifest last."""
    if workers is not None:
        cfg = ScenarioConfig(cfg.name, dict(cfg.values, workers=int(workers)))
    res = compute_scenario(cfg)
    out_dir = Path(out_dir)
    write_outputs(res, out_dir)
    RunManifest("run", cfg.config_hash(), cfg.seed, cfg.name).write(out_dir)
    return out_dir


# ----------------------------------------------------------------------
# plot data


def available_quantities(run_dir) -> list:
    run_dir = Path(run_dir)
    out = []
    if (run_dir / "velocities.csv").is_file():
        out += ["P", "v", "u", "Q", "M"]
    if (run_dir / "ks.csv").is_file():
        out.append("ks")
    if (run_dir / "convergence.json").is_file():
        out.append("residual-vs-dx")
    return out


def _fmt(v):
    return "%.17g" % v


def emit_plotdata(run_dir, quantities, out_dir=None) -> list:
    """Whitespace-separated ``.dat`` files, one per quantity.

    Field quantities give ``x value`` for a single slice and ``t x value``
    blocks (separated by blank lines) otherwise; masked samples are left out.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "plot"
    bad = [q for q in quantities if q not in PLOT_QUANTITIES]
    if bad:
        raise ConfigError(f"unknown quantity {bad[0]!r}; choose from {', '.join(PLOT_QUANTITIES)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for q in quantities:
        path = out_dir / f"{q}.dat"
        if q in ("P", "v", "u", "Q", "M"):
            src = run_dir / "velocities.csv"
            if not src.is_file():
                raise ConfigError(f"{run_dir} has no velocities.csv for quantity {q}")
            data = storage.read_table(src, storage.VELOCITY_COLUMNS)
            col = storage.VELOCITY_COLUMNS.index(q)
            t, x, val = data[:, 0], data[:, 1], data[:, col]
            mask = data[:, -1] > 0
            if q != "P":
                mask = mask | ~np.isfinite(val)
            frac = float(np.mean(mask))
            times = np.unique(t)
            lines = [f"# quantity={q} mask_fraction={frac:.6g}"]
            if times.size == 1:
                lines.append(f"# columns: x {q}")
                lines += [f"{_fmt(a)} {_fmt(b)}" for a, b, m in zip(x, val, mask) if not m]
            else:
                lines.append(f"# columns: t x {q}")
                for tk in times:
                    sel = (t == tk) & ~mask
                    lines += [f"{_fmt(tk)} {_fmt(a)} {_fmt(b)}"
                              for a, b in zip(x[sel], val[sel])]
                    lines.append("")
        elif q == "ks":
            src = run_dir / "ks.csv"
            if not src.is_file():
                raise ConfigError(f"{run_dir} has no ks.csv (not an ensemble run)")
            data = storage.read_table(src, ["t", "ks", "n"])
            n = int(data[0, 2]) if data.size else 0
            lines = [f"# quantity=ks n_walkers={n}", "# columns: t ks"]
            lines += [f"{_fmt(a)} {_fmt(b)}" for a, b in data[:, :2]]
        else:
            src = run_dir / "convergence.json"
            if not src.is_file():
                raise ConfigError(f"{run_dir} has no convergence.json (run with levels >= 3)")
            with open(src) as fh:
                conv = json.load(fh)
            lines = ["# quantity=residual-vs-dx", "# columns: dx l2"]
            for eq in sorted(conv):
                st = conv[eq]["study"]
                order = st["order"]
                lines.append(f"# equation={eq} fitted_order="
                             f"{'indeterminate' if order is None else format(order, '.6g')}")
                for dx, e in zip(st["dx"], st["errors"]):
                    if e is not None:
                        lines.append(f"{_fmt(dx)} {_fmt(e)}")
                lines += ["", ""]
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines).rstrip("\n") + "\n")
        paths.append(path)
    return paths
