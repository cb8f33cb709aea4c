"""Grid residuals of the stochastic-mechanics equations and convergence studies.

Each ``residual_*`` function evaluates ``left side - right side`` of one
equation pointwise on a ``VelocityFieldSet`` and summarizes it in a
``ResidualReport``.  All derivatives come from the stencils in ``fields``;
the spatial second derivative of a velocity is ``gradient(gradient(.))`` so
that equations obtained by differentiating other equations stay consistent
with them sample by sample.

Equation ids
------------
continuity, hjb, nelson_osmotic, nelson_current, fokker_planck, balance
    nonrelativistic density, Hamilton-Jacobi-Bohm, Nelson pair, drift form.
kg_continuity, kg_hjb, total_current
    relativistic density current, mass shell, current with vacuum phase.
osmotic_continuity, osmotic_continuity_mass_split, osmotic_hjb
    the relativistic pair rewritten with the osmotic four-velocity.
orthogonality, density_transport, phase_wave, orthogonality_product,
open_orthogonality
    orthogonality of current and osmotic velocity and its two halves.
rel_osmotic, rel_current_particle, rel_current_antiparticle,
rel_current_timelike, timelike_condition_particle,
timelike_condition_antiparticle, acceleration
    the relativistic Nelson-form pair and its timelike variant.
cyber_osmotic, cyber_current_spacelike_particle,
cyber_current_spacelike_antiparticle, cyber_current_timelike,
cyber_osmotic_massgrad, decay_osmotic
    variable rest mass and variable mass extensions.
fick_first, fick_second
    diffusion current and heat equation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fields import (NONRELATIVISTIC, RELATIVISTIC, Grid1D, PhysicalParams,
                     action_gradient, action_laplacian, dilate, gradient,
                     laplacian, second_time_derivative, time_derivative)
from .report import ResidualReport, make_report
from .velocities import VelocityFieldSet, osmotic_velocity

PARTICLE = "particle"
ANTIPARTICLE = "antiparticle"
BRANCHES = (PARTICLE, ANTIPARTICLE)
SPACELIKE = "spacelike"
TIMELIKE = "timelike"
U_MODES = (SPACELIKE, TIMELIKE)

ORDER_BOUND = 1.8
NOISE_FLOOR = 1e-11

# Equations that hold exactly by construction; checked against a floor
# instead of a convergence order.
DEFINITIONAL = frozenset({"balance", "fick_first", "orthogonality", "phase_wave"})

# Equations that hold only when the quantum potential vanishes.
LIMITING = frozenset({
    "rel_osmotic", "rel_current_particle", "rel_current_antiparticle",
    "rel_current_timelike", "timelike_condition_particle",
    "timelike_condition_antiparticle", "acceleration",
    "cyber_osmotic", "cyber_current_spacelike_particle",
    "cyber_current_spacelike_antiparticle", "cyber_current_timelike",
    "cyber_osmotic_massgrad", "decay_osmotic",
})

NONREL_EQUATIONS = ("continuity", "hjb", "nelson_osmotic", "nelson_current",
                    "fokker_planck", "balance", "fick_first")
REL_EQUATIONS = (
    "kg_continuity", "kg_hjb", "osmotic_continuity",
    "osmotic_continuity_mass_split", "osmotic_hjb", "orthogonality",
    "density_transport", "phase_wave", "orthogonality_product",
    "open_orthogonality", "rel_osmotic", "rel_current_particle",
    "rel_current_antiparticle", "rel_current_timelike",
    "timelike_condition_particle", "timelike_condition_antiparticle",
    "acceleration", "cyber_osmotic", "cyber_current_spacelike_particle",
    "cyber_current_spacelike_antiparticle", "cyber_current_timelike",
    "cyber_osmotic_massgrad", "decay_osmotic", "balance", "fick_first",
)
ALL_EQUATIONS = tuple(dict.fromkeys(NONREL_EQUATIONS + REL_EQUATIONS
                                    + ("total_current", "fick_second")))

LIMIT_NOTE = ("holds only as a limiting case for vanishing quantum potential; "
              "max|Q|/(m c^2) = {q:.3g}")


# ----------------------------------------------------------------------
# shared pieces


def _valid(fs: VelocityFieldSet, t_edge: Optional[int] = None) -> np.ndarray:
    g = fs.grid
    bad = dilate(fs.mask, g, 1, 0)
    if t_edge is None:
        t_edge = 2 if fs.mode == RELATIVISTIC else 1
    if bad.shape[0] > 2 * t_edge:
        bad[:t_edge] = True
        bad[bad.shape[0] - t_edge:] = True
    else:
        bad[:] = True
    if not g.periodic:
        bad[:, :2] = True
        bad[:, -2:] = True
    return ~bad


def _tags(fs, **extra):
    tags = {"convention": fs.mode}
    tags.update(extra)
    return tags


def _report(eq, r, fs, valid=None, notes=None, **tags):
    if valid is None:
        valid = _valid(fs)
    return make_report(eq, r, valid, fs.grid, _tags(fs, **tags), notes)


def _grad2(f, grid):
    return gradient(gradient(f, grid), grid)


def _potential(fs):
    return fs.params.potential(fs.grid)


def _q_ratio(fs) -> float:
    Q = fs.quantum_potential
    good = ~fs.mask & np.isfinite(Q)
    if not good.any():
        return float("nan")
    return float(np.max(np.abs(Q[good])) / (fs.params.m * fs.params.c ** 2))


def _limit_notes(fs, eq):
    if eq in LIMITING:
        q = _q_ratio(fs)
        if math.isfinite(q) and q > 1e-8:
            return [LIMIT_NOTE.format(q=q)]
    return []


@dataclass
class _Terms:
    """Derivatives shared by several residuals of one field set."""

    fs: VelocityFieldSet

    def __post_init__(self):
        fs = self.fs
        g = fs.grid
        p = fs.params
        pol = fs.polar
        self.D = p.D
        self.c = p.c
        self.P = fs.density
        self.v = fs.current
        self.u = fs.osmotic
        self.S_x = action_gradient(pol.S, g, pol.hbar)
        self.P_x = gradient(self.P, g)
        self.v_x = gradient(self.v, g)
        self.u_x = gradient(self.u, g)
        self.v_xx = gradient(self.v_x, g)
        self.u_xx = gradient(self.u_x, g)
        self.V = _potential(fs)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.logP_t = time_derivative(self.P, g) / self.P
        self.u_t = self.D * gradient(self.logP_t, g)
        self.v_t = time_derivative(self.v, g)
        self.S_t = time_derivative(pol.S, g)
        self.P_t = time_derivative(self.P, g)
        M = fs.mass
        if fs.mode == RELATIVISTIC:
            self.accel = -self.V * gradient(self.V, g) / (M ** 2 * p.c ** 2)
        else:
            self.accel = -gradient(self.V, g) / p.m


def _terms(fs):
    cache = getattr(fs, "_terms_cache", None)
    if cache is None:
        cache = _Terms(fs)
        object.__setattr__(fs, "_terms_cache", cache)
    return cache


# ----------------------------------------------------------------------
# density and Hamilton-Jacobi-Bohm


def residual_continuity(fs: VelocityFieldSet, mode=None) -> ResidualReport:
    """``dP/dt + d(vP)/dx`` or ``d^mu P d_mu S + P box S``."""
    mode = mode or fs.mode
    T = _terms(fs)
    g = fs.grid
    if mode == NONRELATIVISTIC:
        r = T.P_t + gradient(T.v * T.P, g)
        return _report("continuity", r, fs)
    c = fs.params.c
    box_S = second_time_derivative(fs.polar.S, g) / c ** 2 \
        - action_laplacian(fs.polar.S, g, fs.polar.hbar)
    r = T.P_t * T.S_t / c ** 2 - T.P_x * T.S_x + T.P * box_S
    return _report("kg_continuity", r, fs)


def continuity_log_residual(fs: VelocityFieldSet) -> np.ndarray:
    """Density equation divided by ``P``: ``dlnP/dt + dv/dx + v dlnP/dx``."""
    T = _terms(fs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return T.logP_t + T.v_x + T.v * T.P_x / T.P


def residual_hjb(fs: VelocityFieldSet, mode=None) -> ResidualReport:
    mode = mode or fs.mode
    T = _terms(fs)
    p = fs.params
    Q = fs.quantum_potential
    if mode == NONRELATIVISTIC:
        r = T.S_t + T.S_x ** 2 / (2.0 * p.m) + T.V + Q
        return _report("hjb", r, fs)
    c = p.c
    r = T.S_t ** 2 / c ** 2 - T.S_x ** 2 - ((p.m * c + T.V / c) ** 2 + Q)
    return _report("kg_hjb", r, fs)


def residual_balance(fs: VelocityFieldSet) -> ResidualReport:
    """Osmotic current against diffusion current, ``u P - D dP/dx``."""
    T = _terms(fs)
    r = T.u * T.P - T.D * T.P_x
    return _report("balance", r, fs, valid=_valid(fs, 0))


def residual_fokker_planck(fs: VelocityFieldSet) -> ResidualReport:
    """``dP/dt + d(bP - nu dP/dx)/dx`` with ``nu = alpha D``."""
    T = _terms(fs)
    g = fs.grid
    nu = fs.params.alpha * T.D
    r = T.P_t + gradient(fs.drift * T.P, g) - nu * gradient(T.P_x, g)
    return _report("fokker_planck", r, fs, alpha=fs.params.alpha)


# ----------------------------------------------------------------------
# Nelson-form pairs


def _osmotic_base(T):
    return T.u_t + T.D * T.v_xx + gradient(T.v * T.u, T.fs.grid)


def _current_base(T, sign):
    """``dv/dt - [a + sign (v d)v + (u d)u + D u'']``."""
    return T.v_t - (T.accel + sign * T.v * T.v_x + T.u * T.u_x + T.D * T.u_xx)


def _branch_sign(branch):
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}")
    return 1.0 if branch == PARTICLE else -1.0


def residual_nelson_pair(fs: VelocityFieldSet, branch: str = PARTICLE,
                         u_mode: str = SPACELIKE, form: Optional[str] = None) -> list:
    """Osmotic and current equations of the Nelson form.

    Nonrelativistic fields give ``nelson_osmotic`` and ``nelson_current``.
    Relativistic fields give ``rel_osmotic`` plus, for spacelike ``u``, the
    current equation of the chosen branch, or for timelike ``u`` the
    reduced current equation and the branch condition.

    ``form=RELATIVISTIC`` on a nonrelativistic field set evaluates the
    relativistic pair with ``M = m``, its low-velocity reading.
    """
    sign = _branch_sign(branch)
    if u_mode not in U_MODES:
        raise ValueError(f"u_mode must be one of {U_MODES}")
    T = _terms(fs)
    r_u = _osmotic_base(T)
    if (form or fs.mode) == NONRELATIVISTIC:
        return [_report("nelson_osmotic", r_u, fs),
                _report("nelson_current", _current_base(T, -1.0), fs)]
    out = [_report("rel_osmotic", r_u, fs, notes=_limit_notes(fs, "rel_osmotic"),
                   u_mode=u_mode)]
    if u_mode == SPACELIKE:
        eq = f"rel_current_{branch}"
        out.append(_report(eq, _current_base(T, sign), fs,
                           notes=_limit_notes(fs, eq), u_mode=u_mode, branch=branch))
    else:
        r_t = T.v_t - (T.accel + T.D * T.u_xx)
        cond = -sign * T.v * T.v_x - T.u * T.u_x
        eq = f"timelike_condition_{branch}"
        out.append(_report("rel_current_timelike", r_t, fs,
                           notes=_limit_notes(fs, "rel_current_timelike"), u_mode=u_mode))
        out.append(_report(eq, cond, fs, notes=_limit_notes(fs, eq),
                           u_mode=u_mode, branch=branch))
    return out


def residual_acceleration(fs: VelocityFieldSet, M_field=None) -> ResidualReport:
    """``dv/dt + c^2 (dM/dx)/M``."""
    T = _terms(fs)
    M = fs.mass if M_field is None else np.broadcast_to(np.asarray(M_field, dtype=float),
                                                        fs.mass.shape)
    r = T.v_t + fs.params.c ** 2 * gradient(M, fs.grid) / M
    return _report("acceleration", r, fs, notes=_limit_notes(fs, "acceleration"))


# ----------------------------------------------------------------------
# relativistic osmotic forms


def _require_rel(fs):
    if fs.mode != RELATIVISTIC:
        raise ValueError("this residual needs a relativistic field set")


def _four(fs):
    """Divergence of ``v^mu`` and the mass gradient terms."""
    T = _terms(fs)
    g = fs.grid
    c = fs.params.c
    M = fs.mass
    div_v = time_derivative(fs.current0, g) / c + T.v_x
    with np.errstate(invalid="ignore", divide="ignore"):
        M_t = time_derivative(M, g) / (c * M)
        M_x = gradient(M, g) / M
    return div_v, M_t, M_x


def residual_osmotic_continuity(fs: VelocityFieldSet) -> list:
    """``d_mu v^mu + u_mu v^mu / D + (d_mu M/M) v^mu`` and its split form."""
    _require_rel(fs)
    T = _terms(fs)
    D = T.D
    v0, v1 = fs.current0, fs.current
    u0, u1 = fs.osmotic0, fs.osmotic
    div_v, M_t, M_x = _four(fs)
    uv = u0 * v0 + u1 * v1
    r9 = div_v + uv / D + (M_t * v0 + M_x * v1)
    uM0, uM1 = D * M_t, D * M_x
    r15 = div_v + ((u0 + uM0) * v0 + (u1 + uM1) * v1) / D
    return [_report("osmotic_continuity", r9, fs, u_mode=TIMELIKE),
            _report("osmotic_continuity_mass_split", r15, fs, u_mode=TIMELIKE)]


def residual_osmotic_hjb(fs: VelocityFieldSet) -> ResidualReport:
    """Mass shell with the quantum potential written through ``u^mu``."""
    _require_rel(fs)
    T = _terms(fs)
    p = fs.params
    g = fs.grid
    c = p.c
    u0, u1 = fs.osmotic0, fs.osmotic
    div_u = time_derivative(u0, g) / c - T.u_x
    uu = u0 ** 2 - u1 ** 2
    rhs = (p.m * c + T.V / c) ** 2 + p.m * p.hbar * div_u + p.m ** 2 * uu
    r = T.S_t ** 2 / c ** 2 - T.S_x ** 2 - rhs
    return _report("osmotic_hjb", r, fs, u_mode=TIMELIKE)


def _polar_valid(polar, t_edge=1):
    bad = dilate(polar.invalid, polar.grid, 2, 1)
    bad[:t_edge] = True
    bad[bad.shape[0] - t_edge:] = True
    if not polar.grid.periodic:
        bad[:, :2] = True
        bad[:, -2:] = True
    return ~bad


def phase_wave_residuals(polar, c: float = 1.0, valid=None) -> list:
    """Density transport, phase-wave propagation and their product.

    The particle three-velocity is ``v = -c^2 S_x / S_t`` and the phase
    waves move with ``u = c^2 / v``.  The product of the two transport laws
    gives ``d_mu P d^mu S``, returned as ``orthogonality_product``.  Needs
    only the decomposition, so it also applies to massless fields.
    """
    if polar.convention != RELATIVISTIC:
        raise ValueError("phase-wave residuals need the relativistic convention")
    g = polar.grid
    P = polar.P
    S_t = time_derivative(polar.S, g)
    S_x = action_gradient(polar.S, g, polar.hbar)
    P_t = time_derivative(P, g)
    P_x = gradient(P, g)
    scale = np.max(np.abs(np.concatenate([S_t.ravel(), S_x.ravel()])))
    axis = (np.abs(S_x) < 1e-12 * scale) | (np.abs(S_t) < 1e-12 * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        v3 = np.where(axis, np.nan, -c ** 2 * S_x / S_t)
        u_ph = np.where(axis, np.nan, c ** 2 / v3)
    if valid is None:
        valid = _polar_valid(polar)
    valid = valid & ~axis
    tags = {"convention": RELATIVISTIC, "u_mode": SPACELIKE}
    r12 = P_t + v3 * P_x
    r13 = S_t + u_ph * S_x
    prod = (P_t * S_t - (v3 * P_x) * (u_ph * S_x)) / c ** 2
    return [make_report("density_transport", r12, valid, g, tags),
            make_report("phase_wave", r13, valid, g, tags),
            make_report("orthogonality_product", prod, valid, g, tags)]


def residual_orthogonality(fs: VelocityFieldSet, u_mode: str = SPACELIKE) -> list:
    """Orthogonality of current and osmotic velocity and its two halves.

    For spacelike ``u`` the contraction is ``c^2 - u v`` with the phase-wave
    and particle three-velocities; for timelike ``u`` it uses
    ``u^mu = D d^mu P / P``.  The open-system form compares
    ``u_mu v^mu / D`` with ``-(d_mu M/M + d_mu) v^mu``.
    """
    _require_rel(fs)
    if u_mode not in U_MODES:
        raise ValueError(f"u_mode must be one of {U_MODES}")
    T = _terms(fs)
    c = fs.params.c
    valid = _valid(fs)
    halves = phase_wave_residuals(fs.polar, c, valid)
    if u_mode == SPACELIKE:
        scale = np.max(np.abs(np.concatenate([T.S_t.ravel(), T.S_x.ravel()])))
        axis = (np.abs(T.S_x) < 1e-12 * scale) | (np.abs(T.S_t) < 1e-12 * scale)
        with np.errstate(divide="ignore", invalid="ignore"):
            v3 = np.where(axis, np.nan, -c ** 2 * T.S_x / T.S_t)
            u_ph = np.where(axis, np.nan, c ** 2 / v3)
        r11 = c ** 2 - u_ph * v3
        ortho = _report("orthogonality", r11, fs, valid=valid & ~axis, u_mode=u_mode)
    else:
        r11 = fs.osmotic0 * fs.current0 + fs.osmotic * fs.current
        ortho = _report("orthogonality", r11, fs, valid=valid, u_mode=u_mode)
    div_v, M_t, M_x = _four(fs)
    v0, v1 = fs.current0, fs.current
    lhs = (fs.osmotic0 * v0 + fs.osmotic * v1) / T.D
    rhs = -((M_t * v0 + M_x * v1) + div_v)
    rep = _report("open_orthogonality", lhs - rhs, fs, u_mode=TIMELIKE)
    good = rep.valid
    if good.any():
        rep.notes.append(f"lhs_max={float(np.max(np.abs(lhs[good]))):.6g}")
    return [ortho] + halves + [rep]


# ----------------------------------------------------------------------
# variable masses


def residual_cybernetic(fs: VelocityFieldSet, m_field=None, M_field=None,
                        branch: str = PARTICLE, u_mode: str = SPACELIKE,
                        lambda_decay: Optional[float] = None,
                        v_d: Optional[float] = None) -> list:
    """Osmotic and current equations with variable ``m`` and ``M``.

    Each residual is the constant-mass residual minus the extra terms, so
    constant masses reproduce the constant-mass residuals exactly.  The
    decay form uses ``u_D = -D lambda / v_d``.
    """
    sign = _branch_sign(branch)
    if u_mode not in U_MODES:
        raise ValueError(f"u_mode must be one of {U_MODES}")
    T = _terms(fs)
    g = fs.grid
    p = fs.params
    D, c = T.D, p.c
    shape = fs.density.shape
    m = np.broadcast_to(np.asarray(fs.m_field if m_field is None else m_field,
                                   dtype=float), shape)
    M = np.broadcast_to(np.asarray(fs.mass if M_field is None else M_field,
                                   dtype=float), shape)
    for name, f in (("m_field", m), ("M_field", M)):
        if np.any(f[np.isfinite(f)] <= 0):
            raise ValueError(f"{name} has nonpositive samples")
    lam = p.lambda_decay if lambda_decay is None else lambda_decay
    vd = p.v_d if v_d is None else v_d

    v, u = T.v, T.u
    div_v = T.v_x
    m_x = gradient(m, g)
    gm = m_x / m
    gM = gradient(M, g) / M
    if shape[0] >= 3:
        Mdot = time_derivative(M, g) / M
        m_t = time_derivative(m, g)
    else:
        Mdot = np.zeros(shape)
        m_t = np.zeros(shape)

    base_u = _osmotic_base(T)
    extra41 = (D * div_v * (gm - gM) + D * gm * (Mdot + v * gM)
               - D * (gradient(Mdot, g) - v * gradient(gM, g)))
    u_D = D * gm

    ratio = m ** 2 / M ** 2
    bracket = u * _grad2(m, g) / m + 2.0 * T.u_x * gm - gradient(m_t, g) / m
    mass_push = m * m_x / M ** 2

    tags = dict(branch=branch, u_mode=u_mode)
    out = [_report("cyber_osmotic", base_u - extra41, fs,
                   notes=_limit_notes(fs, "cyber_osmotic"), **tags)]
    if u_mode == SPACELIKE:
        base_v = _current_base(T, sign)
        extra42 = ((ratio - 1.0) * (D * T.u_xx + T.u * T.u_x + sign * v * T.v_x)
                   + D * ratio * bracket - mass_push * (2.0 * c ** 2 - u ** 2 - v ** 2))
        eq = f"cyber_current_spacelike_{branch}"
        out.append(_report(eq, base_v - extra42, fs, notes=_limit_notes(fs, eq), **tags))
    else:
        base_v = T.v_t - (T.accel + D * T.u_xx)
        extra43 = (ratio - 1.0) * D * T.u_xx + D * ratio * bracket - mass_push * c ** 2
        out.append(_report("cyber_current_timelike", base_v - extra43, fs,
                           notes=_limit_notes(fs, "cyber_current_timelike"), **tags))
    out.append(_report("cyber_osmotic_massgrad", base_u - u_D * div_v, fs,
                       notes=_limit_notes(fs, "cyber_osmotic_massgrad"), **tags))
    out.append(_report("decay_osmotic", base_u + (D * lam / vd) * div_v, fs,
                       notes=_limit_notes(fs, "decay_osmotic"),
                       lambda_decay=lam, v_d=vd, **tags))
    return out


# ----------------------------------------------------------------------
# diffusion


def residual_fick(P, params: PhysicalParams, grid: Grid1D) -> ResidualReport:
    """Diffusion current ``P u`` against ``D dP/dx``, samples off the node mask."""
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    u = osmotic_velocity(P, params, grid)
    r = P * u - params.D * gradient(P, grid)
    return make_report("fick_first", r, np.isfinite(u), grid, {"law": "first"})


def heat_evolve(P0, params: PhysicalParams, grid: Grid1D, window: int = 5):
    """Explicit forward-time centred-space evolution of ``dP/dt = D P''``.

    Runs ``grid.n_t - 1`` steps of ``grid.dt`` and returns
    ``(history, times)`` of the last ``window`` slices.
    """
    D, dx, dt = params.D, grid.dx, grid.dt
    if D * dt / dx ** 2 > 0.5:
        raise ValueError(f"unstable heat step: D*dt/dx^2 = {D * dt / dx ** 2:.4g} > 1/2 "
                         f"(dt={dt!r}, dx={dx!r})")
    window = max(1, min(int(window), grid.n_t))
    P = np.array(P0, dtype=float)
    if P.shape != (grid.n_points,):
        raise ValueError("P0 does not match the grid")
    keep = []
    n_steps = grid.n_t - 1
    fixed = not grid.periodic
    for k in range(n_steps + 1):
        if k >= grid.n_t - window:
            keep.append(P.copy())
        if k == n_steps:
            break
        P = P + D * dt * laplacian(P, grid)
        if fixed:
            P[0] = P[-1] = 0.0
    times = dt * np.arange(grid.n_t - window, grid.n_t)
    return np.array(keep), times


def heat_kernel_gaussian(x, t, x0, sigma0, D):
    """Normal density of variance ``sigma0^2 + 2 D t``."""
    var = sigma0 ** 2 + 2.0 * D * np.asarray(t, dtype=float)
    return np.exp(-(np.asarray(x) - x0) ** 2 / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)


def residual_fick_second(history, params: PhysicalParams, grid: Grid1D) -> ResidualReport:
    """``dP/dt - D P''`` on consecutive slices ``history`` spaced by ``grid.dt``."""
    h = np.asarray(history, dtype=float)
    g = grid.with_time(grid.dt, h.shape[0])
    r = time_derivative(h, g) - params.D * laplacian(h, g)
    valid = np.ones_like(r, dtype=bool)
    valid[0] = valid[-1] = False
    if not grid.periodic:
        valid[:, :2] = valid[:, -2:] = False
    return make_report("fick_second", r, valid, g, {"law": "second"})


# ----------------------------------------------------------------------
# whole reports


def full_report(fs: VelocityFieldSet, equations: Optional[Sequence[str]] = None,
                m_field=None, M_field=None) -> list:
    """Every residual applicable to ``fs``; both branches are always included."""
    reps = []
    if fs.mode == NONRELATIVISTIC:
        reps.append(residual_continuity(fs))
        reps.append(residual_hjb(fs))
        reps.extend(residual_nelson_pair(fs))
        for br in BRANCHES:
            reps.extend(residual_nelson_pair(fs, br, SPACELIKE, RELATIVISTIC))
        reps.append(residual_fokker_planck(fs))
        reps.append(residual_balance(fs))
        reps.append(residual_fick(fs.density, fs.params, fs.grid))
    else:
        reps.append(residual_continuity(fs))
        reps.append(residual_hjb(fs))
        reps.extend(residual_osmotic_continuity(fs))
        reps.append(residual_osmotic_hjb(fs))
        reps.extend(residual_orthogonality(fs, SPACELIKE))
        for br in BRANCHES:
            for um in U_MODES:
                for rep in residual_nelson_pair(fs, br, um):
                    reps.append(rep)
        reps.append(residual_acceleration(fs))
        for br in BRANCHES:
            for um in U_MODES:
                reps.extend(residual_cybernetic(fs, m_field, M_field, br, um))
        reps.append(residual_balance(fs))
        reps.append(residual_fick(fs.density, fs.params, fs.grid))
    seen = {}
    for rep in reps:
        seen.setdefault(rep.equation_id, rep)
    reps = list(seen.values())
    if equations is not None:
        wanted = list(equations)
        unknown = [e for e in wanted if e not in ALL_EQUATIONS]
        if unknown:
            raise ValueError(f"unknown equation ids: {', '.join(unknown)}")
        reps = [r for r in reps if r.equation_id in wanted]
    return reps


def reports_to_json(reports) -> dict:
    return {r.equation_id: r.to_dict() for r in reports}


# ----------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceResult:
    equation_id: str
    dx: np.ndarray
    errors: np.ndarray
    order: Optional[float]
    indeterminate: bool = False
    monotone: bool = True
    flags: list = field(default_factory=list)
    reports: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "equation_id": self.equation_id,
            "dx": [float(d) for d in self.dx],
            "errors": [float(e) if math.isfinite(e) else None for e in self.errors],
            "order": None if self.order is None else float(self.order),
            "indeterminate": self.indeterminate,
            "monotone": self.monotone,
            "flags": list(self.flags),
        }


def fit_order(dx, err) -> float:
    """Least-squares slope of ``log(err)`` against ``log(dx)``."""
    dx = np.asarray(dx, dtype=float)
    err = np.asarray(err, dtype=float)
    slope, _ = np.polyfit(np.log(dx), np.log(err), 1)
    return float(slope)


def _levels(refinement_levels):
    if isinstance(refinement_levels, (int, np.integer)):
        levels = list(range(int(refinement_levels)))
    else:
        levels = list(refinement_levels)
    if len(levels) < 3:
        raise ValueError(f"a convergence study needs at least 3 refinement levels, "
                         f"got {len(levels)}")
    return levels


def _finish(eq, dx, errs, reports, floor):
    flags = []
    errs = np.asarray(errs, dtype=float)
    if not np.all(np.isfinite(errs)):
        flags.append("non-finite")
        return ConvergenceResult(eq, np.asarray(dx), errs, None, True, False, flags, reports)
    if np.all(errs < floor):
        flags.append("indeterminate: residuals at noise floor")
        res = ConvergenceResult(eq, np.asarray(dx), errs, None, True, True, flags, reports)
    else:
        order = fit_order(dx, np.maximum(errs, np.finfo(float).tiny))
        monotone = bool(np.all(np.diff(errs) < 0))
        if not monotone:
            flags.append("warning: non-monotone residuals")
            warnings.warn(f"{eq}: residuals are not monotone under refinement",
                          RuntimeWarning, stacklevel=3)
        res = ConvergenceResult(eq, np.asarray(dx), errs, order, False, monotone, flags, reports)
    if reports:
        reports[-1].convergence_order = res.order
        reports[-1].flags.extend(flags)
    return res


def convergence_study(residual_op: Callable, problem: Callable, refinement_levels,
                      floor: float = NOISE_FLOOR) -> ConvergenceResult:
    """Fit the order of ``residual_op(problem(level)).residual_l2`` in ``dx``.

    ``problem`` maps a refinement level to whatever ``residual_op`` takes;
    successive levels should halve ``dx``.
    """
    levels = _levels(refinement_levels)
    return study_from_reports([residual_op(problem(lv)) for lv in levels], floor)


def study_from_reports(reports, floor: float = NOISE_FLOOR) -> ConvergenceResult:
    """Convergence study over reports already computed on refined grids."""
    _levels(reports)
    dx = np.array([r.grid_summary["dx"] for r in reports])
    errs = np.array([r.residual_l2 for r in reports])
    return _finish(reports[0].equation_id, dx, errs, list(reports), floor)


def _restrict(fine: ResidualReport, coarse: ResidualReport):
    gf, gc = fine.grid_summary, coarse.grid_summary
    rx = int(round(gc["dx"] / gf["dx"]))
    rt = int(round(gc["dt"] / gf["dt"])) if gf["dt"] > 0 else 1
    rt = max(rt, 1)
    r = fine.residual[::rt, ::rx]
    v = fine.valid[::rt, ::rx]
    n_t, n_x = coarse.residual.shape
    if r.shape[0] < n_t or r.shape[1] < n_x:
        raise ValueError("fine level does not contain the coarse samples")
    return r[:n_t, :n_x], v[:n_t, :n_x]


def self_convergence(residual_op: Callable, problem: Callable, refinement_levels,
                     floor: float = NOISE_FLOOR) -> ConvergenceResult:
    """Order of the differences between consecutive levels.

    Meant for residuals whose continuum limit is not zero: the discrete
    residual converges to that limit when the differences shrink at the
    stencil order.  Each difference is taken on the coarse samples.
    """
    levels = _levels(refinement_levels)
    return self_study_from_reports([residual_op(problem(lv)) for lv in levels], floor)


def self_study_from_reports(reports, floor: float = NOISE_FLOOR) -> ConvergenceResult:
    """``self_convergence`` over reports already computed on refined grids."""
    _levels(reports)
    dx, errs = [], []
    for coarse, fine in zip(reports[:-1], reports[1:]):
        rf, vf = _restrict(fine, coarse)
        both = coarse.valid & vf
        d = (rf - coarse.residual)[both]
        errs.append(float(np.sqrt(np.mean(d ** 2))) if d.size else float("nan"))
        dx.append(coarse.grid_summary["dx"])
    res = _finish(reports[0].equation_id, dx, errs, list(reports), floor)
    res.flags.insert(0, "self-convergence")
    return res
