"""Velocity fields, quantum potential and variable mass of a decomposed field.

Nonrelativistic fields use ``v = dS/dx / m``.  Relativistic fields use the
contravariant current velocity ``v^mu = d^mu S / M`` with signature
``(+,-,-,-)``, so the spatial component is ``-dS/dx / M`` and the time
component ``(dS/dt) / (c M)``.  The spatial osmotic velocity is
``u = D dP/dx / P`` in both modes, which is the form that turns the
relativistic osmotic equation into Nelson's.

Samples where a quantity is undefined (nodes, phase defects, negative mass
radicand) are set to NaN rather than filled in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fields import (NONRELATIVISTIC, RELATIVISTIC, ComplexWaveField, Grid1D,
                     PhysicalParams, PolarField, action_gradient, dalembertian,
                     dilate, gradient, laplacian, time_derivative)


class DegenerateMassError(ValueError):
    pass


def _mode(mode, polar=None):
    if mode is None:
        mode = polar.convention if polar is not None else NONRELATIVISTIC
    aliases = {"nonrel": NONRELATIVISTIC, "rel": RELATIVISTIC}
    mode = aliases.get(mode, mode)
    if mode not in (NONRELATIVISTIC, RELATIVISTIC):
        raise ValueError(f"unknown mode {mode!r}")
    return mode


def node_mask_of(P, eps: float = 1e-6):
    """Samples where ``sqrt(P)`` falls below ``eps`` times its maximum."""
    P = np.asarray(P, dtype=float)
    return P < (eps ** 2) * P.max()


def current_velocity(polar: PolarField, params: PhysicalParams, mode=None, M=None):
    """Current velocity from the action.

    Nonrelativistic mode returns ``dS/dx / m``.  Relativistic mode needs the
    variable mass ``M`` and returns ``(v0, v)``.
    """
    mode = _mode(mode, polar)
    S_x = action_gradient(polar.S, polar.grid, polar.hbar)
    if mode == NONRELATIVISTIC:
        return S_x / params.m
    if M is None:
        raise ValueError("relativistic current velocity needs M")
    M = np.broadcast_to(np.asarray(M, dtype=float), S_x.shape)
    if np.any(M[np.isfinite(M)] == 0.0):
        raise DegenerateMassError("degenerate mass: M = 0 at some sample")
    S_t = time_derivative(polar.S, polar.grid)
    return S_t / (params.c * M), -S_x / M


def osmotic_velocity(P, params: PhysicalParams, grid: Grid1D, mask=None):
    """``D dP/dx / P``; NaN on masked samples."""
    P = np.asarray(P, dtype=float)
    if mask is None:
        mask = node_mask_of(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = params.D * gradient(P, grid) / P
    return np.where(mask, np.nan, u)


def osmotic_velocity_time(P, params: PhysicalParams, grid: Grid1D, mask=None):
    """Covariant time component ``D (dP/dt) / (c P)``."""
    P = np.asarray(P, dtype=float)
    if mask is None:
        mask = node_mask_of(P)
    with np.errstate(divide="ignore", invalid="ignore"):
        u0 = params.D * time_derivative(P, grid) / (params.c * P)
    return np.where(mask, np.nan, u0)


def drift_velocity(polar: PolarField, params: PhysicalParams):
    """``b = v + alpha u`` for a nonrelativistic decomposition."""
    if polar.convention != NONRELATIVISTIC:
        raise ValueError("drift velocity is defined for the nonrelativistic convention")
    v = current_velocity(polar, params, NONRELATIVISTIC)
    u = osmotic_velocity(polar.P, params, polar.grid, polar.node_mask)
    return v + params.alpha * u


def quantum_potential(R, params: PhysicalParams, grid: Grid1D, mode=None, mask=None):
    """``-hbar^2/(2m) R''/R`` or, relativistically, ``hbar^2 (box R)/R``."""
    mode = _mode(mode)
    R = np.asarray(R, dtype=float)
    if mask is None:
        mask = node_mask_of(R ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == NONRELATIVISTIC:
            Q = -params.hbar ** 2 / (2.0 * params.m) * laplacian(R, grid) / R
        else:
            Q = params.hbar ** 2 * dalembertian(R, grid, params.c) / R
    return np.where(mask, np.nan, Q)


def variable_mass(R, params: PhysicalParams, grid: Grid1D, V=None, mask=None):
    """Variable mass ``sqrt((m + V/c^2)^2 + hbar^2 (box R)/(c^2 R))``.

    Returns ``(M, tachyonic)``; samples with a negative radicand are NaN in
    ``M`` and flagged.  Raises when every unmasked sample is tachyonic.
    """
    R = np.asarray(R, dtype=float)
    if mask is None:
        mask = node_mask_of(R ** 2)
    c = params.c
    if V is None:
        V = params.V if params.V is not None else 0.0
    V = np.asarray(V, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        radicand = (params.m + V / c ** 2) ** 2 \
            + params.hbar ** 2 * dalembertian(R, grid, c) / (c ** 2 * R)
    radicand = np.where(mask, np.nan, radicand)
    tachyonic = ~mask & (radicand < 0)
    if not np.any(~mask & ~tachyonic):
        raise ValueError("every unmasked sample is tachyonic")
    with np.errstate(invalid="ignore"):
        M = np.sqrt(np.where(tachyonic, np.nan, radicand))
    return M, tachyonic


def aux_velocities(m_field, M_field, params: PhysicalParams, grid: Grid1D):
    """``(u_D, u_M) = (D m'/m, D M'/M)`` by the shared gradient stencil."""
    m_field = np.asarray(m_field, dtype=float)
    M_field = np.asarray(M_field, dtype=float)
    for name, f in (("m_field", m_field), ("M_field", M_field)):
        finite = f[np.isfinite(f)]
        if np.any(finite <= 0):
            raise ValueError(f"{name} has nonpositive samples")
    D = params.D
    u_D = D * gradient(m_field, grid) / m_field
    u_M = D * gradient(M_field, grid) / M_field
    return u_D, u_M


def cross_check_velocity_bilinear(psi: ComplexWaveField, params: PhysicalParams,
                                  convention: str = NONRELATIVISTIC, mask=None):
    """``dS/dx / m`` from ``Im(conj(psi) dpsi/dx) / |psi|^2`` without unwrapping."""
    v = psi.values
    P = np.abs(v) ** 2
    if mask is None:
        mask = node_mask_of(P)
    sign = 1.0 if convention == NONRELATIVISTIC else -1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = sign * params.hbar / params.m * np.imag(np.conj(v) * gradient(v, psi.grid)) / P
    return np.where(mask, np.nan, out)


# ----------------------------------------------------------------------
# the full set


@dataclass
class VelocityFieldSet:
    """Every velocity-like field of one decomposition on a common grid.

    ``mask`` marks samples excluded downstream: the node and defect masks
    grown by the stencil reach, plus tachyonic samples.  Relativistic sets
    also carry the time components ``current0`` and ``osmotic0``.
    """

    grid: Grid1D
    params: PhysicalParams
    polar: PolarField
    mode: str
    current: np.ndarray
    osmotic: np.ndarray
    drift: np.ndarray
    u_D: np.ndarray
    u_M: np.ndarray
    quantum_potential: np.ndarray
    mass: np.ndarray
    density: np.ndarray
    mask: np.ndarray
    m_field: np.ndarray
    tachyonic: np.ndarray
    current0: Optional[np.ndarray] = None
    osmotic0: Optional[np.ndarray] = None

    @property
    def t0(self) -> float:
        return self.polar.t0

    @property
    def v(self):
        return self.current

    @property
    def u(self):
        return self.osmotic

    @property
    def b(self):
        return self.drift

    @property
    def mask_fraction(self) -> float:
        return float(np.mean(self.mask))


def velocity_fields(polar: PolarField, params: PhysicalParams, mode=None,
                    m_field=None, mass=None) -> VelocityFieldSet:
    """Build a ``VelocityFieldSet``.

    ``m_field`` overrides the rest mass used for ``u_D`` (default: constant
    ``params.m``).  ``mass`` overrides the relativistic variable mass, which
    is otherwise computed from ``R``.
    """
    mode = _mode(mode, polar)
    g = polar.grid
    shape = polar.R.shape
    P = polar.P
    rel = mode == RELATIVISTIC
    need_t = rel or shape[0] >= 3
    base = dilate(polar.invalid, g, 2, 1 if need_t else 0)

    u = osmotic_velocity(P, params, g, polar.node_mask)
    if rel:
        if mass is None:
            M, tach = variable_mass(polar.R, params, g, mask=polar.node_mask)
        else:
            M = np.broadcast_to(np.asarray(mass, dtype=float), shape).copy()
            tach = np.zeros(shape, dtype=bool)
        Q = quantum_potential(polar.R, params, g, RELATIVISTIC, polar.node_mask)
        v0, v = current_velocity(polar, params, RELATIVISTIC, M)
        u0 = osmotic_velocity_time(P, params, g, polar.node_mask)
    else:
        M = np.broadcast_to(np.asarray(params.m if mass is None else mass, dtype=float),
                            shape).copy()
        tach = np.zeros(shape, dtype=bool)
        Q = quantum_potential(polar.R, params, g, NONRELATIVISTIC, polar.node_mask)
        v = current_velocity(polar, params, NONRELATIVISTIC)
        v0 = u0 = None
    m_arr = np.broadcast_to(np.asarray(params.m if m_field is None else m_field,
                                       dtype=float), shape).copy()
    u_D, u_M = aux_velocities(m_arr, np.where(np.isfinite(M), M, 1.0), params, g)
    u_M = np.where(np.isfinite(M), u_M, np.nan)
    mask = base | dilate(tach, g, 1, 1 if need_t else 0)
    drift = v + params.alpha * u
    return VelocityFieldSet(g, params, polar, mode, v, u, drift, u_D, u_M, Q, M,
                            P, mask, m_arr, tach, v0, u0)
