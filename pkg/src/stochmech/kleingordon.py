"""Klein-Gordon leapfrog solver, analytic modes and probability currents.

The field obeys ``(1/c^2) psi_tt - psi_xx + (m c / hbar)^2 psi = 0`` and is
decomposed as ``R exp(-iS/hbar)``, so a positive-frequency plane wave
``exp(-i(omega t - k x))`` has action ``S = hbar (omega t - k x)``.
Currents are covariant with ``x0 = c t``: ``j0 = P dS/dt / c`` and
``j1 = P dS/dx``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .fields import (RELATIVISTIC, ComplexWaveField, Grid1D, GridError,
                     PhysicalParams, PolarField, action_gradient, dilate,
                     gradient, laplacian, time_derivative)
from .report import make_report


class CFLError(GridError):
    """Time step too large for the explicit Klein-Gordon scheme."""


def compton_wavenumber(params: PhysicalParams) -> float:
    return params.m * params.c / params.hbar


def kg_dispersion(k, params: PhysicalParams):
    """Angular frequency ``c sqrt(k^2 + (m c/hbar)^2)``."""
    mu = compton_wavenumber(params)
    return params.c * np.sqrt(np.asarray(k, dtype=float) ** 2 + mu ** 2)


def check_cfl(grid: Grid1D, params: PhysicalParams):
    """Raise ``CFLError`` unless leapfrog on ``grid`` is stable.

    Besides ``c dt/dx <= 1`` the mass term tightens the bound to
    ``c^2 dt^2 (4/dx^2 + mu^2) <= 4``.
    """
    dt, dx, c = grid.dt, grid.dx, params.c
    ratio = c * dt / dx
    mu = compton_wavenumber(params)
    if ratio > 1.0:
        raise CFLError(f"CFL violated: c*dt/dx = {ratio:.6g} > 1 "
                       f"(dt={dt!r}, dx={dx!r}, c={c!r})")
    if c ** 2 * dt ** 2 * (4.0 / dx ** 2 + mu ** 2) > 4.0:
        raise CFLError(f"CFL violated by the mass term: c^2 dt^2 (4/dx^2 + (mc/hbar)^2) > 4 "
                       f"(dt={dt!r}, dx={dx!r}, c={c!r}, m={params.m!r})")


@dataclass
class KGProblem:
    grid: Grid1D
    params: PhysicalParams
    psi0: np.ndarray
    dpsi0_dt: np.ndarray

    def __post_init__(self):
        n = self.grid.n_points
        self.psi0 = np.asarray(self.psi0, dtype=np.complex128)
        self.dpsi0_dt = np.asarray(self.dpsi0_dt, dtype=np.complex128)
        for name, arr in (("psi0", self.psi0), ("dpsi0_dt", self.dpsi0_dt)):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, grid has {n} points")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite samples")
        check_cfl(self.grid, self.params)


def solve_klein_gordon(problem: KGProblem, save_every: int = 1) -> ComplexWaveField:
    """Leapfrog in time, three-point Laplacian in space.

    The first step uses the Taylor expansion
    ``psi1 = psi0 + dt psi0' + dt^2/2 psi0''`` with ``psi0''`` taken from the
    field equation.  Fixed-zero grids pin both wall samples to zero.
    """
    g, p = problem.grid, problem.params
    check_cfl(g, p)
    if save_every < 1:
        raise ValueError("save_every must be >= 1")
    c2 = p.c ** 2
    mu2 = compton_wavenumber(p) ** 2
    dt2 = g.dt ** 2
    fixed = not g.periodic

    def accel(psi):
        a = c2 * (laplacian(psi, g) - mu2 * psi)
        if fixed:
            a[0] = a[-1] = 0.0
        return a

    n_out = (g.n_t - 1) // save_every + 1
    out = np.empty((n_out, g.n_points), dtype=np.complex128)
    prev = problem.psi0.copy()
    if fixed:
        prev[0] = prev[-1] = 0.0
    out[0] = prev
    cur = prev + g.dt * problem.dpsi0_dt + 0.5 * dt2 * accel(prev)
    if fixed:
        cur[0] = cur[-1] = 0.0
    last = (n_out - 1) * save_every
    for k in range(1, last + 1):
        if k % save_every == 0:
            out[k // save_every] = cur
        if k == last:
            break
        prev, cur = cur, 2.0 * cur - prev + dt2 * accel(cur)
        if not np.all(np.isfinite(cur)):
            raise FloatingPointError("non-finite values in leapfrog step")
    return ComplexWaveField(g.with_time(g.dt * save_every, n_out), out)


# ----------------------------------------------------------------------
# analytic modes


def _check_commensurate(k, grid: Grid1D):
    if not grid.periodic:
        raise ValueError("plane waves need a periodic grid")
    turns = k * grid.length / (2 * np.pi)
    if abs(turns - round(turns)) > 1e-9 * max(1.0, abs(turns)):
        raise ValueError(f"k = {k!r} is not commensurate with the period "
                         f"{grid.length!r} (k L / 2 pi = {turns!r})")


def kg_superposition(modes: Iterable, params: PhysicalParams, grid: Grid1D,
                     t0: float = 0.0) -> ComplexWaveField:
    """Exact sum of plane waves ``a exp(-i(s omega t - k x))``.

    ``modes`` holds ``(amplitude, k, s)`` triples with ``s = +1`` for positive
    and ``s = -1`` for negative frequency.
    """
    t = (t0 + grid.t)[:, None]
    x = grid.x[None, :]
    psi = np.zeros((grid.n_t, grid.n_points), dtype=np.complex128)
    for amp, k, s in modes:
        _check_commensurate(k, grid)
        w = s * kg_dispersion(k, params)
        psi += amp * np.exp(-1j * (w * t - k * x))
    return ComplexWaveField(grid, psi, t0)


def kg_plane_wave(k, params: PhysicalParams, grid: Grid1D, branch: int = 1,
                  t0: float = 0.0) -> ComplexWaveField:
    """``exp(-i(omega t - k x))``; ``branch=-1`` flips the sign of omega."""
    return kg_superposition([(1.0, k, branch)], params, grid, t0)


def mode_initial_data(modes: Iterable, params: PhysicalParams, grid: Grid1D):
    """``(psi0, dpsi0_dt)`` of a plane-wave superposition at ``t = 0``."""
    x = grid.x
    psi = np.zeros(grid.n_points, dtype=np.complex128)
    dpsi = np.zeros_like(psi)
    for amp, k, s in modes:
        _check_commensurate(k, grid)
        w = s * kg_dispersion(k, params)
        term = amp * np.exp(1j * k * x)
        psi += term
        dpsi += -1j * w * term
    return psi, dpsi


def kg_gaussian_packet(x0, sigma, k0, params: PhysicalParams, grid: Grid1D,
                       branch: int = 1):
    """Initial data of a single-branch Gaussian packet on a periodic grid.

    The profile ``exp(-(x-x0)^2/(4 sigma^2) + i k0 x)`` is split into Fourier
    modes and each mode gets the time derivative ``-i s omega(k)`` so that
    the packet carries one frequency sign only.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not grid.periodic:
        raise ValueError("Gaussian KG packets need a periodic grid")
    x = grid.x
    L = grid.length
    d = (x - x0 + 0.5 * L) % L - 0.5 * L
    psi0 = np.exp(-d ** 2 / (4.0 * sigma ** 2) + 1j * k0 * x)
    k = 2 * np.pi * np.fft.fftfreq(grid.n_points, d=grid.dx)
    dpsi = np.fft.ifft(-1j * branch * kg_dispersion(k, params) * np.fft.fft(psi0))
    return psi0, dpsi


# ----------------------------------------------------------------------
# vacuum phase and currents


def apply_vacuum_phase(psi: ComplexWaveField, E_vac: float,
                       hbar: float = 1.0) -> ComplexWaveField:
    """Multiply by ``exp(-i E_vac t / hbar)`` using absolute sample times."""
    if not E_vac >= 0:
        raise ValueError("E_vac must be non-negative")
    if E_vac == 0:
        return ComplexWaveField(psi.grid, psi.values.copy(), psi.t0)
    phase = np.exp(-1j * E_vac * psi.times / hbar)[:, None]
    return ComplexWaveField(psi.grid, psi.values * phase, psi.t0)


@dataclass
class FourCurrent:
    """Covariant components ``(j0, j1)`` of a current on ``(t, x)`` samples."""

    j0: np.ndarray
    j1: np.ndarray

    def __post_init__(self):
        self.j0 = np.asarray(self.j0, dtype=float)
        self.j1 = np.asarray(self.j1, dtype=float)
        if not (np.all(np.isfinite(self.j0)) and np.all(np.isfinite(self.j1))):
            raise ValueError("current contains non-finite samples")

    def __add__(self, other: "FourCurrent") -> "FourCurrent":
        return FourCurrent(self.j0 + other.j0, self.j1 + other.j1)


def _require_relativistic(polar: PolarField):
    if polar.convention != RELATIVISTIC:
        raise ValueError("currents need the relativistic sign convention "
                         f"(got {polar.convention!r})")


def compute_currents(polar: PolarField, E_vac: float = 0.0, c: float = 1.0):
    """Return ``(J, J_vac, J_tot)`` built from ``P`` and the action gradients.

    ``J_vac`` is the hidden current of the phase ``E_vac t``; it has no
    spatial component.
    """
    _require_relativistic(polar)
    if not E_vac >= 0:
        raise ValueError("E_vac must be non-negative")
    g = polar.grid
    P = polar.P
    S_t = time_derivative(polar.S, g)
    S_x = action_gradient(polar.S, g, polar.hbar)
    J = FourCurrent(P * S_t / c, P * S_x)
    J_vac = FourCurrent(P * E_vac / c, np.zeros_like(P))
    return J, J_vac, J + J_vac


def current_validity(polar: PolarField) -> np.ndarray:
    """Samples whose current stencils avoid nodes and the time edges."""
    bad = dilate(polar.invalid, polar.grid, 1, 1)
    bad[0] = bad[-1] = True
    return ~bad


def total_current_residual(J_tot: FourCurrent, grid: Grid1D, c: float = 1.0,
                           valid: Optional[np.ndarray] = None):
    """Divergence ``(1/c) d_t j0 - d_x j1`` of a covariant current."""
    r = time_derivative(J_tot.j0, grid) / c - gradient(J_tot.j1, grid)
    if valid is None:
        valid = np.ones_like(r, dtype=bool)
        valid[0] = valid[-1] = False
    return make_report("total_current", r, valid, grid,
                       {"convention": RELATIVISTIC, "time_coordinate": "ct"})


def minimal_evac(polar: PolarField) -> float:
    """Smallest ``E_vac >= 0`` keeping ``P dS/dt + P E_vac`` non-negative.

    Only samples outside the node and defect masks take part.
    """
    _require_relativistic(polar)
    S_t = time_derivative(polar.S, polar.grid)
    good = ~polar.invalid
    if not good.any():
        raise ValueError("no unmasked samples")
    return max(0.0, float(-S_t[good].min()))


def bilinear_current(psi: ComplexWaveField, params: PhysicalParams) -> FourCurrent:
    """``P dS`` evaluated from ``psi`` directly, without a phase.

    For ``psi = R exp(-iS/hbar)``: ``P dS = -hbar Im(conj(psi) dpsi)``.
    """
    g = psi.grid
    v = psi.values
    dt = time_derivative(v, g)
    dx = gradient(v, g)
    j0 = -params.hbar * np.imag(np.conj(v) * dt) / params.c
    j1 = -params.hbar * np.imag(np.conj(v) * dx)
    return FourCurrent(j0, j1)
