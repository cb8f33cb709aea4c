"""Crank-Nicolson solver for the 1-D Schroedinger equation and closed forms.

The time step solves ``(1 + i dt H / 2 hbar) psi' = (1 - i dt H / 2 hbar) psi``
with ``H = -hbar^2/(2m) d^2/dx^2 + V``, which is unitary for the discrete
norm ``sum |psi|^2 dx``.  Fixed-zero grids pin the two wall samples to zero
(an infinitely deep box); periodic grids close the tridiagonal system with a
Sherman-Morrison correction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import get_kernels
from .fields import ComplexWaveField, Grid1D, PhysicalParams


class SolverError(RuntimeError):
    """Numerical failure inside a solver (singular system, blow-up)."""


@dataclass
class SchrodingerProblem:
    grid: Grid1D
    params: PhysicalParams
    psi0: np.ndarray
    V: Optional[np.ndarray] = None

    def __post_init__(self):
        self.psi0 = np.asarray(self.psi0, dtype=np.complex128)
        if self.psi0.shape != (self.grid.n_points,):
            raise ValueError(f"psi0 has shape {self.psi0.shape}, grid has "
                             f"{self.grid.n_points} points")
        if self.V is None:
            self.V = self.params.potential(self.grid)
        self.V = np.asarray(self.V, dtype=float)
        norm = np.sum(np.abs(self.psi0) ** 2) * self.grid.dx
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"psi0 is not normalized (norm = {norm!r})")


def normalize(psi, grid: Grid1D):
    psi = np.asarray(psi, dtype=np.complex128)
    return psi / np.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)


class CrankNicolson:
    """Reusable Crank-Nicolson stepper for one problem."""

    def __init__(self, problem: SchrodingerProblem, backend: Optional[str] = None):
        self.problem = problem
        self.k = get_kernels(backend)
        g, p = problem.grid, problem.params
        self.fixed = not g.periodic
        V = problem.V[1:-1] if self.fixed else problem.V
        n = V.size
        beta = 1j * g.dt / (2.0 * p.hbar)
        kin = p.hbar ** 2 / (p.m * g.dx ** 2)
        h_diag = kin + V
        h_off = -0.5 * kin
        self.a_diag = 1.0 + beta * h_diag
        self.a_off = beta * h_off
        self.b_diag = 1.0 - beta * h_diag
        self.b_off = -beta * h_off
        self.identity = g.dt == 0.0
        if self.identity:
            return
        off = np.full(n, self.a_off, dtype=np.complex128)
        diag = self.a_diag.astype(np.complex128)
        try:
            if self.fixed:
                self.factor = self.k.tridiag_factor(off, diag, off)
            else:
                # cyclic system: A = T + w z^T with T tridiagonal
                gamma = -diag[0]
                diag_t = diag.copy()
                diag_t[0] -= gamma
                diag_t[-1] -= self.a_off * self.a_off / gamma
                self.factor = self.k.tridiag_factor(off, diag_t, off)
                w = np.zeros(n, dtype=np.complex128)
                w[0] = gamma
                w[-1] = self.a_off
                self.z = np.zeros(n, dtype=np.complex128)
                self.z[0] = 1.0
                self.z[-1] = self.a_off / gamma
                self.q = self.k.tridiag_solve(self.factor, w)
                self.q_denom = 1.0 + self.z @ self.q
                if self.q_denom == 0:
                    raise ZeroDivisionError("singular cyclic system")
        except ZeroDivisionError as exc:
            raise SolverError(f"singular linear solve: {exc}") from exc

    def _apply_b(self, psi):
        if self.fixed:
            out = self.b_diag * psi
            out[1:] += self.b_off * psi[:-1]
            out[:-1] += self.b_off * psi[1:]
            return out
        return (self.b_diag * psi
                + self.b_off * (np.roll(psi, 1) + np.roll(psi, -1)))

    def step(self, psi):
        if self.identity:
            return psi.copy()
        inner = psi[1:-1] if self.fixed else psi
        rhs = self._apply_b(inner)
        y = self.k.tridiag_solve(self.factor, rhs)
        if not self.fixed:
            y = y - (self.z @ y) / self.q_denom * self.q
        if not np.all(np.isfinite(y)):
            raise SolverError("non-finite values in Crank-Nicolson step")
        if self.fixed:
            out = np.zeros_like(psi)
            out[1:-1] = y
            return out
        return y


def solve_schrodinger(problem: SchrodingerProblem, save_every: int = 1,
                      backend: Optional[str] = None,
                      window: Optional[int] = None) -> ComplexWaveField:
    """Evolve ``problem.psi0`` over ``grid.n_t - 1`` steps of ``grid.dt``.

    Every ``save_every``-th slice is kept; the returned field's grid has the
    corresponding coarser ``dt``.  With ``window`` only the last ``window``
    kept slices are returned, with ``t0`` set to the first of them.
    """
    g = problem.grid
    if save_every < 1:
        raise ValueError("save_every must be >= 1")
    stepper = CrankNicolson(problem, backend)
    n_out = (g.n_t - 1) // save_every + 1
    first = 0 if window is None else max(0, n_out - int(window))
    out = np.empty((n_out - first, g.n_points), dtype=np.complex128)
    psi = problem.psi0.copy()
    if stepper.fixed:
        psi[0] = psi[-1] = 0.0
    if first == 0:
        out[0] = psi
    for k in range(1, (n_out - 1) * save_every + 1):
        psi = stepper.step(psi)
        if k % save_every == 0 and k // save_every >= first:
            out[k // save_every - first] = psi
    dt = g.dt * save_every
    return ComplexWaveField(g.with_time(dt, n_out - first), out, first * dt)


# ----------------------------------------------------------------------
# closed-form references


def analytic_free_gaussian(x0, sigma0, k0, params: PhysicalParams,
                           grid: Grid1D, t0: float = 0.0) -> ComplexWaveField:
    """Freely dispersing normalized Gaussian packet.

    At ``t = 0`` the density is a normal distribution with mean ``x0`` and
    standard deviation ``sigma0``; the carrier is ``exp(i k0 (x - x0))``.
    """
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    hb, m = params.hbar, params.m
    t = (t0 + grid.t)[:, None]
    x = grid.x[None, :]
    a = 1.0 + 1j * hb * t / (2.0 * m * sigma0 ** 2)
    v0 = hb * k0 / m
    omega0 = hb * k0 ** 2 / (2.0 * m)
    psi = ((2.0 * np.pi * sigma0 ** 2) ** -0.25 / np.sqrt(a)
           * np.exp(-(x - x0 - v0 * t) ** 2 / (4.0 * sigma0 ** 2 * a)
                    + 1j * k0 * (x - x0) - 1j * omega0 * t))
    return ComplexWaveField(grid, psi, t0)


def free_gaussian_width(sigma0, t, params: PhysicalParams):
    """Standard deviation of the free packet density at time ``t``."""
    tau = params.hbar * np.asarray(t) / (2.0 * params.m * sigma0 ** 2)
    return sigma0 * np.sqrt(1.0 + tau ** 2)


def box_energy(n, L, params: PhysicalParams):
    """Energy of level ``n`` in an infinitely deep box of length ``L``."""
    return params.hbar ** 2 * n ** 2 * np.pi ** 2 / (2.0 * params.m * L ** 2)


def analytic_box_eigenstate(n, L, params: PhysicalParams, grid: Grid1D,
                            t0: float = 0.0) -> ComplexWaveField:
    if int(n) != n or n < 1:
        raise ValueError(f"box level n must be a positive integer, got {n}")
    if grid.periodic:
        raise ValueError("box eigenstates need a fixed-zero grid")
    if abs(grid.x_min) > 1e-12 * L or abs(grid.x_max - L) > 1e-12 * L:
        raise ValueError(f"grid must span [0, {L}], got [{grid.x_min}, {grid.x_max}]")
    E = box_energy(n, L, params)
    t = (t0 + grid.t)[:, None]
    profile = np.sqrt(2.0 / L) * np.sin(n * np.pi * grid.x / L)
    profile[0] = profile[-1] = 0.0
    psi = profile[None, :] * np.exp(-1j * E * t / params.hbar)
    return ComplexWaveField(grid, psi, t0)
