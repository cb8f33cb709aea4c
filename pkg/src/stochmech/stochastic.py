"""Walker ensembles for ``dx = b dt + sqrt(alpha) dw`` and equilibrium tests.

Every walker draws from its own Philox4x32-10 stream.  The counter of a draw
is ``(walker_lo, walker_hi, step, tag)`` under the key ``(seed_lo,
seed_hi)``, so a walker's noise depends only on the seed, its index and the
step number; splitting the ensemble across threads cannot change a bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._backend import get_kernels
from .fields import NONRELATIVISTIC, ComplexWaveField, Grid1D, PhysicalParams, polar_decompose
from .schrodinger import CrankNicolson, SchrodingerProblem
from .velocities import drift_velocity

TAG_STEP = 0
TAG_INIT = 1
_MASK32 = 0xFFFFFFFF


def _split64(value):
    value = int(value) & 0xFFFFFFFFFFFFFFFF
    return value & _MASK32, value >> 32


def philox_uniforms(seed, walker_ids, step, tag, backend=None):
    """Two doubles in ``[0, 1)`` per walker, with 53 random bits each."""
    k = get_kernels(backend)
    ids = np.asarray(walker_ids, dtype=np.uint64)
    lo = (ids & np.uint64(_MASK32)).astype(np.uint32)
    hi = (ids >> np.uint64(32)).astype(np.uint32)
    n = ids.size
    step_lo = np.full(n, int(step) & _MASK32, dtype=np.uint32)
    tags = np.full(n, int(tag) & _MASK32, dtype=np.uint32)
    key0, key1 = _split64(seed)
    w = np.asarray(k.philox4x32(lo, hi, step_lo, tags, key0, key1)).astype(np.uint64)
    scale = 1.0 / 9007199254740992.0
    a = ((w[:, 0] >> np.uint64(5)) * np.uint64(67108864) + (w[:, 1] >> np.uint64(6)))
    b = ((w[:, 2] >> np.uint64(5)) * np.uint64(67108864) + (w[:, 3] >> np.uint64(6)))
    return a.astype(float) * scale, b.astype(float) * scale


def philox_normals(seed, walker_ids, step, tag=TAG_STEP, backend=None):
    """One standard normal per walker by the Box-Muller transform."""
    u1, u2 = philox_uniforms(seed, walker_ids, step, tag, backend)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


# ----------------------------------------------------------------------
# piecewise-linear densities


def _density_nodes(P, grid: Grid1D):
    """Node positions and values of the piecewise-linear interpolant.

    Periodic grids get the first sample repeated at ``x_max``.
    """
    P = np.asarray(P, dtype=float)
    if P.shape != (grid.n_points,):
        raise ValueError(f"density has shape {P.shape}, grid has {grid.n_points} points")
    if not np.all(np.isfinite(P)):
        raise ValueError("density has non-finite samples")
    if np.any(P < 0):
        raise ValueError("density has negative samples")
    x = grid.x
    if grid.periodic:
        x = np.append(x, grid.x_max)
        P = np.append(P, P[0])
    return x, P


def _cumulative(x, f):
    seg = 0.5 * (f[1:] + f[:-1]) * np.diff(x)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if not cum[-1] > 0:
        raise ValueError("degenerate density: zero total mass")
    return cum


def density_cdf(P, grid: Grid1D, points):
    """CDF of the normalized interpolant of ``P`` at ``points``."""
    x, f = _density_nodes(P, grid)
    cum = _cumulative(x, f)
    pts = np.asarray(points, dtype=float)
    i = np.clip(np.searchsorted(x, pts, side="right") - 1, 0, x.size - 2)
    h = x[i + 1] - x[i]
    s = np.clip(pts - x[i], 0.0, h)
    slope = (f[i + 1] - f[i]) / h
    mass = cum[i] + f[i] * s + 0.5 * slope * s ** 2
    return np.clip(mass / cum[-1], 0.0, 1.0)


def inverse_density_cdf(P, grid: Grid1D, u):
    """Inverse of ``density_cdf``, exact on each linear segment."""
    x, f = _density_nodes(P, grid)
    cum = _cumulative(x, f)
    target = np.asarray(u, dtype=float) * cum[-1]
    i = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, x.size - 2)
    h = x[i + 1] - x[i]
    r = np.clip(target - cum[i], 0.0, None)
    a = 0.5 * (f[i + 1] - f[i]) / h
    b = f[i]
    disc = np.sqrt(np.maximum(b * b + 4.0 * a * r, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(b + disc > 0, 2.0 * r / (b + disc), 0.0)
    return x[i] + np.clip(s, 0.0, h)


# ----------------------------------------------------------------------
# ensembles


@dataclass
class WalkerEnsemble:
    """Walker positions at time ``t`` after ``step`` Euler-Maruyama steps."""

    positions: np.ndarray
    t: float
    seed: int
    grid: Grid1D
    step: int = 0
    n_capped: int = 0
    walker_ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.walker_ids is None:
            self.walker_ids = np.arange(self.positions.size, dtype=np.uint64)

    @property
    def n_walkers(self) -> int:
        return int(self.positions.size)

    @property
    def stream_offsets(self) -> np.ndarray:
        """Next counter step of each walker's stream."""
        return np.full(self.n_walkers, self.step, dtype=np.int64)


def init_ensemble(P0, n_walkers: int, seed: int, grid: Grid1D,
                  t: float = 0.0, backend=None) -> WalkerEnsemble:
    """Draw walkers from the piecewise-linear interpolant of ``P0``."""
    if int(n_walkers) != n_walkers or n_walkers < 1:
        raise ValueError(f"n_walkers must be a positive integer, got {n_walkers!r}")
    ids = np.arange(int(n_walkers), dtype=np.uint64)
    u, _ = philox_uniforms(seed, ids, 0, TAG_INIT, backend)
    pos = inverse_density_cdf(P0, grid, u)
    return WalkerEnsemble(pos, float(t), int(seed), grid)


def step_ensemble(ensemble: WalkerEnsemble, b_field, params: PhysicalParams,
                  grid: Grid1D, mask=None, workers: int = 1,
                  backend=None) -> WalkerEnsemble:
    """One Euler-Maruyama step with drift linearly interpolated from ``b_field``.

    Samples that are masked or non-finite are skipped by the interpolation.
    The drift is capped at ``dx/dt`` and cap hits are accumulated in
    ``n_capped``.  Walkers reflect at fixed walls and wrap on periodic grids.
    """
    dt = grid.dt
    if dt == 0.0:
        return replace(ensemble, positions=ensemble.positions.copy())
    b = np.asarray(b_field, dtype=float)
    good = np.isfinite(b)
    if mask is not None:
        good &= ~np.asarray(mask, dtype=bool)
    if not good.any():
        raise ValueError("drift field has no usable samples")
    xp, fp = grid.x[good], b[good]
    if grid.periodic:
        L = grid.length
        xp = np.concatenate([[xp[-1] - L], xp, [xp[0] + L]])
        fp = np.concatenate([[fp[-1]], fp, [fp[0]]])
    ids = ensemble.walker_ids
    if params.alpha > 0:
        sd = np.sqrt(params.alpha * params.hbar / params.m * dt)
        kicks = sd * philox_normals(ensemble.seed, ids, ensemble.step, TAG_STEP, backend)
    else:
        kicks = np.zeros(ensemble.n_walkers)
    k = get_kernels(backend)
    cap = grid.dx / dt
    lo, hi = grid.x_min, grid.x_max
    pos = ensemble.positions

    def run(sl):
        out, nc = k.advance_walkers(np.ascontiguousarray(pos[sl]), xp, fp,
                                    np.ascontiguousarray(kicks[sl]), dt, cap,
                                    lo, hi, grid.periodic)
        return np.asarray(out), nc

    n = ensemble.n_walkers
    if workers <= 1 or n < 2 * workers:
        new, n_cap = run(slice(0, n))
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
        new = np.concatenate([p[0] for p in parts])
        n_cap = sum(p[1] for p in parts)
    return replace(ensemble, positions=new, t=ensemble.t + dt, step=ensemble.step + 1,
                   n_capped=ensemble.n_capped + int(n_cap))


def ks_statistic(sample, cdf):
    """Two-sided Kolmogorov-Smirnov distance of ``sample`` from ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def equilibrium_distance(ensemble: WalkerEnsemble, P, grid: Grid1D) -> float:
    if ensemble.n_walkers == 0:
        raise ValueError("empty ensemble")
    return ks_statistic(ensemble.positions, lambda pts: density_cdf(P, grid, pts))


# ----------------------------------------------------------------------
# co-evolution with the Schroedinger solver


@dataclass
class NelsonRun:
    times: np.ndarray
    ks: np.ndarray
    n_walkers: int
    n_capped: int
    ensemble: WalkerEnsemble
    trajectories: Optional[np.ndarray] = None


def slice_drift(psi, grid: Grid1D, params: PhysicalParams):
    """Drift ``b`` and node mask of a single wavefunction slice."""
    g1 = grid.with_time(grid.dt, 1)
    polar = polar_decompose(ComplexWaveField(g1, psi), NONRELATIVISTIC, params.hbar)
    return drift_velocity(polar, params)[0], polar.invalid[0]


def run_nelson(problem: SchrodingerProblem, n_walkers: int, seed: int,
               save_every: int = 1, workers: int = 1, n_tracked: int = 0,
               backend=None) -> NelsonRun:
    """Co-evolve the wavefunction and a walker ensemble started at ``|psi0|^2``.

    After every ``save_every`` steps the KS distance between the walkers and
    the current ``|psi|^2`` is recorded.  ``n_tracked`` walkers have their
    positions kept at the recorded times.
    """
    if int(n_walkers) != n_walkers or n_walkers < 1:
        raise ValueError(f"n_walkers must be a positive integer, got {n_walkers!r}")
    if save_every < 1:
        raise ValueError("save_every must be >= 1")
    g, p = problem.grid, problem.params
    stepper = CrankNicolson(problem, backend)
    psi = problem.psi0.copy()
    if not g.periodic:
        psi[0] = psi[-1] = 0.0
    ens = init_ensemble(np.abs(psi) ** 2, n_walkers, seed, g, backend=backend)
    times, ks, tracks = [0.0], [equilibrium_distance(ens, np.abs(psi) ** 2, g)], []
    n_tracked = min(int(n_tracked), ens.n_walkers)
    if n_tracked:
        tracks.append(ens.positions[:n_tracked].copy())
    for k in range(1, g.n_t):
        b, bad = slice_drift(psi, g, p)
        ens = step_ensemble(ens, b, p, g, bad, workers, backend)
        psi = stepper.step(psi)
        if k % save_every == 0:
            times.append(k * g.dt)
            ks.append(equilibrium_distance(ens, np.abs(psi) ** 2, g))
            if n_tracked:
                tracks.append(ens.positions[:n_tracked].copy())
    traj = np.array(tracks) if n_tracked else None
    return NelsonRun(np.array(times), np.array(ks), ens.n_walkers, ens.n_capped, ens, traj)
