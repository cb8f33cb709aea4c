"""Uniform 1-D spacetime grids, finite differences and polar decomposition.

Arrays sampled on a grid carry time along axis 0 and space along the last
axis.  All stencils are second order; fixed-zero grids use one-sided
second-order formulas at the two walls, periodic grids wrap around.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

PERIODIC = "periodic"
FIXED_ZERO = "fixed-zero"
BOUNDARIES = (PERIODIC, FIXED_ZERO)

NONRELATIVISTIC = "nonrelativistic"
RELATIVISTIC = "relativistic"
CONVENTIONS = (NONRELATIVISTIC, RELATIVISTIC)

NODE_EPSILON = 1e-6


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid ``x_min + j*dx`` times ``k*dt``.

    Periodic grids hold ``n_x`` points (``x_max`` is identified with
    ``x_min``); fixed-zero grids hold ``n_x + 1`` points including both walls.
    """

    x_min: float
    x_max: float
    n_x: int
    dt: float
    n_t: int
    boundary: str = PERIODIC

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def periodic(self) -> bool:
        return self.boundary == PERIODIC

    @property
    def n_points(self) -> int:
        return self.n_x if self.periodic else self.n_x + 1

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_t)

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    def with_time(self, dt: float, n_t: int) -> "Grid1D":
        return replace(self, dt=dt, n_t=n_t)

    def summary(self) -> dict:
        return {"dx": self.dx, "dt": self.dt, "n_x": self.n_x, "n_t": self.n_t}

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min, "x_max": self.x_max, "n_x": self.n_x,
            "dt": self.dt, "n_t": self.n_t, "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid1D":
        return make_grid(d["x_min"], d["x_max"], d["n_x"], d["dt"], d["n_t"],
                         d.get("boundary", PERIODIC))


def make_grid(x_min, x_max, n_x, dt, n_t, boundary=PERIODIC) -> Grid1D:
    """Validated ``Grid1D``.  CFL is checked by the solver, not here."""
    x_min, x_max, dt = float(x_min), float(x_max), float(dt)
    if int(n_x) != n_x or int(n_t) != n_t:
        raise GridError("n_x and n_t must be integers")
    n_x, n_t = int(n_x), int(n_t)
    if not x_max > x_min:
        raise GridError(f"x_max ({x_max}) must exceed x_min ({x_min})")
    if n_x < 16:
        raise GridError(f"n_x must be >= 16, got {n_x}")
    if n_t < 2:
        raise GridError(f"n_t must be >= 2, got {n_t}")
    if not dt >= 0 or not np.isfinite(dt):
        raise GridError(f"dt must be finite and non-negative, got {dt}")
    if boundary not in BOUNDARIES:
        raise GridError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    return Grid1D(x_min, x_max, n_x, dt, n_t, boundary)


@dataclass
class PhysicalParams:
    """Physical constants of a run; natural units by default.

    ``V`` is an optional potential sampled on the grid points.
    """

    hbar: float = 1.0
    m: float = 1.0
    c: float = 1.0
    alpha: float = 1.0
    V: Optional[np.ndarray] = None
    E_vac: float = 0.0
    lambda_decay: float = 0.0
    v_d: float = 1.0

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if not self.m >= 0:
            raise ValueError("m must be non-negative")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.E_vac >= 0:
            raise ValueError("E_vac must be non-negative")
        if not self.lambda_decay >= 0:
            raise ValueError("lambda_decay must be non-negative")
        if not self.v_d > 0:
            raise ValueError("v_d must be positive")
        if self.V is not None:
            self.V = np.asarray(self.V, dtype=float)

    @property
    def D(self) -> float:
        """Diffusion coefficient hbar/(2m)."""
        return self.hbar / (2.0 * self.m)

    def potential(self, grid: Grid1D) -> np.ndarray:
        if self.V is None:
            return np.zeros(grid.n_points)
        V = np.broadcast_to(self.V, (grid.n_points,)) if self.V.ndim == 0 else self.V
        if V.shape != (grid.n_points,):
            raise ValueError(f"V has shape {V.shape}, grid has {grid.n_points} points")
        return np.asarray(V, dtype=float)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("hbar", "m", "c", "alpha", "E_vac", "lambda_decay", "v_d")}
        d["V"] = None if self.V is None else np.asarray(self.V).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicalParams":
        kw = dict(d)
        if kw.get("V") is not None:
            kw["V"] = np.asarray(kw["V"], dtype=float)
        return cls(**kw)


@dataclass
class ComplexWaveField:
    """Complex samples indexed ``(t, x)`` on ``grid``."""

    grid: Grid1D
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        expect = (self.grid.n_t, self.grid.n_points)
        if self.values.shape != expect:
            raise ValueError(f"values shape {self.values.shape} != grid shape {expect}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite samples")

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    @property
    def norm_history(self) -> np.ndarray:
        return self.density.sum(axis=-1) * self.grid.dx

    def slices(self, start: int, stop: int) -> "ComplexWaveField":
        """Sub-field of time slices ``start:stop`` with the time origin kept."""
        g = self.grid.with_time(self.grid.dt, stop - start)
        return ComplexWaveField(g, self.values[start:stop],
                                self.t0 + start * self.grid.dt)

    @property
    def times(self) -> np.ndarray:
        """Absolute sample times (``t0 + k*dt``)."""
        return self.t0 + self.grid.t


# ----------------------------------------------------------------------
# finite differences


def gradient(f, grid: Grid1D):
    """Second-order spatial derivative along the last axis."""
    f = np.asarray(f)
    dx = grid.dx
    if grid.periodic:
        return (np.roll(f, -1, axis=-1) - np.roll(f, 1, axis=-1)) / (2.0 * dx)
    g = np.empty_like(f, dtype=np.result_type(f, float))
    g[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2.0 * dx)
    g[..., 0] = (-3.0 * f[..., 0] + 4.0 * f[..., 1] - f[..., 2]) / (2.0 * dx)
    g[..., -1] = (3.0 * f[..., -1] - 4.0 * f[..., -2] + f[..., -3]) / (2.0 * dx)
    return g


def laplacian(f, grid: Grid1D):
    """Compact three-point second derivative along the last axis."""
    f = np.asarray(f)
    inv = 1.0 / grid.dx ** 2
    if grid.periodic:
        return (np.roll(f, -1, axis=-1) - 2.0 * f + np.roll(f, 1, axis=-1)) * inv
    g = np.empty_like(f, dtype=np.result_type(f, float))
    g[..., 1:-1] = (f[..., 2:] - 2.0 * f[..., 1:-1] + f[..., :-2]) * inv
    g[..., 0] = (2.0 * f[..., 0] - 5.0 * f[..., 1] + 4.0 * f[..., 2] - f[..., 3]) * inv
    g[..., -1] = (2.0 * f[..., -1] - 5.0 * f[..., -2] + 4.0 * f[..., -3] - f[..., -4]) * inv
    return g


def _require_slices(history, n):
    if history.ndim < 2 or history.shape[0] < n:
        raise ValueError(f"need at least {n} time slices, got "
                         f"{history.shape[0] if history.ndim >= 2 else 1}")


def time_derivative(history, grid: Grid1D):
    """Second-order derivative along axis 0 (time), one-sided at the ends."""
    h = np.asarray(history)
    _require_slices(h, 3)
    dt = grid.dt
    g = np.empty_like(h, dtype=np.result_type(h, float))
    g[1:-1] = (h[2:] - h[:-2]) / (2.0 * dt)
    g[0] = (-3.0 * h[0] + 4.0 * h[1] - h[2]) / (2.0 * dt)
    g[-1] = (3.0 * h[-1] - 4.0 * h[-2] + h[-3]) / (2.0 * dt)
    return g


def second_time_derivative(history, grid: Grid1D):
    h = np.asarray(history)
    _require_slices(h, 3)
    inv = 1.0 / grid.dt ** 2
    g = np.empty_like(h, dtype=np.result_type(h, float))
    g[1:-1] = (h[2:] - 2.0 * h[1:-1] + h[:-2]) * inv
    if h.shape[0] >= 4:
        g[0] = (2.0 * h[0] - 5.0 * h[1] + 4.0 * h[2] - h[3]) * inv
        g[-1] = (2.0 * h[-1] - 5.0 * h[-2] + 4.0 * h[-3] - h[-4]) * inv
    else:
        g[0] = g[1]
        g[-1] = g[1]
    return g


def dalembertian(history, grid: Grid1D, c: float = 1.0):
    """(1/c^2) d^2/dt^2 - d^2/dx^2, signature (+,-,-,-)."""
    h = np.asarray(history)
    return second_time_derivative(h, grid) / c ** 2 - laplacian(h, grid)


def _winding_offset(S, period):
    """Action advance across one period of a periodic grid, per slice."""
    ahead = S[..., -1] + (S[..., -1] - S[..., -2])
    return period * np.round((ahead - S[..., 0]) / period)


def _pad_action(S, period):
    off = _winding_offset(S, period)[..., None]
    return np.concatenate([S[..., -1:] - off, S, S[..., :1] + off], axis=-1)


def action_gradient(S, grid: Grid1D, hbar: float = 1.0):
    """``gradient`` for an unwrapped action, honouring phase winding."""
    S = np.asarray(S, dtype=float)
    if not grid.periodic:
        return gradient(S, grid)
    p = _pad_action(S, 2 * np.pi * hbar)
    return (p[..., 2:] - p[..., :-2]) / (2.0 * grid.dx)


def action_laplacian(S, grid: Grid1D, hbar: float = 1.0):
    S = np.asarray(S, dtype=float)
    if not grid.periodic:
        return laplacian(S, grid)
    p = _pad_action(S, 2 * np.pi * hbar)
    return (p[..., 2:] - 2.0 * p[..., 1:-1] + p[..., :-2]) / grid.dx ** 2


def action_dalembertian(S, grid: Grid1D, c: float = 1.0, hbar: float = 1.0):
    S = np.asarray(S, dtype=float)
    return second_time_derivative(S, grid) / c ** 2 - action_laplacian(S, grid, hbar)


def dilate(mask, grid: Grid1D, width_x: int, width_t: int = 0):
    """Grow a boolean ``(t, x)`` mask by the given stencil reach."""
    m = np.asarray(mask, dtype=bool).copy()
    out = m.copy()
    for s in range(1, width_x + 1):
        if grid.periodic:
            out |= np.roll(m, s, axis=-1) | np.roll(m, -s, axis=-1)
        else:
            out[..., s:] |= m[..., :-s]
            out[..., :-s] |= m[..., s:]
    if width_t and m.ndim >= 2:
        base = out.copy()
        for s in range(1, width_t + 1):
            out[s:] |= base[:-s]
            out[:-s] |= base[s:]
    return out


# ----------------------------------------------------------------------
# polar decomposition


@dataclass
class PolarField:
    """Amplitude and action of a complex field.

    ``S`` carries units of hbar; the field is ``R*exp(+iS/hbar)`` for the
    nonrelativistic convention and ``R*exp(-iS/hbar)`` for the relativistic
    one.  ``defect_mask`` flags neighbours straddling a phase jump close to
    pi (an unresolved node crossing), where no phase gradient exists.
    """

    grid: Grid1D
    R: np.ndarray
    S: np.ndarray
    convention: str
    node_mask: np.ndarray
    defect_mask: np.ndarray
    hbar: float = 1.0
    node_epsilon: float = NODE_EPSILON
    t0: float = 0.0

    @property
    def P(self) -> np.ndarray:
        return self.R ** 2

    @property
    def sign(self) -> float:
        return 1.0 if self.convention == NONRELATIVISTIC else -1.0

    @property
    def invalid(self) -> np.ndarray:
        return self.node_mask | self.defect_mask

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.grid.t

    def reconstruct(self) -> np.ndarray:
        return self.R * np.exp(1j * self.sign * self.S / self.hbar)


def _unwrap_row(theta, good):
    """Unwrap one row along x using only ``good`` samples; fill the rest."""
    idx = np.flatnonzero(good)
    row = np.array(theta, dtype=float)
    if idx.size == 0:
        return np.zeros_like(row)
    unwrapped = np.unwrap(row[idx])
    if idx.size == row.size:
        return unwrapped
    out = np.interp(np.arange(row.size), idx, unwrapped)
    out[idx] = unwrapped
    return out


def polar_decompose(psi: ComplexWaveField, convention: str = RELATIVISTIC,
                    hbar: float = 1.0, node_epsilon: float = NODE_EPSILON) -> PolarField:
    """Split ``psi`` into amplitude ``R = |psi|`` and continuous action ``S``.

    The phase is unwrapped along x in each slice, then consecutive slices are
    aligned by unwrapping in time at a reference point of large amplitude.
    Phase values inside the node mask are interpolated from unmasked
    neighbours.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    values = psi.values
    R = np.abs(values)
    rmax = R.max()
    if rmax == 0.0:
        raise ValueError("null field")
    node = R < node_epsilon * rmax
    theta = np.angle(values)
    phase = np.empty_like(theta)
    for k in range(theta.shape[0]):
        phase[k] = _unwrap_row(theta[k], ~node[k])

    # align slices by 2*pi multiples, tracking a point that is never a node
    score = np.where(node, 0.0, R).min(axis=0)
    ref = int(np.argmax(score)) if score.max() > 0 else int(np.argmax(R[0]))
    track = np.unwrap(theta[:, ref])
    shift = np.round((track - phase[:, ref]) / (2 * np.pi)) * 2 * np.pi
    phase += shift[:, None]

    jump = np.abs(np.diff(phase, axis=-1))
    bad = (jump > 0.5 * np.pi) & ~node[:, 1:] & ~node[:, :-1]
    defect = np.zeros_like(node)
    defect[:, 1:] |= bad
    defect[:, :-1] |= bad
    if psi.grid.periodic:
        wrap = np.abs(np.angle(np.exp(1j * (theta[:, 0] - theta[:, -1]))))
        wbad = (wrap > 0.5 * np.pi) & ~node[:, 0] & ~node[:, -1]
        defect[:, 0] |= wbad
        defect[:, -1] |= wbad

    sign = 1.0 if convention == NONRELATIVISTIC else -1.0
    S = sign * hbar * phase
    return PolarField(psi.grid, R, S, convention, node, defect, hbar,
                      node_epsilon, t0=getattr(psi, "t0", 0.0))
