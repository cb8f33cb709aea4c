"""Residual report entries shared by every equation check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

UNRELIABLE_MASK_FRACTION = 0.5


@dataclass
class ResidualReport:
    """Norms of one pointwise residual over the valid samples of a grid.

    ``residual_l2`` is the root-mean-square over valid samples.  The raw
    residual array and validity mask ride along for convergence studies but
    are not serialized.
    """

    equation_id: str
    residual_max: float
    residual_l2: float
    mask_fraction: float
    grid_summary: dict
    mode_tags: dict = field(default_factory=dict)
    convergence_order: Optional[float] = None
    unreliable: bool = False
    flags: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    residual: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    valid: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "equation_id": self.equation_id,
            "residual_max": num(self.residual_max),
            "residual_l2": num(self.residual_l2),
            "mask_fraction": float(self.mask_fraction),
            "grid_summary": {k: (float(v) if isinstance(v, float) else v)
                             for k, v in self.grid_summary.items()},
            "mode_tags": dict(self.mode_tags),
            "convergence_order": num(self.convergence_order),
            "unreliable": bool(self.unreliable),
            "flags": list(self.flags),
            "notes": list(self.notes),
        }


def make_report(equation_id, residual, valid, grid, mode_tags=None, notes=None):
    r = np.asarray(residual, dtype=float)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), r.shape)
    valid = valid & np.isfinite(r)
    n = valid.sum()
    if n:
        vals = np.abs(r[valid])
        rmax = float(vals.max())
        rl2 = float(np.sqrt(np.mean(vals ** 2)))
    else:
        rmax = rl2 = float("nan")
    frac = 1.0 - n / r.size if r.size else 1.0
    rep = ResidualReport(equation_id, rmax, rl2, float(frac), grid.summary(),
                         dict(mode_tags or {}), notes=list(notes or []),
                         residual=r, valid=valid)
    rep.unreliable = bool(frac >= UNRELIABLE_MASK_FRACTION or n == 0)
    return rep
