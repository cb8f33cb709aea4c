"""CSV/JSON serialization of fields, currents, velocities and ensembles.

Floats are written with 17 significant digits so every file round-trips
bit-exactly.  A field file ``name.csv`` has a JSON sidecar ``name.json``
holding the grid and physical parameters.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .fields import ComplexWaveField, Grid1D, PhysicalParams

FMT = "%.17g"


def write_table(path, header, columns, fmt=FMT):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.column_stack([np.asarray(c) for c in columns]) if columns else np.empty((0, 0))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        if data.size:
            np.savetxt(fh, data, fmt=fmt, delimiter=",")
    return path


def _read_table(path, header):
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
        if first.split(",") != list(header):
            raise ValueError(f"{path}: expected header {','.join(header)}, got {first!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return data


def dump_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    return path


def _spacetime(grid, t0):
    t = t0 + grid.t
    return np.repeat(t, grid.n_points), np.tile(grid.x, grid.n_t)


def write_field(path, field: ComplexWaveField, params: PhysicalParams = None,
                extra: dict = None):
    """Write ``path`` (CSV ``t,x,re,im``) and its ``.json`` sidecar.

    ``extra`` entries (for example the sign convention) go into the sidecar.
    """
    path = Path(path)
    tt, xx = _spacetime(field.grid, field.t0)
    v = field.values.ravel()
    write_table(path, ["t", "x", "re", "im"], [tt, xx, v.real, v.imag])
    sidecar = {"grid": field.grid.to_dict(), "t0": field.t0,
               "params": (params or PhysicalParams()).to_dict()}
    sidecar.update(extra or {})
    dump_json(sidecar, path.with_suffix(".json"))
    return path


def read_sidecar(path):
    with open(Path(path).with_suffix(".json")) as fh:
        return json.load(fh)


def read_field(path):
    """Inverse of ``write_field``; returns ``(field, params)``."""
    path = Path(path)
    side = read_sidecar(path)
    grid = Grid1D.from_dict(side["grid"])
    data = _read_table(path, ["t", "x", "re", "im"])
    if data.shape[0] != grid.n_t * grid.n_points:
        raise ValueError(f"{path}: {data.shape[0]} rows, grid expects "
                         f"{grid.n_t * grid.n_points}")
    values = (data[:, 2] + 1j * data[:, 3]).reshape(grid.n_t, grid.n_points)
    field = ComplexWaveField(grid, values, float(side.get("t0", 0.0)))
    return field, PhysicalParams.from_dict(side["params"])


def write_currents(path, grid, t0, j0, j1):
    tt, xx = _spacetime(grid, t0)
    return write_table(path, ["t", "x", "j0", "j1"],
                        [tt, xx, np.ravel(j0), np.ravel(j1)])


VELOCITY_COLUMNS = ["t", "x", "v", "u", "b", "uD", "uM", "Q", "M", "P", "mask"]


def write_velocities(path, vs):
    """Write a ``VelocityFieldSet`` as CSV; masked samples keep their row."""
    tt, xx = _spacetime(vs.grid, vs.t0)
    shape = (vs.grid.n_t, vs.grid.n_points)
    fields = [vs.current, vs.osmotic, vs.drift, vs.u_D, vs.u_M,
              vs.quantum_potential, vs.mass, vs.density, vs.mask.astype(float)]
    cols = [tt, xx] + [np.ravel(np.broadcast_to(c, shape)) for c in fields]
    return write_table(path, VELOCITY_COLUMNS, cols)


def read_table(path, header):
    return _read_table(path, header)


def write_trajectories(path, times, positions):
    """``positions`` has shape ``(n_times, n_walkers)``."""
    positions = np.asarray(positions)
    n_t, n_w = positions.shape
    wid = np.tile(np.arange(n_w), n_t)
    tt = np.repeat(np.asarray(times, dtype=float), n_w)
    return write_table(path, ["walker_id", "t", "x"],
                        [wid, tt, positions.ravel()], fmt=["%d", FMT, FMT])


def write_ks_series(path, times, ks, n):
    n_arr = np.full(len(times), int(n))
    return write_table(path, ["t", "ks", "n"], [times, ks, n_arr],
                        fmt=[FMT, FMT, "%d"])


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
