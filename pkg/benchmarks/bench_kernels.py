"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under both backends; the table lists
the best wall time of ``--repeat`` runs and the maximum absolute difference
between the two outputs.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from stochmech import _kernels_py
from stochmech.fields import PhysicalParams, make_grid
from stochmech.schrodinger import SchrodingerProblem, analytic_free_gaussian, solve_schrodinger

try:
    from stochmech import _kernels as compiled
except ImportError:
    compiled = None


def _philox(k):
    n = 200_000
    c = np.arange(n, dtype=np.uint32)
    z = np.zeros(n, dtype=np.uint32)
    return lambda: k.philox4x32(c, z, z + 3, z, 1234, 5678)


def _tridiag(k):
    n = 100_000
    rng = np.random.default_rng(0)
    off = np.full(n, -0.5 + 0.1j)
    diag = np.full(n, 2.0 + 0.3j)
    rhs = rng.normal(size=n) + 1j * rng.normal(size=n)
    factor = k.tridiag_factor(off, diag, off)
    return lambda: k.tridiag_solve(factor, rhs)


def _walkers(k):
    n = 200_000
    rng = np.random.default_rng(1)
    pos = rng.uniform(-5, 5, n)
    xp = np.linspace(-10, 10, 1024)
    fp = np.sin(xp)
    kicks = 0.01 * rng.normal(size=n)
    return lambda: k.advance_walkers(pos, xp, fp, kicks, 1e-3, 50.0, -10.0, 10.0, True)[0]


def _cn_solve(name):
    params = PhysicalParams()
    g = make_grid(-10, 10, 1024, 1e-3, 501)
    psi0 = analytic_free_gaussian(0.0, 1.0, 1.0, params, g).values[0]
    prob = SchrodingerProblem(g, params, psi0)
    return lambda: solve_schrodinger(prob, save_every=500, backend=name).values


CASES = [("philox4x32 x2e5", _philox), ("tridiag solve n=1e5", _tridiag),
         ("advance walkers x2e5", _walkers)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled extension not built; only the fallback is timed", file=sys.stderr)

    rows = []
    for label, make in CASES:
        rows.append(_compare(label, make(_kernels_py),
                             make(compiled) if compiled else None, args.repeat))
    rows.append(_compare("Crank-Nicolson 500 steps", _cn_solve("python"),
                         _cn_solve("compiled") if compiled else None, args.repeat))

    print(f"{'kernel':<28}{'python [ms]':>14}{'compiled [ms]':>16}{'speedup':>10}{'max diff':>12}")
    for r in rows:
        comp = f"{r['compiled_ms']:.2f}" if r["compiled_ms"] is not None else "-"
        speed = f"{r['speedup']:.1f}x" if r["speedup"] else "-"
        diff = f"{r['max_abs_diff']:.1e}" if r["max_abs_diff"] is not None else "-"
        print(f"{r['kernel']:<28}{r['python_ms']:>14.2f}{comp:>16}{speed:>10}{diff:>12}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def _compare(label, py_fn, c_fn, repeat):
    t_py = _best(py_fn, repeat)
    row = {"kernel": label, "python_ms": t_py, "compiled_ms": None,
           "speedup": None, "max_abs_diff": None}
    if c_fn is not None:
        t_c = _best(c_fn, repeat)
        a = np.asarray(py_fn(), dtype=complex)
        b = np.asarray(c_fn(), dtype=complex)
        row.update(compiled_ms=t_c, speedup=t_py / t_c,
                   max_abs_diff=float(np.max(np.abs(a - b))))
    return row


if __name__ == "__main__":
    main()
