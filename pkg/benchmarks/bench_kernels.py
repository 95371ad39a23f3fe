"""Compare the compiled and numpy kernel backends on fit-sized workloads.

Usage::

    python benchmarks/bench_kernels.py [--grid 33] [--steps 32] [--repeat 5]

Prints the best-of-``repeat`` wall time per call and the speedup, and checks
that both backends agree to near machine precision.
"""

import argparse
import timeit

import numpy as np

from covdeform import _backend
from covdeform.grid import GridDomain
from covdeform.spline import VelocityField


def make_workload(grid, seed=0):
    dom = GridDomain.square(grid)
    rng = np.random.default_rng(seed)
    V = VelocityField(0.2 * rng.standard_normal((8, 8)), 0.2 * rng.standard_normal((8, 8)), 3, dom.padded(0.2))
    pts = dom.nodes()
    amounts = rng.uniform(-1.0, 1.0, len(pts))
    lam = rng.standard_normal(pts.shape)
    return dom, V, pts, amounts, lam


def bench(kern, dom, V, pts, amounts, lam, steps, repeat):
    box = dom.safety_box(10.0)
    c, tx, ty = V.coeffs, V.knots_x, V.knots_y
    _, stages, _ = kern.flow_forward(pts, amounts, c, tx, ty, 3, steps, box, True)
    calls = {
        "spline_eval": lambda: kern.spline_eval(pts, c, tx, ty, 3),
        "flow_forward": lambda: kern.flow_forward(pts, amounts, c, tx, ty, 3, steps, box, True),
        "flow_adjoint": lambda: kern.flow_adjoint(stages, amounts, lam, c, tx, ty, 3),
    }
    out = {}
    for name, fn in calls.items():
        n = 3 if kern.NAME == "python" else 20
        out[name] = min(timeit.repeat(fn, number=n, repeat=repeat)) / n
    ev = calls["spline_eval"]()
    fw = calls["flow_forward"]()
    adj = calls["flow_adjoint"]()
    return out, [ev[0], ev[1], fw[0], fw[1], *adj]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--grid", type=int, default=33)
    ap.add_argument("--steps", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    work = make_workload(args.grid)
    names = _backend.available()
    timings, results = {}, {}
    for name in names:
        timings[name], results[name] = bench(_backend.get(name), *work, args.steps, args.repeat)
    print(f"{args.grid}x{args.grid} points, {args.steps} RK4 steps, best of {args.repeat}")
    print(f"{'kernel':<14}" + "".join(f"{n:>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for k in timings[names[0]]:
        row = f"{k:<14}" + "".join(f"{timings[n][k] * 1e3:>12.3f}ms" for n in names)
        if "cython" in timings:
            row += f"   {timings['python'][k] / timings['cython'][k]:>6.1f}x"
        print(row)
    if "cython" in results:
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(results["python"], results["cython"]))
        print(f"max abs difference between backends: {diff:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
