"""Compiled vs numpy DDA visibility kernels.

    python benchmarks/bench_visibility.py [--sizes 16 32 64] [--views 6] [--repeat 3] [--json out.json]

Each row times one full traversal (every occupied voxel from every camera)
and checks that both kernels return identical bits.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from mvfuse.visibility import traverse_compiled, traverse_numpy


def instance(D: int, n_views: int, density: float, seed: int):
    rng = np.random.default_rng(seed)
    occ = (rng.random((D, D, D)) < density).astype(np.uint8)
    directions = rng.normal(size=(n_views, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = D / 2 + 1.5 * D * directions
    targets = np.ascontiguousarray(np.argwhere(occ), dtype=np.int64)
    return occ, np.ascontiguousarray(origins), targets


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--density", type=float, default=0.15)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the rows here")
    args = p.parse_args(argv)
    if traverse_compiled is None:
        print("compiled kernel not available (build the extension, unset MVFUSE_PURE_PYTHON)", file=sys.stderr)
        return 1

    rows = []
    print(f"{'D':>4} {'rays':>9} {'numpy s':>10} {'cython s':>10} {'speedup':>8}  equal")
    for D in args.sizes:
        occ, origins, targets = instance(D, args.views, args.density, args.seed)
        a = traverse_numpy(occ, origins, targets)
        b = np.asarray(traverse_compiled(occ, origins, targets))
        t_np = min(timeit.repeat(lambda: traverse_numpy(occ, origins, targets), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: traverse_compiled(occ, origins, targets), number=1, repeat=args.repeat))
        row = {"resolution": D, "rays": int(len(origins) * len(targets)), "numpy_s": t_np, "cython_s": t_cy,
               "speedup": t_np / t_cy, "equal": bool(np.array_equal(a, b))}
        rows.append(row)
        print(f"{D:>4} {row['rays']:>9} {t_np:>10.4f} {t_cy:>10.4f} {row['speedup']:>8.1f}  {row['equal']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0 if all(r["equal"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
