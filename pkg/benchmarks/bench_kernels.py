"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each case runs on identical inputs for both backends, checks that the outputs
agree, and reports the best-of-N wall time.
"""
import argparse
import json
import timeit

import numpy as np

from lod2rect import kernels


def cases(rng):
    n = 1600  # pixels of a 20 m x 10 m roof at 0.5 m
    s = rng.random(n)
    d = 8.0 + 2.0 * s + rng.normal(0, 0.2, n)
    ze = 8.0 + 0.2 * np.arange(-15, 16)
    dz = 0.5 + 0.2 * np.arange(18)
    yield "grid_sse 1600 px x 31 x 18", "grid_sse", (s, d, ze, dz)

    for size in (32, 96):
        m = rng.random((size, size)) < 0.85
        m[size // 4: 3 * size // 4, size // 4: 3 * size // 4] = True
        yield f"max_inner_rect {size}x{size}", "max_inner_rect", (m,)

    size = 200
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((xx - 70) ** 2 + (yy - 100) ** 2 < 55**2) | ((xx - 140) ** 2 + (yy - 100) ** 2 < 55**2)
    markers = np.zeros((size, size), np.int64)
    markers[100, 70], markers[100, 140] = 1, 2
    yield f"watershed_flood {size}x{size}", "watershed_flood", (markers, mask)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    bk = kernels.backends()
    if "cython" not in bk:
        raise SystemExit("compiled kernels not built; run pip install -e . --no-build-isolation")
    rows = []
    for label, name, inputs in cases(np.random.default_rng(0)):
        res, times = {}, {}
        for key, mod in bk.items():
            fn = getattr(mod, name)
            res[key] = fn(*inputs)
            number = 1 if key == "python" else 20
            times[key] = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=args.repeat)) / number
        a, b = res["python"], res["cython"]
        same = np.array_equal(a, b) if name != "grid_sse" else np.allclose(a, b, rtol=1e-12, atol=1e-9)
        rows.append({"case": label, "python_s": times["python"], "cython_s": times["cython"],
                     "speedup": times["python"] / times["cython"], "agree": bool(same)})

    print(f"{'case':32s} {'python':>11s} {'cython':>11s} {'speedup':>8s}  agree")
    for r in rows:
        print(f"{r['case']:32s} {r['python_s'] * 1e3:9.3f}ms {r['cython_s'] * 1e3:9.3f}ms {r['speedup']:7.1f}x  {r['agree']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
