"""Time the hot kernels with and without numba.

The backend is fixed at import time by KNEURONS_NUMBA, so by default this
script re-invokes itself once per setting and prints a comparison table.

    python benchmarks/bench_kernels.py            # both backends
    python benchmarks/bench_kernels.py --single   # current backend only
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best_of(fn, repeat: int) -> float:
    fn()  # warm-up (triggers jit compilation)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run_single(repeat: int) -> dict:
    from kneurons import _kernels
    from kneurons.imaging import inpaint

    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:20, 6:22] = True
    grid = rng.random((4, 4))
    a = rng.integers(0, 20, size=60)
    b = rng.integers(0, 20, size=60)
    cases = {
        "telea_inpaint_32x32": lambda: inpaint(img, mask),
        "bilinear_4x4_to_32x32": lambda: _kernels.bilinear_resize(grid, 32, 32),
        "lcs_60x60": lambda: _kernels.lcs_length(a, b),
    }
    return {"numba": _kernels.USE_NUMBA,
            "times": {k: _best_of(fn, repeat) for k, fn in cases.items()}}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--single", action="store_true", help="benchmark the current backend only")
    ap.add_argument("--json", action="store_true", help="emit raw JSON")
    args = ap.parse_args(argv)

    if args.single:
        res = run_single(args.repeat)
        print(json.dumps(res) if args.json else json.dumps(res, indent=1))
        return 0

    results = {}
    for flag in ("1", "0"):
        env = dict(os.environ, KNEURONS_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--single", "--json", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        results[flag] = json.loads(out.stdout.strip().splitlines()[-1])
    if not results["1"]["numba"]:
        print("numba is unavailable; both columns use the fallback path")
    print(f"{'kernel':26s} {'numba ms':>10s} {'fallback ms':>12s} {'speedup':>8s}")
    for name, t_fast in results["1"]["times"].items():
        t_slow = results["0"]["times"][name]
        print(f"{name:26s} {1e3 * t_fast:10.3f} {1e3 * t_slow:12.3f} {t_slow / t_fast:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
