"""Backward-pass and end-to-end timings for both backends.

    python benchmarks/bench_backends.py
"""

import subprocess
import sys
import time

from covsddp import bench


def end_to_end(backend_env: dict) -> float:
    t0 = time.perf_counter()
    subprocess.run(
        [sys.executable, "-m", "covsddp", "run", "--preset", "cosine1d", "--out-dir", "/tmp/covsddp-bench"],
        check=False, env=backend_env, stdout=subprocess.DEVNULL,
    )
    return time.perf_counter() - t0


if __name__ == "__main__":
    import os

    bench.main(sys.argv[1:])
    base = dict(os.environ)
    pure = dict(base, COVSDDP_PURE_PYTHON="1")
    print(f"cosine1d end to end: default {end_to_end(base):.2f} s, pure Python {end_to_end(pure):.2f} s")
