"""Time the numba and numpy variants of each hot kernel side by side.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 5]
    python benchmarks/bench_kernels.py --end-to-end

The kernel table calls both ``*_numba`` and ``*_numpy`` directly (the first
numba call is excluded as JIT warm-up) and checks that they agree.  The
end-to-end mode runs one distillation in two subprocesses, with and without
``DEPTHFUSE_DISABLE_NUMBA=1``.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from depthfuse import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, rng):
    vals = rng.standard_normal((n, n))
    mask = rng.random((n, n)) > 0.05
    x = rng.standard_normal((n, n))
    vw = rng.random((n, n))
    wx = rng.random((n, n - 1))
    wy = rng.random((n - 1, n))
    nb = n // 2
    cy, cx = rng.uniform(0, n, nb), rng.uniform(0, n, nb)
    sig, amp = rng.uniform(1, 4, nb), rng.standard_normal(nb)
    resid = rng.standard_normal((n, n))
    return {
        "bilateral_channel": (vals, mask, 6, 2.0, 0.5),
        "poisson_apply": (x, vw, wx, wy),
        "blob_render": (n, n, cy, cx, sig, amp, 12),
        "blob_grads": (resid, cy, cx, sig, amp, 12),
    }


def kernel_table(size, repeat):
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, args in cases(size, rng).items():
        fast, slow = getattr(K, name + "_numba"), getattr(K, name + "_numpy")
        fast(*args)  # compile
        tf, a = best_of(lambda: fast(*args), repeat)
        ts, b = best_of(lambda: slow(*args), repeat)
        diff = max(float(np.max(np.abs(np.asarray(u) - np.asarray(v))))
                   for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        print(f"{name:<18} {tf * 1e3:10.2f} {ts * 1e3:10.2f} {ts / tf:8.1f} {diff:10.1e}")


SNIPPET = """
import time
from depthfuse import _kernels
from depthfuse.cli import corpus_alpha
from depthfuse.config import Config
from depthfuse.corpus import make_scene
from depthfuse.distill import run_distillation
cfg = Config()
p = cfg.distill_params(alpha=corpus_alpha(cfg))
_, ideal = make_scene(1, cfg.seed)
run_distillation(ideal, cfg.scene_noise(1), 0, p)
t0 = time.perf_counter()
run_distillation(ideal, cfg.scene_noise(1), 2, p)
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def end_to_end():
    for flag in ("0", "1"):
        env = dict(os.environ, DEPTHFUSE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SNIPPET], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"distillation S=2 on scene 1, {out[0]:>5} backend: {float(out[1]):.2f} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    a = ap.parse_args()
    if a.end_to_end:
        end_to_end()
    else:
        kernel_table(a.size, a.repeat)


if __name__ == "__main__":
    main()
