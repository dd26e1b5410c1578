"""Time the numba and numpy convolution backends on search-sized shapes.

    python benchmarks/bench_conv.py [--repeat N]
"""
import argparse
import time

import numpy as np

from metakernel import kernels
from metakernel._accel import HAS_NUMBA

# (name, input shape, kernel shape, stride, pad) as seen in one search step at batch 64
CASES = [
    ("depthwise 24x24 c8 k7", (64, 8, 24, 24), (8, 1, 7, 7), 1, 3, True),
    ("depthwise 24x24 c16 k7 s2", (64, 16, 24, 24), (16, 1, 7, 7), 2, 3, True),
    ("depthwise 12x12 c32 k7 s2", (64, 32, 12, 12), (32, 1, 7, 7), 2, 3, True),
    ("stem 24x24 3x3", (64, 1, 24, 24), (8, 1, 3, 3), 1, 1, False),
    ("pointwise 12x12 16->16", (64, 16, 12, 12), (16, 16, 1, 1), 1, 0, False),
]


def best_of(fn, repeat):
    fn()                      # warm-up (also triggers numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(repeat):
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if HAS_NUMBA else [])
    print(f"{'case':30s} {'pass':8s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup")
    for name, xs, ks, stride, pad, depthwise in CASES:
        x, k = rng.normal(size=xs), rng.normal(size=ks)
        fwd = kernels.depthwise_forward if depthwise else kernels.conv2d_forward
        bwd = kernels.depthwise_backward if depthwise else kernels.conv2d_backward
        gy = np.ones_like(fwd(x, k, stride, pad, pad))
        for label, call in (("forward", lambda: fwd(x, k, stride, pad, pad)),
                            ("backward", lambda: bwd(gy, x, k, stride, pad, pad))):
            row = {}
            for b in backends:
                prev = kernels.set_backend(b)
                try:
                    row[b] = best_of(call, repeat)
                finally:
                    kernels.set_backend(prev)
            speed = f"{row['numpy'] / row['numba']:8.2f}x" if "numba" in row else "       -"
            print(f"{name:30s} {label:8s} " + " ".join(f"{row[b] * 1e3:8.2f}ms" for b in backends)
                  + f"  {speed}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    run(p.parse_args().repeat)
