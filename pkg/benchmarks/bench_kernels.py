"""Time the numba kernels against their numpy twins, and a full training step per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--skip-step]

The kernel table runs in-process (the ``*_loops`` functions are the jitted
ones when numba is importable).  The training-step rows run in
subprocesses with and without ``MEDUSA_DISABLE_JIT=1`` so the module-level
dispatch is exercised exactly as users get it.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from medusa import kernels
from medusa._jit import HAS_NUMBA

STEP_SNIPPET = """
import time, numpy as np
from medusa._jit import backend
from medusa.backbone import BackboneConfig
from medusa.attention import GlobalConfig
from medusa.model import build_variant
from medusa.ops import loss
from medusa.tensor import Tensor, backward, fresh_tape
b = build_variant("medusa", BackboneConfig((8, 16, 32), 1, (1, 64, 64)), GlobalConfig(3, 4), seed=0)
x = Tensor._wrap(np.random.default_rng(0).random((16, 1, 64, 64)).astype(np.float32))
y = np.arange(16) %% 2
def step():
    with fresh_tape():
        logits, _ = b.forward(x, True, "train", "train")
        backward(loss(logits, y, "softmax_ce"))
step()
t = time.perf_counter()
for _ in range(%d):
    step()
print(backend(), (time.perf_counter() - t) / %d)
"""


def cases(rng):
    n, c, h, w, k = 16, 8, 32, 32, 3
    xpad = rng.standard_normal((n, c, h + 2, w + 2))
    cols = kernels.im2col_numpy(xpad, k, 1, h, w)
    i0, i1, wy = kernels.bilinear_coords(h, 2 * h)
    j0, j1, wx = kernels.bilinear_coords(w, 2 * w)
    x = rng.standard_normal((n, c, h, w))
    g_up = rng.standard_normal((n, c, 2 * h, 2 * w))
    pooled, arg = kernels.maxpool_forward_numpy(x, 2, 2, h // 2, w // 2)
    g_pool = rng.standard_normal(pooled.shape)
    return [
        ("im2col", kernels.im2col_loops, kernels.im2col_numpy, (xpad, k, 1, h, w)),
        ("col2im", kernels.col2im_loops, kernels.col2im_numpy, (cols, n, c, h + 2, w + 2, k, 1, h, w)),
        ("resize fwd", kernels.resize_forward_loops, kernels.resize_forward_numpy, (x, i0, i1, wy, j0, j1, wx)),
        ("resize bwd", kernels.resize_backward_loops, kernels.resize_backward_numpy, (g_up, h, w, i0, i1, wy, j0, j1, wx)),
        ("maxpool fwd", kernels.maxpool_forward_loops, kernels.maxpool_forward_numpy, (x, 2, 2, h // 2, w // 2)),
        ("maxpool bwd", kernels.maxpool_backward_loops, kernels.maxpool_backward_numpy, (g_pool, arg, h, w)),
    ]


def best(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(p, q) for p, q in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba not available: the 'loops' column times plain Python loops")
    rng = np.random.default_rng(0)
    print("%-12s %12s %12s %8s %6s" % ("kernel", "loops ms", "numpy ms", "ratio", "same"))
    for name, loops, vec, a in cases(rng):
        tl = best(loops, a, args.repeat if HAS_NUMBA else 1)
        tv = best(vec, a, args.repeat)
        print("%-12s %12.3f %12.3f %8.2f %6s" % (name, 1e3 * tl, 1e3 * tv, tv / tl, agree(loops(*a), vec(*a))))
    if args.skip_step:
        return
    print()
    print("training step, batch 16 at 64x64 (seconds):")
    code = STEP_SNIPPET % (args.steps, args.steps)
    for disable in ("0", "1"):
        env = dict(os.environ, MEDUSA_DISABLE_JIT=disable)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print("  %-6s %.3f" % (name, float(secs)))


if __name__ == "__main__":
    main()
