"""Compare the numba and numpy kernel backends.

Kernel timings call both implementations directly in one process. The
end-to-end timing runs one training step per backend in a subprocess,
because the backend is fixed at import time by ``MIXSEG_NUMBA``.

    python benchmarks/bench_kernels.py [--repeats N] [--no-train-step]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixseg.kernels import get_kernel

TRAIN_STEP = """
import time
import numpy as np
from mixseg.kernels import BACKEND
from mixseg.model import ModelConfig, build_model
from mixseg.optim import AdamState
from mixseg.preprocess import PatchSample
from mixseg.training import MixedBatch, train_step
rng = np.random.default_rng(0)
model = build_model(ModelConfig.reduced(num_classes=4, input_size=32))
mask = rng.integers(0, 4, (32, 32)).astype(np.uint8)
seg = [PatchSample(image=rng.integers(0, 256, (32, 32, 3), dtype=np.uint8), mask=mask) for _ in range(4)]
cls = [PatchSample(image=rng.integers(0, 256, (32, 32, 3), dtype=np.uint8), label=1) for _ in range(16)]
w, state = np.ones(4, dtype=np.float32), AdamState()
train_step(model, MixedBatch(seg, cls), w, state)  # warm-up and compilation
t0 = time.perf_counter()
for _ in range({reps}):
    train_step(model, MixedBatch(seg, cls), w, state)
print(BACKEND, (time.perf_counter() - t0) / {reps})
"""


def kernel_cases(rng):
    x = rng.standard_normal((20, 16, 34, 34)).astype(np.float32)
    cols = get_kernel("im2col", "numpy")(x, 3, 3, 1, 32, 32)
    pooled, arg = get_kernel("maxpool_forward", "numpy")(x, 3, 2, 16, 16)
    points = rng.standard_normal((20000, 2))
    centers = rng.standard_normal((40, 2))
    return {
        "im2col": (x, 3, 3, 1, 32, 32),
        "col2im": (cols, 34, 34, 1),
        "maxpool_forward": (x, 3, 2, 16, 16),
        "maxpool_backward": (np.ones_like(pooled), arg, 34, 34),
        "kmeans_assign": (points, centers),
    }


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, args in kernel_cases(rng).items():
        times = {}
        for backend in ("numpy", "numba"):
            fn = get_kernel(name, backend)
            fn(*args)  # compile / warm caches
            times[backend] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats)) * 1e3
        print(f"{name:<18}{times['numpy']:>12.2f}{times['numba']:>12.2f}{times['numpy'] / times['numba']:>9.1f}x")


def bench_train_step(reps):
    print(f"\n{'backend':<18}{'train step ms':>14}")
    for flag in ("0", "1"):
        env = dict(os.environ, MIXSEG_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_STEP.format(reps=reps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"{out[0]:<18}{float(out[1]) * 1e3:>14.1f}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--no-train-step", action="store_true")
    args = parser.parse_args(argv)
    bench_kernels(args.repeats)
    if not args.no_train_step:
        bench_train_step(5)


if __name__ == "__main__":
    main()
