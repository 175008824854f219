"""Compare the numba and numpy kernel backends.

Times each kernel on toy-model shapes, then one training step of the
localization net under each backend (in a subprocess, since the backend is
fixed at import). Usage: ``python benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from dpscnn import kernels

STEP_SNIPPET = """
import time, numpy as np
from dpscnn.core import Tape, Tensor, sgd_step
from dpscnn.locnet import LocalizationNet, loc_loss
net = LocalizationNet(5)
rng = np.random.default_rng(0)
x = rng.random((16, 3, 112, 112))
y = rng.integers(0, 6, (16, 28, 28))
def step():
    with Tape() as tape:
        loss = loc_loss(net(Tensor(x)), y)
    tape.backward(loss)
    sgd_step(net.params().values(), 0.0, 0.9)
step()
times = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)
print(min(times))
"""


def kernel_cases(rng):
    n, c, size, k, s = 16, 16, 58, 3, 1
    xp = rng.normal(size=(n, c, size, size))
    ho = wo = (size - k) // s + 1
    cols = rng.normal(size=(c * k * k, n * ho * wo))
    x = rng.normal(size=(n, 32, 56, 56))
    fmap = rng.normal(size=(n, 32, 28, 28))
    origins = rng.integers(0, 22, (n, 15, 2)).astype(np.int64)
    mask = rng.random((n, 15)) < 0.9
    g = rng.normal(size=(n, 15, 32, 7, 7))
    maps = rng.random((n * 6, 28, 28))
    arg = kernels.backend("numpy").maxpool_forward(x, 2, 2)[1]
    dout = rng.normal(size=(n, 32, 28, 28))
    kern = np.outer(*(2 * [np.exp(-np.arange(-2, 3) ** 2 / 2.0)]))
    return {
        "im2col": lambda b: b.im2col(xp, k, s, ho, wo),
        "col2im": lambda b: b.col2im(cols, n, c, size, size, k, s, ho, wo),
        "maxpool_forward": lambda b: b.maxpool_forward(x, 2, 2),
        "maxpool_backward": lambda b: b.maxpool_backward(dout, arg, 56, 56, 2, 2),
        "crop_gather": lambda b: b.crop_gather(fmap, origins, mask, 7, 7),
        "crop_scatter": lambda b: b.crop_scatter(g, origins, mask, 28, 28),
        "smooth2d": lambda b: b.smooth2d(maps, kern),
    }


def training_step(name, repeat):
    env = dict(os.environ, DPSCNN_KERNELS=name)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = {name: kernels.backend(name) for name in ("numpy", "numba")}
    rows = []
    for name, fn in kernel_cases(rng).items():
        fn(backends["numba"])  # compile outside the timing
        t = {b: min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) for b, mod in backends.items()}
        rows.append({"kernel": name, "numpy_ms": t["numpy"] * 1e3, "numba_ms": t["numba"] * 1e3})
    step = {b: training_step(b, args.repeat) for b in backends}
    rows.append({"kernel": "loc_train_step(16x112x112)", "numpy_ms": step["numpy"] * 1e3,
                 "numba_ms": step["numba"] * 1e3})
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<28}{r['numpy_ms']:>10.2f}{r['numba_ms']:>10.2f}{r['numpy_ms'] / r['numba_ms']:>8.1f}x")


if __name__ == "__main__":
    main()
