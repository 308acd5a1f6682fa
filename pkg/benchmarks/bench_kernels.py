"""Time the numba kernels against their numpy twins, then a full train step per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 20]

The per-kernel table calls ``np_*`` and ``nb_*`` directly in this process.
The train-step comparison runs a child process per backend because the
backend is chosen once, at import, from ``COSMAE_NUMBA``.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from cosmae import kernels as K


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    # shapes of one desk batch: 64 images, 17 tokens, width 64, 4 heads
    x = rng.standard_normal((64 * 17, 64)).astype(np.float32)
    g = np.ones(64, np.float32)
    b = np.zeros(64, np.float32)
    h = rng.standard_normal((64, 17, 256)).astype(np.float32)
    att = rng.standard_normal((64, 4, 17, 17)).astype(np.float32)
    feats = rng.standard_normal((128, 64))
    img = rng.random((3, 32, 32)).astype(np.float32)
    y, xhat, rstd = K.np_layer_norm_forward(x, g, b, 1e-6)
    sm = K.np_softmax_forward(att)
    return {
        "layer_norm_fwd": (lambda: K.np_layer_norm_forward(x, g, b, 1e-6),
                           lambda: K.nb_layer_norm_forward(x, g, b, 1e-6)),
        "layer_norm_bwd": (lambda: K.np_layer_norm_backward(y, xhat, rstd, g),
                           lambda: K.nb_layer_norm_backward(y, xhat, rstd, g)),
        "gelu_fwd": (lambda: K.np_gelu_forward(h), lambda: K.nb_gelu_forward(h)),
        "gelu_bwd": (lambda: K.np_gelu_backward(h, h), lambda: K.nb_gelu_backward(h, h)),
        "softmax_fwd": (lambda: K.np_softmax_forward(att), lambda: K.nb_softmax_forward(att)),
        "softmax_bwd": (lambda: K.np_softmax_backward(sm, att), lambda: K.nb_softmax_backward(sm, att)),
        "knn_k10": (lambda: K.np_knn_indices(feats, feats, 10, True),
                    lambda: K.nb_knn_indices(feats, feats, 10, True)),
        "crop_resize": (lambda: K.np_crop_resize(img, 3, 2, 27, 29, 32),
                        lambda: K.nb_crop_resize(img, 3, 2, 27, 29, 32)),
    }


STEP_SNIPPET = """
import json, sys, time
import numpy as np
from cosmae import kernels
from cosmae.config import desk_preset
from cosmae.state import TrainState
from cosmae.trainer import train_step
steps = int(sys.argv[1])
state = TrainState.initial(desk_preset(), 0)
x = np.random.default_rng(1).random((64, 3, 32, 32)).astype(np.float32)
train_step(state, x, 1e-4, False, False)
t0 = time.perf_counter()
for _ in range(steps):
    train_step(state, x, 1e-4, False, False)
print(json.dumps({"backend": kernels.BACKEND, "ms_per_step": 1000 * (time.perf_counter() - t0) / steps}))
"""


def step_time(flag, steps):
    env = dict(os.environ, COSMAE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET, str(steps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args(argv)

    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare (pip install numba)")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}")
    for name, (f_np, f_nb) in kernel_cases(rng).items():
        t_np = best_of(f_np, args.repeat) * 1e3
        t_nb = best_of(f_nb, args.repeat) * 1e3
        print(f"{name:16s} {t_np:9.3f} {t_nb:9.3f} {t_np / t_nb:7.2f}x")

    print()
    print("full train step, desk model, batch 64")
    rows = [step_time("0", args.steps), step_time("1", args.steps)]
    for r in rows:
        print(f"  {r['backend']:6s} {r['ms_per_step']:8.2f} ms/step")
    print(f"  speedup {rows[0]['ms_per_step'] / rows[1]['ms_per_step']:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
