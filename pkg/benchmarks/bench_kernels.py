"""Compiled vs numpy kernel timings at the shapes a desk-scale run sees.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-step]

Prints one row per kernel with the best-of-N time for each backend and the
speedup. The last rows time a full forward+backward+Adam step of the proxy
and main desk models under each backend.
"""

import argparse
import timeit

import numpy as np

from irrcurr import autodiff as ad
from irrcurr import kernels
from irrcurr.model import MAIN_DESK, PROXY_DESK, LanguageModel
from irrcurr.trainer import Adam, TrainConfig


def kernel_cases(rng):
    # batch 32, context 128, d_model 256, 4 heads, vocab 256
    rows, d, t = 32 * 127, 256, 127
    x = rng.normal(size=(rows, 4 * d)).astype(np.float32)
    h = rng.normal(size=(rows, d)).astype(np.float32)
    g, b = np.ones(d, np.float32), np.zeros(d, np.float32)
    att = rng.normal(size=(32 * 4, t, t)).astype(np.float32)
    logits = rng.normal(size=(rows, 256)).astype(np.float32)
    targets = rng.integers(0, 256, rows)
    p = rng.normal(size=MAIN_DESK.param_count()).astype(np.float32)
    m, v = np.zeros_like(p), np.zeros_like(p)

    _, mean, rstd = kernels.layernorm_forward(h, g, b, 1e-5)
    probs = kernels.softmax_forward(att, 0.125, True)
    _, ce_p = kernels.cross_entropy_forward(logits, targets)
    grow = np.full(rows, 1.0 / rows, np.float32)
    return {
        "gelu_forward": lambda: kernels.gelu_forward(x),
        "gelu_backward": lambda: kernels.gelu_backward(x, x),
        "layernorm_forward": lambda: kernels.layernorm_forward(h, g, b, 1e-5),
        "layernorm_backward": lambda: kernels.layernorm_backward(h, h, mean, rstd, g),
        "softmax_forward": lambda: kernels.softmax_forward(att, 0.125, True),
        "softmax_backward": lambda: kernels.softmax_backward(probs, att, 0.125),
        "cross_entropy_forward": lambda: kernels.cross_entropy_forward(logits, targets),
        "cross_entropy_backward": lambda: kernels.cross_entropy_backward(ce_p, targets, grow),
        "adam_update": lambda: kernels.adam_update(p, p, m, v, 1e-4, 0.9, 0.999, 1e-8, 1),
        "all_finite": lambda: kernels.all_finite(p),
    }


def step_case(config, rng):
    model = LanguageModel.init(config, seed=0)
    opt = Adam(model.params, TrainConfig(total_steps=10, early_ckpt_step=1, late_ckpt_interval=1))
    batch = rng.integers(0, 256, size=(32, config.context_len))

    def step():
        loss = model.loss(batch)
        opt.step(ad.grad(loss, model.params))

    return step


def best(fn, repeat):
    fn()  # warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step rows")
    args = ap.parse_args(argv)
    try:
        from irrcurr import _kernels  # noqa: F401
    except ImportError:
        raise SystemExit("compiled kernels are not built; run: python3 setup.py build_ext --inplace")

    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    if not args.no_step:
        cases["train step (proxy)"] = step_case(PROXY_DESK, rng)
        cases["train step (main)"] = step_case(MAIN_DESK, rng)

    print(f"{'kernel':<26}{'compiled ms':>13}{'python ms':>13}{'speedup':>9}")
    prev = kernels.BACKEND
    try:
        for name, fn in cases.items():
            n = max(3, args.repeat // 5) if name.startswith("train") else args.repeat
            kernels.set_backend("compiled")
            fast = best(fn, n)
            kernels.set_backend("python")
            slow = best(fn, n)
            print(f"{name:<26}{fast * 1e3:>13.3f}{slow * 1e3:>13.3f}{slow / fast:>8.1f}x")
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
