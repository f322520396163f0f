"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 2048] [--vocab 64] [--repeat 50]

Prints per-kernel timings at the training shape (batch 32 x 64 positions, 64
tokens) and the cost of one full distillation step with each path active.
"""

import argparse
import time

import numpy as np

from revkd import _kernels
from revkd import autodiff as ad
from revkd.data import Batch
from revkd.distill import DistillConfig, EpochState, distillation_step
from revkd.model import ModelConfig, init_weights


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation on first use
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rows, vocab, rng):
    x = rng.normal(scale=2.0, size=(rows, vocab))
    y = rng.normal(scale=2.0, size=(rows, vocab))
    ids = rng.integers(0, vocab, size=rows)
    g = rng.normal(size=(rows, 64))
    return {
        "log_softmax": lambda impl: impl.log_softmax_rows(x, 0.5),
        "softmax": lambda impl: impl.softmax_rows(x, 0.5),
        "reverse_kl": lambda impl: impl.reverse_kl_rows(x, y, 0.5),
        "forward_kl": lambda impl: impl.forward_kl_rows(x, y, 0.5),
        "embedding_backward": lambda impl: impl.embedding_backward(ids, g, vocab),
    }


def step_timer(rng):
    student_cfg = ModelConfig(vocab_size=64, max_seq_len=64, d_model=64, n_heads=2, n_layers=1, seed=0)
    teacher_cfg = ModelConfig(vocab_size=64, max_seq_len=64, d_model=128, n_heads=4, n_layers=2, seed=1)
    student = init_weights(student_cfg)
    teacher = init_weights(teacher_cfg, requires_grad=False)
    seq = rng.integers(1, 64, size=(32, 65))
    batch = Batch(seq[:, :-1], seq[:, 1:])
    cfg = DistillConfig()

    def step():
        bd = distillation_step(student, student_cfg, [(teacher, teacher_cfg)], batch, cfg, EpochState(0, 6))
        ad.backward(bd.loss)
        for w in student.values():
            w.zero_grad()

    return step


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=2048)
    parser.add_argument("--vocab", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()

    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    impls = {"numpy": _kernels.numpy_impl, "numba": _kernels.numba_impl}

    print(f"kernels on {args.rows} x {args.vocab} rows (best of {args.repeat})")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, case in kernel_cases(args.rows, args.vocab, rng).items():
        t = {k: best_of(lambda impl=impl: case(impl), args.repeat) for k, impl in impls.items()}
        print(f"{name:<20}{1e3 * t['numpy']:>10.3f}{1e3 * t['numba']:>10.3f}{t['numpy'] / t['numba']:>8.2f}x")

    step = step_timer(rng)
    saved = _kernels.active
    t = {}
    try:
        for k, impl in impls.items():
            _kernels.active = impl
            t[k] = best_of(step, max(3, args.repeat // 10))
    finally:
        _kernels.active = saved
    print(f"\nfull distillation step (student d=64, teacher d=128x2, batch 32x64)")
    print(f"{'numpy':<20}{1e3 * t['numpy']:>10.1f} ms")
    print(f"{'numba':<20}{1e3 * t['numba']:>10.1f} ms   ({t['numpy'] / t['numba']:.2f}x)")


if __name__ == "__main__":
    main()
