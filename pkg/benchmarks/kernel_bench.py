"""Throughput comparison of the numba and numpy kernel backends.

Times the five hot kernels on the tensor shapes a training step actually
produces, plus (optionally) a complete dual-network optimization step.
Useful for checking that the numba path is worth keeping and for sizing
end-to-end experiments on a new machine.

Usage:
    python benchmarks/kernel_bench.py
    python benchmarks/kernel_bench.py --train-step --depth 2 --base-channels 6
"""

import argparse
import time

import numpy as np

from noduleseg import kernels


def _time(fn, *args, repeat=5, warmup=2):
    """Best-of-`repeat` wall time in seconds (after `warmup` untimed calls)."""
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _conv_shapes(batch, base, size, depth):
    """(B, Cin, Cout, H, W) for each double-conv in a U-Net forward pass."""
    shapes = []
    for level in range(depth + 1):
        c = base * 2 ** level
        cin = 1 if level == 0 else base * 2 ** (level - 1)
        h = size // 2 ** level
        shapes.append((batch, cin, c, h, h))   # first conv of the block
        shapes.append((batch, c, c, h, h))     # second conv
    for level in range(depth - 1, -1, -1):     # decoder blocks after concat
        c = base * 2 ** level
        h = size // 2 ** level
        shapes.append((batch, 3 * c, c, h, h))
        shapes.append((batch, c, c, h, h))
    return shapes


def bench_kernels(args):
    rng = np.random.default_rng(0)
    rows = []
    for b, cin, cout, h, w in _conv_shapes(args.batch_size, args.base_channels,
                                           args.image_size, args.depth):
        x = rng.standard_normal((b, cin, h, w), dtype=np.float32)
        wgt = rng.standard_normal((cout, cin, 3, 3), dtype=np.float32)
        bias = np.zeros(cout, dtype=np.float32)
        dy = rng.standard_normal((b, cout, h, w), dtype=np.float32)
        flops = 2.0 * b * cout * cin * 9 * h * w
        times = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            times[backend] = {
                "fwd": _time(kernels.conv3x3_forward, x, wgt, bias),
                "dx": _time(kernels.conv3x3_input_grad, dy, wgt),
                "dw": _time(kernels.conv3x3_param_grad, x, dy),
            }
        for op in ("fwd", "dx", "dw"):
            tn = times.get("numba", {}).get(op)
            tp = times["numpy"][op]
            rows.append((f"conv {cin:>3}->{cout:<3} {h}x{w}", op, flops, tn, tp))

    # one representative pooling shape per level
    for level in range(args.depth):
        c = args.base_channels * 2 ** level
        h = args.image_size // 2 ** level
        x = rng.standard_normal((args.batch_size, c, h, h), dtype=np.float32)
        times = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            pooled, idx = kernels.maxpool2_forward(x)
            times[backend] = {
                "fwd": _time(kernels.maxpool2_forward, x),
                "bwd": _time(kernels.maxpool2_backward, pooled, idx),
            }
        for op in ("fwd", "bwd"):
            tn = times.get("numba", {}).get(op)
            tp = times["numpy"][op]
            rows.append((f"pool {c:>3}ch    {h}x{h}", op, None, tn, tp))

    print(f"{'kernel':<24} {'op':<4} {'numba':>10} {'numpy':>10} "
          f"{'speedup':>8} {'numba GFLOP/s':>14}")
    for name, op, flops, tn, tp in rows:
        if tn is None:
            print(f"{name:<24} {op:<4} {'n/a':>10} {tp * 1e3:>8.2f}ms")
            continue
        gf = f"{flops / tn / 1e9:>14.1f}" if flops else " " * 14
        print(f"{name:<24} {op:<4} {tn * 1e3:>8.2f}ms {tp * 1e3:>8.2f}ms "
              f"{tp / tn:>7.1f}x {gf}")


def bench_train_step(args):
    from noduleseg.model import SegModel
    from noduleseg.trainer import SGD
    from noduleseg import losses

    rng = np.random.default_rng(0)
    b, s = args.batch_size, args.image_size
    x = rng.random((b, 1, s, s), dtype=np.float32)
    yi = (rng.random((b, s, s)) < 0.2).astype(np.uint8)
    yu = (rng.random((b, s, s)) < 0.3).astype(np.uint8)
    u = (yu & ~yi).astype(np.uint8)

    def step(models, opts):
        logits = [m.forward(x) for m in models]
        _, g1 = losses.ce_loss_with_grad(logits[0], yi)
        d, gd = losses.dice_loss_with_grad(logits[0], yi)
        _, g2 = losses.ce_loss_with_grad(logits[1], yu)
        _, gd2 = losses.dice_loss_with_grad(logits[1], yu)
        _, c1, c2 = losses.cross_teaching_loss_with_grad(logits[0], logits[1], u)
        grads = [g1 + gd + 0.1 * c1, g2 + gd2 + 0.1 * c2]
        for m, o, g in zip(models, opts, grads):
            m.zero_grad()
            m.backward(g.astype(np.float32))
            o.step(m.parameters(), 0.01)

    print(f"\nfull dual step: depth={args.depth} base={args.base_channels} "
          f"batch={b} size={s}")
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        models = [SegModel(args.depth, args.base_channels, seed=i) for i in (0, 1)]
        opts = [SGD(m.parameters(), 0.9, 1e-4) for m in models]
        t = _time(step, models, opts, repeat=args.repeat, warmup=2)
        print(f"  {backend:<6} {t * 1e3:>9.1f} ms/step   "
              f"({2000 * t / 60:.1f} min per 2000 iters)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--image-size", type=int, default=128)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base-channels", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-step", action="store_true",
                    help="also time a complete dual-network SGD step")
    args = ap.parse_args()
    bench_kernels(args)
    if args.train_step:
        bench_train_step(args)


if __name__ == "__main__":
    main()
