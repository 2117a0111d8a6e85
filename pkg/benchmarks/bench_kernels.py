"""Timing comparison of the two kernel backends.

Runs every conv and pool shape the default encoder touches during one
training step (batch 32, 64x64 input, stages 8/16/32 channels) against
both backends and prints per-op medians. The crossover constants in
``c2l.kernels`` (_SMALL_CHANNEL_PRODUCT, _SMALL_CONV_MACS) come from
this table: the compiled loops win pooling and thin convolutions, the
numpy im2col/GEMM path wins once the channel product grows.

Usage: python3 benchmarks/bench_kernels.py [--batch 32] [--repeats 30]
"""

import argparse
import time
import statistics

import numpy as np

from c2l import kernels
from c2l.kernels import reference


def _median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def conv_cases(batch):
    # (name, in_channels, out_channels, spatial) per encoder stage
    stages = [("stage1", 1, 8, 64), ("stage2", 8, 16, 32),
              ("stage3", 16, 32, 16)]
    rng = np.random.default_rng(0)
    for name, c, o, hw in stages:
        x = rng.standard_normal((batch, c, hw, hw), dtype=np.float32)
        w = rng.standard_normal((o, c, 3, 3), dtype=np.float32)
        g = rng.standard_normal((batch, o, hw, hw), dtype=np.float32)
        yield name, x, w, g


def pool_cases(batch):
    stages = [("stage1", 8, 64), ("stage2", 16, 32), ("stage3", 32, 16)]
    rng = np.random.default_rng(1)
    for name, c, hw in stages:
        x = rng.standard_normal((batch, c, hw, hw), dtype=np.float32)
        yield name, x


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = {"numpy": reference}
    native = kernels._BACKENDS.get("native")
    if native is not None:
        backends["native"] = native
    else:
        print("note: compiled backend not built; timing numpy only\n")

    header = f"{'op':<28}" + "".join(f"{n + ' (ms)':>14}" for n in backends)
    if len(backends) == 2:
        header += f"{'native/numpy':>14}{'auto picks':>12}"
    print(header)
    print("-" * len(header))

    def report(op_name, runners, auto_pick):
        row = f"{op_name:<28}"
        results = {}
        for bname, fn in runners.items():
            results[bname] = _median_ms(fn, args.repeats)
            row += f"{results[bname]:>14.3f}"
        if len(results) == 2:
            ratio = results["native"] / results["numpy"]
            row += f"{ratio:>14.2f}{auto_pick:>12}"
        print(row)

    for name, x, w, g in conv_cases(args.batch):
        h, width = x.shape[2], x.shape[3]
        mod = kernels._conv_module(x.shape[0], x.shape[1], w.shape[0],
                                   h, width)
        pick = "native" if mod is native else "numpy"
        report(f"conv {name} forward",
               {b: (lambda m=m: m.conv2d_forward(x, w, 1, 1))
                for b, m in backends.items()}, pick)
        report(f"conv {name} grad input",
               {b: (lambda m=m: m.conv2d_backward_input(g, w, 1, 1,
                                                        h, width))
                for b, m in backends.items()}, pick)
        report(f"conv {name} grad kernel",
               {b: (lambda m=m: m.conv2d_backward_kernel(g, x, 1, 1))
                for b, m in backends.items()}, pick)

    for name, x in pool_cases(args.batch):
        out, idx = reference.maxpool2x2_forward(x)
        gout = np.ones_like(out)
        report(f"pool {name} forward",
               {b: (lambda m=m: m.maxpool2x2_forward(x))
                for b, m in backends.items()}, "native")
        report(f"pool {name} backward",
               {b: (lambda m=m: m.maxpool2x2_backward(gout, idx))
                for b, m in backends.items()}, "native")

    for bname, mod in backends.items():
        if bname == "numpy":
            continue
        # agreement check so the table can be trusted
        for name, x, w, g in conv_cases(args.batch):
            ref = reference.conv2d_forward(x, w, 1, 1)
            got = mod.conv2d_forward(x, w, 1, 1)
            np.testing.assert_allclose(got, ref, rtol=2e-5, atol=2e-5)
    print("\nbackends agree on every conv case (rtol 2e-5)")


if __name__ == "__main__":
    main()
