"""Time the numba and numpy backends on the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (kernel, shape, backend) with the best wall time and
the numba speedup, and checks both backends agree before timing.
"""

import argparse
import time

import numpy as np

from fpcd import _kernels
from fpcd.models import build_student
from fpcd.tensor import cross_entropy

CONV_SHAPES = [(256, 32, 1), (256, 32, 8), (256, 16, 16), (256, 8, 32)]


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def compare(label, make_call, repeat, check):
    results = {}
    outputs = {}
    for backend in ("numpy", "numba"):
        _kernels.set_backend(backend)
        call = make_call()
        outputs[backend] = call()
        results[backend] = best_of(call, repeat)
    check(outputs["numpy"], outputs["numba"])
    speedup = results["numpy"] / results["numba"]
    print(f"{label:<34} numpy {results['numpy'] * 1e3:8.2f} ms  numba {results['numba'] * 1e3:8.2f} ms"
          f"  x{speedup:5.2f}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    original = _kernels.get_backend()
    try:
        for n, h, c in CONV_SHAPES:
            xp = rng.standard_normal((n, h + 2, h + 2, c))
            compare(f"im2col n={n} hw={h} c={c}", lambda: lambda: _kernels.im2col(xp, 3, 1, h, h),
                    args.repeat, lambda a, b: np.testing.assert_array_equal(a, b))
            d = rng.standard_normal((n, h, h, 9 * c))
            compare(f"col2im n={n} hw={h} c={c}", lambda: lambda: _kernels.col2im(d, h + 2, h + 2, 3, 1),
                    args.repeat, lambda a, b: np.testing.assert_allclose(a, b, atol=1e-12))
        for t in (8, 64, 1024):
            x = rng.standard_normal((t, 4096))
            compare(f"fft T={t} M=4096", lambda: lambda: _kernels.fft_radix2(x),
                    args.repeat, lambda a, b: np.testing.assert_allclose(a, b, atol=1e-9))

        videos = rng.random((32, 8, 32, 32, 1))
        labels = rng.integers(0, 8, 32)

        def step_call():
            model = build_student((4, 8, 16, 32), shift_div=4)

            def step():
                loss = cross_entropy(model(videos), labels)
                loss.backward()
                return loss.item()

            return step

        compare("student train step (batch 32)", step_call, args.repeat,
                lambda a, b: np.testing.assert_allclose(a, b, rtol=1e-12))
    finally:
        _kernels.set_backend(original)


if __name__ == "__main__":
    main()
