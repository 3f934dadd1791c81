"""Time the compiled replay kernel against the pure-Python fallback.

The workload mirrors one threshold sweep: 120 evidence streams of 10-30
slices replayed at 21 thresholds.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import importlib
import timeit

import numpy as np

from evistream import _replay_py


def workload(seed=0, subjects=120):
    rng = np.random.default_rng(seed)
    streams = [rng.normal(0, 1.0, size=(int(rng.integers(10, 31)), 2)) for _ in range(subjects)]
    thresholds = np.arange(1, 22) * 0.05
    return streams, thresholds


def sweep(impl, streams, thresholds):
    out = []
    for ev in streams:
        w = impl.confidence_weights(ev)
        out.append(impl.replay(ev, w, thresholds)[0])
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    streams, thresholds = workload()
    impls = {"python": _replay_py}
    try:
        impls["cython"] = importlib.import_module("evistream._replay")
    except ImportError:
        print("compiled kernel not built; timing the fallback only")
    results = {name: sweep(impl, streams, thresholds) for name, impl in impls.items()}
    if "cython" in results:
        assert all(np.array_equal(a, b) for a, b in zip(results["python"], results["cython"]))
    times = {}
    for name, impl in impls.items():
        t = min(timeit.repeat(lambda: sweep(impl, streams, thresholds), number=1, repeat=args.repeat))
        times[name] = t
        print(f"{name:>7}: {t * 1e3:8.2f} ms per sweep")
    if "cython" in times:
        print(f"speedup: {times['python'] / times['cython']:.1f}x")


if __name__ == "__main__":
    main()
