"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so ``CMM_NUMBA`` does not matter here. The
first numba call (compilation) is excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from cmm import kernels


def _lattice_case(rng, T, U):
    blank = np.log(rng.uniform(0.1, 0.9, size=(T, U + 1)))
    emit = np.log(rng.uniform(0.1, 0.9, size=(T, U)))
    return blank, emit


def _batch_case(rng, B, T, U, V):
    Ts = np.full(B, T, dtype=np.int64)
    Us = np.full(B, U, dtype=np.int64)
    sizes = Ts * (Us + 1)
    row_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    x = rng.normal(size=(int(sizes.sum()), V + 1))
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    targets = rng.integers(0, V, size=B * U).astype(np.int64)
    tgt_off = np.arange(B, dtype=np.int64) * U
    return logp, row_off, Ts, Us, targets, tgt_off, V


def bench(name, f_np, f_nb, args, repeat, number):
    out_np, out_nb = f_np(*args), f_nb(*args)  # also triggers compilation
    a = np.concatenate([np.ravel(np.asarray(x, dtype=np.float64)) for x in (out_np if isinstance(out_np, tuple) else (out_np,))])
    b = np.concatenate([np.ravel(np.asarray(x, dtype=np.float64)) for x in (out_nb if isinstance(out_nb, tuple) else (out_nb,))])
    finite = np.isfinite(a)
    assert np.array_equal(finite, np.isfinite(b)) and np.allclose(a[finite], b[finite], rtol=1e-12, atol=1e-12), name
    t_np = min(timeit.repeat(lambda: f_np(*args), repeat=repeat, number=number)) / number
    t_nb = min(timeit.repeat(lambda: f_nb(*args), repeat=repeat, number=number)) / number
    print(f"{name:<34} numpy {1e3 * t_np:9.3f} ms   numba {1e3 * t_nb:9.3f} ms   x{t_np / t_nb:6.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    for T, U in [(20, 8), (80, 30), (200, 60)]:
        bench(f"lattice T={T} U={U}", kernels.lattice_np, kernels.lattice_nb, _lattice_case(rng, T, U),
              args.repeat, 20)
    for B, T, U in [(32, 18, 6), (32, 60, 20)]:
        bench(f"transducer_batch B={B} T={T} U={U}", kernels.transducer_batch_np, kernels.transducer_batch_nb,
              _batch_case(rng, B, T, U, 72), args.repeat, 5)
    for n in (10, 50, 200):
        a, b = rng.integers(0, 20, n), rng.integers(0, 20, n)
        bench(f"edit_distance n={n}", kernels.edit_distance_np, kernels.edit_distance_nb, (a, b), args.repeat, 50)


if __name__ == "__main__":
    main()
