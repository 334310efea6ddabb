import math

import numpy as np
import pytest

from cmm import kernels
from cmm.core import Parameter, Tape, Tensor, ops
from cmm.core.gradcheck import numeric_grad, relative_error
from cmm.transducer import (LatticeLayout, OracleError, brute_force_nll, transducer_loss, transducer_nll)


def random_log_probs(rng, T, U, V):
    x = rng.normal(scale=2.0, size=(T, U + 1, V + 1))
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def test_single_node():
    lp = np.log(np.array([[[0.2, 0.3, 0.5]]]))
    loss, lat = transducer_nll(lp, [])
    assert loss == pytest.approx(-math.log(0.5), abs=1e-15)
    assert lat.alpha[0, 0] == 0.0


def test_single_frame_single_token():
    lp = np.log(np.array([[[0.6, 0.1, 0.3], [0.25, 0.5, 0.25]]]))
    loss, _ = transducer_nll(lp, [0])
    assert loss == pytest.approx(-math.log(0.6 * 0.25), abs=1e-14)


def test_uniform_closed_form():
    # T=2, U=1: C(2,1)=2 paths of 3 steps each, every step 1/3
    lp = np.full((2, 2, 3), -math.log(3.0))
    loss, _ = transducer_nll(lp, [1])
    assert loss == pytest.approx(3 * math.log(3.0) - math.log(2.0), abs=1e-14)
    assert brute_force_nll(np.full((1, 1, 7), -math.log(7.0)), []) == pytest.approx(math.log(7.0), abs=1e-15)


def test_matches_brute_force_on_random_instances(rng):
    for _ in range(150):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 7))
        lp = random_log_probs(rng, T, U, V)
        y = rng.integers(0, V, size=U)
        dp, _ = transducer_nll(lp, y)
        assert abs(dp - brute_force_nll(lp, y)) < 1e-10
        assert dp >= 0


def test_anti_diagonals_carry_the_total(rng):
    lp = random_log_probs(rng, 4, 3, 5)
    loss, lat = transducer_nll(lp, [0, 4, 2])
    np.testing.assert_allclose(lat.diagonal_totals(), -loss, rtol=0, atol=1e-8)


def test_forced_path_has_zero_loss():
    # T=3, U=2: emit a at t=0, blank, emit b at t=1, blank, blank
    T, U, V = 3, 2, 4
    lp = np.full((T, U + 1, V + 1), -1e4)
    path = {(0, 0): 1, (0, 1): V, (1, 1): 3, (1, 2): V, (2, 2): V}
    for (t, u), k in path.items():
        lp[t, u, k] = 0.0
    loss, _ = transducer_nll(lp, [1, 3])
    assert loss < 1e-9


def test_oracle_refuses_large_instances(rng):
    with pytest.raises(OracleError):
        brute_force_nll(random_log_probs(rng, 12, 12, 2), rng.integers(0, 2, size=12), max_paths=1000)


def test_shape_errors():
    with pytest.raises(ValueError):
        transducer_nll(np.zeros((2, 3, 4)), [0])


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_numba_and_numpy_kernels_agree(rng):
    for _ in range(30):
        T, U, V = int(rng.integers(1, 9)), int(rng.integers(0, 6)), 5
        lp = random_log_probs(rng, T, U, V)
        y = rng.integers(0, V, size=U)
        blank = lp[:, :, -1]
        emit = lp[:, np.arange(U), y] if U else np.zeros((T, 0))
        a1, b1, l1 = kernels.lattice_np(blank, emit)
        a2, b2, l2 = kernels.lattice_nb(blank, emit)
        np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b1, b2, rtol=0, atol=1e-12)
        assert abs(l1 - l2) < 1e-12


def _packed(rng, Ts, Us, V):
    lays = [random_log_probs(rng, T, U, V).reshape(T * (U + 1), V + 1) for T, U in zip(Ts, Us)]
    targets = [rng.integers(0, V, size=U) for U in Us]
    return np.concatenate(lays), targets


def test_batched_loss_matches_single(rng):
    Ts, Us, V = [3, 1, 4], [2, 0, 3], 4
    flat, targets = _packed(rng, Ts, Us, V)
    layout = LatticeLayout.build(Ts, targets)
    losses = transducer_loss(Parameter(flat, "lp"), layout, V).data
    for b, (T, U) in enumerate(zip(Ts, Us)):
        block = flat[layout.row_off[b] : layout.row_off[b] + T * (U + 1)].reshape(T, U + 1, V + 1)
        assert abs(losses[b] - transducer_nll(block, targets[b])[0]) < 1e-12


@pytest.mark.parametrize("use_numba", [False, True])
def test_batched_gradient_finite_differences(rng, monkeypatch, use_numba):
    if use_numba and not kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setattr(kernels, "USE_NUMBA", use_numba)
    Ts, Us, V = [3, 2], [2, 1], 3
    flat, targets = _packed(rng, Ts, Us, V)
    layout = LatticeLayout.build(Ts, targets)
    p = Parameter(flat, "lp")
    w = np.array([0.7, 1.3])

    def f():
        return ops.total(ops.mul(transducer_loss(p, layout, V), Tensor(w)))

    with Tape() as tape:
        root = f()
    an = tape.backward(root)[p]
    num = numeric_grad(f, p, step=1e-6)
    assert relative_error(an, num).max() < 1e-6


def test_loss_is_linear_in_duplicates(rng):
    Ts, Us, V = [3], [2], 3
    flat, targets = _packed(rng, Ts, Us, V)
    one = transducer_loss(Parameter(flat, "a"), LatticeLayout.build(Ts, targets), V).data
    two = transducer_loss(Parameter(np.concatenate([flat, flat]), "b"), LatticeLayout.build(Ts * 2, targets * 2), V).data
    np.testing.assert_array_equal(two, np.concatenate([one, one]))
