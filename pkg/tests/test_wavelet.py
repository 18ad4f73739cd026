import re
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewha.verify import dense_dwt, periodic_analysis_matrix
from fewha.wavelet import (
    daubechies_filter,
    dwt_forward,
    dwt_inverse,
    dwt_inverse_transposed,
    highpass_filter,
    scale_index_map,
    subbands,
)

ORDERS = range(1, 11)


def _grid(j, seed=0):
    return np.random.default_rng(seed).standard_normal((2**j, 2**j))


# -- filters ------------------------------------------------------------------------


@pytest.mark.parametrize("order", ORDERS)
def test_filter_is_orthonormal_with_vanishing_moments(order):
    h = daubechies_filter(order)
    g = highpass_filter(h)
    assert h.size == 2 * order
    np.testing.assert_allclose(h.sum(), np.sqrt(2), rtol=1e-14)
    for m in range(order):
        shifted = np.dot(h[2 * m :], h[: h.size - 2 * m])
        np.testing.assert_allclose(shifted, 1.0 if m == 0 else 0.0, atol=1e-14)
    k = np.arange(h.size, dtype=float)
    for p in range(order):
        # high-pass annihilates polynomials of degree < order
        assert abs(np.sum(g * k**p)) <= 1e-10 * np.sum(np.abs(g) * k**p)


def test_haar_filter():
    np.testing.assert_allclose(daubechies_filter(1), np.array([1.0, 1.0]) / np.sqrt(2), rtol=1e-15)


@pytest.mark.parametrize("order", ORDERS)
def test_filter_matches_pywavelets(order):
    pywt = pytest.importorskip("pywt")
    # PyWavelets stores the analysis filter time-reversed
    ref = np.array(pywt.Wavelet(f"db{order}").dec_lo)[::-1]
    np.testing.assert_allclose(daubechies_filter(order), ref, atol=1e-15)


def test_filter_order_out_of_range():
    with pytest.raises(ValueError):
        daubechies_filter(0)
    with pytest.raises(ValueError):
        daubechies_filter(11)


# -- forward ------------------------------------------------------------------------


@pytest.mark.parametrize("j", [1, 3, 5, 7])
@pytest.mark.parametrize("order", [1, 3, 10])
def test_constant_grid_goes_to_coarse_coefficient(j, order):
    c = 1.7
    out = dwt_forward(np.full((2**j, 2**j), c), order)
    np.testing.assert_allclose(out[0, 0], c * 2**j, rtol=1e-12)
    details = out.copy()
    details[0, 0] = 0.0
    assert np.max(np.abs(details)) <= 1e-12 * c * 2**j


@given(j=st.integers(1, 6), order=st.integers(1, 10), seed=st.integers(0, 2**32 - 1))
def test_norm_is_preserved(j, order, seed):
    x = _grid(j, seed)
    ratio = np.linalg.norm(dwt_forward(x, order)) / np.linalg.norm(x)
    assert 1 - 1e-12 <= ratio <= 1 + 1e-12


def test_impulse_equals_dense_matrix_column():
    x = np.zeros((8, 8))
    x[0, 0] = 1.0
    W = dense_dwt(3, 3)
    np.testing.assert_allclose(dwt_forward(x, 3).ravel(), W[:, 0], atol=1e-15)


@pytest.mark.parametrize("order", [1, 2, 3, 6])
def test_forward_matches_kronecker_oracle(order):
    W = dense_dwt(3, order)
    probe = np.column_stack([dwt_forward(e.reshape(8, 8), order).ravel() for e in np.eye(64)])
    np.testing.assert_allclose(probe, W, atol=1e-14)
    np.testing.assert_allclose(W @ W.T, np.eye(64), atol=1e-13)


@pytest.mark.parametrize("order", [1, 2, 3, 4, 7, 10])
def test_single_level_matches_pywavelets(order):
    """One analysis level equals PyWavelets' periodized ``dwtn`` once the input is rolled by ``order - 1``."""
    pywt = pytest.importorskip("pywt")
    x = _grid(5, order)
    n = x.shape[0]
    ref = pywt.dwtn(x, f"db{order}", mode="periodization")
    h = daubechies_filter(order)
    A = periodic_analysis_matrix(n, h, highpass_filter(h))
    y = A @ np.roll(x, (order - 1, order - 1), axis=(0, 1)) @ A.T
    s = n // 2
    # pywt keys name the filter along axis 0 first
    blocks = {"aa": y[:s, :s], "ad": y[:s, s:], "da": y[s:, :s], "dd": y[s:, s:]}
    for key, block in blocks.items():
        np.testing.assert_allclose(block, ref[key], atol=1e-12)
    # later levels only touch the low-pass quadrant, so the finest details agree with the full transform
    y0 = A @ x @ A.T
    full = dwt_forward(x, order)
    np.testing.assert_allclose(full[s:, :], y0[s:, :], atol=1e-12)
    np.testing.assert_allclose(full[:s, s:], y0[:s, s:], atol=1e-12)


def test_rejects_bad_shapes():
    with pytest.raises(ValueError, match="power of two"):
        dwt_forward(np.zeros((6, 6)))
    with pytest.raises(ValueError, match="square"):
        dwt_inverse(np.zeros((8, 4)))
    with pytest.raises(ValueError, match="power of two"):
        dwt_inverse_transposed(np.zeros((12, 12)))


# -- inverse -------------------------------------------------------------------------


@given(j=st.integers(1, 7), order=st.integers(1, 10), seed=st.integers(0, 2**32 - 1))
def test_perfect_reconstruction(j, order, seed):
    x = _grid(j, seed)
    back = dwt_inverse(dwt_forward(x, order), order)
    assert np.max(np.abs(back - x)) <= 1e-10 * np.max(np.abs(x))


def test_zero_coefficients_give_zero_grid():
    np.testing.assert_array_equal(dwt_inverse(np.zeros((16, 16))), 0.0)


@pytest.mark.parametrize("j", [1, 3, 6])
def test_coarse_unit_coefficient_is_flat(j):
    c = np.zeros((2**j, 2**j))
    c[0, 0] = 1.0
    np.testing.assert_allclose(dwt_inverse(c), 2.0**-j, rtol=1e-12)


def test_inverse_matches_dense_inverse():
    W = dense_dwt(3, 3)
    Winv = np.linalg.inv(W)
    probe = np.column_stack([dwt_inverse(e.reshape(8, 8), 3).ravel() for e in np.eye(64)])
    np.testing.assert_allclose(probe, Winv, atol=1e-13)


# -- transposed inverse -----------------------------------------------------------------


def test_adjoint_identity_1000_trials():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        j = int(rng.integers(1, 6))
        order = int(rng.integers(1, 11))
        x = rng.standard_normal((2**j, 2**j))
        y = rng.standard_normal((2**j, 2**j))
        lhs = np.sum(dwt_inverse(x, order) * y)
        rhs = np.sum(x * dwt_inverse_transposed(y, order))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    assert worst <= 1e-12


@given(arrays(np.float64, (16, 16), elements=st.floats(-1e3, 1e3)), st.integers(1, 10))
def test_transposed_inverse_equals_forward(x, order):
    np.testing.assert_allclose(dwt_inverse_transposed(x, order), dwt_forward(x, order), atol=1e-12 * (1 + np.abs(x).max()))


def test_transposed_inverse_matches_dense_transpose():
    Winv = np.linalg.inv(dense_dwt(3, 3))
    probe = np.column_stack([dwt_inverse_transposed(e.reshape(8, 8), 3).ravel() for e in np.eye(64)])
    np.testing.assert_allclose(probe, Winv.T, atol=1e-13)


# -- sub-bands ------------------------------------------------------------------------


@pytest.mark.parametrize("j", [1, 3, 7])
def test_subbands_partition_the_grid(j):
    n = 2**j
    hits = np.zeros((n, n), dtype=int)
    bands = subbands(j)
    assert len(bands) == 1 + 3 * j
    scale = scale_index_map(j)
    for sc, _, block in bands:
        hits[block] += 1
        assert np.all(scale[block] == sc)
    np.testing.assert_array_equal(hits, 1)


def test_detail_energy_lands_in_its_scale():
    # a checkerboard is pure finest-scale diagonal detail for the Haar wavelet
    n = 8
    x = (-1.0) ** np.add.outer(np.arange(n), np.arange(n))
    c = dwt_forward(x, 1)
    s = n // 2
    np.testing.assert_allclose(np.sum(c[s:, s:] ** 2), np.sum(x**2), rtol=1e-14)


# -- cost -------------------------------------------------------------------------------


def _best_time(fn, repeats=7):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_linear_cost():
    # layer grids are at most 128 x 128; larger sides leave the L2 cache and time memory traffic instead
    small, large = _grid(7), _grid(8)
    dwt_forward(small)
    dwt_forward(large)
    ratio = _best_time(lambda: dwt_forward(large)) / _best_time(lambda: dwt_forward(small))
    assert ratio <= 4.5, f"doubling the side cost {ratio:.2f}x"


def test_readme_filter_table_matches_implementation():
    text = (Path(__file__).parent.parent / "README.md").read_text()
    blocks = re.findall(r"Order (\d+) \((\d+) taps\):\s*```text\n(.*?)```", text, re.S)
    assert [int(o) for o, _, _ in blocks] == list(range(1, 11))
    for order, taps, body in blocks:
        table = np.array([float(v) for v in re.findall(r"=\s*(\S+)", body)])
        assert len(table) == int(taps) == 2 * int(order)
        np.testing.assert_allclose(table, daubechies_filter(int(order)), rtol=0, atol=1e-15)
