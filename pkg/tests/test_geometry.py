import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapebridge.errors import DegenerateShapeError, InsufficientResolutionError, MalformedInputError
from shapebridge.geometry import (FourierShape, PlanarCurve, as_dataset, circle, curve_to_fourier, ellipse,
                                  fourier_to_curve, load_curve, load_fourier, procrustes_align,
                                  procrustes_objective, resample, save_curve, save_fourier,
                                  synthesize_points)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_dft(points, n_bases):
    """Direct double loop over nodes and frequencies."""
    P = len(points)
    out = np.zeros((2, n_bases), dtype=complex)
    for n in range(n_bases):
        for p in range(P):
            phase = np.exp(-1j * n * 2 * np.pi * p / P)
            out[:, n] += points[p] * phase / P
    return out


def _rot(angle):
    return np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])


def band_limited_vector(rng, n_bases):
    vec = rng.standard_normal(4 * n_bases)
    vec[n_bases] = 0.0       # Im x_0
    vec[3 * n_bases] = 0.0   # Im y_0
    return vec


# -- io ---------------------------------------------------------------------

def test_load_three_row_csv(tmp_path):
    f = tmp_path / "tri.csv"
    f.write_text("0,0\n1,0\n0,1\n")
    c = load_curve(f)
    assert c.n_points == 3
    np.testing.assert_array_equal(c.points, [[0, 0], [1, 0], [0, 1]])


def test_two_rows_is_degenerate(tmp_path):
    f = tmp_path / "two.csv"
    f.write_text("x,y\n0,0\n1,0\n")
    with pytest.raises(DegenerateShapeError):
        load_curve(f)


def test_parse_error_names_line(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("x,y\n0,0\n1,zero\n0,1\n")
    with pytest.raises(MalformedInputError) as err:
        load_curve(f)
    assert err.value.line == 3
    assert "bad.csv:3" in str(err.value)


def test_consecutive_duplicates_rejected(tmp_path):
    f = tmp_path / "dup.csv"
    f.write_text("0,0\n1,0\n1,0\n0,1\n")
    with pytest.raises(DegenerateShapeError):
        load_curve(f)


def test_non_finite_rejected(tmp_path):
    f = tmp_path / "nan.csv"
    f.write_text("0,0\n1,nan\n0,1\n")
    with pytest.raises(MalformedInputError):
        load_curve(f)


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_save_load_bit_exact(tmp_path, rng, suffix):
    c = PlanarCurve(rng.standard_normal((57, 2)) * 1e3)
    path = tmp_path / f"c{suffix}"
    save_curve(c, path)
    back = load_curve(path)
    assert np.array_equal(back.points, c.points)


def test_json_curve(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"points": [[0, 0], [2, 0], [2, 2], [0, 2]]}))
    assert load_curve(f).n_points == 4
    f.write_text(json.dumps({"pts": []}))
    with pytest.raises(MalformedInputError):
        load_curve(f)


def test_fourier_json_round_trip(tmp_path, rng):
    shape = FourierShape.from_vector(rng.standard_normal(32))
    save_fourier(shape, tmp_path / "s.json")
    back = load_fourier(tmp_path / "s.json")
    assert np.array_equal(back.to_vector(), shape.to_vector())
    assert set(json.loads((tmp_path / "s.json").read_text())) == {"n_bases", "x_re", "x_im", "y_re", "y_im"}


# -- resampling -------------------------------------------------------------

def test_unit_square_resample():
    square = PlanarCurve([[0, 0], [1, 0], [1, 1], [0, 1]])
    out = resample(square, 8).points
    expected = [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5]]
    np.testing.assert_allclose(out, expected, atol=1e-15)
    gaps = np.linalg.norm(np.roll(out, -1, axis=0) - out, axis=1)
    np.testing.assert_allclose(gaps, 0.5)


@given(st.integers(3, 400))
def test_circle_resample_stays_on_circle(target_P):
    P = 360
    out = resample(circle(P), target_P).points
    sagitta = 1 - np.cos(np.pi / P)
    r = np.linalg.norm(out, axis=1)
    assert np.all(r <= 1 + 1e-12) and np.all(r >= 1 - sagitta - 1e-12)


def test_uniform_polygon_is_fixed_point():
    c = circle(50)
    np.testing.assert_allclose(resample(c, 50).points, c.points, atol=1e-12)


def test_zero_length_curve_rejected():
    with pytest.raises(DegenerateShapeError):
        resample(PlanarCurve(np.ones((5, 2))), 10)


@given(st.floats(0.1, 10.0), st.integers(100, 300), st.integers(1, 5), st.floats(0, 2 * np.pi))
def test_resample_preserves_arc_length(radius, P, factor, angle):
    # equal-edge input: every input vertex is also an output node
    c = PlanarCurve(circle(P, radius).points @ _rot(angle).T)
    out = resample(c, factor * P)
    assert abs(out.arc_length() - c.arc_length()) <= 1e-6 * c.arc_length()


@given(st.integers(17, 50), st.integers(1, 4))
def test_rectangle_arc_length(k, factor):
    corners = [[0, 0], [2, 0], [2, 1], [0, 1]]
    c = resample(PlanarCurve(corners), 6 * k)
    assert abs(resample(c, factor * 6 * k).arc_length() - 6.0) <= 6e-6


def test_resample_length_deficit_shrinks_with_density():
    theta = np.sort(np.random.default_rng(1).uniform(0, 2 * np.pi, 100))
    c = PlanarCurve(np.column_stack([np.cos(theta), np.sin(theta)]))
    deficits = [c.arc_length() - resample(c, P).arc_length() for P in (1000, 10000)]
    assert deficits[0] > 0 and 8 < deficits[0] / deficits[1] < 12


# -- Procrustes -------------------------------------------------------------

def test_identical_copies():
    c = ellipse(40, 2.0, 1.0, center=(3, -1), angle=0.4)
    aligned, mean = procrustes_align(as_dataset([c, c, c]))
    centred = c.points - c.points.mean(axis=0)
    np.testing.assert_allclose(mean.points, centred / np.linalg.norm(centred), atol=1e-10)
    for s in aligned.curves:
        np.testing.assert_allclose(s.points, mean.points, atol=1e-10)


def test_rotated_copy_aligns():
    c = ellipse(64, 1.5, 0.6)
    r = PlanarCurve(c.points @ _rot(np.pi / 2).T * 3.0 + 7.0)
    aligned, _ = procrustes_align(as_dataset([c, r]))
    d = np.linalg.norm(aligned.curves[0].points - aligned.curves[1].points)
    assert d <= 1e-10


def _noisy_set(seed, n=6):
    g = np.random.default_rng(seed)
    base = ellipse(30, 1.5, 0.8).points
    return [PlanarCurve((base + 0.05 * g.standard_normal(base.shape)) @ _rot(g.uniform(0, 6)).T
                        * g.uniform(0.5, 2) + g.standard_normal(2)) for _ in range(n)]


@given(st.permutations(range(6)))
def test_order_does_not_change_mean(order):
    curves = _noisy_set(3)
    _, m1 = procrustes_align(as_dataset(curves), tol=1e-12)
    _, m2 = procrustes_align(as_dataset([curves[i] for i in order]), tol=1e-12)
    np.testing.assert_allclose(m1.points, m2.points, atol=1e-8)


@given(st.integers(0, 10_000))
def test_objective_non_increasing(seed):
    history = []
    procrustes_align(as_dataset(_noisy_set(seed, 5)), history=history)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))


def test_aligned_shapes_are_normalized():
    aligned, mean = procrustes_align(as_dataset(_noisy_set(5)))
    for s in aligned.curves + [mean]:
        np.testing.assert_allclose(s.points.mean(axis=0), 0, atol=1e-12)
        assert np.isclose(np.linalg.norm(s.points), 1.0)
    assert procrustes_objective(aligned.stack(), mean.points) < 0.1


def test_zero_size_curve_rejected():
    flat = PlanarCurve(np.zeros((30, 2)))
    with pytest.raises(DegenerateShapeError):
        procrustes_align(as_dataset([ellipse(30, 1, 2), flat]))


def test_dataset_requires_equal_counts():
    with pytest.raises(DegenerateShapeError):
        as_dataset([circle(10), circle(11)])


# -- Fourier ----------------------------------------------------------------

def test_unit_circle_coefficients():
    coeffs = curve_to_fourier(circle(256), 8).coeffs
    expected = np.zeros((2, 8), dtype=complex)
    expected[0, 1] = 0.5
    expected[1, 1] = -0.5j
    np.testing.assert_allclose(coeffs, expected, atol=1e-10)


def test_constant_curve_is_dc():
    c = PlanarCurve(np.tile([2.5, -1.0], (16, 1)))
    coeffs = curve_to_fourier(c, 5).coeffs
    np.testing.assert_allclose(coeffs[:, 0], [2.5, -1.0], atol=1e-15)
    np.testing.assert_allclose(coeffs[:, 1:], 0, atol=1e-15)


@given(arrays(np.float64, (13, 2), elements=finite), st.integers(1, 13))
def test_fft_matches_direct_sum(points, n_bases):
    np.testing.assert_allclose(curve_to_fourier(points, n_bases).coeffs, naive_dft(points, n_bases),
                               atol=1e-12)


@given(arrays(np.float64, (20, 2), elements=finite))
def test_real_curves_have_real_dc(points):
    assert np.all(curve_to_fourier(points, 4).coeffs[:, 0].imag == 0)


def test_too_many_bases():
    with pytest.raises(InsufficientResolutionError):
        curve_to_fourier(circle(10), 11)


@given(st.integers(1, 16), st.integers(0, 2**31))
def test_band_limited_round_trip(n_bases, seed):
    g = np.random.default_rng(seed)
    P = 2 * n_bases + g.integers(0, 20)
    vec = band_limited_vector(g, n_bases)
    curve = synthesize_points(vec, P)
    back = fourier_to_curve(curve_to_fourier(curve, n_bases), P).points
    np.testing.assert_allclose(back, curve, atol=1e-10)
    np.testing.assert_allclose(curve_to_fourier(curve, n_bases).to_vector(), vec, atol=1e-12)


def test_synthesis_of_zero_and_circle():
    zero = FourierShape(np.zeros((2, 6)))
    np.testing.assert_array_equal(fourier_to_curve(zero, 20).points, 0)
    c = np.zeros((2, 3), dtype=complex)
    c[0, 1], c[1, 1] = 0.5, -0.5j
    np.testing.assert_allclose(fourier_to_curve(FourierShape(c), 64).points, circle(64).points, atol=1e-12)


@given(arrays(np.float64, 24, elements=finite), arrays(np.float64, 24, elements=finite))
def test_synthesis_is_linear(a, b):
    lhs = synthesize_points(a + b, 17)
    np.testing.assert_allclose(lhs, synthesize_points(a, 17) + synthesize_points(b, 17), atol=1e-12)


def test_synthesis_formula_direct():
    g = np.random.default_rng(4)
    vec = g.standard_normal(20)
    shape = FourierShape.from_vector(vec)
    theta = 2 * np.pi * np.arange(11) / 11
    direct = np.empty((11, 2))
    for j in range(2):
        c = shape.coeffs[j]
        direct[:, j] = c[0].real + 2 * sum((c[n] * np.exp(1j * n * theta)).real for n in range(1, 5))
    np.testing.assert_allclose(fourier_to_curve(shape, 11).points, direct, atol=1e-12)


@given(st.integers(1, 64))
def test_feature_length(n_bases):
    vec = curve_to_fourier(circle(128), n_bases).to_vector()
    assert vec.shape == (4 * n_bases,)
    np.testing.assert_array_equal(FourierShape.from_vector(vec).to_vector(), vec)
