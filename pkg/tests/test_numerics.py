import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crow.errors import EmptyTensorError, EvaluationError, ShapeError
from crow.numerics import (Rng, cofactor_det, finite_difference_gradient,
                           finite_difference_jacobian, lu_log_abs_det, mat_vec,
                           sample_standard_normal)


def test_mat_vec_identity_and_zero():
    assert np.array_equal(mat_vec(np.eye(3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    assert np.array_equal(mat_vec(np.zeros((2, 4)), [1.0, -2.0, 3.0, 4.0]), [0.0, 0.0])


def test_mat_vec_matches_loop(rng):
    m, v = rng.normal((5, 5)), rng.normal(5)
    loop = [sum(m[i, j] * v[j] for j in range(5)) for i in range(5)]
    assert np.max(np.abs(mat_vec(m, v) - loop)) < 1e-14


def test_mat_vec_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        mat_vec(np.zeros((2, 3)), np.zeros(4))


def test_normal_stream_deterministic():
    a = sample_standard_normal(Rng(42), 1000)
    b = sample_standard_normal(Rng(42), 1000)
    assert a.tobytes() == b.tobytes()
    assert sample_standard_normal(Rng(3), 1).shape == (1,)


def test_normal_moments():
    x = sample_standard_normal(Rng(7), 100_000)
    assert -0.02 < x.mean() < 0.02
    assert 0.97 < x.var() < 1.03


def test_normal_empty_raises():
    with pytest.raises(EmptyTensorError):
        sample_standard_normal(Rng(0), 0)


def test_rng_advances_and_spawn_independent():
    r = Rng(5)
    a, b = r.normal(4), r.normal(4)
    assert not np.array_equal(a, b)
    assert not np.array_equal(Rng(5).spawn(1).normal(4), Rng(5).spawn(2).normal(4))


def test_rng_uniform_range_and_integers():
    u = Rng(11).uniform(10_000)
    assert u.min() > 0.0 and u.max() < 1.0
    k = Rng(11).integers(2, 5, 1000)
    assert set(np.unique(k)) == {2, 3, 4}
    p = Rng(11).permutation(20)
    assert sorted(p.tolist()) == list(range(20))


def test_fd_jacobian_linear_and_product():
    J = finite_difference_jacobian(lambda x: 2.0 * x, np.array([0.3, -1.0, 2.0]))
    assert np.max(np.abs(J - 2.0 * np.eye(3))) < 1e-9
    J = finite_difference_jacobian(lambda x: np.array([x[0] * x[1], x[1] ** 2]), np.array([1.0, 2.0]))
    assert np.max(np.abs(J - [[2.0, 1.0], [0.0, 4.0]])) < 1e-6


def test_fd_jacobian_nan_reports_probe():
    with pytest.raises(EvaluationError, match="probe"):
        finite_difference_jacobian(lambda x: np.sqrt(np.where(x < 0, np.nan, x)), np.array([0.0, 1.0]))


def test_fd_gradient():
    g = finite_difference_gradient(lambda p: float(np.sum(p * p)), np.array([1.0, -2.0]))
    assert np.max(np.abs(g - [2.0, -4.0])) < 1e-8
    assert np.all(finite_difference_gradient(lambda p: 3.0, np.ones(4)) == 0.0)


def test_lu_log_abs_det_simple():
    assert lu_log_abs_det(np.eye(4)) == (1, 0.0)
    sign, la = lu_log_abs_det(np.diag([2.0, 0.5]))
    assert sign == 1 and abs(la) < 1e-15
    assert lu_log_abs_det(np.array([[1.0, 2.0], [2.0, 4.0]])) == (0, -math.inf)
    with pytest.raises(ShapeError):
        lu_log_abs_det(np.zeros((2, 3)))


def test_lu_matches_cofactor_and_numpy(rng):
    m = rng.normal((4, 4))
    sign, la = lu_log_abs_det(m)
    det = cofactor_det(m)
    assert sign == np.sign(det)
    assert abs(la - math.log(abs(det))) < 1e-10
    m8 = rng.normal((8, 8))
    s_np, la_np = np.linalg.slogdet(m8)
    s8, la8 = lu_log_abs_det(m8)
    assert s8 == s_np and abs(la8 - la_np) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_lu_product_rule(seed):
    r = Rng(seed)
    A, B = r.normal((6, 6)), r.normal((6, 6))
    sa, la = lu_log_abs_det(A)
    sb, lb = lu_log_abs_det(B)
    sab, lab = lu_log_abs_det(A @ B)
    assert sab == sa * sb
    assert abs(lab - (la + lb)) < 1e-10
