"""Kernel-level tests: bump profiles, in-tube transport, orbit walk, QR loop."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from centralshift import _kernels as K

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# -- bump profiles -----------------------------------------------------------


def test_smoothstep_endpoint_values():
    assert K.smoothstep(0.0) == 0.0
    assert K.smoothstep(1.0) == 1.0
    assert K.smoothstep(-3.0) == 0.0
    assert K.smoothstep(7.0) == 1.0
    assert K.smoothstep(0.5) == 0.5


@given(st.floats(min_value=-2.0, max_value=3.0, allow_nan=False))
def test_smoothstep_range_and_certified_bounds(t):
    assert 0.0 <= K.smoothstep(t) <= 1.0
    assert abs(K.smoothstep_d1(t)) <= K.SUP_SMOOTHSTEP_D1 + 1e-12
    assert abs(K.smoothstep_d2(t)) <= K.SUP_SMOOTHSTEP_D2 + 1e-12


def test_smoothstep_derivative_bounds_attained():
    assert K.smoothstep_d1(0.5) == pytest.approx(15.0 / 8.0, abs=0.0)
    t_star = (3.0 - math.sqrt(3.0)) / 6.0
    assert abs(K.smoothstep_d2(t_star)) == pytest.approx(
        10.0 / math.sqrt(3.0), rel=1e-12
    )


def test_smoothstep_derivatives_match_finite_differences():
    h1, h2 = 1e-6, 1e-4
    for t in np.linspace(0.05, 0.95, 19):
        fd1 = (K.smoothstep(t + h1) - K.smoothstep(t - h1)) / (2 * h1)
        fd2 = (
            K.smoothstep(t + h2) - 2 * K.smoothstep(t) + K.smoothstep(t - h2)
        ) / h2**2
        assert fd1 == pytest.approx(K.smoothstep_d1(t), abs=1e-8)
        assert fd2 == pytest.approx(K.smoothstep_d2(t), abs=1e-5)


def test_alpha_profile_contract():
    # alpha(t)=0 for t<=0, =1 for t>=1, 0 <= alpha' <= 2
    assert K.alpha_val(-0.1) == 0.0
    assert K.alpha_val(1.1) == 1.0
    ts = np.linspace(-0.5, 1.5, 4001)
    d1 = np.array([K.alpha_d1(t) for t in ts])
    assert np.all(d1 >= 0.0)
    assert np.all(d1 <= 2.0)
    assert float(np.max(d1)) <= K.SUP_ALPHA_D1 + 1e-12
    d2 = np.array([K.alpha_d2(t) for t in ts])
    assert float(np.max(np.abs(d2))) <= K.SUP_ALPHA_D2 + 1e-12


def test_beta_profile_contract():
    # beta = 1 on [-1/2, 1/2], 0 beyond |t|=1, |beta'| <= 4
    for t in np.linspace(-0.5, 0.5, 21):
        assert K.beta_val(t) == 1.0
    assert K.beta_val(1.0) == 0.0
    assert K.beta_val(-1.2) == 0.0
    ts = np.linspace(-1.5, 1.5, 6001)
    d1 = np.array([K.beta_d1(t) for t in ts])
    assert float(np.max(np.abs(d1))) <= 4.0
    assert float(np.max(np.abs(d1))) <= K.SUP_BETA_D1 + 1e-12
    # even symmetry
    for t in (0.3, 0.6, 0.77, 0.93):
        assert K.beta_val(-t) == K.beta_val(t)
        assert K.beta_d1(-t) == -K.beta_d1(t)


def test_beta_derivative_matches_finite_differences():
    h = 1e-6
    for t in (0.55, 0.7, 0.85, 0.95, -0.6, -0.8):
        fd = (K.beta_val(t + h) - K.beta_val(t - h)) / (2 * h)
        assert fd == pytest.approx(K.beta_d1(t), abs=1e-8)


# -- torus helpers -----------------------------------------------------------


def test_wrap_half_range():
    for x in (-1.7, -0.5, -0.49, 0.0, 0.49, 0.51, 2.3):
        w = K.wrap_half(x)
        assert -0.5 <= w < 0.5
        assert abs((x - w) - round(x - w)) < 1e-12


def test_cat_step_inverse():
    x, y, z = 0.1234, 0.874, 0.555
    fx, fy, fz = K.cat_step(x, y, z, GOLDEN)
    bx, by, bz = K.cat_step_inv(fx, fy, fz, GOLDEN)
    assert (bx, by, bz) == pytest.approx((x, y, z), abs=1e-12)


# -- in-tube transport oracle ------------------------------------------------


def _closed_form_transport(w, h0, h1, xi, r):
    """Exact in-tube map: rigid rotation of (u2,u3) by xi*beta_r(rho)*d_alpha,
    with its exact Jacobian (rotation plus radial-twist rank-one term)."""
    a, b = w
    rho = math.hypot(a, b)
    d_alpha = K.alpha_val(h1) - K.alpha_val(h0)
    theta = xi * K.beta_val(rho / r) * d_alpha
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    w_end = rot @ np.array([a, b])
    if rho == 0.0:
        return w_end, rot
    dtheta_drho = xi * d_alpha * K.beta_d1(rho / r) / r
    jrw = np.array([-w_end[1], w_end[0]])  # J . R_theta . w
    grad = dtheta_drho * np.array([a, b]) / rho
    return w_end, rot + np.outer(jrw, grad)


@pytest.mark.parametrize(
    "w,h0,h1,xi,r",
    [
        ((0.01, -0.02), 0.0, 1.0, 0.3, 0.05),   # plateau (rho < r/2)
        ((0.03, 0.02), 0.0, 1.0, 0.3, 0.05),    # off-plateau shear region
        ((0.041, -0.017), 0.2, 0.9, 0.25, 0.05),  # partial window
        ((0.06, 0.05), 0.0, 1.0, 0.4, 0.1),     # bigger ball
        ((0.0, 0.0), 0.0, 1.0, 0.3, 0.05),      # center fixed
    ],
)
def test_tube_transport_matches_closed_form(w, h0, h1, xi, r):
    a, b, m00, m01, m10, m11 = K.tube_transport(w[0], w[1], h0, h1, xi, r, 1e-3)
    w_exact, m_exact = _closed_form_transport(w, h0, h1, xi, r)
    assert np.allclose([a, b], w_exact, atol=1e-10)
    assert np.allclose([[m00, m01], [m10, m11]], m_exact, atol=1e-9)
    # the twist map is exactly area-preserving
    assert m00 * m11 - m01 * m10 == pytest.approx(1.0, abs=1e-10)


def test_tube_transport_backward_inverts_forward():
    a, b, *_ = K.tube_transport(0.028, -0.031, 0.0, 1.0, 0.3, 0.05, 1e-3)
    a0, b0, *_ = K.tube_transport(a, b, 1.0, 0.0, 0.3, 0.05, 1e-3)
    assert (a0, b0) == pytest.approx((0.028, -0.031), abs=1e-12)


def test_tube_transport_invariants():
    # rho and the transported norm agree (rigid rotation), u4 handled outside
    a, b, *_ = K.tube_transport(0.02, 0.015, 0.0, 1.0, 0.35, 0.05, 1e-3)
    assert math.hypot(a, b) == pytest.approx(math.hypot(0.02, 0.015), abs=1e-12)


# -- orbit walking ------------------------------------------------------------


def _reference_orbit(base, n, p_base, frame, r, xi, dt, omega):
    """Plain-python reference for orbit_visits bookkeeping.

    Uses the same scalar arithmetic order as the compiled walk: the orbit is
    chaotic, so any last-bit difference (e.g. from numpy matmul association)
    would be amplified to O(1) within ~25 windows and change the visit set.
    """
    bx, by, bz = (float(v) for v in base)
    px, py, pz = (float(v) for v in p_base)
    f = frame
    visits = []
    for k in range(n):
        dx, dy, dz = K.wrap_half(bx - px), K.wrap_half(by - py), K.wrap_half(bz - pz)
        w0 = f[0, 0] * dx + f[1, 0] * dy + f[2, 0] * dz
        w1 = f[0, 1] * dx + f[1, 1] * dy + f[2, 1] * dz
        w2 = f[0, 2] * dx + f[1, 2] * dy + f[2, 2] * dz
        if w0 * w0 + w1 * w1 + w2 * w2 <= r * r:
            a, b, m00, m01, m10, m11 = K.tube_transport(
                w0, w1, 0.0, 1.0, xi, r, dt
            )
            visits.append((
                k,
                np.array([w0, w1, w2]),
                np.array([a, b, w2]),
                np.array([[m00, m01], [m10, m11]]),
            ))
            ex = f[0, 0] * a + f[0, 1] * b + f[0, 2] * w2
            ey = f[1, 0] * a + f[1, 1] * b + f[1, 2] * w2
            ez = f[2, 0] * a + f[2, 1] * b + f[2, 2] * w2
            bx, by, bz = K.mod1(px + ex), K.mod1(py + ey), K.mod1(pz + ez)
        bx, by, bz = K.cat_step(bx, by, bz, omega)
    return visits, np.array([bx, by, bz])


def test_orbit_visits_matches_reference():
    from centralshift.model_systems import BASE_FRAME

    rng = np.random.default_rng(7)
    base = rng.random(3)
    p_base = np.array([0.1, 0.2, 0.3])
    r, xi, dt, n = 0.1, 0.3, 1e-3, 4000
    vidx, wpre, wpost, vmats, final = K.run_orbit_visits(
        base, n, p_base, BASE_FRAME, r, xi, dt, GOLDEN
    )
    ref_visits, ref_final = _reference_orbit(
        base, n, p_base, BASE_FRAME, r, xi, dt, GOLDEN
    )
    assert len(ref_visits) == len(vidx)
    assert len(vidx) > 0, "horizon long enough to see visits"
    for (k, w0, w1, m), idx, a0, a1, vm in zip(
        ref_visits, vidx, wpre, wpost, vmats
    ):
        assert k == idx
        assert np.array_equal(w0, a0)
        assert np.array_equal(w1, a1)
        assert np.array_equal(m, vm)
    assert np.array_equal(final, ref_final)


def test_orbit_visit_fraction_approximates_ball_volume():
    from centralshift.model_systems import BASE_FRAME

    r, n = 0.1, 60_000
    vidx, *_ = K.run_orbit_visits(
        np.array([0.512, 0.821, 0.05]), n, np.array([0.1, 0.2, 0.3]),
        BASE_FRAME, r, 0.3, 1e-2, GOLDEN,
    )
    vol = 4.0 / 3.0 * math.pi * r**3
    assert len(vidx) / n == pytest.approx(vol, rel=0.15)


# -- QR cocycle ---------------------------------------------------------------


def _reference_qr(n, base_mat, vidx, vmats, q0):
    q = q0.copy()
    logdiag = np.empty((n, 3))
    logdet = 0.0
    ptr = 0
    for k in range(n):
        if ptr < len(vidx) and vidx[ptr] == k:
            a = vmats[ptr]
            ptr += 1
        else:
            a = base_mat
        logdet += np.linalg.slogdet(a)[1]
        z = a @ q
        q, rmat = np.linalg.qr(z)
        s = np.sign(np.diag(rmat))
        s[s == 0] = 1.0
        q = q * s
        logdiag[k] = np.log(np.abs(np.diag(rmat)))
    return logdiag, logdet, q


def test_qr_sparse_matches_numpy_reference():
    rng = np.random.default_rng(3)
    base = np.array([[2.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    vidx = np.array([5, 17, 40], dtype=np.int64)
    vmats = np.stack([
        np.eye(3) + 0.05 * rng.standard_normal((3, 3)) for _ in range(3)
    ])
    q0, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    n = 60
    q = np.ascontiguousarray(q0.copy())
    logdiag = np.empty((n, 3))
    logdet = K.qr_sparse(n, base, vidx, vmats, q, logdiag)
    ref_logdiag, ref_logdet, ref_q = _reference_qr(n, base, vidx, vmats, q0)
    assert np.allclose(logdiag, ref_logdiag, atol=1e-10)
    assert logdet == pytest.approx(ref_logdet, abs=1e-10)
    assert np.allclose(np.abs(q), np.abs(ref_q), atol=1e-8)
    # orthonormality is maintained
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)
