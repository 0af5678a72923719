"""Numerical kernels: bump profiles, in-tube transport, orbit walking, QR cocycle.

Everything here is written as plain scalar/loop code so it can be compiled with
numba when available and still run (slower) as ordinary Python when it is not.
Set the environment variable ``CENTRALSHIFT_NO_NUMBA=1`` to force the fallback.

Floating-point semantics are kept strict (no fastmath), so results are
reproducible bit-for-bit across runs on the same platform.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    if os.environ.get("CENTRALSHIFT_NO_NUMBA"):
        raise ImportError("numba disabled by CENTRALSHIFT_NO_NUMBA")
    from numba import njit as _njit

    HAVE_NUMBA = True

    def _jit(f):
        return _njit(cache=True)(f)

except ImportError:  # pragma: no cover - exercised via subprocess in tests
    HAVE_NUMBA = False

    def _jit(f):
        return f


# ---------------------------------------------------------------------------
# Quintic smoothstep bump profiles.
#
# S(t) = 6t^5 - 15t^4 + 10t^3 rises C^2-smoothly from 0 to 1 on [0,1].
# Certified derivative bounds (attained at interior critical points):
#   sup|S'|  = 15/8  = 1.875      (at t = 1/2)
#   sup|S''| = 10/sqrt(3) ~ 5.7735 (at t = (3 -+ sqrt(3))/6)
# ---------------------------------------------------------------------------


def _raw_smoothstep(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def _raw_smoothstep_d1(t):
    if t <= 0.0 or t >= 1.0:
        return 0.0
    u = t * (1.0 - t)
    return 30.0 * u * u


def _raw_smoothstep_d2(t):
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 60.0 * t * (2.0 * t - 1.0) * (t - 1.0)


smoothstep = _jit(_raw_smoothstep)
smoothstep_d1 = _jit(_raw_smoothstep_d1)
smoothstep_d2 = _jit(_raw_smoothstep_d2)

SUP_SMOOTHSTEP_D1 = 15.0 / 8.0
SUP_SMOOTHSTEP_D2 = 10.0 / math.sqrt(3.0)


def _raw_alpha_val(t):
    return smoothstep(t)


def _raw_alpha_d1(t):
    return smoothstep_d1(t)


def _raw_alpha_d2(t):
    return smoothstep_d2(t)


# beta: even plateau bump; 1 on [-1/2,1/2], smooth fall to 0 at |t|=1.
def _raw_beta_val(t):
    x = abs(t)
    if x <= 0.5:
        return 1.0
    if x >= 1.0:
        return 0.0
    return smoothstep(2.0 * (1.0 - x))


def _raw_beta_d1(t):
    x = abs(t)
    if x <= 0.5 or x >= 1.0:
        return 0.0
    s = -2.0 * smoothstep_d1(2.0 * (1.0 - x))
    if t < 0.0:
        return -s
    return s


def _raw_beta_d2(t):
    x = abs(t)
    if x <= 0.5 or x >= 1.0:
        return 0.0
    return 4.0 * smoothstep_d2(2.0 * (1.0 - x))


alpha_val = _jit(_raw_alpha_val)
alpha_d1 = _jit(_raw_alpha_d1)
alpha_d2 = _jit(_raw_alpha_d2)
beta_val = _jit(_raw_beta_val)
beta_d1 = _jit(_raw_beta_d1)
beta_d2 = _jit(_raw_beta_d2)

SUP_ALPHA_D1 = SUP_SMOOTHSTEP_D1  # 1.875  <= 2, as required
SUP_ALPHA_D2 = SUP_SMOOTHSTEP_D2  # ~5.7735
SUP_BETA_D1 = 2.0 * SUP_SMOOTHSTEP_D1  # 3.75  <= 4, as required
SUP_BETA_D2 = 4.0 * SUP_SMOOTHSTEP_D2  # ~23.094


# ---------------------------------------------------------------------------
# In-tube dynamics in flowbox coordinates (u1, u2, u3, u4).
#
# The twisting field is
#   Z(u) = xi * alpha'(u1) * beta(rho/r) * (0, -u3, u2, 0),  rho = |(u2,u3)|,
# so along an orbit u1 advances at unit speed, u4 is constant, and (u2,u3)
# rotates.  The kernels integrate position and the 2x2 variational block on
# the (u2,u3) plane with classical fixed-step RK4.
# ---------------------------------------------------------------------------


def _raw_z_plane(h, a, b, xi, r):
    """Velocity and Jacobian of Z restricted to the (u2,u3) plane at height h.

    Returns (fa, fb, J00, J01, J10, J11) where (fa, fb) = Z_V and J = D_V Z_V.
    """
    c = xi * alpha_d1(h)
    rho = math.hypot(a, b)
    s = rho / r
    phi = beta_val(s)
    fa = -c * phi * b
    fb = c * phi * a
    if 0.5 < s < 1.0:
        # off the plateau: radial derivative of beta_r contributes shear
        g = beta_d1(s) / (r * rho)
        j00 = -c * g * a * b
        j01 = -c * (phi + g * b * b)
        j10 = c * (phi + g * a * a)
        j11 = c * g * a * b
    else:
        j00 = 0.0
        j01 = -c * phi
        j10 = c * phi
        j11 = 0.0
    return fa, fb, j00, j01, j10, j11


z_plane = _jit(_raw_z_plane)


def _raw_tube_transport(a0, b0, h0, h1, xi, r, dt):
    """RK4 transport of (u2,u3) and its 2x2 variational matrix from u1=h0 to h1.

    Returns (a, b, m00, m01, m10, m11).
    """
    span = h1 - h0
    if span == 0.0:
        return a0, b0, 1.0, 0.0, 0.0, 1.0
    n = int(abs(span) / dt + 0.5)
    if n < 1:
        n = 1
    step = span / n
    a = a0
    b = b0
    m00 = 1.0
    m01 = 0.0
    m10 = 0.0
    m11 = 1.0
    h = h0
    for _ in range(n):
        # k1
        fa1, fb1, j00, j01, j10, j11 = z_plane(h, a, b, xi, r)
        p1 = j00 * m00 + j01 * m10
        q1 = j00 * m01 + j01 * m11
        s1 = j10 * m00 + j11 * m10
        t1 = j10 * m01 + j11 * m11
        # k2
        ha = h + 0.5 * step
        a2 = a + 0.5 * step * fa1
        b2 = b + 0.5 * step * fb1
        fa2, fb2, j00, j01, j10, j11 = z_plane(ha, a2, b2, xi, r)
        n00 = m00 + 0.5 * step * p1
        n01 = m01 + 0.5 * step * q1
        n10 = m10 + 0.5 * step * s1
        n11 = m11 + 0.5 * step * t1
        p2 = j00 * n00 + j01 * n10
        q2 = j00 * n01 + j01 * n11
        s2 = j10 * n00 + j11 * n10
        t2 = j10 * n01 + j11 * n11
        # k3
        a3 = a + 0.5 * step * fa2
        b3 = b + 0.5 * step * fb2
        fa3, fb3, j00, j01, j10, j11 = z_plane(ha, a3, b3, xi, r)
        n00 = m00 + 0.5 * step * p2
        n01 = m01 + 0.5 * step * q2
        n10 = m10 + 0.5 * step * s2
        n11 = m11 + 0.5 * step * t2
        p3 = j00 * n00 + j01 * n10
        q3 = j00 * n01 + j01 * n11
        s3 = j10 * n00 + j11 * n10
        t3 = j10 * n01 + j11 * n11
        # k4
        hb = h + step
        a4 = a + step * fa3
        b4 = b + step * fb3
        fa4, fb4, j00, j01, j10, j11 = z_plane(hb, a4, b4, xi, r)
        n00 = m00 + step * p3
        n01 = m01 + step * q3
        n10 = m10 + step * s3
        n11 = m11 + step * t3
        p4 = j00 * n00 + j01 * n10
        q4 = j00 * n01 + j01 * n11
        s4 = j10 * n00 + j11 * n10
        t4 = j10 * n01 + j11 * n11
        w = step / 6.0
        a = a + w * (fa1 + 2.0 * (fa2 + fa3) + fa4)
        b = b + w * (fb1 + 2.0 * (fb2 + fb3) + fb4)
        m00 = m00 + w * (p1 + 2.0 * (p2 + p3) + p4)
        m01 = m01 + w * (q1 + 2.0 * (q2 + q3) + q4)
        m10 = m10 + w * (s1 + 2.0 * (s2 + s3) + s4)
        m11 = m11 + w * (t1 + 2.0 * (t2 + t3) + t4)
        h = hb
    return a, b, m00, m01, m10, m11


tube_transport = _jit(_raw_tube_transport)


# ---------------------------------------------------------------------------
# Orbit walking for the suspended cat map and its perturbation.
#
# Window k of an orbit started on the height-0 section is [k, k+1); during the
# window the base point is fixed under the unperturbed flow and is rotated in
# flowbox coordinates when it lies in the perturbation ball.  The roof map F
# is applied at the end of every window.
# ---------------------------------------------------------------------------


def _raw_mod1(x):
    return x - math.floor(x)


def _raw_wrap_half(x):
    return x - math.floor(x + 0.5)


mod1 = _jit(_raw_mod1)
wrap_half = _jit(_raw_wrap_half)


def _raw_cat_step(x, y, z, omega):
    return mod1(2.0 * x + y), mod1(x + y), mod1(z + omega)


def _raw_cat_step_inv(x, y, z, omega):
    return mod1(x - y), mod1(-x + 2.0 * y), mod1(z - omega)


cat_step = _jit(_raw_cat_step)
cat_step_inv = _jit(_raw_cat_step_inv)


def _raw_orbit_visits(
    bx, by, bz, n_windows, px, py, pz, frame, r, xi, dt, omega,
    visit_idx, w_pre, w_post, v_mats,
):
    """Walk ``n_windows`` time-1 windows of the perturbed orbit from height 0.

    ``frame`` is the 3x3 matrix whose columns are the chart directions
    (unstable, central, stable) in base coordinates.  Visit data is written
    into the preallocated output arrays up to their capacity; the total count
    of visits is always returned (callers must retry with a bigger buffer if
    it exceeds capacity).  Returns (count, bx, by, bz) with the final base.
    """
    cap = visit_idx.shape[0]
    cnt = 0
    for k in range(n_windows):
        dx = wrap_half(bx - px)
        dy = wrap_half(by - py)
        dz = wrap_half(bz - pz)
        # chart coordinates w = frame^T d
        w0 = frame[0, 0] * dx + frame[1, 0] * dy + frame[2, 0] * dz
        w1 = frame[0, 1] * dx + frame[1, 1] * dy + frame[2, 1] * dz
        w2 = frame[0, 2] * dx + frame[1, 2] * dy + frame[2, 2] * dz
        if w0 * w0 + w1 * w1 + w2 * w2 <= r * r:
            a, b, m00, m01, m10, m11 = tube_transport(w0, w1, 0.0, 1.0, xi, r, dt)
            if cnt < cap:
                visit_idx[cnt] = k
                w_pre[cnt, 0] = w0
                w_pre[cnt, 1] = w1
                w_pre[cnt, 2] = w2
                w_post[cnt, 0] = a
                w_post[cnt, 1] = b
                w_post[cnt, 2] = w2
                v_mats[cnt, 0, 0] = m00
                v_mats[cnt, 0, 1] = m01
                v_mats[cnt, 1, 0] = m10
                v_mats[cnt, 1, 1] = m11
            cnt += 1
            ex = frame[0, 0] * a + frame[0, 1] * b + frame[0, 2] * w2
            ey = frame[1, 0] * a + frame[1, 1] * b + frame[1, 2] * w2
            ez = frame[2, 0] * a + frame[2, 1] * b + frame[2, 2] * w2
            bx = mod1(px + ex)
            by = mod1(py + ey)
            bz = mod1(pz + ez)
        bx, by, bz = cat_step(bx, by, bz, omega)
    return cnt, bx, by, bz


orbit_visits = _jit(_raw_orbit_visits)


# ---------------------------------------------------------------------------
# QR cocycle accumulation over time-1 windows.
#
# The normal cocycle of the suspension is the constant integer matrix B on
# every window except the sparse visit windows, whose 3x3 matrices are passed
# in.  Modified Gram-Schmidt with positive diagonal; per-window log-diagonals
# are stored and log|det| of each window matrix is accumulated exactly.
# ---------------------------------------------------------------------------


def _raw_qr_sparse(n_windows, base_mat, visit_idx, visit_mats, q, log_diag):
    """Run the QR cocycle for ``n_windows`` windows.

    ``q`` (3x3, orthonormal columns) is updated in place; ``log_diag`` has
    shape (n_windows, 3).  Returns the accumulated log|det| of the window
    matrices (an exact per-window sum, independent of the QR).
    """
    m = visit_idx.shape[0]
    ptr = 0
    logdet = 0.0
    for k in range(n_windows):
        if ptr < m and visit_idx[ptr] == k:
            a = visit_mats[ptr]
            ptr += 1
        else:
            a = base_mat
        # Z = a @ q
        z00 = a[0, 0] * q[0, 0] + a[0, 1] * q[1, 0] + a[0, 2] * q[2, 0]
        z10 = a[1, 0] * q[0, 0] + a[1, 1] * q[1, 0] + a[1, 2] * q[2, 0]
        z20 = a[2, 0] * q[0, 0] + a[2, 1] * q[1, 0] + a[2, 2] * q[2, 0]
        z01 = a[0, 0] * q[0, 1] + a[0, 1] * q[1, 1] + a[0, 2] * q[2, 1]
        z11 = a[1, 0] * q[0, 1] + a[1, 1] * q[1, 1] + a[1, 2] * q[2, 1]
        z21 = a[2, 0] * q[0, 1] + a[2, 1] * q[1, 1] + a[2, 2] * q[2, 1]
        z02 = a[0, 0] * q[0, 2] + a[0, 1] * q[1, 2] + a[0, 2] * q[2, 2]
        z12 = a[1, 0] * q[0, 2] + a[1, 1] * q[1, 2] + a[1, 2] * q[2, 2]
        z22 = a[2, 0] * q[0, 2] + a[2, 1] * q[1, 2] + a[2, 2] * q[2, 2]
        det = (
            a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
        )
        logdet += math.log(abs(det))
        # modified Gram-Schmidt, column 0
        r0 = math.sqrt(z00 * z00 + z10 * z10 + z20 * z20)
        q[0, 0] = z00 / r0
        q[1, 0] = z10 / r0
        q[2, 0] = z20 / r0
        # column 1
        c = q[0, 0] * z01 + q[1, 0] * z11 + q[2, 0] * z21
        z01 -= c * q[0, 0]
        z11 -= c * q[1, 0]
        z21 -= c * q[2, 0]
        r1 = math.sqrt(z01 * z01 + z11 * z11 + z21 * z21)
        q[0, 1] = z01 / r1
        q[1, 1] = z11 / r1
        q[2, 1] = z21 / r1
        # column 2
        c = q[0, 0] * z02 + q[1, 0] * z12 + q[2, 0] * z22
        z02 -= c * q[0, 0]
        z12 -= c * q[1, 0]
        z22 -= c * q[2, 0]
        c = q[0, 1] * z02 + q[1, 1] * z12 + q[2, 1] * z22
        z02 -= c * q[0, 1]
        z12 -= c * q[1, 1]
        z22 -= c * q[2, 1]
        r2 = math.sqrt(z02 * z02 + z12 * z12 + z22 * z22)
        q[0, 2] = z02 / r2
        q[1, 2] = z12 / r2
        q[2, 2] = z22 / r2
        log_diag[k, 0] = math.log(r0)
        log_diag[k, 1] = math.log(r1)
        log_diag[k, 2] = math.log(r2)
    return logdet


qr_sparse = _jit(_raw_qr_sparse)


def run_orbit_visits(base, n_windows, p_base, frame, r, xi, dt, omega):
    """Python wrapper around :func:`orbit_visits` handling buffer sizing.

    Returns (visit_idx, w_pre, w_post, v_mats, final_base) with arrays
    trimmed to the actual visit count.
    """
    ball_fraction = 4.18879020478639098 * r**3  # vol of an r-ball, torus volume 1
    cap = int(n_windows * ball_fraction * 1.5) + 64
    while True:
        visit_idx = np.empty(cap, dtype=np.int64)
        w_pre = np.empty((cap, 3), dtype=np.float64)
        w_post = np.empty((cap, 3), dtype=np.float64)
        v_mats = np.empty((cap, 2, 2), dtype=np.float64)
        cnt, bx, by, bz = orbit_visits(
            float(base[0]), float(base[1]), float(base[2]),
            int(n_windows),
            float(p_base[0]), float(p_base[1]), float(p_base[2]),
            np.ascontiguousarray(frame, dtype=np.float64),
            float(r), float(xi), float(dt), float(omega),
            visit_idx, w_pre, w_post, v_mats,
        )
        if cnt <= cap:
            final = np.array([bx, by, bz])
            return (
                visit_idx[:cnt].copy(), w_pre[:cnt].copy(),
                w_post[:cnt].copy(), v_mats[:cnt].copy(), final,
            )
        cap = cnt + 64
