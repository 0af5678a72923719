"""Tests for the rotation perturbation: profiles, twist field, perturbed flow.

Oracle policy: every asserted number is derived independently of the library
code — closed-form calculus on the quintic profiles, a high-accuracy
``solve_ivp`` integration of the in-plane transport equations, hand-rolled
reference implementations of the twist velocity field, and centered finite
differences of the flow itself.  Frozen constants carry the derivation that
produced them.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from centralshift import perturbation as pert
from centralshift.errors import (
    CentralShiftError,
    InjectivityError,
    PerturbationConditionError,
)
from centralshift.flowbox import FlowboxChart, _chart_frame, identity_moser
from centralshift.model_systems import (
    BASE_MATRIX_3,
    BASE_MATRIX_3_INV,
    PhasePoint,
    wrap_torus,
)
from centralshift.spectrum import qr_run

# ---------------------------------------------------------------------------
# Reference implementations (independent of src/centralshift)
# ---------------------------------------------------------------------------


def ref_smoothstep(t: float) -> float:
    """C^2 monotone step 6t^5 - 15t^4 + 10t^3, clamped to [0, 1]."""
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def ref_alpha(t: float) -> float:
    return ref_smoothstep(t)


def ref_alpha_d1(t: float) -> float:
    if t <= 0.0 or t >= 1.0:
        return 0.0
    u = t * (1.0 - t)
    return 30.0 * u * u


def ref_alpha_d2(t: float) -> float:
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 60.0 * t * (2.0 * t - 1.0) * (t - 1.0)


def ref_beta(t: float) -> float:
    x = abs(t)
    if x <= 0.5:
        return 1.0
    if x >= 1.0:
        return 0.0
    return ref_smoothstep(2.0 * (1.0 - x))


def ref_beta_d1(t: float) -> float:
    x = abs(t)
    if x <= 0.5 or x >= 1.0:
        return 0.0
    d = -2.0 * ref_alpha_d1(2.0 * (1.0 - x))
    return -d if t < 0.0 else d


def ref_beta_d2(t: float) -> float:
    x = abs(t)
    if x <= 0.5 or x >= 1.0:
        return 0.0
    return 4.0 * ref_alpha_d2(2.0 * (1.0 - x))


# Certified derivative bounds for the quintic profiles, by closed-form
# calculus:  alpha'(t) = 30 t^2 (1-t)^2 is maximal at t = 1/2 with value
# 30/16;  alpha''(t) = 60 t (2t-1)(t-1) is extremal at t = (3 ± sqrt 3)/6
# with |alpha''| = 10/sqrt(3);  beta = alpha(2(1-|t|)) doubles/quadruples
# those through the chain rule.
SUP_ALPHA_D1 = 30.0 / 16.0  # = 1.875
SUP_ALPHA_D2 = 10.0 / math.sqrt(3.0)  # = 5.773502691896258
SUP_BETA_D1 = 2.0 * SUP_ALPHA_D1  # = 3.75
SUP_BETA_D2 = 4.0 * SUP_ALPHA_D2  # = 23.094010767585033


def make_cubic_profiles() -> pert.BumpProfiles:
    """A legitimate non-default profile pair built on the cubic smoothstep."""

    def s3(t):
        if t <= 0.0:
            return 0.0
        if t >= 1.0:
            return 1.0
        return t * t * (3.0 - 2.0 * t)

    def s3_d1(t):
        if t <= 0.0 or t >= 1.0:
            return 0.0
        return 6.0 * t * (1.0 - t)

    def s3_d2(t):
        if t <= 0.0 or t >= 1.0:
            return 0.0
        return 6.0 - 12.0 * t

    def b3(t):
        x = abs(t)
        if x <= 0.5:
            return 1.0
        if x >= 1.0:
            return 0.0
        return s3(2.0 * (1.0 - x))

    def b3_d1(t):
        x = abs(t)
        if x <= 0.5 or x >= 1.0:
            return 0.0
        d = -2.0 * s3_d1(2.0 * (1.0 - x))
        return -d if t < 0.0 else d

    def b3_d2(t):
        x = abs(t)
        if x <= 0.5 or x >= 1.0:
            return 0.0
        return 4.0 * s3_d2(2.0 * (1.0 - x))

    return pert.BumpProfiles(
        alpha=s3, alpha_d1=s3_d1, alpha_d2=s3_d2,
        beta=b3, beta_d1=b3_d1, beta_d2=b3_d2,
        sup_alpha_d1=1.5, sup_alpha_d2=6.0,
        sup_beta_d1=3.0, sup_beta_d2=24.0,
    )


def ref_velocity(spec: pert.PerturbationSpec, q: PhasePoint, omega: float) -> np.ndarray:
    """Twist velocity computed from first principles in ambient coordinates."""
    f3 = np.asarray(spec.chart.frame)[:3, :]
    phi = q.height - spec.p.height
    base = np.array(q.base, dtype=float)
    post = phi < 0.0
    if post:
        phi += 1.0
        base = BASE_MATRIX_3_INV @ base
        base[2] -= omega
        base %= 1.0
    d = (base - spec.p.base + 0.5) % 1.0 - 0.5
    w = f3.T @ d
    if w @ w > spec.r * spec.r:
        return np.array([0.0, 0.0, 0.0, 1.0])
    c = spec.xi * spec.profiles.alpha_d1(phi) * spec.profiles.beta(
        math.hypot(w[0], w[1]) / spec.r
    )
    delta = c * (-w[1] * f3[:, 0] + w[0] * f3[:, 1])
    if post:
        delta = BASE_MATRIX_3 @ delta
    return np.array([delta[0], delta[1], delta[2], 1.0])


def transport_oracle(profiles, xi, r, w0, w1, a, b):
    """High-accuracy in-plane transport: positions and variational matrix.

    Integrates du/dt = c(t, u) J u with c = xi * alpha'(t) * beta(|u|/r) and
    the matrix equation dM/dt = (dZ/du) M from t=a to t=b.
    """

    def rhs(t, s):
        u0, u1 = s[0], s[1]
        rho = math.hypot(u0, u1)
        ad1 = profiles.alpha_d1(t)
        c = xi * ad1 * profiles.beta(rho / r)
        du0, du1 = -c * u1, c * u0
        if rho > 0.0:
            g = xi * ad1 * profiles.beta_d1(rho / r) / (r * rho)
            ca, cb = g * u0, g * u1
        else:
            ca = cb = 0.0
        dz = np.array([[-u1 * ca, -c - u1 * cb], [c + u0 * ca, u0 * cb]])
        m = s[2:].reshape(2, 2)
        return np.concatenate([[du0, du1], (dz @ m).ravel()])

    s0 = np.array([w0, w1, 1.0, 0.0, 0.0, 1.0])
    sol = solve_ivp(rhs, (a, b), s0, method="DOP853", rtol=1e-12, atol=1e-13)
    end = sol.y[:, -1]
    return end[:2], end[2:].reshape(2, 2)


def chart_at(system, p: PhasePoint, r: float) -> FlowboxChart:
    """Flow-aligned chart at an arbitrary section height.

    ``build_chart`` certifies first-derivative distortion over a full forward
    window, which only holds when the window contains no return-map crossing;
    for centers off the zero-height section the chart is assembled directly.
    """
    return FlowboxChart(
        center=p, radius=r, lam=1.0, frame=_chart_frame(system, p),
        moser=identity_moser(3, r), system=system,
    )


def spec_at(system, p, r, xi, **kw) -> pert.PerturbationSpec:
    if p.height == 0.0:
        return pert.make_spec(system, p, r, xi, **kw)
    chart = chart_at(system, p, r)
    return pert.PerturbationSpec(
        p=p, V_basis=chart.frame[:, :2], r=r, xi=xi,
        profiles=kw.get("profiles") or pert.standard_profiles(),
        chart=chart, epsilon=kw.get("epsilon"),
    )


def fd_tangent(field, q: PhasePoint, t: float, h: float = 1e-6) -> np.ndarray:
    """Centered finite-difference derivative of the time-t flow map."""
    arr = q.as_array()
    out = np.zeros((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        hi = field.flow(PhasePoint(arr[:3] + e[:3], arr[3] + e[3]), t).as_array()
        lo = field.flow(PhasePoint(arr[:3] - e[:3], arr[3] - e[3]), t).as_array()
        d = hi - lo
        d[:3] = wrap_torus(d[:3])
        out[:, i] = d / (2.0 * h)
    return out


def random_tube_points(spec, rng, m, omega, avoid_roof=0.02):
    """Random phase points inside the perturbed tube, on both solid sheets."""
    pts = []
    while len(pts) < m:
        w = rng.normal(size=3)
        w *= spec.r * 0.98 * rng.random() ** (1 / 3) / np.linalg.norm(w)
        phi = rng.uniform(avoid_roof, 1.0 - avoid_roof)
        base = (spec.p.base + spec.chart.frame[:3, :] @ w) % 1.0
        h = spec.p.height + phi
        if h >= 1.0:
            base = (BASE_MATRIX_3 @ base) % 1.0
            base[2] = (base[2] + omega) % 1.0
            h -= 1.0
        pts.append(PhasePoint(base, h))
    return pts


# ---------------------------------------------------------------------------
# Bump profiles
# ---------------------------------------------------------------------------


class TestProfiles:
    def test_standard_matches_reference(self):
        prof = pert.standard_profiles()
        for t in np.linspace(-0.7, 1.7, 241):
            assert prof.alpha(t) == pytest.approx(ref_alpha(t), abs=1e-15)
            assert prof.alpha_d1(t) == pytest.approx(ref_alpha_d1(t), abs=1e-14)
            assert prof.alpha_d2(t) == pytest.approx(ref_alpha_d2(t), abs=1e-13)
            assert prof.beta(t) == pytest.approx(ref_beta(t), abs=1e-15)
            assert prof.beta_d1(t) == pytest.approx(ref_beta_d1(t), abs=1e-14)
            assert prof.beta_d2(t) == pytest.approx(ref_beta_d2(t), abs=1e-13)

    def test_plateau_and_support_are_exact(self):
        prof = pert.standard_profiles()
        assert prof.alpha(-0.3) == 0.0 and prof.alpha(0.0) == 0.0
        assert prof.alpha(1.0) == 1.0 and prof.alpha(1.8) == 1.0
        assert prof.alpha_d1(0.0) == 0.0 and prof.alpha_d1(1.0) == 0.0
        for t in (-0.5, -0.2, 0.0, 0.3, 0.5):
            assert prof.beta(t) == 1.0
        for t in (-1.5, -1.0, 1.0, 2.0):
            assert prof.beta(t) == 0.0
        assert prof.beta(-0.7) == prof.beta(0.7)

    def test_derivatives_match_finite_differences(self):
        prof = pert.standard_profiles()
        h = 1e-6
        # stay away from the C^2 gluing points of beta (|t| in {1/2, 1})
        for t in np.linspace(0.02, 0.98, 49):
            fd1 = (prof.alpha(t + h) - prof.alpha(t - h)) / (2 * h)
            fd2 = (prof.alpha_d1(t + h) - prof.alpha_d1(t - h)) / (2 * h)
            assert prof.alpha_d1(t) == pytest.approx(fd1, abs=5e-9)
            assert prof.alpha_d2(t) == pytest.approx(fd2, abs=5e-8)
        for t in np.linspace(0.52, 0.98, 24):
            fd1 = (prof.beta(t + h) - prof.beta(t - h)) / (2 * h)
            fd2 = (prof.beta_d1(t + h) - prof.beta_d1(t - h)) / (2 * h)
            assert prof.beta_d1(t) == pytest.approx(fd1, abs=5e-9)
            assert prof.beta_d2(t) == pytest.approx(fd2, abs=5e-8)

    def test_certified_bounds(self):
        prof = pert.standard_profiles()
        assert prof.sup_alpha_d1 == SUP_ALPHA_D1
        assert prof.sup_alpha_d2 == pytest.approx(SUP_ALPHA_D2, rel=1e-15)
        assert prof.sup_beta_d1 == SUP_BETA_D1
        assert prof.sup_beta_d2 == pytest.approx(SUP_BETA_D2, rel=1e-15)
        assert prof.bounds == (prof.sup_alpha_d1, prof.sup_alpha_d2, prof.sup_beta_d1)
        grid = np.linspace(-1.5, 1.5, 6001)
        assert max(abs(prof.alpha_d1(t)) for t in grid) == SUP_ALPHA_D1
        assert max(abs(prof.alpha_d2(t)) for t in grid) <= SUP_ALPHA_D2
        assert max(abs(prof.alpha_d2(t)) for t in grid) >= SUP_ALPHA_D2 - 1e-4
        assert max(abs(prof.beta_d1(t)) for t in grid) == SUP_BETA_D1
        assert max(abs(prof.beta_d2(t)) for t in grid) <= SUP_BETA_D2

    def test_slope_envelope(self):
        # the construction promises 0 <= alpha' <= 2 and |beta'| <= 4
        prof = pert.standard_profiles()
        for t in np.linspace(-1.5, 1.5, 2001):
            assert 0.0 <= prof.alpha_d1(t) <= 2.0
            assert abs(prof.beta_d1(t)) <= 4.0

    def test_custom_profiles_accepted(self):
        prof = make_cubic_profiles()
        assert prof.profile_id == "custom"
        assert prof.alpha(0.5) == 0.5
        assert prof.beta(0.75) == pytest.approx(prof.alpha(0.5), abs=1e-15)

    def test_too_steep_ramp_rejected(self):
        # alpha compressed into [0, 0.4] has slope up to 3.75 > 2
        cubic = make_cubic_profiles()
        with pytest.raises(CentralShiftError, match="alpha'"):
            pert.BumpProfiles(
                alpha=lambda t: cubic.alpha(t / 0.4),
                alpha_d1=lambda t: cubic.alpha_d1(t / 0.4) / 0.4,
                alpha_d2=lambda t: cubic.alpha_d2(t / 0.4) / 0.16,
                beta=cubic.beta, beta_d1=cubic.beta_d1, beta_d2=cubic.beta_d2,
                sup_alpha_d1=3.75, sup_alpha_d2=37.5,
                sup_beta_d1=3.0, sup_beta_d2=24.0,
            )

    def test_wrong_plateau_rejected(self):
        cubic = make_cubic_profiles()
        with pytest.raises(CentralShiftError):
            pert.BumpProfiles(
                alpha=cubic.alpha, alpha_d1=cubic.alpha_d1, alpha_d2=cubic.alpha_d2,
                beta=lambda t: cubic.beta(2.0 * t),
                beta_d1=lambda t: 2.0 * cubic.beta_d1(2.0 * t),
                beta_d2=lambda t: 4.0 * cubic.beta_d2(2.0 * t),
                sup_alpha_d1=1.5, sup_alpha_d2=6.0,
                sup_beta_d1=6.0, sup_beta_d2=96.0,
            )


# ---------------------------------------------------------------------------
# Plane rotations
# ---------------------------------------------------------------------------


class TestRotation:
    def test_quarter_turn(self):
        out = pert.rotation(math.pi / 2.0, np.array([1.0, 0.0]))
        assert np.allclose(out, [0.0, 1.0], atol=1e-15)

    def test_orientation(self):
        # positive angle turns the first basis vector toward the second
        out = pert.rotation(0.3, np.array([1.0, 0.0]))
        assert out[0] == pytest.approx(math.cos(0.3)) and out[1] == pytest.approx(
            math.sin(0.3)
        )

    @given(
        st.floats(-10.0, 10.0),
        st.floats(-10.0, 10.0),
        st.floats(-2.0, 2.0),
        st.floats(-2.0, 2.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_group_property(self, s, t, v0, v1):
        v = np.array([v0, v1])
        once = pert.rotation(s, pert.rotation(t, v))
        both = pert.rotation(s + t, v)
        assert np.allclose(once, both, atol=1e-12)

    def test_norm_preserved(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            v = rng.normal(size=2)
            th = rng.uniform(-6, 6)
            assert np.linalg.norm(pert.rotation(th, v)) == pytest.approx(
                np.linalg.norm(v), rel=1e-14
            )

    def test_shape_check(self):
        with pytest.raises(CentralShiftError):
            pert.rotation(0.1, np.array([1.0, 0.0, 0.0]))

    def test_rotate_in_plane(self):
        rng = np.random.default_rng(3)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        u2, u3 = q[:, 0], q[:, 1]
        th = 0.73
        out = pert.rotate_in_plane(u2, u3, th, u2)
        assert np.allclose(out, math.cos(th) * u2 + math.sin(th) * u3, atol=1e-14)
        out3 = pert.rotate_in_plane(u2, u3, th, u3)
        assert np.allclose(out3, -math.sin(th) * u2 + math.cos(th) * u3, atol=1e-14)
        # complement of the plane is fixed
        w = q[:, 3]
        assert np.allclose(pert.rotate_in_plane(u2, u3, th, w), w, atol=1e-14)
        # linear and orthogonal: matrix built column by column
        mat = np.column_stack(
            [pert.rotate_in_plane(u2, u3, th, q[:, j]) for j in range(5)]
        )
        assert np.allclose(mat.T @ mat, np.eye(5), atol=1e-12)


# ---------------------------------------------------------------------------
# Amplitude bound
# ---------------------------------------------------------------------------


class TestXiBound:
    def test_small_radius_formula(self):
        prof = pert.standard_profiles()
        # denominator 2 * 4 * sup|alpha'| * sup|beta'_r| with beta'_r = beta'/r
        for r in (0.1, 0.05, 0.025):
            expect = 0.01 / (2.0 * 4.0 * SUP_ALPHA_D1 * (SUP_BETA_D1 / r))
            assert pert.xi_bound(prof, r, 0.01) == pytest.approx(expect, rel=1e-15)
        assert pert.xi_bound(prof, 0.1, 0.01) == pytest.approx(
            1.7777777777777777e-05, rel=1e-14
        )
        assert pert.xi_bound(prof, 0.05, 0.01) == pytest.approx(
            8.888888888888888e-06, rel=1e-14
        )

    def test_linear_in_epsilon(self):
        prof = pert.standard_profiles()
        b1 = pert.xi_bound(prof, 0.1, 0.01)
        assert pert.xi_bound(prof, 0.1, 0.02) == pytest.approx(2 * b1, rel=1e-14)
        assert pert.xi_bound(prof, 0.1, 0.001) == pytest.approx(b1 / 10, rel=1e-14)

    def test_halving_radius_halves_bound(self):
        prof = pert.standard_profiles()
        b1 = pert.xi_bound(prof, 0.08, 0.01)
        b2 = pert.xi_bound(prof, 0.04, 0.01)
        assert b2 == pytest.approx(b1 / 2.0, rel=1e-14)

    def test_curvature_dominates_at_large_radius(self):
        # once 4 sup|alpha'| sup|beta'|/r drops below sup|alpha''| the bound
        # saturates at epsilon / (2 sup|alpha''|)
        prof = pert.standard_profiles()
        expect = 0.01 / (2.0 * SUP_ALPHA_D2)
        assert pert.xi_bound(prof, 10.0, 0.01) == pytest.approx(expect, rel=1e-14)
        assert pert.xi_bound(prof, 10.0, 0.01) == pytest.approx(
            0.0008660254037844386, rel=1e-14
        )

    def test_invalid_arguments(self):
        prof = pert.standard_profiles()
        with pytest.raises(CentralShiftError):
            pert.xi_bound(prof, 0.0, 0.01)
        with pytest.raises(CentralShiftError):
            pert.xi_bound(prof, 0.1, -1.0)


# ---------------------------------------------------------------------------
# Perturbation data validation
# ---------------------------------------------------------------------------


class TestSpecValidation:
    def test_make_spec_defaults(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.3)
        assert spec.p == p_default
        assert spec.r == 0.1
        assert spec.xi == 0.3
        assert spec.epsilon is None
        assert np.array_equal(spec.V_basis, spec.chart.frame[:, :2])
        vb = spec.V_basis
        assert np.allclose(vb.T @ vb, np.eye(2), atol=1e-12)
        # both plane directions are transverse to the flow
        assert abs(vb[3, 0]) < 1e-12 and abs(vb[3, 1]) < 1e-12

    def test_radius_beyond_chart_limit(self, cat, p_default):
        with pytest.raises(InjectivityError):
            pert.make_spec(cat, p_default, 0.3, 0.1)

    def test_swapped_plane_rejected(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.3)
        with pytest.raises(CentralShiftError, match="V_basis"):
            pert.PerturbationSpec(
                p=p_default, V_basis=spec.chart.frame[:, 1:3], r=0.1, xi=0.3,
                profiles=pert.standard_profiles(), chart=spec.chart,
            )

    def test_non_orthonormal_plane_rejected(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.3)
        bad = spec.V_basis.copy()
        bad[:, 0] *= 1.5
        with pytest.raises(CentralShiftError):
            pert.PerturbationSpec(
                p=p_default, V_basis=bad, r=0.1, xi=0.3,
                profiles=pert.standard_profiles(), chart=spec.chart,
            )

    def test_amplitude_over_certified_bound_rejected(self, cat, p_default):
        bound = pert.xi_bound(pert.standard_profiles(), 0.1, 0.01)
        with pytest.raises(PerturbationConditionError) as exc:
            pert.make_spec(cat, p_default, 0.1, 10.0 * bound, epsilon=0.01)
        assert exc.value.failures and exc.value.failures[0].startswith("(i)")

    def test_amplitude_within_bound_accepted(self, cat, p_default):
        bound = pert.xi_bound(pert.standard_profiles(), 0.1, 0.01)
        spec = pert.make_spec(cat, p_default, 0.1, bound, epsilon=0.01)
        assert spec.epsilon == 0.01

    def test_json_round_trip(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.3)
        d = spec.to_json_dict()
        assert sorted(d) == ["V_basis", "epsilon", "p", "profile_id", "r", "xi"]
        assert d["profile_id"] == "quintic"
        back = pert.spec_from_json_dict(cat, d)
        assert back.p == spec.p and back.r == spec.r and back.xi == spec.xi
        assert np.allclose(back.V_basis, spec.V_basis, atol=1e-12)

    def test_custom_profiles_not_serializable(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.2, profiles=make_cubic_profiles())
        d = spec.to_json_dict()
        assert d["profile_id"] == "custom"
        with pytest.raises(CentralShiftError):
            pert.spec_from_json_dict(cat, d)


# ---------------------------------------------------------------------------
# Twist generator in chart coordinates
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def z(cat, p_default):
    spec = pert.make_spec(cat, p_default, 0.1, 0.3)
    return spec, pert.build_Z(spec)


class TestTwistGenerator:

    def test_value_matches_reference(self, z):
        spec, zf = z
        rng = np.random.default_rng(11)
        prof = spec.profiles
        for _ in range(200):
            u = np.concatenate([[rng.uniform(0, 1)], rng.uniform(-0.1, 0.1, size=3)])
            val = zf.value(u)
            c = spec.xi * prof.alpha_d1(u[0]) * prof.beta(
                math.hypot(u[1], u[2]) / spec.r
            )
            assert np.allclose(
                val, [0.0, -c * u[2], c * u[1], 0.0], atol=1e-15
            )

    def test_support_is_exact(self, z):
        _, zf = z
        for u in ([-0.2, 0.03, 0.0, 0.0], [1.0, 0.03, 0.0, 0.0],
                  [0.5, 0.11, 0.0, 0.0], [0.5, 0.08, 0.08, 0.0]):
            assert np.array_equal(zf.value(np.array(u)), np.zeros(4))

    def test_jacobian_matches_finite_differences(self, z):
        _, zf = z
        rng = np.random.default_rng(5)
        h = 1e-7
        worst = 0.0
        for _ in range(200):
            u = np.concatenate([[rng.uniform(0.05, 0.95)],
                                rng.uniform(-0.06, 0.06, size=3)])
            jac = zf.jacobian(u)
            fd = np.zeros((4, 4))
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                fd[:, i] = (zf.value(u + e) - zf.value(u - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(jac - fd))))
        assert worst < 1e-8

    def test_divergence_free_in_chart(self, z):
        _, zf = z
        rng = np.random.default_rng(9)
        for _ in range(1000):
            u = np.concatenate([[rng.uniform(0, 1)], rng.uniform(-0.1, 0.1, size=3)])
            assert abs(np.trace(zf.jacobian(u))) < 1e-15


# ---------------------------------------------------------------------------
# Perturbed velocity field
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def headline(cat):
    """The reference perturbed field: r=0.05, xi=0.3, fine transport step."""
    p = PhasePoint([0.1, 0.2, 0.3], 0.0)
    spec = pert.make_spec(cat, p, 0.05, 0.3)
    return pert.build_Y(cat, spec, dt=1e-4)


@pytest.fixture(scope="module")
def wide(cat):
    """A wider tube (r=0.1) keeping more room inside the support."""
    p = PhasePoint([0.1, 0.2, 0.3], 0.0)
    spec = pert.make_spec(cat, p, 0.1, 0.3)
    return pert.build_Y(cat, spec, dt=1e-4)


class TestVelocity:
    def test_identity_outside_support(self, headline):
        spec = headline.spec
        rng = np.random.default_rng(2)
        f3 = spec.chart.frame[:3, :]
        unperturbed = np.array([0.0, 0.0, 0.0, 1.0])
        for _ in range(100):
            w = rng.normal(size=3)
            w *= spec.r * 1.001 / np.linalg.norm(w)  # just outside the tube
            base = (spec.p.base + f3 @ w) % 1.0
            q = PhasePoint(base, rng.uniform(0.0, 1.0))
            assert np.array_equal(headline.velocity(q), unperturbed)
        # far away in every window
        for _ in range(100):
            q = PhasePoint((spec.p.base + 0.5) % 1.0, rng.uniform(0.0, 1.0))
            assert np.array_equal(headline.velocity(q), unperturbed)

    def test_matches_reference_inside(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(4)
        for q in random_tube_points(spec, rng, 200, cat.omega):
            got = headline.velocity(q)
            want = ref_velocity(spec, q, cat.omega)
            assert np.allclose(got, want, atol=1e-14)

    def test_batch_agrees_with_scalar(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(6)
        pts = random_tube_points(spec, rng, 64, cat.omega)
        arr = np.array([q.as_array() for q in pts])
        batch = headline.velocity_batch(arr)
        for row, q in zip(batch, pts):
            assert np.array_equal(row, headline.velocity(q))

    def test_edge_jump_is_tangent_to_tube_wall(self, wide):
        # crossing the solid-tube wall, any velocity jump points along the
        # rotation direction, which is orthogonal to the radial offset
        spec = wide.spec
        rng = np.random.default_rng(8)
        f3 = spec.chart.frame[:3, :]
        checked = 0
        for _ in range(300):
            w = rng.normal(size=3)
            w /= np.linalg.norm(w)
            win = w * spec.r * (1 - 1e-9)
            base = (spec.p.base + f3 @ win) % 1.0
            q = PhasePoint(base, rng.uniform(0.1, 0.9))
            delta = wide.velocity(q) - np.array([0.0, 0.0, 0.0, 1.0])
            if np.linalg.norm(delta) < 1e-12:
                continue
            radial = f3 @ win
            assert abs(delta[:3] @ radial) < 1e-15
            checked += 1
        assert checked > 50

    def test_zero_amplitude_is_bitwise_base(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.0)
        y0 = pert.build_Y(cat, spec)
        rng = np.random.default_rng(12)
        for _ in range(50):
            q = PhasePoint(rng.random(3), rng.random())
            assert np.array_equal(y0.velocity(q), cat.velocity(q))
        q = PhasePoint([0.1, 0.2, 0.3], 0.0)
        a = y0.flow(q, 7.0)
        b = cat.flow(q, 7.0)
        assert np.array_equal(a.as_array(), b.as_array())


# ---------------------------------------------------------------------------
# In-plane transport against a high-accuracy integration
# ---------------------------------------------------------------------------


class TestTransport:
    def test_standard_field_matches_ivp(self, wide):
        spec = wide.spec
        prof = spec.profiles
        # off-plateau radius so the shear term beta' is active
        w0, w1 = 0.8 * spec.r, 0.0
        u_ref, m_ref = transport_oracle(prof, spec.xi, spec.r, w0, w1, 0.0, 1.0)
        m = wide._transport_matrix(w0, w1, 0.0, 1.0)
        assert np.allclose(np.array(m).reshape(2, 2), m_ref, atol=1e-9)
        # closed-form positions: rotation by xi * beta(rho/r)
        theta = spec.xi * prof.beta(math.hypot(w0, w1) / spec.r)
        assert np.allclose(
            pert.rotation(theta, np.array([w0, w1])), u_ref, atol=1e-10
        )

    def test_custom_field_closed_form_matches_ivp(self, cat, p_default):
        prof = make_cubic_profiles()
        spec = pert.make_spec(cat, p_default, 0.1, 0.25, profiles=prof)
        y = pert.build_Y(cat, spec)
        for (w0, w1, a, b) in [(0.07, 0.02, 0.0, 1.0), (0.06, -0.03, 0.2, 0.9),
                               (0.02, 0.01, 0.0, 0.5)]:
            u_ref, m_ref = transport_oracle(prof, spec.xi, spec.r, w0, w1, a, b)
            m = np.array(y._transport_matrix(w0, w1, a, b)).reshape(2, 2)
            assert np.allclose(m, m_ref, atol=1e-9)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)

    def test_transport_determinant(self, wide):
        spec = wide.spec
        rng = np.random.default_rng(13)
        for _ in range(25):
            rho = rng.uniform(0, 0.99) * spec.r
            ang = rng.uniform(0, 2 * math.pi)
            m = np.array(
                wide._transport_matrix(rho * math.cos(ang), rho * math.sin(ang),
                                       0.0, 1.0)
            ).reshape(2, 2)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-10)

    def test_plateau_window_is_pure_rotation(self, wide):
        spec = wide.spec
        got = np.array(wide._transport_matrix(0.25 * spec.r, 0.0, 0.0, 1.0)).reshape(
            2, 2
        )
        c, s = math.cos(spec.xi), math.sin(spec.xi)
        assert np.allclose(got, [[c, -s], [s, c]], atol=1e-9)


# ---------------------------------------------------------------------------
# Perturbed flow map
# ---------------------------------------------------------------------------


class TestFlow:
    def test_full_window_rotates_plane_offsets(self, wide, cat):
        # after one full window the transverse offset of a plateau point is
        # rotated by xi in the plane and carried by the unperturbed return map
        spec = wide.spec
        f3 = spec.chart.frame[:3, :]
        w = np.array([0.3 * spec.r, 0.25 * spec.r, 0.2 * spec.r])
        q = PhasePoint((spec.p.base + f3 @ w) % 1.0, 0.0)
        end = wide.flow(q, 1.0)
        w_rot = w.copy()
        w_rot[:2] = pert.rotation(spec.xi, w[:2])
        base = (spec.p.base + f3 @ w_rot) % 1.0
        base = (BASE_MATRIX_3 @ base) % 1.0
        base[2] = (base[2] + cat.omega) % 1.0
        assert end.height == pytest.approx(0.0, abs=1e-12)
        assert np.max(np.abs(wrap_torus(end.base - base))) < 1e-12

    def test_off_plateau_window_rotation_angle(self, wide, cat):
        spec = wide.spec
        f3 = spec.chart.frame[:3, :]
        w = np.array([0.7 * spec.r, 0.0, 0.3 * spec.r])
        q = PhasePoint((spec.p.base + f3 @ w) % 1.0, 0.0)
        end = wide.flow(q, 1.0)
        theta = spec.xi * spec.profiles.beta(
            math.hypot(w[0], w[1]) / spec.r
        )
        w_rot = w.copy()
        w_rot[:2] = pert.rotation(theta, w[:2])
        base = (spec.p.base + f3 @ w_rot) % 1.0
        base = (BASE_MATRIX_3 @ base) % 1.0
        base[2] = (base[2] + cat.omega) % 1.0
        assert np.max(np.abs(wrap_torus(end.base - base))) < 1e-12

    def test_partial_time_round_trip(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(14)
        for q in random_tube_points(spec, rng, 20, cat.omega):
            for t in (0.37, 1.5, 2.25):
                there = headline.flow(q, t)
                back = headline.flow(there, -t)
                assert np.max(np.abs(wrap_torus(back.base - q.base))) < 1e-12
                assert back.height == pytest.approx(q.height, abs=1e-12)

    def test_flow_is_base_flow_away_from_tube(self, headline, cat):
        spec = headline.spec
        q = PhasePoint([0.9, 0.5, 0.7], 0.0)
        # precondition: the visited window anchors stay clear of the tube
        b = np.array(q.base)
        for _ in range(4):
            d = wrap_torus(b - spec.p.base)
            assert np.linalg.norm(d) > spec.r * 1.05
            b = (BASE_MATRIX_3 @ b) % 1.0
            b[2] = (b[2] + cat.omega) % 1.0
        # within one window the walk leaves untouched coordinates bit-intact
        got = headline.flow(q, 0.9)
        want = cat.flow(q, 0.9)
        assert np.array_equal(got.as_array(), want.as_array())
        # across windows the two integrators order the arithmetic differently
        got = headline.flow(q, 3.4)
        want = cat.flow(q, 3.4)
        assert np.max(np.abs(wrap_torus(got.base - want.base))) < 1e-12
        assert got.height == pytest.approx(want.height, abs=1e-12)

    def test_height_advances_like_time(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(15)
        for q in random_tube_points(spec, rng, 10, cat.omega):
            end = headline.flow(q, 0.61)
            assert end.height == pytest.approx((q.height + 0.61) % 1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Tangent flow
# ---------------------------------------------------------------------------


class TestTangentFlow:
    def test_point_part_is_bitwise_flow(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(16)
        for q in random_tube_points(spec, rng, 10, cat.omega):
            for t in (0.37, 1.5, -0.9):
                end, _ = headline.tangent_flow(q, t)
                assert np.array_equal(end.as_array(), headline.flow(q, t).as_array())

    def test_matches_finite_differences(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(17)
        q = random_tube_points(spec, rng, 1, cat.omega)[0]
        for t in (0.37, 1.5, -0.9):
            _, d = headline.tangent_flow(q, t)
            fd = fd_tangent(headline, q, t)
            assert np.max(np.abs(d - fd)) < 1e-7
            assert d[3, :] == pytest.approx([0, 0, 0, 1], abs=1e-14)

    def test_volume_preserved(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(18)
        for q in random_tube_points(spec, rng, 15, cat.omega):
            for t in (0.5, 1.0, 2.5, -1.5):
                _, d = headline.tangent_flow(q, t)
                assert np.linalg.det(d) == pytest.approx(1.0, abs=1e-9)

    def test_full_window_ignores_height_offsets(self, wide):
        # over a complete window the ramp alpha' vanishes at both ends, so
        # the derivative's height column reduces to the unperturbed one
        spec = wide.spec
        f3 = spec.chart.frame[:3, :]
        w = np.array([0.3 * spec.r, 0.1 * spec.r, 0.0])
        q = PhasePoint((spec.p.base + f3 @ w) % 1.0, 0.0)
        _, d = wide.tangent_flow(q, 1.0)
        assert np.allclose(d[:, 3], [0, 0, 0, 1], atol=1e-12)

    def test_jacobian_matches_velocity_differences(self, headline, cat):
        spec = headline.spec
        rng = np.random.default_rng(19)
        h = 1e-6
        for q in random_tube_points(spec, rng, 30, cat.omega, avoid_roof=0.05):
            jac = headline.jacobian(q)
            arr = q.as_array()
            fd = np.zeros((4, 4))
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                hi = headline.velocity(PhasePoint((arr[:3] + e[:3]) % 1.0, arr[3] + e[3]))
                lo = headline.velocity(PhasePoint((arr[:3] - e[:3]) % 1.0, arr[3] - e[3]))
                fd[:, i] = (hi - lo) / (2 * h)
            assert np.max(np.abs(jac - fd)) < 1e-6


# ---------------------------------------------------------------------------
# Window cocycle data and spectrum plumbing
# ---------------------------------------------------------------------------


class _HideWindowData:
    """Proxy that forces the generic accumulation path of ``qr_run``."""

    def __init__(self, field):
        object.__setattr__(self, "_field", field)

    @property
    def tangent_dimension(self):
        return self._field.tangent_dimension

    def __getattr__(self, name):
        if name == "window_cocycle_data":
            raise AttributeError(name)
        return getattr(object.__getattribute__(self, "_field"), name)


class TestWindowData:
    def test_blocks_match_tangent_flow(self, wide, cat):
        spec = wide.spec
        p = spec.p
        visits, mats, base_mat = wide.window_cocycle_data(p, 40, 1e-4)
        assert np.array_equal(base_mat, BASE_MATRIX_3)
        assert 0 in visits
        q = p
        k = 0
        for i in range(40):
            _, d = wide.tangent_flow(q, 1.0)
            if k < len(visits) and visits[k] == i:
                assert np.max(np.abs(d[:3, :3] - mats[k])) < 1e-11
                k += 1
            else:
                assert np.max(np.abs(d[:3, :3] - BASE_MATRIX_3)) < 1e-11
            q = wide.flow(q, 1.0)
        assert k == len(visits)

    def test_center_window_is_conjugated_rotation(self, wide):
        spec = wide.spec
        f3 = spec.chart.frame[:3, :]
        _, mats, _ = wide.window_cocycle_data(spec.p, 1, 1e-4)
        c, s = math.cos(spec.xi), math.sin(spec.xi)
        block = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        want = BASE_MATRIX_3 @ f3 @ block @ f3.T
        assert np.max(np.abs(mats[0] - want)) < 1e-10

    def test_zero_amplitude_delegates(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.0)
        y0 = pert.build_Y(cat, spec)
        got = y0.window_cocycle_data(p_default, 25, 1e-3)
        want = cat.window_cocycle_data(p_default, 25, 1e-3)
        assert np.array_equal(got[0], want[0])
        assert np.array_equal(got[1], want[1])
        assert np.array_equal(got[2], want[2])
        ry = qr_run(y0, p_default, 200.0, seed=0)
        rx = qr_run(cat, p_default, 200.0, seed=0)
        assert np.array_equal(ry.log_diag, rx.log_diag)
        assert ry.logdet == 0.0 == rx.logdet

    def test_requires_matching_section_height(self, wide, cat):
        q = PhasePoint([0.4, 0.2, 0.9], 0.5)
        assert wide.window_cocycle_data(q, 10, 1e-3) is None

    def test_custom_profiles_have_no_fast_path(self, cat, p_default):
        spec = pert.make_spec(cat, p_default, 0.1, 0.2, profiles=make_cubic_profiles())
        y = pert.build_Y(cat, spec)
        assert y.window_cocycle_data(p_default, 10, 1e-3) is None

    def test_generic_accumulation_agrees(self, wide):
        fast = qr_run(wide, wide.spec.p, 120.0, seed=0)
        slow = qr_run(_HideWindowData(wide), wide.spec.p, 120.0, seed=0)
        assert np.allclose(fast.log_diag, slow.log_diag, atol=1e-8)
        assert fast.logdet == pytest.approx(slow.logdet, abs=1e-8)


# ---------------------------------------------------------------------------
# The headline statement: conditions of the construction
# ---------------------------------------------------------------------------


class TestConditions:
    def test_verify_passes_at_headline_parameters(self, headline):
        report = pert.verify_conditions(headline, tol=1e-6)
        conds = report["conditions"]
        assert conds["ii_complement_unchanged"]["passed"]
        assert conds["ii_complement_unchanged"]["max_err"] < 1e-9
        assert conds["iii_plane_rotation"]["passed"]
        assert conds["iii_plane_rotation"]["max_err"] < 1e-9
        assert conds["iv_support"]["passed"]
        assert conds["iv_support"]["max_err"] == 0.0
        assert report["divergence"]["passed"]
        assert report["divergence"]["max_abs"] <= 1e-8
        assert report["plateau_rotation"]["passed"]
        assert not conds["i_c1_small"]["checked"]  # no epsilon configured

    def test_time_one_map_rotates_the_plane(self, headline):
        # linearization at the center after one window: the plane directions
        # are rotated by xi, then carried by the unperturbed window map
        spec = headline.spec
        u2 = spec.chart.frame[:3, 0]
        u3 = spec.chart.frame[:3, 1]
        us = spec.chart.frame[:3, 2]
        _, d = headline.tangent_flow(spec.p, 1.0)
        a = d[:3, :3]
        c, s = math.cos(spec.xi), math.sin(spec.xi)
        assert np.allclose(a @ u2, BASE_MATRIX_3 @ (c * u2 + s * u3), atol=1e-9)
        assert np.allclose(a @ u3, BASE_MATRIX_3 @ (c * u3 - s * u2), atol=1e-9)
        assert np.allclose(a @ us, BASE_MATRIX_3 @ us, atol=1e-9)

    def test_certified_amplitude_meets_distance_budget(self, cat, p_default):
        eps = 0.01
        bound = pert.xi_bound(pert.standard_profiles(), 0.1, eps)
        spec = pert.make_spec(cat, p_default, 0.1, bound, epsilon=eps)
        y = pert.build_Y(cat, spec, dt=1e-4)
        report = pert.verify_conditions(y, tol=1e-6)
        cond = report["conditions"]["i_c1_small"]
        assert cond["checked"] and cond["passed"]
        assert cond["xi_within_bound"]
        assert cond["c1"] < eps

    def test_distance_grows_with_amplitude(self, cat, p_default):
        values = []
        for xi in (0.05, 0.1, 0.2):
            spec = pert.make_spec(cat, p_default, 0.1, xi)
            y = pert.build_Y(cat, spec)
            values.append(pert.c1_distance(y, n_grid=16, n_random=128)["c1"])
        assert values[0] < values[1] < values[2]

    def test_sampled_divergence_is_tiny(self, headline):
        assert pert.sampled_divergence(headline, n_points=2000, seed=0) <= 1e-8

    def test_verify_reports_failure_for_broken_field(self, cat, p_default):
        # a coarse transport step breaks the plateau-rotation identity beyond
        # the requested tolerance, and the error names the failed check
        spec = pert.make_spec(cat, p_default, 0.05, 0.3)
        rough = pert.build_Y(cat, spec, dt=0.05)
        with pytest.raises(PerturbationConditionError) as exc:
            pert.verify_conditions(rough, tol=1e-12)
        assert any("rotation" in f for f in exc.value.failures)


# ---------------------------------------------------------------------------
# Centers away from the zero section
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def lifted(cat):
    p = PhasePoint([0.55, 0.83, 0.11], 0.6)
    spec = spec_at(cat, p, 0.08, 0.25)
    return pert.build_Y(cat, spec, dt=1e-4)


class TestGeneralHeights:
    def test_conditions_hold(self, lifted):
        report = pert.verify_conditions(lifted, tol=1e-6)
        assert report["conditions"]["iii_plane_rotation"]["max_err"] < 1e-9
        assert report["conditions"]["iv_support"]["max_err"] == 0.0

    def test_velocity_reference_on_both_sheets(self, lifted, cat):
        spec = lifted.spec
        rng = np.random.default_rng(21)
        pre = post = 0
        for q in random_tube_points(spec, rng, 150, cat.omega):
            got = lifted.velocity(q)
            want = ref_velocity(spec, q, cat.omega)
            assert np.allclose(got, want, atol=1e-13)
            if q.height >= spec.p.height:
                pre += 1
            else:
                post += 1
        assert pre > 20 and post > 20

    def test_field_continuous_across_section_return(self, lifted, cat):
        # the tube crosses the return section mid-window; the two coordinate
        # sheets are glued by (b, 1) ~ (F b, 0), so tangent vectors carry the
        # derivative of the gluing map across the seam
        spec = lifted.spec
        f3 = spec.chart.frame[:3, :]
        rng = np.random.default_rng(22)
        for _ in range(20):
            w = rng.normal(size=3)
            w *= 0.8 * spec.r * rng.random() ** (1 / 3) / np.linalg.norm(w)
            b_pre = (spec.p.base + f3 @ w) % 1.0
            sec = (BASE_MATRIX_3 @ b_pre) % 1.0
            sec[2] = (sec[2] + cat.omega) % 1.0
            lo = lifted.velocity(PhasePoint(b_pre, 1.0 - 1e-9))
            hi = lifted.velocity(PhasePoint(sec, 0.0))
            assert np.max(np.abs(hi[:3] - BASE_MATRIX_3 @ lo[:3])) < 1e-8
            assert lo[3] == 1.0 and hi[3] == 1.0

    def test_tangent_flow_matches_finite_differences(self, lifted, cat):
        spec = lifted.spec
        f3 = spec.chart.frame[:3, :]
        sec = (spec.p.base + f3 @ np.array([0.01, -0.02, 0.01])) % 1.0
        sec = (BASE_MATRIX_3 @ sec) % 1.0
        sec[2] = (sec[2] + cat.omega) % 1.0
        q = PhasePoint(sec, 0.15)  # on the later sheet of the tube
        for t in (0.27, 1.3, -0.9):
            _, d = lifted.tangent_flow(q, t)
            fd = fd_tangent(lifted, q, t)
            assert np.max(np.abs(d - fd)) < 1e-7
            assert np.linalg.det(d) == pytest.approx(1.0, abs=1e-9)

    def test_spectrum_runs_from_lifted_center(self, lifted):
        run = qr_run(lifted, lifted.spec.p, 4000.0, seed=3)
        means = run.log_diag.mean(axis=0)
        lam = math.log((3.0 + math.sqrt(5.0)) / 2.0)
        assert means[0] == pytest.approx(lam, abs=5e-3)
        assert means[2] == pytest.approx(-lam, abs=5e-3)
        assert abs(means[1]) < 5e-3


# ---------------------------------------------------------------------------
# Field serialization
# ---------------------------------------------------------------------------


class TestSerialization:
    def test_field_json_dict(self, headline):
        d = headline.to_json_dict()
        assert d["type"] == "perturbed"
        assert d["dt"] == 1e-4
        assert d["spec"]["profile_id"] == "quintic"
        assert d["spec"]["r"] == 0.05 and d["spec"]["xi"] == 0.3
