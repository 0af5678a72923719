"""Divergence-free rotation perturbations supported in a unit-time flowbox.

Given a volume-preserving rectifying chart at a non-periodic point ``p``, the
perturbed field adds a twisting component inside the forward flowbox over the
transverse ball of radius ``r``: in chart coordinates ``(u1, u2, u3, ...)``
the ``(u2, u3)``-plane rotates at angular rate

    xi * alpha'(u1) * beta(|(u2, u3)| / r),

where ``alpha`` ramps smoothly from 0 to 1 across the window and ``beta`` is
an even radial plateau bump (1 on ``[0, 1/2]``, 0 beyond 1).  Consequences,
each checked by :func:`verify_conditions`:

* the field is unchanged outside the flowbox (exactly, not approximately);
* the perturbation is divergence-free, so volume is still preserved;
* points with ``|(u2, u3)| <= r/2`` are rotated by exactly ``xi`` over one
  window, so the time-one normal transport at ``p`` becomes the unperturbed
  transport composed with the rotation by ``xi`` on the ``(u2, u3)``-plane,
  while vectors in the remaining transverse directions transport as before;
* the C^1 distance to the original field is below any configured ``epsilon``
  whenever ``|xi|`` respects the certified bound :func:`xi_bound`.

For the suspension model the perturbed flow, its tangent map, and the sparse
window cocycle are all evaluated through closed forms plus the compiled
kernels; a generic chart-based fallback covers other systems.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .errors import CentralShiftError, ChartDomainError, PerturbationConditionError
from .flowbox import FlowboxChart, build_chart, identity_moser
from .linear_poincare import normal_frame, poincare_step
from .model_systems import (
    BASE_MATRIX_3,
    BASE_MATRIX_3_INV,
    PhasePoint,
    SuspensionFlow,
)

__all__ = [
    "BumpProfiles",
    "standard_profiles",
    "rotation",
    "rotate_in_plane",
    "xi_bound",
    "PerturbationSpec",
    "spec_from_json_dict",
    "ZField",
    "build_Z",
    "PerturbedField",
    "build_Y",
    "make_spec",
    "verify_conditions",
    "sampled_divergence",
    "c1_distance",
]

_DIV_FREE_TOL = 1e-8  # fixed acceptance level for sampled divergence


# ---------------------------------------------------------------------------
# Bump profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BumpProfiles:
    """A ramp/plateau bump pair with certified derivative bounds.

    ``alpha`` must rise from exactly 0 (t <= 0) to exactly 1 (t >= 1) with
    0 <= alpha' <= 2; ``beta`` must equal exactly 1 on ``|t| <= 1/2`` and
    exactly 0 on ``|t| >= 1`` with ``|beta'| <= 4``.  The ``sup_*`` fields
    are caller-certified upper bounds on the derivative magnitudes; they feed
    the twist-amplitude bound :func:`xi_bound`, so they must be sound (they
    may be slack, never too small).  Construction spot-checks all of the
    above on a dense grid and rejects violations.
    """

    alpha: Callable[[float], float]
    alpha_d1: Callable[[float], float]
    alpha_d2: Callable[[float], float]
    beta: Callable[[float], float]
    beta_d1: Callable[[float], float]
    beta_d2: Callable[[float], float]
    sup_alpha_d1: float
    sup_alpha_d2: float
    sup_beta_d1: float
    sup_beta_d2: float
    profile_id: str = "custom"

    @property
    def bounds(self) -> tuple[float, float, float]:
        """(sup|alpha'|, sup|alpha''|, sup|beta'|) as certified."""
        return (self.sup_alpha_d1, self.sup_alpha_d2, self.sup_beta_d1)

    def __post_init__(self):
        tol = 1e-12
        lim_a1 = min(2.0, self.sup_alpha_d1) + tol
        grid = np.linspace(-0.5, 1.5, 2001)
        for t in grid:
            t = float(t)
            a = self.alpha(t)
            if not (-tol <= a <= 1.0 + tol):
                raise CentralShiftError(f"alpha({t}) = {a} leaves [0, 1]")
            if t <= 0.0 and a != 0.0:
                raise CentralShiftError(f"alpha({t}) = {a} must be exactly 0")
            if t >= 1.0 and a != 1.0:
                raise CentralShiftError(f"alpha({t}) = {a} must be exactly 1")
            d1 = self.alpha_d1(t)
            if not (-tol <= d1 <= lim_a1):
                raise CentralShiftError(
                    f"alpha'({t}) = {d1} leaves [0, min(2, certified bound)]"
                )
            if abs(self.alpha_d2(t)) > self.sup_alpha_d2 + tol:
                raise CentralShiftError(f"alpha''({t}) exceeds its certified bound")
        lim_b1 = min(4.0, self.sup_beta_d1) + tol
        for t in np.linspace(-1.5, 1.5, 2001):
            t = float(t)
            b = self.beta(t)
            if not (-tol <= b <= 1.0 + tol):
                raise CentralShiftError(f"beta({t}) = {b} leaves [0, 1]")
            if abs(t) <= 0.5 and b != 1.0:
                raise CentralShiftError(f"beta({t}) = {b} must be exactly 1")
            if abs(t) >= 1.0 and b != 0.0:
                raise CentralShiftError(f"beta({t}) = {b} must be exactly 0")
            if abs(self.beta_d1(t)) > lim_b1:
                raise CentralShiftError(
                    f"beta'({t}) exceeds min(4, certified bound)"
                )
            if abs(self.beta_d2(t)) > self.sup_beta_d2 + tol:
                raise CentralShiftError(f"beta''({t}) exceeds its certified bound")


@functools.lru_cache(maxsize=1)
def standard_profiles() -> BumpProfiles:
    """The built-in C^2 quintic profiles with exact certified bounds.

    ``alpha`` is the quintic smoothstep ``t^3 (10 - 15 t + 6 t^2)`` on [0, 1];
    ``beta`` is its even plateau version.  The derivative bounds are sharp
    closed forms: sup|alpha'| = 15/8 (at t = 1/2) and sup|alpha''| =
    10/sqrt(3) (at t = (3 -+ sqrt(3))/6); the beta bounds are twice / four
    times those by the chain rule.  This singleton is the only profile set
    the compiled orbit kernels implement, so it is also the only one eligible
    for the fast sparse-cocycle path.
    """
    return BumpProfiles(
        alpha=_kernels.alpha_val,
        alpha_d1=_kernels.alpha_d1,
        alpha_d2=_kernels.alpha_d2,
        beta=_kernels.beta_val,
        beta_d1=_kernels.beta_d1,
        beta_d2=_kernels.beta_d2,
        sup_alpha_d1=_kernels.SUP_ALPHA_D1,
        sup_alpha_d2=_kernels.SUP_ALPHA_D2,
        sup_beta_d1=_kernels.SUP_BETA_D1,
        sup_beta_d2=_kernels.SUP_BETA_D2,
        profile_id="quintic",
    )


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def rotation(theta: float, v: np.ndarray) -> np.ndarray:
    """Rotate a 2-vector of plane coordinates by angle theta.

    The coordinates are with respect to the ordered plane basis (u2, u3), so
    ``rotation(pi/2, (1, 0)) = (0, 1)``: the first basis direction turns
    toward the second.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (2,):
        raise CentralShiftError(f"expected a 2-vector of plane coordinates, got shape {v.shape}")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def rotate_in_plane(u2: np.ndarray, u3: np.ndarray, theta: float, u: np.ndarray) -> np.ndarray:
    """Rotate an ambient vector by theta in the plane spanned by (u2, u3).

    ``u2`` and ``u3`` must be orthonormal; components of ``u`` orthogonal to
    the plane are left untouched.
    """
    u2 = np.asarray(u2, dtype=float)
    u3 = np.asarray(u3, dtype=float)
    u = np.asarray(u, dtype=float)
    a = float(u2 @ u)
    b = float(u3 @ u)
    c, s = math.cos(theta), math.sin(theta)
    return u + (c - 1.0) * (a * u2 + b * u3) + s * (a * u3 - b * u2)


def xi_bound(profiles: BumpProfiles, r: float, epsilon: float) -> float:
    """Largest certified twist amplitude keeping the C^1 distance below epsilon.

    The perturbing field and its derivative are bounded by ``|xi|`` times,
    respectively, ``sup|alpha'| * r`` and ``max(sup|alpha''|,
    4 sup|alpha'| sup|beta_r'|)`` with ``sup|beta_r'| = sup|beta'| / r``, so

        |xi| <= epsilon / (2 max(sup|alpha''|, 4 sup|alpha'| sup|beta'| / r))

    guarantees a C^1 distance below epsilon.  The bound is linear in epsilon
    and, once the radial term dominates (all radii of practical size), it
    scales linearly with r.
    """
    if not (r > 0.0):
        raise CentralShiftError(f"radius must be positive, got {r!r}")
    if not (epsilon > 0.0):
        raise CentralShiftError(f"epsilon must be positive, got {epsilon!r}")
    denom = 2.0 * max(
        profiles.sup_alpha_d2,
        4.0 * profiles.sup_alpha_d1 * (profiles.sup_beta_d1 / r),
    )
    return epsilon / denom


# ---------------------------------------------------------------------------
# Perturbation specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    """Everything needed to build one rotation perturbation.

    ``V_basis`` is the ordered orthonormal pair (u2, u3) spanning the
    rotation plane; it must coincide with the first two columns of the
    chart's transverse frame (the chart sends them to the coordinate axes the
    twist acts on).  ``r`` must equal the chart radius.  When ``epsilon`` is
    set, construction enforces ``|xi| <= xi_bound(profiles, r, epsilon)`` and
    refuses amplitudes beyond the certificate; ``epsilon=None`` skips that
    gate (the C^1 distance can still be measured afterwards).
    """

    p: object
    V_basis: np.ndarray
    r: float
    xi: float
    profiles: BumpProfiles
    chart: FlowboxChart
    epsilon: float | None = None

    def __post_init__(self):
        vb = np.asarray(self.V_basis, dtype=float)
        n = self.chart.frame.shape[0]
        if vb.shape != (n, 2):
            raise CentralShiftError(
                f"V_basis must have shape ({n}, 2), got {vb.shape}"
            )
        gram = vb.T @ vb
        if np.max(np.abs(gram - np.eye(2))) > 1e-9:
            raise CentralShiftError("V_basis columns must be orthonormal")
        x = np.asarray(self.chart.system.velocity(self.p), dtype=float)
        x = x / np.linalg.norm(x)
        if np.max(np.abs(vb.T @ x)) > 1e-9:
            raise CentralShiftError(
                "V_basis must be orthogonal to the flow direction at p"
            )
        if np.max(np.abs(vb - self.chart.frame[:, :2])) > 1e-9:
            raise CentralShiftError(
                "V_basis must match the first two transverse chart directions"
            )
        if isinstance(self.p, PhasePoint) and isinstance(self.chart.center, PhasePoint):
            same = self.p == self.chart.center
        else:
            same = np.allclose(
                np.asarray(self.p, dtype=float).ravel(),
                np.asarray(self.chart.center, dtype=float).ravel(),
                atol=1e-12,
            )
        if not same:
            raise CentralShiftError("p must be the chart center")
        r = float(self.r)
        if not (r > 0.0) or abs(r - self.chart.radius) > 1e-12 * max(1.0, r):
            raise CentralShiftError(
                f"r = {self.r!r} must be positive and equal the chart radius "
                f"{self.chart.radius!r}"
            )
        xi = float(self.xi)
        if not math.isfinite(xi):
            raise CentralShiftError(f"xi must be finite, got {self.xi!r}")
        if self.epsilon is not None:
            eps = float(self.epsilon)
            if not (eps > 0.0):
                raise CentralShiftError(f"epsilon must be positive, got {self.epsilon!r}")
            limit = xi_bound(self.profiles, r, eps)
            if abs(xi) > limit * (1.0 + 1e-9):
                raise PerturbationConditionError(
                    [
                        f"(i) twist amplitude |xi| = {abs(xi)!r} exceeds the "
                        f"certified bound {limit!r} for epsilon = {eps!r}"
                    ]
                )
            object.__setattr__(self, "epsilon", eps)
        vb = vb.copy()
        vb.setflags(write=False)
        object.__setattr__(self, "V_basis", vb)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "xi", xi)

    def to_json_dict(self) -> dict:
        p = self.p
        return {
            "p": p.to_json_dict() if hasattr(p, "to_json_dict") else [
                float(v) for v in np.asarray(p).ravel()
            ],
            "V_basis": self.V_basis.tolist(),
            "r": float(self.r),
            "xi": float(self.xi),
            "epsilon": None if self.epsilon is None else float(self.epsilon),
            "profile_id": self.profiles.profile_id,
        }


def make_spec(
    sys,
    p,
    r: float,
    xi: float,
    *,
    epsilon: float | None = None,
    profiles: BumpProfiles | None = None,
    chart: FlowboxChart | None = None,
) -> PerturbationSpec:
    """Build a :class:`PerturbationSpec` at p, constructing the chart if needed.

    The default chart uses the identity transverse map (exact for systems
    whose normal speed is constant, such as the suspension model) and the
    oriented transverse frame at p; the rotation plane is its first two
    directions (unstable and central for the model).
    """
    if profiles is None:
        profiles = standard_profiles()
    if chart is None:
        moser = identity_moser(sys.tangent_dimension - 1, float(r))
        chart = build_chart(sys, p, float(r), moser)
    return PerturbationSpec(
        p=p,
        V_basis=chart.frame[:, :2],
        r=float(r),
        xi=float(xi),
        profiles=profiles,
        chart=chart,
        epsilon=epsilon,
    )


def spec_from_json_dict(sys, d: dict) -> PerturbationSpec:
    """Rebuild a spec from its JSON dict against the given system."""
    if d.get("profile_id") != "quintic":
        raise CentralShiftError(
            f"cannot rebuild profiles with id {d.get('profile_id')!r}; only "
            "'quintic' round-trips through JSON"
        )
    p = d["p"]
    if isinstance(p, dict):
        p = PhasePoint.from_json_dict(p)
    else:
        p = np.asarray(p, dtype=float)
    spec = make_spec(
        sys, p, float(d["r"]), float(d["xi"]),
        epsilon=None if d.get("epsilon") is None else float(d["epsilon"]),
    )
    stored = d.get("V_basis")
    if stored is not None and not np.allclose(
        np.asarray(stored, dtype=float), spec.V_basis, atol=1e-9
    ):
        raise CentralShiftError(
            "stored V_basis does not match the chart frame rebuilt at p"
        )
    return spec


# ---------------------------------------------------------------------------
# The twisting field in chart coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ZField:
    """The twist field in chart coordinates, with exact closed-form Jacobian."""

    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    dim: int


def build_Z(spec: PerturbationSpec) -> ZField:
    """Chart-coordinate twist field of a spec.

    ``value(u) = xi alpha'(u1) beta(|(u2,u3)|/r) (0, -u3, u2, 0, ...)``;
    it vanishes exactly for ``u1`` outside ``[0, 1]`` or ``|(u2, u3)| >= r``,
    and its Jacobian trace is identically zero (the rotation generator is
    antisymmetric and the radial shear is traceless).
    """
    xi = spec.xi
    r = spec.r
    prof = spec.profiles
    dim = spec.chart.frame.shape[0]

    def value(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros(dim)
        a, b = float(u[1]), float(u[2])
        c = xi * prof.alpha_d1(float(u[0])) * prof.beta(math.hypot(a, b) / r)
        out[1] = -c * b
        out[2] = c * a
        return out

    def jacobian(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        jac = np.zeros((dim, dim))
        h, a, b = float(u[0]), float(u[1]), float(u[2])
        rho = math.hypot(a, b)
        s = rho / r
        phi = prof.beta(s)
        cc = xi * prof.alpha_d1(h)
        bd = prof.beta_d1(s)
        if bd != 0.0 and rho > 0.0:
            g = bd / (r * rho)
            jac[1, 1] = -cc * g * a * b
            jac[1, 2] = -cc * (phi + g * b * b)
            jac[2, 1] = cc * (phi + g * a * a)
            jac[2, 2] = cc * g * a * b
        else:
            jac[1, 2] = -cc * phi
            jac[2, 1] = cc * phi
        c1 = xi * prof.alpha_d2(h) * phi
        jac[1, 0] = -c1 * b
        jac[2, 0] = c1 * a
        return jac

    return ZField(value=value, jacobian=jacobian, dim=dim)


# ---------------------------------------------------------------------------
# Vectorized quintic helpers (same arithmetic as the compiled kernels)
# ---------------------------------------------------------------------------


def _np_smoothstep(t: np.ndarray) -> np.ndarray:
    v = t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    return np.where(t <= 0.0, 0.0, np.where(t >= 1.0, 1.0, v))


def _np_alpha(t: np.ndarray) -> np.ndarray:
    return _np_smoothstep(t)


def _np_alpha_d1(t: np.ndarray) -> np.ndarray:
    u = t * (1.0 - t)
    return np.where((t <= 0.0) | (t >= 1.0), 0.0, 30.0 * u * u)


def _np_alpha_d2(t: np.ndarray) -> np.ndarray:
    v = 60.0 * t * (2.0 * t - 1.0) * (t - 1.0)
    return np.where((t <= 0.0) | (t >= 1.0), 0.0, v)


def _np_beta(t: np.ndarray) -> np.ndarray:
    x = np.abs(t)
    return np.where(
        x <= 0.5, 1.0, np.where(x >= 1.0, 0.0, _np_smoothstep(2.0 * (1.0 - x)))
    )


def _np_beta_d1(t: np.ndarray) -> np.ndarray:
    x = np.abs(t)
    u = 2.0 * (1.0 - x)
    w = u * (1.0 - u)
    s = -2.0 * (30.0 * w * w)
    s = np.where((x <= 0.5) | (x >= 1.0), 0.0, s)
    return np.where(t < 0.0, -s, s)


def _vectorize_profiles(prof: BumpProfiles):
    """(alpha, alpha', alpha'', beta, beta') as array-valued callables."""
    if prof is standard_profiles():
        return _np_alpha, _np_alpha_d1, _np_alpha_d2, _np_beta, _np_beta_d1
    return tuple(
        np.vectorize(f, otypes=[float])
        for f in (prof.alpha, prof.alpha_d1, prof.alpha_d2, prof.beta, prof.beta_d1)
    )


# ---------------------------------------------------------------------------
# The perturbed field
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbedField:
    """The perturbed flow Y = X + (chart pushforward of the twist field).

    Exposes the full flow-system interface (``velocity``, ``flow``,
    ``tangent_flow``, ``window_cocycle_data``), so it can be dropped into the
    spectrum and comparison machinery wherever the base system is accepted.
    For the suspension model all orbit positions use exact closed forms (the
    in-window twist is a rigid rotation of the transverse plane coordinates
    at fixed radius), while variational matrices integrate the transport
    equation with fixed-step RK4 at resolution ``dt``.

    With ``xi == 0`` every operation delegates verbatim to the base system,
    so results are bit-identical to the unperturbed ones.
    """

    base: object
    spec: PerturbationSpec
    Z: ZField
    dt: float = 1e-3

    def __post_init__(self):
        is_model = isinstance(self.base, SuspensionFlow)
        object.__setattr__(self, "_is_model", is_model)
        object.__setattr__(
            self, "_is_standard", self.spec.profiles is standard_profiles()
        )
        vec = _vectorize_profiles(self.spec.profiles)
        object.__setattr__(self, "_vec_profiles", vec)
        if not is_model:
            return
        p = self.spec.p
        f3 = np.ascontiguousarray(self.spec.chart.frame[:3, :])
        object.__setattr__(self, "_pb", np.asarray(p.base, dtype=float).copy())
        object.__setattr__(self, "_hp", float(p.height))
        object.__setattr__(self, "_f3", f3)
        # chart-to-phase embedding: u1 -> e_h, transverse -> frame columns
        e = np.zeros((4, 4))
        e[3, 0] = 1.0
        e[:3, 1:] = f3
        object.__setattr__(self, "_e", e)
        r3 = np.eye(4)
        r3[:3, :3] = BASE_MATRIX_3
        r3i = np.eye(4)
        r3i[:3, :3] = BASE_MATRIX_3_INV
        object.__setattr__(self, "_r3", r3)
        object.__setattr__(self, "_r3i", r3i)
        # chart-coordinate derivative of one forward/backward window crossing
        x3 = np.eye(4)
        x3[1:, 1:] = f3.T @ BASE_MATRIX_3 @ f3
        x3i = np.eye(4)
        x3i[1:, 1:] = f3.T @ BASE_MATRIX_3_INV @ f3
        object.__setattr__(self, "_x3", x3)
        object.__setattr__(self, "_x3i", x3i)

    # -- FlowSystem interface -------------------------------------------------

    @property
    def tangent_dimension(self) -> int:
        return self.base.tangent_dimension

    @property
    def divergence_free(self) -> bool:
        return True

    @property
    def Y(self) -> Callable:
        """The full perturbed field as a callable (alias of :meth:`velocity`)."""
        return self.velocity

    def velocity(self, q) -> np.ndarray:
        if not self._is_model:
            return self._velocity_generic(np.asarray(q, dtype=float))
        if self.spec.xi == 0.0:
            return self.base.velocity(q)
        pt = q.as_array() if isinstance(q, PhasePoint) else np.asarray(q, dtype=float)
        return self.velocity_batch(pt[None, :])[0]

    def velocity_batch(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized field evaluation on rows (x, y, z, h), heights in [0, 1)."""
        pts = np.asarray(pts, dtype=float)
        out = np.zeros_like(pts)
        out[:, 3] = 1.0
        if not self._is_model:
            for i, row in enumerate(pts):
                out[i] = self._velocity_generic(row)
            return out
        if self.spec.xi == 0.0:
            return out
        phi, post, w, inside = self._tube_coords(pts)
        if not inside.any():
            return out
        a_d1, b_val = self._vec_profiles[1], self._vec_profiles[3]
        r = self.spec.r
        c = self.spec.xi * a_d1(phi[inside]) * b_val(
            np.hypot(w[inside, 0], w[inside, 1]) / r
        )
        va = -c * w[inside, 1]
        vb = c * w[inside, 0]
        f3 = self._f3
        delta = va[:, None] * f3[:, 0] + vb[:, None] * f3[:, 1]
        post_in = post[inside]
        if post_in.any():
            delta[post_in] = delta[post_in] @ BASE_MATRIX_3.T
        out[inside, :3] = delta
        return out

    def flow(self, q, t: float):
        if not self._is_model:
            return self._flow_generic(np.asarray(q, dtype=float), float(t))
        if self.spec.xi == 0.0:
            return self.base.flow(q, t)
        end, _ = self._walk(q, float(t), want_d=False)
        return end

    def tangent_flow(self, q, t: float):
        if not self._is_model:
            return self._tangent_flow_generic(np.asarray(q, dtype=float), float(t))
        if self.spec.xi == 0.0:
            return self.base.tangent_flow(q, t)
        return self._walk(q, float(t), want_d=True)

    def window_cocycle_data(self, q, n_windows: int, dt: float):
        """Sparse time-1 window cocycle along the perturbed orbit from q.

        Available for the suspension model with the built-in profiles and a
        start on the chart section (``q.height == p.height``); anything else
        returns None and callers fall back to the generic per-window loop.
        The in-tube variational blocks are integrated at the resolution
        ``dt`` supplied by the caller.
        """
        if not self._is_model:
            return None
        if self.spec.xi == 0.0:
            return self.base.window_cocycle_data(q, n_windows, dt)
        if not self._is_standard:
            return None
        if not isinstance(q, PhasePoint) or q.height != self._hp:
            return None
        visit_idx, _, _, v_mats, _ = _kernels.run_orbit_visits(
            q.base, n_windows, self._pb, self._f3,
            self.spec.r, self.spec.xi, float(dt), self.base.omega,
        )
        blocks = np.zeros((len(visit_idx), 3, 3))
        blocks[:, :2, :2] = v_mats
        blocks[:, 2, 2] = 1.0
        bf = BASE_MATRIX_3 @ self._f3
        mats = np.matmul(np.matmul(bf, blocks), self._f3.T)
        return visit_idx, mats, BASE_MATRIX_3

    def to_json_dict(self) -> dict:
        return {
            "type": "perturbed",
            "base": self.base.to_json_dict(),
            "spec": self.spec.to_json_dict(),
            "dt": float(self.dt),
        }

    # -- model-path internals ---------------------------------------------

    def _tube_coords(self, pts: np.ndarray):
        """(phi, post, w, inside) of rows (x, y, z, h) relative to the tube.

        ``phi`` is the chart time within the current window, ``post`` marks
        rows past the roof (the section-sheet base is one step back), ``w``
        the transverse chart coordinates, ``inside`` membership in the tube.
        """
        h = pts[:, 3]
        phi = h - self._hp
        post = phi < 0.0
        phi = np.where(post, phi + 1.0, phi)
        b = pts[:, :3]
        if post.any():
            bp = b[post]
            bp = bp @ BASE_MATRIX_3_INV.T
            bp[:, 2] -= self.base.omega
            b = b.copy()
            b[post] = bp - np.floor(bp)
        d = b - self._pb
        d -= np.floor(d + 0.5)
        w = d @ self._f3
        inside = np.einsum("ij,ij->i", w, w) <= self.spec.r * self.spec.r
        return phi, post, w, inside

    def _jacobian_batch(self, pts: np.ndarray) -> np.ndarray:
        """Closed-form spatial derivative of the field at rows (x, y, z, h)."""
        pts = np.asarray(pts, dtype=float)
        m = pts.shape[0]
        if self.spec.xi == 0.0:
            return np.zeros((m, 4, 4))
        phi, post, w, inside = self._tube_coords(pts)
        dz = np.zeros((m, 4, 4))
        if inside.any():
            _, a_d1, a_d2, b_val, b_d1 = self._vec_profiles
            r = self.spec.r
            xi = self.spec.xi
            w0, w1 = w[inside, 0], w[inside, 1]
            ph = phi[inside]
            rho = np.hypot(w0, w1)
            s = rho / r
            bv = b_val(s)
            bd = b_d1(s)
            cc = xi * a_d1(ph)
            g = np.zeros_like(rho)
            mask = (bd != 0.0) & (rho > 0.0)
            g[mask] = bd[mask] / (r * rho[mask])
            sub = np.zeros((int(inside.sum()), 4, 4))
            sub[:, 1, 1] = -cc * g * w0 * w1
            sub[:, 1, 2] = -cc * (bv + g * w1 * w1)
            sub[:, 2, 1] = cc * (bv + g * w0 * w0)
            sub[:, 2, 2] = cc * g * w0 * w1
            c1 = xi * a_d2(ph) * bv
            sub[:, 1, 0] = -c1 * w1
            sub[:, 2, 0] = c1 * w0
            dz[inside] = sub
        jac = self._e @ dz @ self._e.T
        if post.any():
            jac[post] = self._r3 @ jac[post] @ self._r3i
        return jac

    def jacobian(self, q) -> np.ndarray:
        """Spatial derivative of the field at a phase point (closed form)."""
        pt = q.as_array() if isinstance(q, PhasePoint) else np.asarray(q, dtype=float)
        if not self._is_model:
            return self._jacobian_generic(pt)
        return self._jacobian_batch(pt[None, :])[0]

    def _chart_state(self, q: PhasePoint) -> tuple[float, float, float, float]:
        """Section-sheet base (x, y, z) and window time phi of a phase point."""
        h = q.height
        if h >= self._hp:
            return float(q.base[0]), float(q.base[1]), float(q.base[2]), h - self._hp
        x, y, z = _kernels.cat_step_inv(
            float(q.base[0]), float(q.base[1]), float(q.base[2]), self.base.omega
        )
        return x, y, z, h - self._hp + 1.0

    def _phase_point(self, x: float, y: float, z: float, phi: float) -> PhasePoint:
        h = self._hp + phi
        if h >= 1.0:
            x, y, z = _kernels.cat_step(x, y, z, self.base.omega)
            h = h - 1.0
        return PhasePoint(np.array([x, y, z]), h)

    def _transport_matrix(self, w0: float, w1: float, a: float, b: float):
        """2x2 transverse variational matrix of the twist from u1=a to u1=b."""
        if self._is_standard:
            _, _, m00, m01, m10, m11 = _kernels.tube_transport(
                w0, w1, a, b, self.spec.xi, self.spec.r, self.dt
            )
            return m00, m01, m10, m11
        prof = self.spec.profiles
        r = self.spec.r
        rho = math.hypot(w0, w1)
        s = rho / r
        dalpha = prof.alpha(b) - prof.alpha(a)
        th = self.spec.xi * prof.beta(s) * dalpha
        ca, sa = math.cos(th), math.sin(th)
        o0 = ca * w0 - sa * w1
        o1 = sa * w0 + ca * w1
        m00, m01, m10, m11 = ca, -sa, sa, ca
        if rho > 0.0:
            dth = self.spec.xi * prof.beta_d1(s) * dalpha / (r * rho)
            m00 += -o1 * dth * w0
            m01 += -o1 * dth * w1
            m10 += o0 * dth * w0
            m11 += o0 * dth * w1
        return m00, m01, m10, m11

    def _segment(self, x, y, z, a, b, d_chart):
        """Advance the section-sheet base through chart times [a, b] (b may be < a)."""
        if a == b:
            return x, y, z, d_chart
        f = self._f3
        px, py, pz = self._pb
        dx = _kernels.wrap_half(x - px)
        dy = _kernels.wrap_half(y - py)
        dz = _kernels.wrap_half(z - pz)
        w0 = f[0, 0] * dx + f[1, 0] * dy + f[2, 0] * dz
        w1 = f[0, 1] * dx + f[1, 1] * dy + f[2, 1] * dz
        w2 = f[0, 2] * dx + f[1, 2] * dy + f[2, 2] * dz
        if w0 * w0 + w1 * w1 + w2 * w2 > self.spec.r * self.spec.r:
            return x, y, z, d_chart
        prof = self.spec.profiles
        bval = prof.beta(math.hypot(w0, w1) / self.spec.r)
        ang = self.spec.xi * bval * (prof.alpha(b) - prof.alpha(a))
        if ang != 0.0:
            ca, sa = math.cos(ang), math.sin(ang)
            w0n = ca * w0 - sa * w1
            w1n = sa * w0 + ca * w1
            x = _kernels.mod1(px + f[0, 0] * w0n + f[0, 1] * w1n + f[0, 2] * w2)
            y = _kernels.mod1(py + f[1, 0] * w0n + f[1, 1] * w1n + f[1, 2] * w2)
            z = _kernels.mod1(pz + f[2, 0] * w0n + f[2, 1] * w1n + f[2, 2] * w2)
        else:
            w0n, w1n = w0, w1
        if d_chart is not None:
            m00, m01, m10, m11 = self._transport_matrix(w0, w1, a, b)
            c = self.spec.xi * bval * (prof.alpha_d1(b) - prof.alpha_d1(a))
            seg = np.eye(4)
            seg[1, 1], seg[1, 2] = m00, m01
            seg[2, 1], seg[2, 2] = m10, m11
            seg[1, 0] = -c * w1n
            seg[2, 0] = c * w0n
            d_chart = seg @ d_chart
        return x, y, z, d_chart

    def _walk(self, q: PhasePoint, t: float, want_d: bool):
        """Shared closed-form orbit walker; returns (endpoint, D or None)."""
        omega = self.base.omega
        x, y, z, phi0 = self._chart_state(q)
        k, phi_f = SuspensionFlow._split_time(phi0, t)
        d = np.eye(4) if want_d else None
        if k == 0:
            x, y, z, d = self._segment(x, y, z, phi0, phi_f, d)
        elif k > 0:
            x, y, z, d = self._segment(x, y, z, phi0, 1.0, d)
            x, y, z = _kernels.cat_step(x, y, z, omega)
            if want_d:
                d = self._x3 @ d
            for _ in range(k - 1):
                x, y, z, d = self._segment(x, y, z, 0.0, 1.0, d)
                x, y, z = _kernels.cat_step(x, y, z, omega)
                if want_d:
                    d = self._x3 @ d
            x, y, z, d = self._segment(x, y, z, 0.0, phi_f, d)
        else:
            x, y, z, d = self._segment(x, y, z, phi0, 0.0, d)
            for _ in range(-k - 1):
                x, y, z = _kernels.cat_step_inv(x, y, z, omega)
                if want_d:
                    d = self._x3i @ d
                x, y, z, d = self._segment(x, y, z, 1.0, 0.0, d)
            x, y, z = _kernels.cat_step_inv(x, y, z, omega)
            if want_d:
                d = self._x3i @ d
            x, y, z, d = self._segment(x, y, z, 1.0, phi_f, d)
        end = self._phase_point(x, y, z, phi_f)
        if not want_d:
            return end, None
        dmat = self._e @ d @ self._e.T
        if self._hp + phi_f >= 1.0:  # endpoint past the roof of its window
            dmat = self._r3 @ dmat
        if q.height < self._hp:  # start was past the roof of its window
            dmat = dmat @ self._r3i
        return end, dmat

    # -- generic-path internals ---------------------------------------------

    def _velocity_generic(self, q: np.ndarray) -> np.ndarray:
        base_v = np.asarray(self.base.velocity(q), dtype=float)
        if self.spec.xi == 0.0:
            return base_v
        try:
            coords = self.spec.chart.Psi(q)
        except ChartDomainError:
            return base_v
        z = self.Z.value(coords)
        if not z.any():
            return base_v
        return base_v + self.spec.chart.d_phi(coords) @ z

    def _jacobian_generic(self, q: np.ndarray, step: float = 1e-7) -> np.ndarray:
        n = q.shape[0]
        jac = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            jac[:, i] = (
                self._velocity_generic(q + e) - self._velocity_generic(q - e)
            ) / (2.0 * step)
        return jac

    def _flow_generic(self, q: np.ndarray, t: float) -> np.ndarray:
        x = q.copy()
        if t == 0.0:
            return x
        n = max(1, int(round(abs(t) / self.dt)))
        h = t / n
        f = self._velocity_generic
        for _ in range(n):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        return x

    def _tangent_flow_generic(self, q: np.ndarray, t: float):
        x = q.copy()
        n_dim = x.shape[0]
        d = np.eye(n_dim)
        if t == 0.0:
            return x, d
        n = max(1, int(round(abs(t) / self.dt)))
        h = t / n
        f, jac = self._velocity_generic, self._jacobian_generic
        for _ in range(n):
            k1 = f(x)
            l1 = jac(x) @ d
            x2 = x + 0.5 * h * k1
            k2 = f(x2)
            l2 = jac(x2) @ (d + 0.5 * h * l1)
            x3 = x + 0.5 * h * k2
            k3 = f(x3)
            l3 = jac(x3) @ (d + 0.5 * h * l2)
            x4 = x + h * k3
            k4 = f(x4)
            l4 = jac(x4) @ (d + h * l3)
            x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            d = d + (h / 6.0) * (l1 + 2.0 * (l2 + l3) + l4)
        return x, d


def build_Y(base, spec: PerturbationSpec, *, dt: float = 1e-3) -> PerturbedField:
    """Assemble the perturbed field from a base system and a spec."""
    if spec.chart.system is not base and spec.chart.system != base:
        raise CentralShiftError("spec chart was built for a different system")
    return PerturbedField(base=base, spec=spec, Z=build_Z(spec), dt=float(dt))


# ---------------------------------------------------------------------------
# Measurements and verification
# ---------------------------------------------------------------------------


def _require_model(field: PerturbedField, what: str) -> None:
    if not getattr(field, "_is_model", False):
        raise CentralShiftError(
            f"{what} is implemented for the suspension model only"
        )


def _tube_samples(field: PerturbedField, m: int, rng, *, radius: float,
                  height_margin: float) -> np.ndarray:
    """Rows (x, y, z, h) uniform in the twist tube, clear of the roof seam."""
    hp = field._hp
    u1 = np.empty(m)
    good = np.zeros(m, dtype=bool)
    for _ in range(200):
        need = ~good
        if not need.any():
            break
        draw = rng.uniform(0.0, 1.0, int(need.sum()))
        h = hp + draw
        h = np.where(h >= 1.0, h - 1.0, h)
        ok = (h > height_margin) & (h < 1.0 - height_margin)
        idx = np.flatnonzero(need)
        u1[idx[ok]] = draw[ok]
        good[idx[ok]] = True
    if not good.all():
        raise CentralShiftError("tube sampling failed to clear the roof seam")
    direction = rng.standard_normal((m, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    rad = radius * rng.uniform(0.0, 1.0, m) ** (1.0 / 3.0)
    w = direction * rad[:, None]
    base = field._pb + w @ field._f3.T
    base -= np.floor(base)
    h = hp + u1
    post = h >= 1.0
    if post.any():
        bp = base[post] @ BASE_MATRIX_3.T
        bp[:, 2] += field.base.omega
        base[post] = bp - np.floor(bp)
        h[post] -= 1.0
    return np.column_stack([base, h])


def sampled_divergence(
    field: PerturbedField, n_points: int = 2000, seed: int = 0,
    step: float | None = None,
) -> float:
    """Max |div Y| over interior tube points, by central finite differences.

    The step defaults to ``1e-6 r``; sample points keep a ``10 * step``
    margin from the lateral shell and from the roof seam (where the ambient
    coordinates, not the field, are discontinuous), so plain second-order
    differences resolve the divergence to well below 1e-8.
    """
    _require_model(field, "sampled_divergence")
    r = field.spec.r
    h = 1e-6 * r if step is None else float(step)
    rng = np.random.default_rng(seed)
    pts = _tube_samples(
        field, int(n_points), rng, radius=r - 10.0 * h, height_margin=10.0 * h
    )
    div = np.zeros(len(pts))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        vp = field.velocity_batch(pts + e)
        vm = field.velocity_batch(pts - e)
        div += (vp[:, i] - vm[:, i]) / (2.0 * h)
    return float(np.max(np.abs(div)))


def c1_distance(
    field: PerturbedField, *, n_grid: int = 24, n_random: int = 512, seed: int = 0,
) -> dict:
    """Sampled C^0 and C^1 distance between the perturbed and base fields.

    Returns ``{"sup_field", "sup_jacobian", "c1"}`` with ``c1`` the max of
    the two sups (field values in the Euclidean norm, derivatives in the
    operator norm).  Sampling covers a window-time/radius grid through the
    worst-case directions plus uniform tube points.
    """
    _require_model(field, "c1_distance")
    r = field.spec.r
    hp = field._hp
    rng = np.random.default_rng(seed)
    rows = [_tube_samples(field, n_random, rng, radius=r, height_margin=0.0)]
    phis = np.linspace(0.005, 0.995, n_grid)
    radii = np.linspace(0.0, 0.999 * r, n_grid)
    for ang in np.linspace(0.0, 2.0 * math.pi, 7)[:-1]:
        direction = np.array([math.cos(ang), math.sin(ang), 0.0])
        pp, ss = np.meshgrid(phis, radii, indexing="ij")
        w = ss.ravel()[:, None] * direction
        base = field._pb + w @ field._f3.T
        base -= np.floor(base)
        h = hp + pp.ravel()
        post = h >= 1.0
        if post.any():
            bp = base[post] @ BASE_MATRIX_3.T
            bp[:, 2] += field.base.omega
            base[post] = bp - np.floor(bp)
            h[post] -= 1.0
        rows.append(np.column_stack([base, h]))
    pts = np.vstack(rows)
    diff = field.velocity_batch(pts)
    diff[:, 3] -= 1.0
    sup_field = float(np.max(np.linalg.norm(diff, axis=1)))
    jac = field._jacobian_batch(pts)
    sup_jac = float(np.max(np.linalg.svd(jac, compute_uv=False)[:, 0]))
    return {
        "sup_field": sup_field,
        "sup_jacobian": sup_jac,
        "c1": max(sup_field, sup_jac),
    }


def verify_conditions(
    field: PerturbedField,
    tol: float = 1e-6,
    *,
    epsilon: float | None = None,
    n_support: int = 256,
    n_divergence: int = 2000,
    seed: int = 0,
) -> dict:
    """Check the four construction conditions plus volume preservation.

    (i)   C^1 smallness: the sampled C^1 distance stays below ``epsilon``
          AND ``|xi|`` respects the certified bound :func:`xi_bound`
          (sampling alone cannot certify a supremum, so the amplitude
          certificate is part of the condition).  Skipped when neither the
          argument nor the spec provides an epsilon.
    (ii)  The time-one normal transport at p is unchanged on the transverse
          directions orthogonal to the rotation plane.
    (iii) On the rotation plane it equals the base transport composed with
          the rotation by xi.
    (iv)  The field equals the base field outside the flowbox, exactly.

    Additionally: sampled |div Y| <= 1e-8, and the time-one transverse
    transport on the plateau ``|(u2,u3)| <= r/2`` is the exact rotation.
    Returns a JSON-ready report; raises
    :class:`~centralshift.errors.PerturbationConditionError` listing every
    failed condition otherwise.
    """
    _require_model(field, "verify_conditions")
    spec = field.spec
    p = spec.p
    failures: list[str] = []
    f3 = field._f3
    xi = spec.xi
    eps = epsilon if epsilon is not None else spec.epsilon

    mat_y = poincare_step(field, normal_frame(field, p), 1.0).matrix
    mat_x = poincare_step(field.base, normal_frame(field.base, p), 1.0).matrix

    c, s = math.cos(xi), math.sin(xi)
    rot = [c * f3[:, 0] + s * f3[:, 1], c * f3[:, 1] - s * f3[:, 0]]
    err_rot = max(
        float(np.linalg.norm(mat_y @ f3[:, i] - mat_x @ rot[i])) for i in (0, 1)
    )
    if err_rot > tol:
        failures.append(
            f"(iii) plane transport differs from base-then-rotate by {err_rot:.3e}"
        )
    err_stable = float(np.linalg.norm(mat_y @ f3[:, 2] - mat_x @ f3[:, 2]))
    if err_stable > tol:
        failures.append(
            f"(ii) transport off the rotation plane changed by {err_stable:.3e}"
        )

    rng = np.random.default_rng(seed)
    outside = _outside_points(field, n_support, rng)
    vel = field.velocity_batch(outside)
    vel[:, 3] -= 1.0
    err_support = float(np.max(np.abs(vel))) if len(vel) else 0.0
    if err_support != 0.0:
        failures.append(
            f"(iv) field differs from base outside the flowbox by {err_support:.3e}"
        )

    dist = c1_distance(field, seed=seed)
    limit = None
    xi_ok = None
    c1_ok = None
    if eps is not None:
        limit = xi_bound(spec.profiles, spec.r, eps)
        xi_ok = abs(xi) <= limit * (1.0 + 1e-9)
        c1_ok = dist["c1"] < eps
        if not xi_ok:
            failures.append(
                f"(i) twist amplitude |xi| = {abs(xi)!r} exceeds the certified "
                f"bound {limit!r} for epsilon = {eps!r}"
            )
        if not c1_ok:
            failures.append(
                f"(i) sampled C^1 distance {dist['c1']:.3e} is not below "
                f"epsilon = {eps!r}"
            )

    div_max = sampled_divergence(field, n_divergence, seed=seed)
    if div_max > _DIV_FREE_TOL:
        failures.append(f"divergence: sampled |div Y| = {div_max:.3e} > 1e-8")

    m = field._transport_matrix(0.25 * spec.r, 0.0, 0.0, 1.0)
    err_plateau = max(
        abs(m[0] - c), abs(m[1] + s), abs(m[2] - s), abs(m[3] - c)
    )
    if err_plateau > tol:
        failures.append(
            f"plateau: time-one transport differs from the rotation by "
            f"{err_plateau:.3e}"
        )

    report = {
        "tol": float(tol),
        "xi": float(xi),
        "epsilon": None if eps is None else float(eps),
        "xi_limit": None if limit is None else float(limit),
        "conditions": {
            "i_c1_small": {
                "checked": eps is not None,
                "passed": bool(xi_ok and c1_ok) if eps is not None else None,
                "xi_within_bound": xi_ok,
                **{k: float(v) for k, v in dist.items()},
            },
            "ii_complement_unchanged": {
                "passed": bool(err_stable <= tol),
                "max_err": err_stable,
            },
            "iii_plane_rotation": {
                "passed": bool(err_rot <= tol),
                "max_err": err_rot,
            },
            "iv_support": {
                "passed": bool(err_support == 0.0),
                "max_err": err_support,
                "n_checked": int(len(outside)),
            },
        },
        "divergence": {
            "passed": bool(div_max <= _DIV_FREE_TOL),
            "max_abs": div_max,
            "tol": _DIV_FREE_TOL,
            "n_points": int(n_divergence),
        },
        "plateau_rotation": {
            "passed": bool(err_plateau <= tol),
            "max_err": err_plateau,
        },
    }
    if failures:
        raise PerturbationConditionError(failures, report)
    return report


def _outside_points(field: PerturbedField, n: int, rng) -> np.ndarray:
    """Phase points outside the twist tube: uniform rejections plus shell-adjacent."""
    r = field.spec.r
    hp = field._hp
    rows = []
    n_uniform = n // 2
    while len(rows) < n_uniform:
        base = rng.uniform(0.0, 1.0, 3)
        h = rng.uniform(0.0, 1.0)
        pt = np.array([base[0], base[1], base[2], h])
        _, _, _, inside = field._tube_coords(pt[None, :])
        if not inside[0]:
            rows.append(pt)
    shell = np.empty((n - n_uniform, 4))
    direction = rng.standard_normal((len(shell), 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    w = direction * (r * (1.0 + 1e-3))
    base = field._pb + w @ field._f3.T
    base -= np.floor(base)
    h = hp + rng.uniform(0.0, 1.0, len(shell))
    post = h >= 1.0
    if post.any():
        bp = base[post] @ BASE_MATRIX_3.T
        bp[:, 2] += field.base.omega
        base[post] = bp - np.floor(bp)
        h[post] -= 1.0
    shell[:, :3] = base
    shell[:, 3] = h
    return np.vstack([np.array(rows), shell])
