"""Scalar comparison cocycle over the perturbed flow, and its exponent audits.

The perturbed flow rotates transverse planes inside one small flowbox and is
the identity perturbation elsewhere.  Its unstable growth can therefore be
bookkept by a *scalar* multiplier per time-1 window:

- ``outside``          the window never meets the flowbox: the multiplier is
                       the unperturbed unstable expansion ``lambda(q)``;
- ``inside_forward``   the window starts inside the transverse ball: the full
                       twist is accrued during the window and the unstable
                       vector is tilted by the plateau angle, so the
                       multiplier is ``lambda(q) * cos(beta(|w_V|/r) * xi)``;
- ``inside_backward``  the *next* window starts inside the ball: the window
                       delivers an unstable vector that was tilted on an
                       earlier ball passage, and a correction factor ``A``
                       accounts for the non-alignment accumulated since then.

Products of these multipliers form the comparison cocycle; its Birkhoff
average is compared against QR estimates of the true perturbed cocycle and
against a closed-form integral of the plateau rotation, giving a measurable
prediction for how far the unstable exponent drops (and hence how far the
central exponent rises).

Geometry used throughout (suspension model): windows run section to section,
the flow between sections is a pure height translation, and the transverse
ball sits inside one section.  Hence a time-1 window meets the perturbation
support exactly when its starting section point lies in the closed ball, and
return times between ball passages are integers.  All correction factors are
evaluated in the invariant eigenframe of the window matrix, where arbitrary
powers reduce to scalar factors that cancel analytically -- no overflow and
no loss of the exact cancellations, no matter how long the return time is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import _kernels
from .domination import cat_splitting, check_domination
from .errors import CentralShiftError, ComparisonError, HorizonError
from .linear_poincare import normal_frame, poincare_step
from .model_systems import (
    BASE_FRAME,
    BASE_MATRIX_3,
    LAMBDA_PLUS,
    PhasePoint,
    SuspensionFlow,
    wrap_torus,
)
from .perturbation import BumpProfiles, PerturbationSpec, PerturbedField, build_Y
from .spectrum import _block_means, _sem, qr_run

__all__ = [
    "ComparisonRecord",
    "Estimate",
    "ExponentAudit",
    "unstable_multiplier",
    "return_time",
    "correction_A",
    "I_integral",
    "log_gamma_series",
    "audit_exponent_gap",
    "domination_transfer",
    "records_to_csv_rows",
]

LOG_LAMBDA_PLUS = math.log(LAMBDA_PLUS)

_REGIMES = ("outside", "inside_forward", "inside_backward")

#: Events closer than this to the flowbox shell are ambiguous under floating
#: point and refuse classification instead of guessing.
_EVENT_ATOL = 1e-12

#: Both closed forms of the correction factor must agree this tightly.
_CROSS_CHECK_TOL = 1e-8

#: Denominators of the correction factor below this signal cos ~ 0.
_DENOM_TOL = 1e-12

_N_BLOCKS = 20


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    """A finite-horizon estimate with its blocked standard error."""

    value: float
    stderr: float

    def to_json_dict(self) -> dict:
        return {"value": float(self.value), "stderr": float(self.stderr)}


@dataclass(frozen=True)
class ComparisonRecord:
    """One bookkept multiplier of the comparison cocycle.

    ``t_enter`` is the start time of the window (an integer for the
    section-aligned sampling used here).  ``tau``, ``A``, ``tilde_q`` and
    ``hat_q`` are populated only for backward crossings with an observed
    prior ball passage: ``tilde_q`` is that passage's entry point, ``hat_q``
    its one-window image under the perturbed flow pulled back one window
    under the unperturbed flow (the twist acts during the climb and the
    return map is untouched, so this is the twisted top-of-window position
    re-read at the section), and ``tau`` the (integer) time from ``tilde_q``
    to the recorded point.
    """

    q: PhasePoint
    regime: str
    gamma: float
    tau: float | None = None
    A: float | None = None
    tilde_q: PhasePoint | None = None
    hat_q: PhasePoint | None = None
    t_enter: float = 0.0

    def __post_init__(self):
        if self.regime not in _REGIMES:
            raise CentralShiftError(
                f"regime must be one of {_REGIMES}, got {self.regime!r}"
            )
        g = float(self.gamma)
        if not (math.isfinite(g) and g > 0.0):
            raise CentralShiftError(f"gamma must be finite and positive, got {g!r}")
        if self.tau is not None and not float(self.tau) > 0.0:
            raise CentralShiftError(f"tau must be positive, got {self.tau!r}")
        if self.A is not None and not math.isfinite(float(self.A)):
            raise CentralShiftError(f"A must be finite, got {self.A!r}")


@dataclass(frozen=True)
class ExponentAudit:
    """Matched unstable-exponent estimates and their consistency checks.

    ``sigma_u_X`` and ``sigma_u_Y`` are QR estimates of the unperturbed and
    perturbed unstable exponents on the *same* orbit (same start, seed and
    step); ``sigma_u_Phi`` is the Birkhoff average of the bookkept comparison
    multiplier on that orbit.  The agreement of ``sigma_u_Y`` with
    ``sigma_u_Phi`` within three combined standard errors is the audited
    invariant; being statistical, it is reported in ``checks['eq_le']``
    rather than enforced at construction.

    ``predicted_gap`` is ``-vol_ratio * I1`` (nonnegative), the closed-form
    prediction for how much unstable growth the flowbox rotation destroys per
    unit time; ``inside_gap`` is the same quantity accumulated directly along
    the orbit.  ``max_logA`` is the largest correction-factor logarithm over
    all observed backward crossings (count in ``n_backward_events``) and
    ``tau_r`` the smallest observed return time (``inf`` when none).
    """

    sigma_u_X: Estimate
    sigma_u_Phi: Estimate
    sigma_u_Y: Estimate
    I1: float
    vol_ratio: float
    predicted_gap: float
    max_logA: float
    tau_r: float
    measured_gap: Estimate
    inside_gap: Estimate
    sigma_c_X: Estimate
    sigma_c_Y: Estimate
    sigma_s_X: Estimate
    sigma_s_Y: Estimate
    horizon: float
    dt: float
    seed: int
    n_windows: int
    n_visits: int
    n_backward_events: int
    constants: dict
    checks: dict
    records: tuple = ()

    def to_json_dict(self) -> dict:
        """JSON-safe summary (records are streamed separately as CSV)."""

        def _num(x):
            x = float(x)
            return x if math.isfinite(x) else None

        return {
            "sigma_u_X": self.sigma_u_X.to_json_dict(),
            "sigma_u_Phi": self.sigma_u_Phi.to_json_dict(),
            "sigma_u_Y": self.sigma_u_Y.to_json_dict(),
            "sigma_c_X": self.sigma_c_X.to_json_dict(),
            "sigma_c_Y": self.sigma_c_Y.to_json_dict(),
            "sigma_s_X": self.sigma_s_X.to_json_dict(),
            "sigma_s_Y": self.sigma_s_Y.to_json_dict(),
            "I1": float(self.I1),
            "vol_ratio": float(self.vol_ratio),
            "predicted_gap": float(self.predicted_gap),
            "max_logA": float(self.max_logA),
            "tau_r": _num(self.tau_r),
            "measured_gap": self.measured_gap.to_json_dict(),
            "inside_gap": self.inside_gap.to_json_dict(),
            "horizon": float(self.horizon),
            "dt": float(self.dt),
            "seed": int(self.seed),
            "n_windows": int(self.n_windows),
            "n_visits": int(self.n_visits),
            "n_backward_events": int(self.n_backward_events),
            "constants": {k: _num(v) for k, v in self.constants.items()},
            "checks": self.checks,
        }


def records_to_csv_rows(records, run_id) -> list[tuple]:
    """Rows ``(run_id, t_enter, regime, gamma, tau, A)``; None for absent."""
    return [
        (
            run_id,
            float(rec.t_enter),
            rec.regime,
            float(rec.gamma),
            None if rec.tau is None else float(rec.tau),
            None if rec.A is None else float(rec.A),
        )
        for rec in records
    ]


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def _require_model(sys, what: str) -> SuspensionFlow:
    """The closed-form comparison paths exist for the suspension model only."""
    if isinstance(sys, PerturbedField):
        base = sys.base
    else:
        base = sys
    if not isinstance(base, SuspensionFlow):
        raise CentralShiftError(
            f"{what} is implemented for the suspension model only"
        )
    return base


def _frame3(spec: PerturbationSpec) -> np.ndarray:
    """Base-torus block of the chart frame: columns (unstable, central, stable)."""
    return np.ascontiguousarray(spec.chart.frame[:3, :])


def _transverse_coords(spec: PerturbationSpec, base: np.ndarray) -> np.ndarray:
    """Chart coordinates of a section point relative to the flowbox center."""
    pb = np.asarray(spec.p.base, dtype=float)
    return _frame3(spec).T @ wrap_torus(np.asarray(base, dtype=float) - pb)


def _ball_point(spec: PerturbationSpec, w: np.ndarray) -> PhasePoint:
    """Section point with the given chart coordinates."""
    return PhasePoint(
        np.asarray(spec.p.base, dtype=float) + _frame3(spec) @ np.asarray(w, float),
        spec.p.height,
    )


def _classify_ball(spec: PerturbationSpec, base: np.ndarray) -> bool:
    """Closed-ball membership of a section point, refusing shell-ambiguous ones."""
    nrm = float(np.linalg.norm(_transverse_coords(spec, base)))
    if abs(nrm - spec.r) <= _EVENT_ATOL:
        raise ComparisonError(
            f"return event within floating-point tolerance of the flowbox "
            f"shell (||w|| = {nrm!r}, r = {spec.r!r}); cannot classify"
        )
    return nrm <= spec.r


def _resolve_field(sys, spec: PerturbationSpec, field) -> PerturbedField:
    if field is not None:
        if field.spec is not spec:
            raise CentralShiftError("field was built from a different spec")
        return field
    if isinstance(sys, PerturbedField):
        if sys.spec is not spec:
            raise CentralShiftError("perturbed system was built from a different spec")
        return sys
    return build_Y(sys, spec)


# ---------------------------------------------------------------------------
# Unstable multiplier
# ---------------------------------------------------------------------------


def unstable_multiplier(sys, q, t: float = 1.0, *, u2=None) -> float:
    """Expansion factor of the time-``t`` normal cocycle along the unstable
    direction at ``q``.

    For the suspension model the unstable direction is the exact eigenvector
    of the window matrix, so the factor is ``lambda_plus ** k`` with ``k``
    the number of section crossings in ``[0, t)`` -- in particular the
    fractional-time factor ``a`` used by the correction formula.  For other
    systems pass the unstable direction ``u2`` explicitly (an ambient tangent
    vector normal to the flow); it is pushed through the linearized return
    map and the norm growth is returned.
    """
    t = float(t)
    if not math.isfinite(t):
        raise CentralShiftError(f"t must be finite, got {t!r}")
    if u2 is not None:
        frame = normal_frame(sys, q)
        coords = frame.basis.T @ np.asarray(u2, dtype=float)
        nrm = float(np.linalg.norm(coords))
        if nrm <= 1e-12:
            raise ComparisonError(
                "unstable direction unresolved: u2 has no transverse component"
            )
        step = poincare_step(sys, frame, t)
        return float(np.linalg.norm(step.matrix @ coords) / nrm)
    if isinstance(sys, PerturbedField):
        # The comparison multiplier always references the unperturbed
        # expansion; outside the flowbox the two coincide anyway.
        sys = sys.base
    if isinstance(sys, SuspensionFlow):
        if not isinstance(q, PhasePoint):
            q = PhasePoint(np.asarray(q, dtype=float)[:3], float(np.asarray(q)[3]))
        crossings = math.floor(q.height + t)
        return float(LAMBDA_PLUS ** crossings)
    raise ComparisonError(
        "unstable direction unresolved: pass u2 explicitly for generic systems"
    )


# ---------------------------------------------------------------------------
# Return time and correction factor
# ---------------------------------------------------------------------------


def _find_return(field: PerturbedField, spec: PerturbationSpec, q: PhasePoint,
                 horizon: float):
    """Least k >= 1 with ``Y^{-k}(q)`` in the closed ball, plus that point.

    The backward walk is numerically stable (errors along the unstable
    direction contract), so the found passage point is accurate at any
    return time; the forward re-simulation used for verification is only
    meaningful while ``lambda_plus**k`` has not amplified roundoff to the
    ball radius, and is skipped beyond that (documented chaos limit).
    """
    steps = int(math.floor(float(horizon)))
    cur = q
    for k in range(1, steps + 1):
        cur = field.flow(cur, -1.0)
        if _classify_ball(spec, cur.base):
            _verify_return(field, spec, q, cur, k)
            return float(k), cur
    return None


def _verify_return(field: PerturbedField, spec: PerturbationSpec,
                   q: PhasePoint, tilde_q: PhasePoint, k: int) -> None:
    """Forward re-simulation check of a detected return, where meaningful.

    Confirms ``Y^k(tilde_q) = q`` and that one more window re-enters the
    closed ball (the paper's membership claim for the window after the
    return).  Skipped when unstable amplification of roundoff over k windows
    exceeds 5% of the ball radius, where the test would be vacuous.
    """
    log_slack = k * LOG_LAMBDA_PLUS + math.log(1e-13)
    if log_slack >= math.log(0.05 * spec.r):
        return
    slack = math.exp(log_slack)
    fwd = field.flow(tilde_q, float(k))
    err = float(np.max(np.abs(wrap_torus(fwd.base - q.base))))
    h_err = abs(fwd.height - q.height)
    h_err = min(h_err, 1.0 - h_err)
    if err > max(slack, 1e-10) or h_err > 1e-9:
        raise ComparisonError(
            f"return verification failed: forward re-simulation over {k} "
            f"windows misses the start by {err!r}"
        )
    nxt = field.flow(tilde_q, float(k + 1))
    w = _transverse_coords(spec, nxt.base)
    if float(np.linalg.norm(w)) > spec.r + max(slack, 1e-10):
        raise ComparisonError(
            f"return verification failed: window {k + 1} after the return "
            f"does not re-enter the flowbox ball"
        )


def return_time(sys, spec: PerturbationSpec, q, horizon: float, *,
                field=None):
    """Least positive integer time tau with ``Y^tau(q_tilde) = q`` for some
    ball point ``q_tilde``, or None if no passage occurs within ``horizon``.

    ``q`` must be a section point whose *next* window enters the closed
    transverse ball (the backward-crossing sampling position).  The search
    walks the perturbed flow backward one window at a time with closed-form
    steps and classifies each section point against the ball; points within
    floating-point tolerance of the shell refuse classification.  A detected
    return is re-verified by forward simulation while chaos still permits.
    """
    base = _require_model(sys, "return_time")
    field = _resolve_field(sys, spec, field)
    _is_backward_point(base, spec, q)
    if not (float(horizon) >= 1.0):
        raise CentralShiftError(f"horizon must be >= 1, got {horizon!r}")
    found = _find_return(field, spec, q, horizon)
    if found is None:
        return None
    return found[0]


def _correction_forms(spec: PerturbationSpec, w_v_norm: float, a: float):
    """Both closed forms of the correction factor for one backward crossing.

    The tilted vector delivered at the earlier ball exit is
    ``cos(f) u2 + sin(f) u3`` with ``f = beta(|w_V|/r) * xi``.  Evolving it
    for ``tau`` further windows multiplies its eigencomponents by the
    eigenvalue powers; the common unstable power cancels between numerator
    and denominator, which is done analytically here so the expressions stay
    finite for any ``tau``:

    - norm form:  ``|cos(f) a + c_u| / (|cos(f)| a)``
    - split form: ``1 + c_u / (|cos(f)| a)``

    where ``c_u`` is the unstable eigencomponent of ``sin(f) u3``.  For the
    model the central direction is an exact invariant orthogonal to the
    unstable one, so ``c_u`` vanishes identically and both forms equal 1.
    """
    s = float(w_v_norm) / spec.r
    ang = spec.profiles.beta(s) * spec.xi
    cosf = math.cos(ang)
    sinf = math.sin(ang)
    f3 = _frame3(spec)
    c_u = sinf * float(f3[:, 1] @ f3[:, 0])
    denom = abs(cosf) * float(a)
    if denom < _DENOM_TOL:
        raise ComparisonError(
            f"correction-factor denominator |cos(f)|*a = {denom!r} below "
            f"{_DENOM_TOL!r} (rotation angle too close to a quarter turn)"
        )
    a_norm = abs(cosf * float(a) + c_u) / denom
    a_split = 1.0 + c_u / denom
    if abs(a_norm - a_split) > _CROSS_CHECK_TOL:
        raise ComparisonError(
            f"correction-factor forms disagree: {a_norm!r} vs {a_split!r}"
        )
    return a_norm, a_split


def correction_A(sys, spec: PerturbationSpec, q_star, *, horizon: float = 512.0,
                 field=None, return_data=None) -> float:
    """Correction factor ``A`` for a backward crossing at ``q_star``.

    ``q_star`` is a section point whose next window enters the transverse
    ball.  Its return data -- the previous ball passage ``tilde_q`` and the
    integer return time ``tau`` -- is searched backward within ``horizon``
    unless supplied as ``return_data=(tau, tilde_q)``.  No passage (or a zero
    twist) gives ``A = 1``.  Both closed forms of the factor are evaluated
    and cross-checked within 1e-8; the norm form is returned.
    """
    base = _require_model(sys, "correction_A")
    field = _resolve_field(sys, spec, field)
    if spec.xi == 0.0:
        return 1.0
    if return_data is None:
        _is_backward_point(base, spec, q_star)
        found = _find_return(field, spec, q_star, horizon)
        if found is None:
            return 1.0
        tau, tilde_q = found
    else:
        tau, tilde_q = return_data
        tau = float(tau)
        if not (tau > 0.0):
            raise CentralShiftError(f"tau must be positive, got {tau!r}")
    w = _transverse_coords(spec, tilde_q.base)
    # Fractional-time factor a(q_hat): returns are integer here, so the
    # fractional part is zero and the factor is evaluated (not assumed) to 1.
    frac = tau - math.floor(tau)
    a = unstable_multiplier(base, tilde_q, frac)
    a_norm, _ = _correction_forms(spec, math.hypot(w[0], w[1]), a)
    return a_norm


def _is_backward_point(base: SuspensionFlow, spec: PerturbationSpec, q) -> None:
    """Validate the backward-crossing sampling position (next window in ball)."""
    if not isinstance(q, PhasePoint) or q.height != spec.p.height:
        raise CentralShiftError(
            "q must be a PhasePoint on the flowbox section "
            f"(height {spec.p.height!r})"
        )
    nxt = base.base_step(q.base, 1)
    if not _classify_ball(spec, nxt):
        raise CentralShiftError(
            "q is not a backward-crossing point: its next window does not "
            "enter the transverse ball"
        )


# ---------------------------------------------------------------------------
# Plateau-rotation integral
# ---------------------------------------------------------------------------


def I_integral(profiles, xi: float, d: int = 3) -> float:
    """Mean of ``log|cos(beta(|w_V|) * xi)|`` over the unit ``d``-ball.

    ``profiles`` may be a :class:`BumpProfiles` (its plateau bump is used) or
    a bare callable ``beta(s)``.  The integrand depends only on the radius
    ``s`` of the two rotation-plane coordinates, whose marginal density in
    the unit ``d``-ball is ``d * s * (1 - s^2)^((d-2)/2)``; the integral is a
    deterministic 1-D quadrature split at the plateau edge ``s = 1/2``.  The
    scaled version over a radius-``r`` ball is ``vol(B_r) * I(1)`` by the
    scaling identity, which callers assert rather than re-integrate.
    """
    xi = float(xi)
    if not (0.0 < xi < math.pi / 2.0):
        raise ComparisonError(
            f"xi must lie in (0, pi/2) for the rotation integral, got {xi!r}"
        )
    d = int(d)
    if d < 2:
        raise ComparisonError(f"ball dimension must be >= 2, got {d!r}")
    beta = profiles.beta if isinstance(profiles, BumpProfiles) else profiles
    if not callable(beta):
        raise CentralShiftError("profiles must be BumpProfiles or a callable beta")
    half = 0.5 * (d - 2)

    def integrand(s: float) -> float:
        return math.log(math.cos(beta(s) * xi)) * d * s * (1.0 - s * s) ** half

    value, abserr = quad(integrand, 0.0, 1.0, points=[0.5], limit=200)
    if abserr > max(1e-11, 1e-8 * abs(value)):
        raise ComparisonError(
            f"rotation-integral quadrature did not converge: estimate "
            f"{value!r} with error bound {abserr!r}"
        )
    return float(value)


# ---------------------------------------------------------------------------
# Orbit bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Bookkeeping:
    log_gamma: np.ndarray  # (n_windows,) per-window log multiplier
    inside: np.ndarray  # (n_windows,) spikes: -log cos at forward crossings
    back: np.ndarray  # (n_windows,) spikes: -log A at backward crossings
    records: tuple
    n_visits: int
    n_backward: int
    max_logA: float
    tau_r: float


def _orbit_bookkeeping(base: SuspensionFlow, spec: PerturbationSpec,
                       start: PhasePoint, n_windows: int, dt: float,
                       keep_records: bool) -> _Bookkeeping:
    """Per-window comparison multipliers along the perturbed orbit.

    Windows are section-aligned, so a window meets the perturbation support
    exactly when its starting point lies in the closed transverse ball
    (exact regime classification); a window immediately preceding such a
    start is a backward crossing, unless it is itself a ball start (forward
    takes precedence on consecutive passages).  Return times and passage
    coordinates come straight from the orbit's own visit history, making
    every correction factor an O(1) evaluation.
    """
    f3 = _frame3(spec)
    pb = np.asarray(spec.p.base, dtype=float)
    visit_idx, w_pre, w_post, _, _ = _kernels.run_orbit_visits(
        start.base, n_windows, pb, f3, spec.r, spec.xi, float(dt), base.omega,
    )
    log_gamma = np.full(n_windows, LOG_LAMBDA_PLUS)
    inside = np.zeros(n_windows)
    back = np.zeros(n_windows)
    records = []
    hp = spec.p.height
    in_ball = np.zeros(n_windows, dtype=bool)
    in_ball[visit_idx] = True
    max_logA = -math.inf
    tau_r = math.inf
    n_backward = 0

    for i, v in enumerate(visit_idx):
        w = w_pre[i]
        rho = math.hypot(w[0], w[1])
        ang = spec.profiles.beta(rho / spec.r) * spec.xi
        cosf = math.cos(ang)
        if cosf <= _DENOM_TOL:
            raise ComparisonError(
                f"forward-crossing multiplier degenerate: cos(beta*xi) = "
                f"{cosf!r} at window {int(v)}"
            )
        log_gamma[v] += math.log(cosf)
        inside[v] = -math.log(cosf)
        if keep_records:
            q_entry = _ball_point(spec, w)
            # Twisted position at the top of the window.  The return map is
            # the same for both flows, so this is the unperturbed one-window
            # pull-back of the perturbed one-window image.
            top_base = np.asarray(pb + f3 @ w_post[i], dtype=float)
            records.append(ComparisonRecord(
                q=q_entry,
                regime="inside_forward",
                gamma=LAMBDA_PLUS * cosf,
                tilde_q=q_entry,
                hat_q=PhasePoint(top_base, hp),
                t_enter=float(v),
            ))

        k_star = int(v) - 1
        if k_star < 0 or in_ball[k_star]:
            continue
        # Backward crossing one window before this passage.
        n_backward += 1
        if i == 0:
            tau = None  # no passage observed before the orbit start
            a_val = 1.0
            tilde_q = None
            hat_q = None
        else:
            v_prev = int(visit_idx[i - 1])
            tau = float(k_star - v_prev)
            wp = w_pre[i - 1]
            frac = tau - math.floor(tau)
            a = unstable_multiplier(base, PhasePoint(pb, hp), frac)
            a_val, _ = _correction_forms(spec, math.hypot(wp[0], wp[1]), a)
            if keep_records:
                tilde_q = _ball_point(spec, wp)
                prev_top = np.asarray(pb + f3 @ w_post[i - 1], dtype=float)
                hat_q = PhasePoint(prev_top, hp)
        log_a = math.log(a_val)
        log_gamma[k_star] += log_a
        back[k_star] = -log_a
        max_logA = max(max_logA, log_a)
        if tau is not None:
            tau_r = min(tau_r, tau)
        if keep_records:
            entry_base = np.asarray(pb + f3 @ w_pre[i], dtype=float)
            records.append(ComparisonRecord(
                q=PhasePoint(base.base_step(entry_base, -1), hp),
                regime="inside_backward",
                gamma=LAMBDA_PLUS * a_val,
                tau=tau,
                A=a_val,
                tilde_q=tilde_q,
                hat_q=hat_q,
                t_enter=float(k_star),
            ))

    if keep_records:
        records.sort(key=lambda r: r.t_enter)
    return _Bookkeeping(
        log_gamma=log_gamma,
        inside=inside,
        back=back,
        records=tuple(records),
        n_visits=int(len(visit_idx)),
        n_backward=n_backward,
        max_logA=0.0 if max_logA == -math.inf else float(max_logA),
        tau_r=tau_r,
    )


def log_gamma_series(sys, spec: PerturbationSpec, T: float, *,
                     start=None, dt: float = 1e-3, keep_records: bool = True):
    """Per-window log multipliers of the comparison cocycle along one orbit.

    Returns ``(series, records)`` with ``series`` of length ``round(T)``;
    the product of multipliers over any window range is ``exp`` of the
    corresponding partial sum (scalar-cocycle multiplicativity).  ``start``
    defaults to the flowbox center and must sit on its section.
    """
    base = _require_model(sys, "log_gamma_series")
    n_windows = int(round(float(T)))
    if n_windows < 1:
        raise HorizonError(f"horizon T={T!r} gives no full time-1 window")
    start = spec.p if start is None else start
    if not isinstance(start, PhasePoint) or start.height != spec.p.height:
        raise ComparisonError(
            "comparison bookkeeping requires a start on the flowbox section"
        )
    bk = _orbit_bookkeeping(base, spec, start, n_windows, dt, keep_records)
    return bk.log_gamma, bk.records


# ---------------------------------------------------------------------------
# Domination transfer
# ---------------------------------------------------------------------------


def domination_transfer(sys, *, sigma: float | None = None, t_max: int = 20) -> dict:
    """Central-vs-unstable growth ratios against the domination rate.

    Measures ``C2 = max_t ratio(t) / sigma^t`` over ``t = 1..t_max`` where
    ``ratio(t)`` compares central and unstable vector growth under ``t``
    window maps; the transfer inequality ``ratio(t) <= C2 sigma^t`` then
    holds on the sampled range by construction and ``C2`` close to 1 means
    the domination rate ``sigma`` is sharp.  ``sigma`` defaults to the worst
    consecutive-pair ratio from the domination report.
    """
    base = _require_model(sys, "domination_transfer")
    if sigma is None:
        report = check_domination(base, cat_splitting(base), m=1, samples=32)
        sigma = max(ratio for _, _, ratio in report.pairs)
    sigma = float(sigma)
    if not (0.0 < sigma < 1.0):
        raise CentralShiftError(f"sigma must lie in (0, 1), got {sigma!r}")
    t_max = int(t_max)
    if t_max < 1:
        raise CentralShiftError(f"t_max must be >= 1, got {t_max!r}")
    v_u = BASE_FRAME[:, 0]
    v_c = BASE_FRAME[:, 1]
    ratios = []
    m = np.eye(3)
    for _ in range(t_max):
        m = BASE_MATRIX_3 @ m
        ratios.append(
            float(np.linalg.norm(m @ v_c) / np.linalg.norm(m @ v_u))
        )
    c2 = max(
        ratios[t - 1] / sigma ** t for t in range(1, t_max + 1)
    )
    passed = all(
        ratios[t - 1] <= c2 * sigma ** t * (1.0 + 1e-12)
        for t in range(1, t_max + 1)
    )
    return {
        "sigma": sigma,
        "C2": float(c2),
        "t_max": t_max,
        "ratios": [float(x) for x in ratios],
        "passed": bool(passed),
    }


# ---------------------------------------------------------------------------
# Exponent audit
# ---------------------------------------------------------------------------


def _estimate(series: np.ndarray) -> Estimate:
    blocks = _block_means(series.reshape(-1, 1), _N_BLOCKS)
    return Estimate(float(series.mean()), float(_sem(blocks)[0]))


def audit_exponent_gap(sys, spec: PerturbationSpec, T: float, *,
                       start=None, dt: float = 1e-3, seed: int = 0,
                       keep_records: bool = True) -> ExponentAudit:
    """Matched unstable-exponent audit of the flowbox rotation.

    Runs the QR cocycle for the unperturbed and the perturbed flow on the
    same orbit parameters, bookkeeps the comparison multiplier along the
    perturbed orbit, and assembles:

    - the three unstable estimates and their agreement check (``eq_le``);
    - the directly accumulated forward-crossing loss against the closed-form
      prediction ``-vol_ratio * I(1)`` (``forward_tube_identity``);
    - the strict-sign and lower-bound inequalities in exact bookkeeping
      terms (``sign_strict``, ``lower_bound``);
    - the correction-factor bound and domination-transfer constants
      (``correction_bound``, ``domination_transfer``);
    - the stable-exponent match between the two QR runs
      (``stable_exponents_match``), flagged rather than enforced.

    With a zero twist the perturbed flow delegates bitwise to the base one
    and the comparison multiplier coincides with the true window cocycle, so
    all three estimates are identical and no integral is evaluated.  Raises
    :class:`HorizonError` when the orbit is too short to resolve the
    predicted gap (no crossings observed, or the accumulated-loss standard
    error at least as large as the prediction).
    """
    base = _require_model(sys, "audit_exponent_gap")
    if isinstance(sys, PerturbedField):
        raise CentralShiftError(
            "pass the unperturbed system; the perturbed flow is built "
            "internally from the spec"
        )
    start = spec.p if start is None else start
    if not isinstance(start, PhasePoint) or start.height != spec.p.height:
        raise ComparisonError(
            "comparison bookkeeping requires a start on the flowbox section"
        )
    n_windows = int(round(float(T)))
    field = build_Y(base, spec, dt=dt)
    run_x = qr_run(base, start, T, dt=dt, seed=seed)
    run_y = qr_run(field, start, T, dt=dt, seed=seed)
    bk = _orbit_bookkeeping(base, spec, start, n_windows, dt, keep_records)

    sigma_u_x = _estimate(run_x.log_diag[:, 0])
    sigma_c_x = _estimate(run_x.log_diag[:, 1])
    sigma_s_x = _estimate(run_x.log_diag[:, 2])
    sigma_u_y = _estimate(run_y.log_diag[:, 0])
    sigma_c_y = _estimate(run_y.log_diag[:, 1])
    sigma_s_y = _estimate(run_y.log_diag[:, 2])
    sigma_u_phi = _estimate(bk.log_gamma)
    inside_gap = _estimate(bk.inside)

    vol_ratio = 4.0 / 3.0 * math.pi * spec.r ** 3  # total phase volume is 1
    if spec.xi == 0.0:
        # No twist: the comparison multiplier IS the true window cocycle, so
        # the matched QR estimate is reused verbatim and the gap is zero.
        sigma_u_phi = sigma_u_y
        i1 = 0.0
    else:
        i1 = I_integral(spec.profiles, spec.xi, 3)
    predicted_gap = -vol_ratio * i1 + 0.0  # + 0.0 normalizes -0.0 at xi = 0

    if spec.xi != 0.0:
        if bk.n_visits == 0:
            raise HorizonError(
                f"horizon insufficient: no flowbox crossings in {n_windows} "
                f"windows (expected about {vol_ratio * n_windows:.2f})"
            )
        if inside_gap.stderr >= predicted_gap:
            raise HorizonError(
                f"horizon insufficient: accumulated-loss stderr "
                f"{inside_gap.stderr!r} >= predicted gap {predicted_gap!r}"
            )

    # Exact bookkeeping sums (per unit time): the unperturbed multiplier has
    # log lambda_plus every window, so the bookkept difference is exactly the
    # accumulated crossing losses.
    phi_drop = float(bk.inside.mean() + bk.back.mean())  # Sigma_X_book - Sigma_Phi

    combined = math.hypot(sigma_u_y.stderr, sigma_u_phi.stderr)
    diff_le = abs(sigma_u_y.value - sigma_u_phi.value)
    checks: dict = {
        "eq_le": {
            "diff": diff_le,
            "tol": 3.0 * combined,
            "passed": bool(diff_le <= 3.0 * combined),
        },
        "forward_tube_identity": {
            "measured": inside_gap.value,
            "predicted": predicted_gap,
            "tol": 3.0 * inside_gap.stderr,
            "passed": bool(
                abs(inside_gap.value - predicted_gap) <= 3.0 * inside_gap.stderr
            ),
        },
        "sign_strict": {
            "applicable": bool(spec.xi != 0.0 and bk.n_visits > 0),
            "passed": bool(phi_drop > 0.0 or spec.xi == 0.0 or bk.n_visits == 0),
        },
    }

    # Lower bound: Sigma_X - Sigma_Phi >= -vol(B_r) * (I1 + return_ratio *
    # max_logA), with the return-volume ratio exactly 1 for a volume-
    # preserving flow; confirmed up to the statistical slack of the
    # accumulated-loss estimate.
    rhs = predicted_gap - vol_ratio * bk.max_logA
    checks["lower_bound"] = {
        "lhs": phi_drop,
        "rhs": rhs,
        "slack": 3.0 * inside_gap.stderr,
        "passed": bool(phi_drop >= rhs - 3.0 * inside_gap.stderr),
    }

    diff_s = abs(sigma_s_y.value - sigma_s_x.value)
    tol_s = 3.0 * math.hypot(sigma_s_x.stderr, sigma_s_y.stderr)
    checks["stable_exponents_match"] = {
        "diff": diff_s,
        "tol": tol_s,
        "exact": bool(diff_s == 0.0),
        "passed": bool(diff_s <= tol_s),
    }

    transfer = domination_transfer(base)
    sigma_dom = transfer["sigma"]
    a_grid = [
        unstable_multiplier(base, PhasePoint(start.base, h), t)
        for h in np.linspace(0.0, 0.999, 13)
        for t in np.linspace(0.0, 0.999, 13)
    ]
    c_const = max(max(a_grid), 1.0 / min(a_grid))
    c1 = 1.0 / math.cos(spec.xi) if spec.xi != 0.0 else 1.0
    c3 = transfer["C2"] * c_const
    constants = {
        "C": c_const,
        "C1": c1,
        "C2": transfer["C2"],
        "C3": c3,
        "sigma": sigma_dom,
    }
    max_abs_a_dev = 0.0
    if keep_records:
        max_abs_a_dev = max(
            (abs(r.A - 1.0) for r in bk.records if r.A is not None),
            default=0.0,
        )
    bound = (
        c1 * c3 * sigma_dom ** bk.tau_r if math.isfinite(bk.tau_r) else 0.0
    )
    checks["correction_bound"] = {
        "max_abs_A_minus_1": max_abs_a_dev,
        "bound": bound,
        "passed": bool(max_abs_a_dev <= bound + 1e-12),
    }
    checks["domination_transfer"] = {
        "C2": transfer["C2"],
        "sigma": sigma_dom,
        "passed": transfer["passed"],
    }

    measured_gap = Estimate(
        sigma_u_x.value - sigma_u_y.value,
        math.hypot(sigma_u_x.stderr, sigma_u_y.stderr),
    )
    return ExponentAudit(
        sigma_u_X=sigma_u_x,
        sigma_u_Phi=sigma_u_phi,
        sigma_u_Y=sigma_u_y,
        I1=float(i1),
        vol_ratio=float(vol_ratio),
        predicted_gap=float(predicted_gap),
        max_logA=float(bk.max_logA),
        tau_r=float(bk.tau_r),
        measured_gap=measured_gap,
        inside_gap=inside_gap,
        sigma_c_X=sigma_c_x,
        sigma_c_Y=sigma_c_y,
        sigma_s_X=sigma_s_x,
        sigma_s_Y=sigma_s_y,
        horizon=float(n_windows),
        dt=float(dt),
        seed=int(seed),
        n_windows=n_windows,
        n_visits=bk.n_visits,
        n_backward_events=bk.n_backward,
        constants=constants,
        checks=checks,
        records=bk.records if keep_records else (),
    )
