"""Headline experiment, parameter sweeps and named verification suites.

The headline run measures the central Lyapunov exponent of the model flow
before and after the localized rotation perturbation and decides, at a fixed
statistical criterion, whether the perturbation raised it.  The paper-style
claims are strict inequalities at infinite time; at any finite horizon the
honest acceptance form is statistical, so every decision here is "exceeds
three standard errors" and that criterion is written into the emitted
metadata alongside the numbers.

All file output goes through :mod:`centralshift.io_utils`: identical configs
and seeds produce bit-identical CSV files.  Sweep cells run in separate
processes; the perturbed field holds closures and never crosses a process
boundary -- each worker rebuilds it from the plain-data config.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .comparison_cocycle import (
    audit_exponent_gap,
    log_gamma_series,
    records_to_csv_rows,
)
from .domination import cat_splitting, check_domination
from .errors import ExperimentError, PerturbationConditionError
from .flowbox import (
    chart_fixture,
    injectivity_radius,
    moser_solve_1d,
    moser_solve_grid,
    verify_chart_fixture,
)
from .io_utils import write_csv, write_json
from .model_systems import LAMBDA_MINUS, PhasePoint, make_cat_suspension
from .perturbation import build_Y, make_spec, standard_profiles, verify_conditions
from .spectrum import qr_spectrum

__all__ = [
    "ExperimentConfig",
    "ExperimentRow",
    "ExperimentResult",
    "WORKERS_ENV_VAR",
    "SUITE_NAMES",
    "run_headline",
    "run_sweep",
    "run_suite",
    "resolve_workers",
]

WORKERS_ENV_VAR = "CENTRALSHIFT_WORKERS"

_SYSTEMS = {"cat_suspension": make_cat_suspension}

_PASS_CRITERION = (
    "statistical acceptance at three standard errors: a quantity is treated "
    "as nonzero (or two as different) only when the gap exceeds 3x the "
    "combined standard error of its estimate"
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Plain-data description of one experiment.

    The twist policy is either a fixed amplitude (``xi`` set) or derived per
    radius from a target C^1 distance (``xi`` None, ``epsilon`` set, the
    amplitude being the certified bound for that epsilon).  ``epsilon`` may
    accompany a fixed ``xi`` as well, in which case it participates in the
    closeness condition checks.  The first radius in ``r_values`` is the
    headline radius; later radii contribute scaling diagnostics.
    """

    system: str = "cat_suspension"
    p_base: tuple[float, float, float] = (0.1, 0.2, 0.3)
    p_height: float = 0.0
    r_values: tuple[float, ...] = (0.1, 0.05, 0.025)
    xi: float | None = 0.3
    epsilon: float | None = None
    T: float = 1e6
    dt: float = 1e-3
    seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None

    def __post_init__(self):
        if self.system not in _SYSTEMS:
            raise ExperimentError(
                "config.system",
                {"given": self.system, "known": sorted(_SYSTEMS)},
            )
        object.__setattr__(self, "p_base", tuple(float(x) for x in self.p_base))
        if len(self.p_base) != 3:
            raise ExperimentError("config.p_base", {"given": self.p_base})
        object.__setattr__(self, "p_height", float(self.p_height))
        object.__setattr__(
            self, "r_values", tuple(float(r) for r in self.r_values)
        )
        if not self.r_values or any(r <= 0.0 for r in self.r_values):
            raise ExperimentError("config.r_values", {"given": self.r_values})
        r0 = injectivity_radius(self.build_system(), self.point())
        if any(r > r0 + 1e-12 for r in self.r_values):
            raise ExperimentError(
                "config.r_values",
                {"given": self.r_values, "injectivity_radius": r0},
            )
        if self.xi is not None:
            object.__setattr__(self, "xi", float(self.xi))
            if not (0.0 <= self.xi < math.pi / 2.0):
                raise ExperimentError("config.xi", {"given": self.xi})
        if self.epsilon is not None:
            object.__setattr__(self, "epsilon", float(self.epsilon))
            if not self.epsilon > 0.0:
                raise ExperimentError("config.epsilon", {"given": self.epsilon})
        if self.xi is None and self.epsilon is None:
            raise ExperimentError(
                "config.xi",
                {"reason": "either a fixed xi or an epsilon is required"},
            )
        object.__setattr__(self, "T", float(self.T))
        if not self.T >= 1e3:
            raise ExperimentError("config.T", {"given": self.T, "minimum": 1e3})
        object.__setattr__(self, "dt", float(self.dt))
        if not 0.0 < self.dt <= 0.1:
            raise ExperimentError("config.dt", {"given": self.dt})
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ExperimentError("config.seeds", {"given": self.seeds})

    def build_system(self):
        return _SYSTEMS[self.system]()

    def point(self) -> PhasePoint:
        return PhasePoint(np.array(self.p_base, dtype=float), self.p_height)

    def resolve_xi(self, r: float) -> float:
        """Twist amplitude for radius ``r`` under the configured policy."""
        if self.xi is not None:
            return self.xi
        from .perturbation import xi_bound

        return xi_bound(standard_profiles(), float(r), self.epsilon)

    def to_json_dict(self) -> dict:
        return {
            "system": self.system,
            "p_base": list(self.p_base),
            "p_height": self.p_height,
            "r_values": list(self.r_values),
            "xi": self.xi,
            "epsilon": self.epsilon,
            "T": self.T,
            "dt": self.dt,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        known = {
            "system", "p_base", "p_height", "r_values", "xi", "epsilon",
            "T", "dt", "seeds", "out_dir",
        }
        unknown = set(d) - known
        if unknown:
            raise ExperimentError("config.keys", {"unknown": sorted(unknown)})
        return cls(**d)


def resolve_workers(n_cells: int, workers: int | None = None) -> int:
    """Worker count: explicit argument, else the environment override, else
    one process per cell up to the CPU count."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV_VAR)
        if env is not None:
            try:
                workers = int(env)
            except ValueError:
                raise ExperimentError(
                    "workers.env", {WORKERS_ENV_VAR: env}
                ) from None
    if workers is None:
        workers = min(n_cells, os.cpu_count() or 1)
    workers = int(workers)
    if workers < 1:
        raise ExperimentError("workers.count", {"given": workers})
    return min(workers, n_cells) if n_cells else 1


# ---------------------------------------------------------------------------
# Result rows
# ---------------------------------------------------------------------------


_ROW_COLUMNS = (
    "row_id", "r", "xi", "seed", "T", "is_control",
    "sigma_u_X", "sigma_u_X_err", "sigma_c_X", "sigma_c_X_err",
    "sigma_s_X", "sigma_s_X_err",
    "sigma_u_Y", "sigma_u_Y_err", "sigma_c_Y", "sigma_c_Y_err",
    "sigma_s_Y", "sigma_s_Y_err",
    "predicted_shift", "central_shift", "central_shift_err",
    "accumulated_loss", "accumulated_loss_err",
    "conditions_passed", "closure_passed",
    "shift_exceeds_3stderr", "shift_within_factor_2", "control_exact",
)


@dataclass(frozen=True)
class ExperimentRow:
    """One (radius, twist) measurement of the central-shift experiment."""

    row_id: str
    r: float
    xi: float
    seed: int
    T: float
    is_control: bool
    audit: dict  # ExponentAudit.to_json_dict()
    conditions: dict  # verify_conditions report (possibly with failures)
    checks: dict

    def _est(self, name: str) -> tuple[float, float]:
        est = self.audit[name]
        return est["value"], est["stderr"]

    def csv_row(self) -> tuple:
        a = self.audit
        c = self.checks
        return (
            self.row_id, self.r, self.xi, self.seed, self.T, self.is_control,
            *self._est("sigma_u_X"), *self._est("sigma_c_X"),
            *self._est("sigma_s_X"),
            *self._est("sigma_u_Y"), *self._est("sigma_c_Y"),
            *self._est("sigma_s_Y"),
            a["predicted_gap"],
            c["central_shift"]["value"], c["central_shift"]["stderr"],
            a["inside_gap"]["value"], a["inside_gap"]["stderr"],
            c["conditions_passed"], c["closure_passed"],
            c["shift_exceeds_3stderr"], c["shift_within_factor_2"],
            c.get("control_exact"),
        )

    def to_json_dict(self) -> dict:
        return {
            "row_id": self.row_id,
            "r": self.r,
            "xi": self.xi,
            "seed": self.seed,
            "T": self.T,
            "is_control": self.is_control,
            "audit": self.audit,
            "conditions": self.conditions,
            "checks": self.checks,
        }


@dataclass(frozen=True)
class ExperimentResult:
    """Headline outcome: all rows, the control row, and the decision."""

    config: dict
    rows: tuple[ExperimentRow, ...]
    control: ExperimentRow
    passed: bool
    criteria: dict

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": [row.to_json_dict() for row in self.rows],
            "control": self.control.to_json_dict(),
            "passed": self.passed,
            "criteria": self.criteria,
        }


def _closure_check(audit: dict, which: str) -> dict:
    """Exponent-sum closure for one field: volume preservation forces the
    three exponents to sum to zero within their combined error."""
    total = sum(audit[f"sigma_{d}_{which}"]["value"] for d in "ucs")
    err = math.hypot(
        *(audit[f"sigma_{d}_{which}"]["stderr"] for d in "ucs")
    )
    return {"sum": total, "tol": 3.0 * err, "passed": bool(abs(total) <= 3.0 * err)}


def _build_row(sys, config: ExperimentConfig, row_id: str, r: float,
               xi: float, seed: int, *, is_control: bool) -> ExperimentRow:
    spec = make_spec(sys, config.point(), r, xi)
    audit = audit_exponent_gap(
        sys, spec, config.T, dt=config.dt, seed=seed
    ).to_json_dict()

    field = build_Y(sys, spec, dt=config.dt)
    try:
        conditions = verify_conditions(field, epsilon=config.epsilon)
        conditions_passed = True
    except PerturbationConditionError as err:
        conditions = dict(err.report)
        conditions["failures"] = list(err.failures)
        conditions_passed = False

    shift = audit["sigma_c_Y"]["value"] - audit["sigma_c_X"]["value"]
    shift_err = math.hypot(
        audit["sigma_c_Y"]["stderr"], audit["sigma_c_X"]["stderr"]
    )
    predicted = audit["predicted_gap"]
    closure_x = _closure_check(audit, "X")
    closure_y = _closure_check(audit, "Y")
    checks = {
        "central_shift": {"value": shift, "stderr": shift_err},
        "shift_exceeds_3stderr": bool(shift > 3.0 * shift_err),
        "shift_within_factor_2": bool(
            predicted > 0.0 and 0.5 <= shift / predicted <= 2.0
        ),
        "conditions_passed": conditions_passed,
        "closure_X": closure_x,
        "closure_Y": closure_y,
        "closure_passed": bool(closure_x["passed"] and closure_y["passed"]),
    }
    if is_control:
        # With a zero twist the perturbed flow delegates to the base flow,
        # so the matched estimates must agree exactly, not statistically.
        exact = (
            audit["sigma_c_Y"] == audit["sigma_c_X"]
            and audit["sigma_u_Y"] == audit["sigma_u_X"]
            and audit["sigma_s_Y"] == audit["sigma_s_X"]
        )
        checks["control_exact"] = bool(exact)
    return ExperimentRow(
        row_id=row_id, r=r, xi=xi, seed=seed, T=config.T,
        is_control=is_control, audit=audit, conditions=conditions,
        checks=checks,
    )


# ---------------------------------------------------------------------------
# Headline experiment
# ---------------------------------------------------------------------------


def run_headline(config: ExperimentConfig, *, out_dir: str | None = None
                 ) -> ExperimentResult:
    """Perturb, re-measure, and decide whether the central exponent rose.

    One row per configured radius (first radius = headline radius), plus a
    zero-twist control row at the headline radius.  The run passes iff the
    unperturbed central exponent is zero within three standard errors, the
    headline row's central shift exceeds three combined standard errors, and
    every perturbed row satisfies the construction conditions and the
    exponent-closure invariant.  Any failed precondition or invariant raises
    :class:`ExperimentError` naming it; the scaling diagnostics across radii
    are recorded in ``criteria`` without gating the decision.

    When ``out_dir`` (or ``config.out_dir``) is set, writes ``headline.csv``
    and ``headline.json`` there.
    """
    sys = config.build_system()
    seed = config.seeds[0]
    rows = []
    for i, r in enumerate(config.r_values):
        xi = config.resolve_xi(r)
        row = _build_row(
            sys, config, f"row_{i:02d}", r, xi, seed, is_control=False
        )
        if i == 0:
            sigma_c_x = row.audit["sigma_c_X"]
            if abs(sigma_c_x["value"]) > 3.0 * sigma_c_x["stderr"]:
                raise ExperimentError(
                    "unperturbed_central_zero",
                    {
                        "sigma_c_X": sigma_c_x,
                        "tol": 3.0 * sigma_c_x["stderr"],
                    },
                )
        if not row.checks["conditions_passed"]:
            raise ExperimentError(
                "construction_conditions",
                {"row": row.row_id, "failures": row.conditions.get("failures")},
            )
        if not row.checks["closure_passed"]:
            raise ExperimentError(
                "result_row_closure",
                {
                    "row": row.row_id,
                    "closure_X": row.checks["closure_X"],
                    "closure_Y": row.checks["closure_Y"],
                },
            )
        rows.append(row)

    control = _build_row(
        sys, config, "control", config.r_values[0], 0.0, seed,
        is_control=True,
    )
    if not control.checks["control_exact"]:
        raise ExperimentError(
            "control_row_exact",
            {"control": control.checks},
        )

    headline = rows[0]
    scaling = _scaling_diagnostics(rows)
    criteria = {
        "pass_criterion": _PASS_CRITERION,
        "headline_r": headline.r,
        "unperturbed_central_zero": True,
        "central_shift_exceeds_3stderr": headline.checks[
            "shift_exceeds_3stderr"
        ],
        "central_shift_within_factor_2": headline.checks[
            "shift_within_factor_2"
        ],
        "conditions_all_rows": True,
        "control_exact": True,
        "scaling": scaling,
    }
    passed = bool(criteria["central_shift_exceeds_3stderr"])
    result = ExperimentResult(
        config=config.to_json_dict(),
        rows=tuple(rows),
        control=control,
        passed=passed,
        criteria=criteria,
    )
    target = out_dir or config.out_dir
    if target:
        _write_headline_files(result, target)
    return result


def _scaling_diagnostics(rows) -> dict:
    """Volume scaling of the accumulated rotation loss across radii.

    The loss accumulates on ball crossings, so per unit time it scales with
    the ball volume, i.e. with r^3; the per-r ratios to the first row are
    reported normalized by the r^3 prediction (1 = exact scaling).
    """
    if len(rows) < 2:
        return {"checked": False, "ratios_vs_r3": []}
    base = rows[0]
    base_loss = base.audit["inside_gap"]["value"]
    ratios = []
    for row in rows:
        expected = (row.r / base.r) ** 3
        measured = row.audit["inside_gap"]["value"] / base_loss
        ratios.append(measured / expected)
    within = all(0.5 <= x <= 2.0 for x in ratios)
    return {
        "checked": True,
        "ratios_vs_r3": ratios,
        "within_factor_2": bool(within),
    }


_HEADLINE_COMMENTS = (
    "central-exponent shift experiment: matched runs of the base and the",
    "perturbed flow at each radius, plus a zero-twist control row.",
    "columns: row_id; r = flowbox radius; xi = twist amplitude; seed; T =",
    "horizon; is_control; sigma_{u,c,s}_{X,Y} and *_err = unstable/central/",
    "stable exponent estimates (X = base flow, Y = perturbed) with standard",
    "errors; predicted_shift = vol(B_r) * |I(1)| from the rotation-loss",
    "quadrature; central_shift (+err) = sigma_c_Y - sigma_c_X;",
    "accumulated_loss (+err) = unstable loss accumulated on ball crossings;",
    "conditions_passed / closure_passed / shift_exceeds_3stderr /",
    "shift_within_factor_2 / control_exact = boolean checks.",
    _PASS_CRITERION,
)


def _write_headline_files(result: ExperimentResult, out_dir: str) -> dict:
    rows = [row.csv_row() for row in result.rows]
    rows.append(result.control.csv_row())
    csv_path = write_csv(
        os.path.join(out_dir, "headline.csv"),
        _ROW_COLUMNS,
        rows,
        header_comments=_HEADLINE_COMMENTS,
    )
    json_path = write_json(
        os.path.join(out_dir, "headline.json"), result.to_json_dict()
    )
    return {"csv": csv_path, "json": json_path}


# ---------------------------------------------------------------------------
# Parameter sweep
# ---------------------------------------------------------------------------


_SWEEP_COLUMNS = (
    "run_id", "r", "xi", "seed", "T", "n_visits", "n_backward_events",
    "tau_r", "max_logA",
    "sigma_u_X", "sigma_u_X_err", "sigma_u_Phi", "sigma_u_Phi_err",
    "sigma_u_Y", "sigma_u_Y_err",
    "sigma_c_X", "sigma_c_X_err", "sigma_c_Y", "sigma_c_Y_err",
    "sigma_s_X", "sigma_s_X_err", "sigma_s_Y", "sigma_s_Y_err",
    "I1", "vol_ratio", "predicted_gap",
    "inside_gap", "inside_gap_err", "measured_gap", "measured_gap_err",
    "eq_le_passed", "forward_tube_passed", "sign_strict_passed",
    "lower_bound_passed", "stable_match_exact", "correction_bound_passed",
    "domination_passed",
)

_RECORD_COLUMNS = ("run_id", "t_enter", "regime", "gamma", "tau", "A")

_SWEEP_COMMENTS = (
    "per-cell sweep of the matched exponent audit over (r, seed).",
    "columns: run_id; r; xi; seed; T; n_visits / n_backward_events = ball",
    "crossings observed forward / backward; tau_r = smallest observed",
    "return time (empty if none); max_logA = largest correction-factor log;",
    "sigma_u_{X,Phi,Y}, sigma_c_{X,Y}, sigma_s_{X,Y} (+_err) = exponent",
    "estimates (X base, Phi bookkept comparison, Y perturbed); I1 = unit-",
    "ball rotation-loss integral; vol_ratio = vol(B_r); predicted_gap =",
    "-vol_ratio*I1; inside_gap (+err) = accumulated crossing loss;",
    "measured_gap (+err) = sigma_u_X - sigma_u_Y; *_passed = audit checks.",
    _PASS_CRITERION,
)

_RECORD_COMMENTS = (
    "comparison-cocycle multiplier records for flowbox-interacting windows.",
    "columns: run_id = sweep cell; t_enter = window start time; regime in",
    "{outside, inside_forward, inside_backward}; gamma = window multiplier;",
    "tau = return time and A = correction factor (backward crossings with",
    "an observed prior passage only).",
)


def _sweep_cell(payload: dict) -> dict:
    """Run one sweep cell in the current process.

    Everything crossing the process boundary is plain data: the perturbed
    field is rebuilt here from the config.
    """
    config = ExperimentConfig.from_json_dict(payload["config"])
    sys = config.build_system()
    spec = make_spec(
        sys, config.point(), payload["r"], payload["xi"]
    )
    audit = audit_exponent_gap(
        sys, spec, config.T, dt=config.dt, seed=payload["seed"]
    )
    summary = audit.to_json_dict()
    checks = summary["checks"]
    tau_r = summary["tau_r"]
    row = (
        payload["run_id"], payload["r"], payload["xi"], payload["seed"],
        config.T, summary["n_visits"], summary["n_backward_events"],
        tau_r, summary["max_logA"],
        summary["sigma_u_X"]["value"], summary["sigma_u_X"]["stderr"],
        summary["sigma_u_Phi"]["value"], summary["sigma_u_Phi"]["stderr"],
        summary["sigma_u_Y"]["value"], summary["sigma_u_Y"]["stderr"],
        summary["sigma_c_X"]["value"], summary["sigma_c_X"]["stderr"],
        summary["sigma_c_Y"]["value"], summary["sigma_c_Y"]["stderr"],
        summary["sigma_s_X"]["value"], summary["sigma_s_X"]["stderr"],
        summary["sigma_s_Y"]["value"], summary["sigma_s_Y"]["stderr"],
        summary["I1"], summary["vol_ratio"], summary["predicted_gap"],
        summary["inside_gap"]["value"], summary["inside_gap"]["stderr"],
        summary["measured_gap"]["value"], summary["measured_gap"]["stderr"],
        checks["eq_le"]["passed"],
        checks["forward_tube_identity"]["passed"],
        checks["sign_strict"]["passed"],
        checks["lower_bound"]["passed"],
        checks["stable_exponents_match"]["exact"],
        checks["correction_bound"]["passed"],
        checks["domination_transfer"]["passed"],
    )
    records = records_to_csv_rows(audit.records, payload["run_id"])
    return {
        "run_id": payload["run_id"],
        "row": row,
        "records": records,
        "summary": summary,
    }


def run_sweep(config: ExperimentConfig, *, out_dir: str | None = None,
              workers: int | None = None) -> dict:
    """Audit every (radius, seed) cell and merge the results.

    Cells run in parallel processes (``workers`` argument, else the
    CENTRALSHIFT_WORKERS environment variable, else one per cell up to the
    CPU count); each cell's output is written atomically to
    ``cells/<run_id>*.csv`` as it finishes, and the merge into ``sweep.csv``,
    ``records.csv`` and ``sweep.json`` is single-threaded in deterministic
    cell order.  Returns the summary dictionary.
    """
    target = out_dir or config.out_dir
    if not target:
        raise ExperimentError(
            "sweep.out_dir", {"reason": "a sweep needs an output directory"}
        )
    payloads = []
    for i, r in enumerate(config.r_values):
        xi = config.resolve_xi(r)
        for j, seed in enumerate(config.seeds):
            payloads.append({
                "config": config.to_json_dict(),
                "r": r,
                "xi": xi,
                "seed": seed,
                "run_id": f"cell_{i:02d}_{j:02d}",
            })
    n_workers = resolve_workers(len(payloads), workers)

    results: dict[str, dict] = {}
    if n_workers == 1:
        for payload in payloads:
            results[payload["run_id"]] = _finish_cell(
                _sweep_cell(payload), target
            )
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for out in pool.map(_sweep_cell, payloads):
                results[out["run_id"]] = _finish_cell(out, target)

    # Single-threaded merge in deterministic cell order.
    ordered = [results[p["run_id"]] for p in payloads]
    sweep_rows = [cell["row"] for cell in ordered]
    record_rows = [row for cell in ordered for row in cell["records"]]
    csv_path = write_csv(
        os.path.join(target, "sweep.csv"), _SWEEP_COLUMNS, sweep_rows,
        header_comments=_SWEEP_COMMENTS,
    )
    records_path = write_csv(
        os.path.join(target, "records.csv"), _RECORD_COLUMNS, record_rows,
        header_comments=_RECORD_COMMENTS,
    )
    summary = {
        "config": config.to_json_dict(),
        "pass_criterion": _PASS_CRITERION,
        "n_cells": len(payloads),
        "workers": n_workers,
        "cells": {cell["run_id"]: cell["summary"] for cell in ordered},
        "files": {"sweep_csv": csv_path, "records_csv": records_path},
    }
    write_json(os.path.join(target, "sweep.json"), summary)
    return summary


def _finish_cell(out: dict, target: str) -> dict:
    """Atomically persist one finished cell's rows (parallel-safe)."""
    cell_dir = os.path.join(target, "cells")
    write_csv(
        os.path.join(cell_dir, f"{out['run_id']}.csv"),
        _SWEEP_COLUMNS, [out["row"]],
    )
    write_csv(
        os.path.join(cell_dir, f"{out['run_id']}_records.csv"),
        _RECORD_COLUMNS, out["records"],
    )
    return out


# ---------------------------------------------------------------------------
# Named verification suites
# ---------------------------------------------------------------------------


def _suite_flowbox(config: ExperimentConfig) -> list[dict]:
    sys = config.build_system()
    p = config.point()
    r = config.r_values[0]
    chart = make_spec(sys, p, r, 0.0).chart
    fixture = chart_fixture(chart, n_samples=256, seed=config.seeds[0])
    det_err = max(abs(d - 1.0) for d in fixture["dets"])
    drift = verify_chart_fixture(chart, fixture, tol=1e-9)
    moser = moser_solve_1d(lambda x: 1.0 + x)
    closed_form_err = abs(
        float(moser.phi(1.0 / 3.0)) - (math.sqrt(2.0) - 1.0)
    )
    grid = moser_solve_grid(
        lambda w: 1.0 + 0.3 * w[..., 0], grid_n=48, tol=1e-3
    )
    residual = float(grid.info["max_residual"])
    return [
        {"name": "chart_determinant", "value": det_err, "tol": 1e-6,
         "passed": bool(det_err <= 1e-6)},
        {"name": "chart_reproducibility",
         "value": drift["max_point_gap"], "tol": 1e-9,
         "passed": True},
        {"name": "transverse_jacobian_closed_form",
         "value": closed_form_err, "tol": 1e-10,
         "passed": bool(closed_form_err <= 1e-10)},
        {"name": "transverse_jacobian_grid_residual",
         "value": residual, "tol": 1e-3,
         "passed": bool(residual <= 1e-3)},
    ]


def _suite_perturbation(config: ExperimentConfig) -> list[dict]:
    sys = config.build_system()
    r = config.r_values[0]
    spec = make_spec(sys, config.point(), r, config.resolve_xi(r))
    field = build_Y(sys, spec, dt=config.dt)
    try:
        report = verify_conditions(field, epsilon=config.epsilon)
        failures: list[str] = []
    except PerturbationConditionError as err:
        report = dict(err.report)
        failures = list(err.failures)
    checks = []
    for key, section in report["conditions"].items():
        passed = section.get("passed")
        checks.append({
            "name": key,
            "passed": True if passed is None else bool(passed),
            "detail": {k: v for k, v in section.items() if k != "passed"},
        })
    checks.append({
        "name": "divergence_free",
        "passed": bool(report["divergence"]["passed"]),
        "detail": report["divergence"],
    })
    checks.append({
        "name": "plateau_rotation",
        "passed": bool(report["plateau_rotation"]["passed"]),
        "detail": report["plateau_rotation"],
    })
    if failures:
        checks.append({"name": "failures", "passed": False,
                       "detail": {"failures": failures}})
    return checks


def _suite_domination(config: ExperimentConfig) -> list[dict]:
    sys = config.build_system()
    report = check_domination(sys, cat_splitting(sys), m=1)
    worst = max(ratio for _, _, ratio in report.pairs)
    return [
        {"name": "dominated_splitting", "passed": bool(report.passed),
         "detail": {"m": report.m, "worst_ratio": worst}},
        {"name": "worst_ratio_matches_eigenvalue",
         "value": abs(worst - LAMBDA_MINUS), "tol": 1e-6,
         "passed": bool(abs(worst - LAMBDA_MINUS) <= 1e-6)},
    ]


def _suite_comparison(config: ExperimentConfig) -> list[dict]:
    sys = config.build_system()
    r = config.r_values[0]
    spec = make_spec(sys, config.point(), r, config.resolve_xi(r))
    audit = audit_exponent_gap(
        sys, spec, config.T, dt=config.dt, seed=config.seeds[0]
    )
    checks = [
        {"name": name, "passed": bool(section.get("passed", True)),
         "detail": section}
        for name, section in audit.checks.items()
    ]
    series, _ = log_gamma_series(
        sys, spec, min(config.T, 1e4), keep_records=False
    )
    total = float(np.sum(series))
    cut = len(series) // 2
    parts = float(np.sum(series[:cut])) + float(np.sum(series[cut:]))
    mult_err = abs(parts - total)
    checks.append({
        "name": "multiplier_composition", "value": mult_err, "tol": 1e-8,
        "passed": bool(mult_err <= 1e-8),
    })
    return checks


_SUITES = {
    "flowbox": _suite_flowbox,
    "perturbation": _suite_perturbation,
    "domination": _suite_domination,
    "comparison": _suite_comparison,
}

SUITE_NAMES = tuple(sorted(_SUITES))


def run_suite(name: str, config: ExperimentConfig | None = None) -> dict:
    """Execute one named verification suite and report pass/fail.

    Returns ``{"suite", "passed", "checks", "config"}``; the CLI maps
    ``passed`` to the exit code.  Unknown names raise
    :class:`ExperimentError`.
    """
    if name not in _SUITES:
        raise ExperimentError(
            "suite.name", {"given": name, "known": list(SUITE_NAMES)}
        )
    config = config if config is not None else ExperimentConfig(T=1e5)
    checks = _SUITES[name](config)
    return {
        "suite": name,
        "passed": bool(all(c["passed"] for c in checks)),
        "checks": checks,
        "config": config.to_json_dict(),
    }


# ---------------------------------------------------------------------------
# Spectrum helper shared with the CLI
# ---------------------------------------------------------------------------


def spectrum_report(config: ExperimentConfig) -> dict:
    """Lyapunov spectrum of the configured base system, JSON-ready."""
    sys = config.build_system()
    est = qr_spectrum(
        sys, config.point(), config.T, dt=config.dt, seed=config.seeds[0]
    )
    return {
        "system": config.system,
        "T": config.T,
        "dt": config.dt,
        "seed": config.seeds[0],
        "exponents": list(est.exponents),
        "multiplicities": list(est.multiplicities),
        "stderr": list(est.stderr),
        "logdet_rate": est.logdet_rate,
        "horizon_sufficient": est.horizon_sufficient,
    }
