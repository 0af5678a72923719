"""Lyapunov exponents of the linear Poincaré cocycle via QR re-orthonormalization.

A run accumulates, window by window (time-1 steps), the log-diagonal of the
QR factors of the cocycle pushed through a seeded random orthonormal frame.
Per-direction exponents are the column means; Oseledets block dimensions are
inferred by gap clustering (or supplied); standard errors come from disjoint
time blocks.  Systems that expose ``window_cocycle_data`` (the suspension and
its perturbation, started on the height-0 section) run through the compiled
sparse kernel; anything else falls back to a generic per-window loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import CentralShiftError, HorizonError
from .linear_poincare import normal_frame, poincare_step

__all__ = [
    "CocycleRun",
    "SpectrumEstimate",
    "CentralSumReport",
    "BirkhoffEstimate",
    "random_orthogonal",
    "qr_run",
    "qr_spectrum",
    "central_sum",
    "birkhoff_average",
]


def random_orthogonal(n: int, seed: int) -> np.ndarray:
    """Seeded Haar-ish random orthogonal matrix (QR of a Gaussian, positive diag)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    s = np.sign(np.diag(r))
    s[s == 0.0] = 1.0
    return q * s


@dataclass(frozen=True)
class CocycleRun:
    """Raw QR accumulation data over one orbit, shareable between estimators."""

    log_diag: np.ndarray  # (n_windows, n-1) per-window log QR diagonals
    logdet: float  # sum of per-window log|det|, accumulated independently
    horizon: float
    dt: float
    seed: int
    start: object

    @property
    def n_windows(self) -> int:
        return self.log_diag.shape[0]


@dataclass(frozen=True)
class SpectrumEstimate:
    """Distinct exponents (per unit time) with multiplicities and error bars."""

    exponents: tuple[float, ...]
    multiplicities: tuple[int, ...]
    horizon: float
    stderr: tuple[float, ...]
    sums: tuple[float, float, float]  # (sigma_u, sigma_c, sigma_s)
    per_direction: tuple[float, ...]
    per_direction_stderr: tuple[float, ...]
    logdet_rate: float
    dims: tuple[int, int, int]
    horizon_sufficient: bool

    def to_json_dict(self) -> dict:
        return {
            "exponents": list(self.exponents),
            "multiplicities": list(self.multiplicities),
            "horizon": self.horizon,
            "stderr": list(self.stderr),
            "sums": {"u": self.sums[0], "c": self.sums[1], "s": self.sums[2]},
            "per_direction": list(self.per_direction),
            "per_direction_stderr": list(self.per_direction_stderr),
            "logdet_rate": self.logdet_rate,
            "dims": list(self.dims),
            "horizon_sufficient": self.horizon_sufficient,
        }


@dataclass(frozen=True)
class CentralSumReport:
    sigma_c: float
    method: str  # "direct_birkhoff" | "complement"
    horizon: float
    stderr: float


@dataclass(frozen=True)
class BirkhoffEstimate:
    value: float
    stderr: float
    horizon: float


def qr_run(sys, p, T: float, dt: float = 1e-3, seed: int = 0) -> CocycleRun:
    """Accumulate the QR cocycle over ``round(T)`` time-1 windows from p."""
    n_windows = int(round(T))
    if n_windows < 1:
        raise HorizonError(f"horizon T={T!r} gives no full time-1 window")
    if T < 100.0 * dt:
        raise HorizonError(f"require T >= 100*dt, got T={T!r}, dt={dt!r}")

    data = None
    if hasattr(sys, "window_cocycle_data"):
        data = sys.window_cocycle_data(p, n_windows, dt)
    if data is not None:
        visit_idx, visit_mats, base_mat = data
        q = np.ascontiguousarray(random_orthogonal(3, seed))
        log_diag = np.empty((n_windows, 3))
        logdet = _kernels.qr_sparse(
            n_windows,
            np.ascontiguousarray(base_mat, dtype=np.float64),
            np.ascontiguousarray(visit_idx, dtype=np.int64),
            np.ascontiguousarray(visit_mats, dtype=np.float64).reshape(-1, 3, 3),
            q,
            log_diag,
        )
    else:
        m = sys.tangent_dimension - 1
        q = random_orthogonal(m, seed)
        log_diag = np.empty((n_windows, m))
        logdet = 0.0
        frame = normal_frame(sys, p)
        for k in range(n_windows):
            step = poincare_step(sys, frame, 1.0)
            logdet += float(np.linalg.slogdet(step.matrix)[1])
            z = step.matrix @ q
            q, r = np.linalg.qr(z)
            diag = np.diag(r).copy()
            sign = np.sign(diag)
            sign[sign == 0.0] = 1.0
            q = q * sign
            log_diag[k] = np.log(np.abs(diag))
            frame = step.to
    if not np.all(np.isfinite(log_diag)):
        raise CentralShiftError("degenerate QR accumulation (vanishing diagonal)")
    return CocycleRun(
        log_diag=log_diag, logdet=float(logdet), horizon=float(n_windows),
        dt=dt, seed=seed, start=p,
    )


def _block_means(series: np.ndarray, n_blocks: int) -> np.ndarray:
    """Means of ``n_blocks`` contiguous equal blocks (rows); shape (n_blocks, ...)."""
    n = series.shape[0]
    n_blocks = max(2, min(n_blocks, n))
    edges = np.linspace(0, n, n_blocks + 1).astype(int)
    return np.stack(
        [series[a:b].mean(axis=0) for a, b in zip(edges[:-1], edges[1:])]
    )


def _sem(block_means: np.ndarray) -> np.ndarray:
    k = block_means.shape[0]
    return np.std(block_means, axis=0, ddof=1) / np.sqrt(k)


def _cluster_by_gaps(values: np.ndarray) -> list[list[int]]:
    """Split sorted-descending exponent indices where a gap exceeds half the largest."""
    m = len(values)
    if m == 1:
        return [[0]]
    gaps = values[:-1] - values[1:]
    largest = float(np.max(gaps))
    if largest <= 0.0:
        return [list(range(m))]
    threshold = 0.5 * largest
    clusters, current = [], [0]
    for i in range(1, m):
        if gaps[i - 1] > threshold:
            clusters.append(current)
            current = []
        current.append(i)
    clusters.append(current)
    return clusters


def _split_sums(values: np.ndarray, clusters: list[list[int]]) -> tuple:
    """(sigma_u, sigma_c, sigma_s) and (d_u, d_c, d_s) from clustered directions.

    The cluster whose mean is closest to zero is central; clusters above it
    are unstable, below stable.
    """
    means = [float(np.mean(values[c])) for c in clusters]
    central = int(np.argmin(np.abs(means)))
    idx_u = [i for c in clusters[:central] for i in c]
    idx_c = list(clusters[central])
    idx_s = [i for c in clusters[central + 1:] for i in c]
    sums = (
        float(values[idx_u].sum()) if idx_u else 0.0,
        float(values[idx_c].sum()),
        float(values[idx_s].sum()) if idx_s else 0.0,
    )
    return sums, (len(idx_u), len(idx_c), len(idx_s))


def qr_spectrum(
    sys, p, T: float, dt: float = 1e-3, seed: int = 0, *,
    dims: tuple[int, int, int] | None = None, n_blocks: int = 20,
    run: CocycleRun | None = None,
) -> SpectrumEstimate:
    """Lyapunov exponents of the linear Poincaré cocycle over horizon T."""
    if run is None:
        run = qr_run(sys, p, T, dt=dt, seed=seed)
    ld = run.log_diag
    per_dir = ld.mean(axis=0)
    order = np.argsort(-per_dir)
    per_dir = per_dir[order]
    blocks = _block_means(ld[:, order], n_blocks)
    per_dir_sem = _sem(blocks)

    if dims is not None:
        if sum(dims) != len(per_dir):
            raise CentralShiftError(
                f"dims {dims} do not sum to the cocycle dimension {len(per_dir)}"
            )
        clusters, start = [], 0
        for d in dims:
            clusters.append(list(range(start, start + d)))
            start += d
        clusters = [c for c in clusters if c]
        sums = (
            float(per_dir[: dims[0]].sum()),
            float(per_dir[dims[0]: dims[0] + dims[1]].sum()),
            float(per_dir[dims[0] + dims[1]:].sum()),
        )
        split = tuple(dims)
    else:
        clusters = _cluster_by_gaps(per_dir)
        sums, split = _split_sums(per_dir, clusters)

    exponents = tuple(float(np.mean(per_dir[c])) for c in clusters)
    multiplicities = tuple(len(c) for c in clusters)
    stderr = tuple(
        float(np.linalg.norm(per_dir_sem[c]) / len(c)) for c in clusters
    )

    # Horizon diagnostic: the smallest gap between distinct exponents should
    # exceed the error bars, otherwise multiplicities are not resolved.
    sufficient = True
    if len(exponents) > 1:
        smallest_gap = float(np.min(np.abs(np.diff(np.array(exponents)))))
        if smallest_gap < 3.0 * float(np.max(per_dir_sem)):
            sufficient = False

    return SpectrumEstimate(
        exponents=exponents,
        multiplicities=multiplicities,
        horizon=run.horizon,
        stderr=stderr,
        sums=sums,
        per_direction=tuple(float(v) for v in per_dir),
        per_direction_stderr=tuple(float(v) for v in per_dir_sem),
        logdet_rate=run.logdet / run.horizon,
        dims=tuple(int(d) for d in split),
        horizon_sufficient=sufficient,
    )


def central_sum(
    sys, p, T: float, central_dim: int = 1, *,
    dt: float = 1e-3, seed: int = 0, method: str = "direct_birkhoff",
    n_blocks: int = 20, run: CocycleRun | None = None,
):
    """Sum of the central exponents, by direct Birkhoff average or complement.

    ``method='both'`` returns a (direct, complement) pair computed on the
    same orbit data.
    """
    if method not in ("direct_birkhoff", "complement", "both"):
        raise CentralShiftError(f"unknown central_sum method {method!r}")
    if run is None:
        run = qr_run(sys, p, T, dt=dt, seed=seed)
    ld = run.log_diag
    per_dir = ld.mean(axis=0)
    order = np.argsort(-per_dir)
    m = len(order)
    if not (1 <= central_dim <= m):
        raise CentralShiftError(f"central_dim {central_dim} out of range 1..{m}")
    # central block: the central_dim sorted directions closest to zero
    sorted_vals = per_dir[order]
    windows = [
        (float(np.abs(sorted_vals[i: i + central_dim]).mean()), i)
        for i in range(m - central_dim + 1)
    ]
    _, start = min(windows)
    central_cols = order[start: start + central_dim]
    other_cols = np.array([c for c in order if c not in set(central_cols)], dtype=int)

    reports = {}
    if method in ("direct_birkhoff", "both"):
        series = ld[:, central_cols].sum(axis=1)
        blocks = _block_means(series[:, None], n_blocks)[:, 0]
        reports["direct_birkhoff"] = CentralSumReport(
            sigma_c=float(series.mean()),
            method="direct_birkhoff",
            horizon=run.horizon,
            stderr=float(_sem(blocks[:, None])[0]),
        )
    if method in ("complement", "both"):
        if len(other_cols):
            series = -ld[:, other_cols].sum(axis=1)
            value = float(series.mean()) + run.logdet / run.horizon
            blocks = _block_means(series[:, None], n_blocks)[:, 0]
            err = float(_sem(blocks[:, None])[0])
        else:
            value = run.logdet / run.horizon
            err = 0.0
        reports["complement"] = CentralSumReport(
            sigma_c=value, method="complement", horizon=run.horizon, stderr=err,
        )
    if method == "both":
        return reports["direct_birkhoff"], reports["complement"]
    return reports[method]


def birkhoff_average(
    sys, p, observable, T: float, dt: float = 0.01, *,
    n_blocks: int = 20, n_bootstrap: int = 200,
) -> BirkhoffEstimate:
    """Time average of an observable along the orbit, with bootstrap error bars.

    Composite trapezoidal quadrature at step dt; the standard error is a
    moving-block bootstrap over contiguous blocks with a fixed internal seed
    (deterministic output).
    """
    n = int(round(T / dt))
    if n < 1:
        raise HorizonError(f"horizon T={T!r} too short for dt={dt!r}")
    h = T / n
    values = np.empty(n + 1)
    q = p
    values[0] = float(observable(q))
    for k in range(1, n + 1):
        q = sys.flow(q, h)
        values[k] = float(observable(q))
    value = (values.sum() - 0.5 * (values[0] + values[-1])) / n

    interior = values[:-1]
    n_blocks = max(2, min(n_blocks, len(interior)))
    edges = np.linspace(0, len(interior), n_blocks + 1).astype(int)
    block_means = np.array(
        [interior[a:b].mean() for a, b in zip(edges[:-1], edges[1:])]
    )
    rng = np.random.default_rng(0)
    resampled = rng.choice(block_means, size=(n_bootstrap, n_blocks), replace=True)
    stderr = float(np.std(resampled.mean(axis=1), ddof=1))
    return BirkhoffEstimate(value=float(value), stderr=stderr, horizon=float(T))
