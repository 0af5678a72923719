"""Dominated-splitting and hyperbolic-subbundle checks on sampled orbits.

A splitting supplies orthonormal bases of the invariant normal subbundles at
arbitrary points, ordered from strongest expansion to strongest contraction.
``check_domination`` verifies, over orbit-equidistributed samples, that the
consecutive-pair ratio  ||P^m|_weaker|| / m(P^m|_stronger)  stays <= 1/2,
with m(A) the smallest singular value (co-norm) of the restriction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CentralShiftError
from .linear_poincare import normal_frame, poincare_step
from .model_systems import BASE_FRAME, SuspensionFlow

__all__ = [
    "BundleSplitting",
    "DominationReport",
    "cat_splitting",
    "check_domination",
    "check_hyperbolic_bundle",
]


@dataclass(frozen=True)
class BundleSplitting:
    """Ordered invariant subbundles, each a callable q -> (n, d_i) basis."""

    bundles: tuple[Callable, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.bundles) != len(self.names):
            raise CentralShiftError("bundles and names must align")


def _constant_bundle(column: np.ndarray) -> Callable:
    mat = np.asarray(column, dtype=float).reshape(-1, 1)

    def bundle(q):
        return mat

    return bundle


def cat_splitting(sys: SuspensionFlow) -> BundleSplitting:
    """Exact unstable/central/stable normal splitting of the suspended cat map."""
    u = np.zeros(4)
    u[:3] = BASE_FRAME[:, 0]
    c = np.zeros(4)
    c[:3] = BASE_FRAME[:, 1]
    s = np.zeros(4)
    s[:3] = BASE_FRAME[:, 2]
    return BundleSplitting(
        bundles=(_constant_bundle(u), _constant_bundle(c), _constant_bundle(s)),
        names=("unstable", "central", "stable"),
    )


@dataclass(frozen=True)
class DominationReport:
    m: int
    pairs: tuple[tuple[int, int, float], ...]  # (i, j, worst_ratio), consecutive i<j
    passed: bool
    sample_count: int
    names: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "m": self.m,
            "pairs": [
                {"i": i, "j": j, "worst_ratio": ratio} for i, j, ratio in self.pairs
            ],
            "passed": self.passed,
            "sample_count": self.sample_count,
            "names": list(self.names),
        }


def _sample_points(sys, samples: int, seed: int) -> list:
    """Orbit-equidistributed sample points from a seeded random start."""
    rng = np.random.default_rng(seed)
    if isinstance(sys, SuspensionFlow):
        from .model_systems import PhasePoint

        q = PhasePoint(rng.random(3), float(rng.random()))
    else:
        q = rng.standard_normal(sys.tangent_dimension)
    points = []
    for _ in range(samples):
        points.append(q)
        q = sys.flow(q, 1.0)
    return points


def _restriction_in_frame(step_matrix, frame_basis, bundle_basis) -> np.ndarray:
    """Coordinates of a bundle basis in the normal frame, pushed by the step."""
    coords = frame_basis.T @ bundle_basis
    return step_matrix @ coords


def check_domination(
    sys, splitting: BundleSplitting, m: int = 1, samples: int = 10_000,
    seed: int = 0,
) -> DominationReport:
    """Verify the m-domination inequality over sampled points.

    For each consecutive bundle pair (i, j=i+1) the reported worst ratio is
    max over samples of ||P^m|_j|| / m(P^m|_i); the report passes iff every
    worst ratio is <= 1/2.
    """
    if m < 1:
        raise CentralShiftError(f"m must be >= 1, got {m}")
    if len(splitting.bundles) < 2:
        raise CentralShiftError("domination needs at least two bundles")
    points = _sample_points(sys, samples, seed)
    n_pairs = len(splitting.bundles) - 1
    worst = np.zeros(n_pairs)
    for q in points:
        frame = normal_frame(sys, q)
        step = poincare_step(sys, frame, float(m))
        svals = []
        for bundle in splitting.bundles:
            image = _restriction_in_frame(step.matrix, frame.basis, bundle(q))
            sv = np.linalg.svd(image, compute_uv=False)
            if sv[-1] <= 0.0:
                raise CentralShiftError(
                    "non-invertible bundle restriction; splitting estimate failed"
                )
            svals.append(sv)
        for i in range(n_pairs):
            ratio = float(svals[i + 1][0] / svals[i][-1])
            if ratio > worst[i]:
                worst[i] = ratio
    pairs = tuple((i, i + 1, float(worst[i])) for i in range(n_pairs))
    passed = bool(np.all(worst <= 0.5))
    return DominationReport(
        m=m, pairs=pairs, passed=passed, sample_count=len(points),
        names=splitting.names,
    )


def check_hyperbolic_bundle(
    sys, bundle: Callable, k: int = 1, mode: str = "contracting",
    samples: int = 10_000, seed: int = 0,
) -> bool:
    """Uniform hyperbolicity of one bundle under the time-k Poincaré cocycle.

    contracting: sup over samples and unit vectors of ||P^k u|| <= 1/2;
    expanding:   inf over samples and unit vectors of ||P^k u|| >= 2
    (the inverse-cocycle reading of the expansion condition).
    """
    if mode not in ("contracting", "expanding"):
        raise CentralShiftError(f"unknown mode {mode!r}")
    points = _sample_points(sys, samples, seed)
    for q in points:
        frame = normal_frame(sys, q)
        step = poincare_step(sys, frame, float(k))
        image = _restriction_in_frame(step.matrix, frame.basis, bundle(q))
        sv = np.linalg.svd(image, compute_uv=False)
        if mode == "contracting" and sv[0] > 0.5:
            return False
        if mode == "expanding" and sv[-1] < 2.0:
            return False
    return True
