"""Volume-preserving model flows: the suspended cat map and generic ODE fields.

The canonical testbed is the unit-roof suspension of the 3-torus map
``(x, y, z) -> (2x + y, x + y, z + omega)``: a four-dimensional,
volume-preserving, singularity-free flow whose normal bundle splits into
one-dimensional unstable, central and stable subbundles with exponents
``ln lam_plus, 0, ln lam_minus``.  Tangent coordinates are ordered
``(x, y, z, h)`` with the flow moving at unit speed in ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .errors import CentralShiftError

__all__ = [
    "PhasePoint",
    "SuspensionFlow",
    "GenericField",
    "make_cat_suspension",
    "flow",
    "tangent_flow",
    "velocity",
    "is_nonperiodic_sample",
    "system_to_json",
    "system_from_json",
    "CAT_MATRIX",
    "LAMBDA_PLUS",
    "LAMBDA_MINUS",
]

# The hyperbolic base block [[2,1],[1,1]] is symmetric, so its eigenframe is
# orthonormal and the unstable/stable directions below are exact.
CAT_MATRIX = np.array([[2.0, 1.0], [1.0, 1.0]])
CAT_MATRIX_INV = np.array([[1.0, -1.0], [-1.0, 2.0]])
LAMBDA_PLUS = (3.0 + math.sqrt(5.0)) / 2.0
LAMBDA_MINUS = (3.0 - math.sqrt(5.0)) / 2.0

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0  # eigenvector slope: A (1, w) = lam+ (1, w)
_NORM = math.sqrt(1.0 + _GOLDEN * _GOLDEN)

#: Unit eigendirections of the base map on the 3-torus (columns: unstable,
#: central, stable); the frame has determinant +1.
BASE_FRAME = np.array(
    [
        [1.0 / _NORM, 0.0, _GOLDEN / _NORM],
        [_GOLDEN / _NORM, 0.0, -1.0 / _NORM],
        [0.0, 1.0, 0.0],
    ]
)

BASE_MATRIX_3 = np.array(
    [[2.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
)
BASE_MATRIX_3_INV = np.array(
    [[1.0, -1.0, 0.0], [-1.0, 2.0, 0.0], [0.0, 0.0, 1.0]]
)


def _mod1(x: np.ndarray) -> np.ndarray:
    return x - np.floor(x)


@dataclass(frozen=True)
class PhasePoint:
    """A point of the suspension: base in T^3 and height in [0, 1)."""

    base: np.ndarray
    height: float = 0.0

    def __post_init__(self):
        base = _mod1(np.asarray(self.base, dtype=float).reshape(3)).copy()
        base.setflags(write=False)
        object.__setattr__(self, "base", base)
        h = float(self.height)
        # Strict: height 1 is identified with height 0 over the *mapped* base,
        # so silently wrapping it would silently move the point.
        if not (0.0 <= h < 1.0):
            raise ValueError(f"height must lie in [0, 1), got {h!r}")
        object.__setattr__(self, "height", h)

    def as_array(self) -> np.ndarray:
        """Coordinates (x, y, z, h)."""
        return np.array([self.base[0], self.base[1], self.base[2], self.height])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhasePoint):
            return NotImplemented
        return bool(np.all(self.base == other.base) and self.height == other.height)

    def __hash__(self):
        return hash((bytes(self.base.tobytes()), self.height))

    def to_json_dict(self) -> dict:
        return {"base": [float(v) for v in self.base], "height": float(self.height)}

    @staticmethod
    def from_json_dict(d: dict) -> "PhasePoint":
        return PhasePoint(np.array(d["base"], dtype=float), float(d["height"]))


def wrap_torus(delta: np.ndarray) -> np.ndarray:
    """Shortest representative of a torus displacement, componentwise in [-1/2, 1/2)."""
    d = np.asarray(delta, dtype=float)
    return d - np.floor(d + 0.5)


def torus_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(wrap_torus(np.asarray(a) - np.asarray(b))))


@dataclass(frozen=True)
class SuspensionFlow:
    """Unit-roof suspension of the cat-map-times-rotation torus automorphism."""

    omega: float

    # -- base map ----------------------------------------------------------
    def base_step(self, b: np.ndarray, k: int = 1) -> np.ndarray:
        """Apply the base map k times (k may be negative)."""
        x, y, z = float(b[0]), float(b[1]), float(b[2])
        if k >= 0:
            for _ in range(k):
                x, y, z = _kernels.cat_step(x, y, z, self.omega)
        else:
            for _ in range(-k):
                x, y, z = _kernels.cat_step_inv(x, y, z, self.omega)
        return np.array([x, y, z])

    # -- FlowSystem interface ----------------------------------------------
    @property
    def tangent_dimension(self) -> int:
        return 4

    def velocity(self, q: PhasePoint) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, 1.0])

    @staticmethod
    def _split_time(height: float, t: float) -> tuple[int, float]:
        """Windows crossed and final height; guards the h==1.0 rounding edge."""
        total = height + t
        k = math.floor(total)
        h = total - k
        if h >= 1.0:  # total an epsilon below an integer, rounded up
            k += 1
            h = 0.0
        return k, h

    def flow(self, q: PhasePoint, t: float) -> PhasePoint:
        k, h = self._split_time(q.height, t)
        return PhasePoint(self.base_step(q.base, k), h)

    def tangent_flow(self, q: PhasePoint, t: float) -> tuple[PhasePoint, np.ndarray]:
        """Endpoint and 4x4 derivative of the time-t flow map at q."""
        k, h = self._split_time(q.height, t)
        d = np.eye(4)
        d[:3, :3] = np.linalg.matrix_power(
            BASE_MATRIX_3 if k >= 0 else BASE_MATRIX_3_INV, abs(k)
        )
        return PhasePoint(self.base_step(q.base, k), h), d

    def window_cocycle_data(self, p: PhasePoint, n_windows: int, dt: float):
        """Sparse description of the time-1 normal cocycle for the QR kernel.

        Every window map is the constant integer matrix; only available for
        section-aligned starts (height 0), where windows coincide with roof
        crossings.
        """
        if p.height != 0.0:
            return None
        return (
            np.empty(0, dtype=np.int64),
            np.empty((0, 3, 3)),
            BASE_MATRIX_3,
        )

    # -- serialization -------------------------------------------------------
    def to_json_dict(self) -> dict:
        return {"type": "cat_suspension", "omega": float(self.omega)}


def make_cat_suspension(omega: float = _GOLDEN) -> SuspensionFlow:
    """Suspension of (x,y) -> (2x+y, x+y), z -> z + omega, with unit roof."""
    if not (0.0 < omega < 1.0):
        raise ValueError(f"omega must lie in (0, 1), got {omega!r}")
    return SuspensionFlow(float(omega))


@dataclass(frozen=True)
class GenericField:
    """A vector field given by callables, flowed with fixed-step RK4.

    Phase points are plain ndarrays.  ``jacobian`` drives the variational
    equation for :meth:`tangent_flow`.  If ``divergence_free`` is claimed,
    ``trace(jacobian)`` should vanish (checked by tests, not enforced here).
    """

    dimension: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    divergence_free: bool = False
    dt: float = 1e-3

    @property
    def tangent_dimension(self) -> int:
        return self.dimension

    def velocity(self, q: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluate(np.asarray(q, dtype=float)), dtype=float)

    def _steps(self, t: float) -> tuple[int, float]:
        n = max(1, int(round(abs(t) / self.dt)))
        return n, t / n

    def flow(self, q: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(q, dtype=float).copy()
        if t == 0.0:
            return x
        n, h = self._steps(t)
        f = self.evaluate
        for _ in range(n):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        return x

    def tangent_flow(self, q: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(q, dtype=float).copy()
        d = np.eye(self.dimension)
        if t == 0.0:
            return x, d
        n, h = self._steps(t)
        f, jac = self.evaluate, self.jacobian
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


# -- module-level op wrappers (uniform entry points over any FlowSystem) ----


def flow(sys, p, t: float):
    """The time-t flow map of the system applied to p."""
    return sys.flow(p, t)


def tangent_flow(sys, p, t: float):
    """Endpoint and derivative matrix of the time-t flow map at p."""
    return sys.tangent_flow(p, t)


def velocity(sys, p) -> np.ndarray:
    return sys.velocity(p)


def is_nonperiodic_sample(sys, p, horizon: float, tol: float = 1e-6) -> bool:
    """Sanity screen: does the orbit of p stay tol-away from p up to the horizon?

    For the unit-roof suspension a return is only possible at integer times
    (the height coordinate must match), so those are checked exactly; generic
    systems are sampled densely.
    """
    if horizon <= 0.0:
        return True
    if isinstance(sys, SuspensionFlow):
        b = np.asarray(p.base, dtype=float)
        cur = b.copy()
        for _ in range(int(math.floor(horizon))):
            cur = sys.base_step(cur, 1)
            if torus_distance(cur, b) < tol:
                return False
        return True
    x0 = np.asarray(p, dtype=float)
    step = 0.05
    n = int(math.floor(horizon / step))
    cur = x0
    for _ in range(n):
        cur = sys.flow(cur, step)
        if float(np.linalg.norm(cur - x0)) < tol:
            return False
    return True


def system_to_json(sys) -> dict:
    return sys.to_json_dict()


def system_from_json(d: dict):
    if d.get("type") == "cat_suspension":
        return make_cat_suspension(float(d["omega"]))
    raise CentralShiftError(f"unknown system type: {d.get('type')!r}")
