"""The normal bundle and the linear Poincaré cocycle.

At a regular point the normal space is the orthogonal complement of the flow
direction.  The time-t linear Poincaré map is the tangent map followed by the
projection back onto the normal space at the endpoint, expressed in
deterministic orthonormal frames so that matrices compose as a cocycle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularPointError

__all__ = [
    "NormalFrame",
    "PoincareMap",
    "normal_frame",
    "normal_projection",
    "poincare_step",
    "det_poincare",
]

_SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class NormalFrame:
    """Orthonormal basis of the normal space X(at)^perp, as matrix columns."""

    at: object
    basis: np.ndarray  # shape (n, n-1)

    def to_json_dict(self) -> dict:
        at = self.at
        at_json = at.to_json_dict() if hasattr(at, "to_json_dict") else [
            float(v) for v in np.asarray(at).ravel()
        ]
        return {"at": at_json, "basis": self.basis.tolist()}


@dataclass(frozen=True)
class PoincareMap:
    """The linear Poincaré map over duration t between two normal frames."""

    frm: NormalFrame
    to: NormalFrame
    matrix: np.ndarray  # shape (n-1, n-1)
    t: float

    def to_json_dict(self) -> dict:
        return {
            "from": self.frm.to_json_dict(),
            "to": self.to.to_json_dict(),
            "matrix": self.matrix.tolist(),
            "t": float(self.t),
        }


def _unit_velocity(sys, p) -> np.ndarray:
    v = np.asarray(sys.velocity(p), dtype=float)
    norm = float(np.linalg.norm(v))
    if norm < _SINGULAR_TOL:
        raise SingularPointError(
            f"flow speed {norm:.3e} below {_SINGULAR_TOL:.0e} at {p!r}"
        )
    return v / norm


def normal_frame(sys, p) -> NormalFrame:
    """Deterministic orthonormal basis of X(p)^perp.

    Gram-Schmidt over the canonical coordinate basis in order, against the
    unit flow direction and the vectors already accepted; the coordinate
    vector most parallel to the flow is the one dropped.  For the suspension
    (flow direction e_h) this returns exactly (e_x, e_y, e_z).
    """
    v = _unit_velocity(sys, p)
    n = v.shape[0]
    cols = []
    # drop the coordinate axis most aligned with the flow direction
    drop = int(np.argmax(np.abs(v)))
    for i in range(n):
        if i == drop:
            continue
        u = np.zeros(n)
        u[i] = 1.0
        u -= (v @ u) * v
        for c in cols:
            u -= (c @ u) * c
        norm = float(np.linalg.norm(u))
        u /= norm
        cols.append(u)
    basis = np.column_stack(cols)
    basis.setflags(write=False)
    return NormalFrame(at=p, basis=basis)


def normal_projection(sys, p) -> np.ndarray:
    """Orthogonal projection matrix onto the normal space at p."""
    v = _unit_velocity(sys, p)
    return np.eye(v.shape[0]) - np.outer(v, v)


def poincare_step(sys, frame: NormalFrame, t: float) -> PoincareMap:
    """Tangent map over time t, projected onto the endpoint normal space.

    With orthonormal frames the matrix is  B_to^T . D . B_from  (the
    orthogonal projection is absorbed by the change of frame).
    """
    q, d = sys.tangent_flow(frame.at, t)
    to = normal_frame(sys, q)
    matrix = to.basis.T @ (d @ frame.basis)
    matrix.setflags(write=False)
    return PoincareMap(frm=frame, to=to, matrix=matrix, t=float(t))


def det_poincare(pmap: PoincareMap) -> float:
    return float(np.linalg.det(pmap.matrix))
