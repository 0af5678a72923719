"""Volume-preserving rectifying charts around non-periodic points.

The chart is built in two stages.  A transverse *prescribed-Jacobian* map
``phi`` on the ball solves

    g(phi(w)) * det Dphi(w) = lam,     lam = (mean of g over the ball),   (*)

with ``phi`` the identity on the boundary sphere; ``g`` is the normal speed
of the flow over the section, so the flow-out map

    Phi(x1, w) = X^{x1/lam}( c(phi(w)) )

has unit Jacobian determinant and its inverse ``Psi`` rectifies the flow to
the constant field ``lam * e1`` (exactly ``e1`` whenever ``lam = 1``, as for
the unit-speed suspension).

``moser_solve_1d`` integrates (*) in closed form on an interval;
``moser_solve_grid`` solves it on a disc (d=2) or ball (d=3) with the flow
method: one Neumann Poisson solve for the mass flux, then transport along the
interpolated densities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as _field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from .errors import (
    CentralShiftError,
    ChartDomainError,
    InjectivityError,
    MoserSolveError,
)
from .linear_poincare import normal_frame
from .model_systems import (
    BASE_FRAME,
    LAMBDA_PLUS,
    PhasePoint,
    SuspensionFlow,
    is_nonperiodic_sample,
    torus_distance,
    wrap_torus,
)

__all__ = [
    "MoserMap",
    "FlowboxChart",
    "identity_moser",
    "moser_solve_1d",
    "moser_solve_grid",
    "normal_speed_function",
    "injectivity_radius",
    "build_chart",
    "chart_fixture",
    "save_chart_fixture",
    "load_chart_fixture",
    "verify_chart_fixture",
]


# ---------------------------------------------------------------------------
# Prescribed-Jacobian transverse maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MoserMap:
    """A ball map with prescribed Jacobian: g(phi(w)) det Dphi(w) = lam.

    ``lam`` is the mean of ``g`` over the ball unless overridden; ``phi``
    fixes the boundary sphere (within solver tolerance for the grid method).
    ``phi_inverse`` is provided by all built-in constructors; ``info`` holds
    solver diagnostics (residuals, boundary displacement, grid size).
    """

    dim: int
    radius: float
    phi: Callable
    phi_jacobian: Callable
    lam: float
    phi_inverse: Callable | None = None
    info: dict = _field(default_factory=dict)


def identity_moser(dim: int, radius: float) -> MoserMap:
    """The trivial solution for constant density: phi = id, lam = 1."""

    def phi(w):
        return np.asarray(w, dtype=float)

    def phi_jacobian(w):
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            return np.eye(dim)
        return np.broadcast_to(np.eye(dim), (len(w), dim, dim)).copy()

    return MoserMap(
        dim=dim, radius=float(radius), phi=phi, phi_jacobian=phi_jacobian,
        lam=1.0, phi_inverse=phi, info={"max_residual": 0.0,
                                        "boundary_displacement": 0.0},
    )


def moser_solve_1d(g, lambda_override=None, *, radius: float = 1.0) -> MoserMap:
    """Closed-form solution of g(phi(x)) phi'(x) = lam on [0, radius].

    With G an antiderivative of g, phi(x) = G^{-1}(lam * x) and the natural
    lam = G(radius)/radius pins phi(radius) = radius.  ``lambda_override``
    replaces lam (the boundary identity then generally fails, which is the
    caller's business).
    """
    r = float(radius)
    if r <= 0.0:
        raise MoserSolveError(f"radius must be positive, got {r!r}")
    xs = np.linspace(0.0, r, 201)
    if min(float(g(x)) for x in xs) <= 0.0:
        raise MoserSolveError("density g must be positive on [0, radius]")

    def G(x: float) -> float:
        return quad(g, 0.0, x, limit=200)[0]

    total = G(r)
    lam = total / r if lambda_override is None else float(lambda_override)
    if lam <= 0.0:
        raise MoserSolveError(f"lam must be positive, got {lam!r}")

    def phi_scalar(x: float) -> float:
        target = lam * float(x)
        if target < -1e-12 or target > total * (1.0 + 1e-12) + 1e-12:
            raise MoserSolveError(
                f"phi({x!r}) falls outside [0, {r!r}] for lam={lam!r}"
            )
        target = min(max(target, 0.0), total)
        return brentq(lambda y: G(y) - target, 0.0, r, xtol=1e-15, rtol=1e-15)

    def phi(x):
        if np.ndim(x) == 0:
            return phi_scalar(float(x))
        return np.array([phi_scalar(float(v)) for v in np.asarray(x).ravel()])

    def phi_jacobian(x):
        y = phi_scalar(float(np.asarray(x).ravel()[0]) if np.ndim(x) else float(x))
        return np.array([[lam / float(g(y))]])

    def phi_inverse(y):
        if np.ndim(y) == 0:
            return G(float(y)) / lam
        return np.array([G(float(v)) / lam for v in np.asarray(y).ravel()])

    # closed-form self-check of the prescribed-Jacobian identity
    check = np.linspace(0.0, r, 41)
    res = max(
        abs(float(g(phi_scalar(x))) * float(phi_jacobian(x)[0, 0]) - lam)
        for x in check
    )
    if res > 1e-8:
        raise MoserSolveError(f"1d residual {res:.3e} exceeds 1e-8")
    boundary = abs(phi_scalar(r) - r) if lambda_override is None else float("nan")
    return MoserMap(
        dim=1, radius=r, phi=phi, phi_jacobian=phi_jacobian, lam=lam,
        phi_inverse=phi_inverse,
        info={"max_residual": res, "boundary_displacement": boundary},
    )


# ---------------------------------------------------------------------------
# Grid solver (d = 2, 3): Poisson mass flux + density transport
# ---------------------------------------------------------------------------


def _vectorized_density(g, dim: int) -> Callable:
    probe = np.zeros((2, dim))
    try:
        out = np.asarray(g(probe), dtype=float)
        if out.shape == (2,):
            return lambda pts: np.asarray(g(pts), dtype=float)
    except Exception:
        pass

    def pointwise(pts):
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return float(g(pts))
        return np.array([float(g(p)) for p in pts])

    return pointwise


def _advect(points: np.ndarray, velocity, t0: float, t1: float,
            steps: int = 32) -> np.ndarray:
    """Classical RK4 in the homotopy parameter t for a batch of points."""
    x = np.array(points, dtype=float)
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        k1 = velocity(x, t)
        k2 = velocity(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = velocity(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = velocity(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        t += h
    return x


def _advect_jacobian(points: np.ndarray, velocity, step: float) -> np.ndarray:
    """Jacobian of the time-0-to-1 transport at each point, by central FD."""
    m, d = points.shape
    offsets = np.concatenate([step * np.eye(d), -step * np.eye(d)])
    batch = (points[None, :, :] + offsets[:, None, :]).reshape(-1, d)
    images = _advect(batch, velocity, 0.0, 1.0).reshape(2 * d, m, d)
    jac = np.empty((m, d, d))
    for c in range(d):
        jac[:, :, c] = (images[c] - images[d + c]) / (2.0 * step)
    return jac


def moser_solve_grid(g, grid_n: int = 64, tol: float = 1e-3, *,
                     dim: int = 2, radius: float = 1.0) -> MoserMap:
    """Prescribed-Jacobian map on the disc (dim=2) or ball (dim=3).

    The flow method: the mass flux w = grad u solves one discrete Neumann
    Poisson problem div w = lam - g (the right-hand side is independent of
    the homotopy parameter, so a single solve serves every density slice
    rho_t = (1-t) lam + t g), and grid nodes are transported along
    dx/dt = w(x)/rho_t(x).  The residual of the prescribed-Jacobian identity
    is checked at every grid node and the boundary behaviour is checked
    against ``tol``; failure raises :class:`MoserSolveError`.

    For dim=2 the tangential boundary slip of the gradient flux is cancelled
    exactly (at grid nodes) by a divergence-free stream-function correction
    supported in a boundary shell, so the boundary is pointwise fixed.  For
    dim=3 no such scalar correction exists; the solver keeps the boundary
    sphere invariant (radial displacement checked against ``tol``) and
    reports the tangential slip in ``info["boundary_tangential_slip"]``.
    """
    if dim not in (2, 3):
        raise MoserSolveError(f"grid solver supports dim 2 or 3, got {dim}")
    if grid_n < 32:
        raise MoserSolveError(f"grid_n must be >= 32, got {grid_n}")
    if radius <= 0.0:
        raise MoserSolveError(f"radius must be positive, got {radius!r}")
    gv = _vectorized_density(g, dim)
    if dim == 2:
        return _moser_grid_2d(gv, int(grid_n), float(tol), float(radius))
    return _moser_grid_3d(gv, int(grid_n), float(tol), float(radius))


def _clip_into_ball(pts: np.ndarray, r: float) -> np.ndarray:
    norms = np.linalg.norm(pts, axis=-1, keepdims=True)
    scale = np.minimum(1.0, r / np.maximum(norms, 1e-300))
    return pts * scale


def _moser_grid_2d(gv, n: int, tol: float, r: float) -> MoserMap:
    nr, nt = n, 4 * n
    hr, ht = r / nr, 2.0 * math.pi / nt
    rho = (np.arange(nr) + 0.5) * hr
    th = (np.arange(nt) + 0.5) * ht
    pp, tt = np.meshgrid(rho, th, indexing="ij")
    nodes = np.stack([pp * np.cos(tt), pp * np.sin(tt)], axis=-1)  # (nr,nt,2)
    gvals = gv(nodes.reshape(-1, 2)).reshape(nr, nt)
    if np.min(gvals) <= 0.0:
        raise MoserSolveError("density g must be positive on the disc")
    areas = (rho * hr * ht)[:, None] * np.ones((1, nt))
    lam = float(np.sum(gvals * areas) / np.sum(areas))

    # --- Neumann Poisson, one radial tridiagonal system per theta mode ----
    # A monolithic polar finite-volume Laplacian has a non-smooth truncation
    # error at the coordinate pole, which costs an order of accuracy in the
    # gradient there.  Decoupling in theta keeps the radial error smooth
    # (uniform second order) and makes the theta derivatives spectral.
    fhat = np.fft.rfft(lam - gvals, axis=1)  # Delta u = lam - g, per mode
    n_modes = fhat.shape[1]
    k_arr = np.arange(n_modes, dtype=float)
    t_face = np.arange(1.0, nr)  # rho_face / hr, per unit angle
    uhat = np.zeros((nr, n_modes), dtype=complex)
    # uhat = 0 is exact for constant density; otherwise solve mode by mode
    for k in range(n_modes) if np.any(fhat) else range(0):
        lower = np.concatenate([t_face, [0.0]])
        upper = np.concatenate([[0.0], t_face])
        diag = np.zeros(nr)
        diag[:-1] -= t_face
        diag[1:] -= t_face
        diag -= k_arr[k] ** 2 * hr / rho
        rhs_k = fhat[:, k] * rho * hr
        if k == 0:
            # singular Neumann mode: bordered dense solve pinning the
            # area-weighted mean to zero (rhs is compatible by the choice
            # of lam)
            m0 = np.zeros((nr + 1, nr + 1))
            m0[:nr, :nr] = (
                np.diag(diag) + np.diag(t_face, 1) + np.diag(t_face, -1)
            )
            m0[:nr, nr] = rho * hr
            m0[nr, :nr] = rho * hr
            sol = np.linalg.solve(m0, np.append(rhs_k.real, 0.0))
            uhat[:, 0] = sol[:nr]
        else:
            ab = np.vstack([upper, diag, lower])
            uhat[:, k] = solve_banded((1, 1), ab, rhs_k)

    # --- mass-flux field at cell centers ----------------------------------
    ik = 1j * k_arr
    if nt % 2 == 0:
        ik[-1] = 0.0  # Nyquist mode has no well-defined odd derivative
    w_r_hat = np.empty_like(uhat)
    w_r_hat[1:-1] = (uhat[2:] - uhat[:-2]) / (2.0 * hr)
    # second-order at the innermost ring via mode parity: u_k(-rho) equals
    # (-1)^k u_k(rho) (the antipodal ray)
    parity = 1.0 - 2.0 * (np.arange(n_modes) % 2)
    w_r_hat[0] = (uhat[1] - parity * uhat[0]) / (2.0 * hr)
    w_r_hat[-1] = (uhat[-1] - uhat[-2]) / (2.0 * hr)  # Neumann outer face
    w_r = np.fft.irfft(w_r_hat, nt, axis=1)
    w_t = np.fft.irfft(uhat * ik, nt, axis=1) / rho[:, None]
    # third-order extrapolation to the rim: the correction below forces the
    # interpolated tangential flow to vanish exactly at rho = r, so the slip
    # estimate must be one order better than the target Jacobian accuracy
    u_rim = 1.875 * uhat[-1] - 1.25 * uhat[-2] + 0.375 * uhat[-3]

    # --- divergence-free correction cancelling the rim slip ---------------
    # Stream function psi = f(rho) W(theta) with f = rho^2 (rho - r) / r^2:
    # f(r) = 0 keeps the radial boundary flux zero, f'(r) = 1 makes the
    # tangential component cancel the measured slip W exactly at the rim,
    # and f is polynomial so the corrected flux stays smooth for the
    # grid-difference Jacobian (a bump-localized shell correction leaves
    # O(1/delta^2) third derivatives that stall the residual).
    slip = np.fft.irfft(u_rim * ik, nt) / r  # tangential flux at rho = r
    slip_prime = np.fft.irfft(u_rim * ik * ik, nt) / r
    f_over_rho = (rho * (rho - r) / r**2)[:, None]
    f_prime = ((3.0 * rho**2 - 2.0 * rho * r) / r**2)[:, None]
    w_r = w_r + f_over_rho * slip_prime[None, :]
    w_t = w_t - f_prime * slip[None, :]

    vx = w_r * np.cos(tt) - w_t * np.sin(tt)
    vy = w_r * np.sin(tt) + w_t * np.cos(tt)

    # --- interpolants on the padded polar grid ----------------------------
    rho_ax = np.concatenate([[0.0], rho, [r]])
    th_ax = np.concatenate([[th[0] - ht], th, [th[-1] + ht]])
    # the velocity interpolant is cubic: a piecewise-linear field has O(h)
    # gradient error, and trajectories idling near the rim (where the flow
    # vanishes) sample that error coherently for the whole unit time, which
    # caps the Jacobian accuracy at first order; cubic needs a wider periodic
    # pad so the spline near the angular seam is fed genuine data
    npad = 3
    vel_th_ax = np.concatenate(
        [th[-npad:] - 2.0 * math.pi, th, th[:npad] + 2.0 * math.pi]
    )

    def pad_field(f, center_value, rim_row):
        full = np.vstack([np.full((1, nt), center_value), f, rim_row[None, :]])
        return np.hstack([full[:, -npad:], full, full[:, :npad]])

    # third-order extrapolation to the origin (rings at 0.5h, 1.5h, 2.5h);
    # a first-order center value leaves a tent-shaped error whose gradient
    # contaminates Jacobians of trajectories crossing the innermost cell
    cx = float(np.mean(1.875 * vx[0] - 1.25 * vx[1] + 0.375 * vx[2]))
    cy = float(np.mean(1.875 * vy[0] - 1.25 * vy[1] + 0.375 * vy[2]))
    zeros_rim = np.zeros(nt)  # slip cancelled + Neumann: the rim is at rest
    interp_vx = RegularGridInterpolator(
        (rho_ax, vel_th_ax), pad_field(vx, cx, zeros_rim), method="cubic")
    interp_vy = RegularGridInterpolator(
        (rho_ax, vel_th_ax), pad_field(vy, cy, zeros_rim), method="cubic")

    def polar_query(pts):
        p = np.linalg.norm(pts, axis=-1)
        a = np.arctan2(pts[..., 1], pts[..., 0])
        a = np.mod(a - th_ax[0], 2.0 * math.pi) + th_ax[0]
        return np.stack([np.minimum(p, r), a], axis=-1)

    def velocity(pts, t):
        q = polar_query(pts)
        w = np.stack([interp_vx(q), interp_vy(q)], axis=-1)
        den = (1.0 - t) * lam + t * gv(_clip_into_ball(pts, r))
        return w / den[..., None]

    # --- transport of the grid, Jacobian by grid differences ---------------
    flat = nodes.reshape(-1, 2)
    phi_nodes = _advect(flat, velocity, 0.0, 1.0).reshape(nr, nt, 2)
    center_img = _advect(np.zeros((1, 2)), velocity, 0.0, 1.0)[0]
    rim = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    rim_img = _advect(rim, velocity, 0.0, 1.0)
    boundary_disp = float(np.max(np.linalg.norm(rim_img - rim, axis=-1)))

    # Jacobians by central differences of the transport itself at a step far
    # below the grid scale; differencing transported *grid* values at spacing
    # 2h would fold the interpolation kinks of the velocity field into the
    # derivative and lose an order of accuracy near the origin, where the
    # flow is slowest.
    dphi = _advect_jacobian(flat, velocity, 1e-6 * r).reshape(nr, nt, 2, 2)

    dets = dphi[:, :, 0, 0] * dphi[:, :, 1, 1] - dphi[:, :, 0, 1] * dphi[:, :, 1, 0]
    residual = np.abs(gv(phi_nodes.reshape(-1, 2)).reshape(nr, nt) * dets - lam)
    max_res = float(np.max(residual))
    info = {
        "max_residual": max_res,
        "boundary_displacement": boundary_disp,
        "grid_n": n,
        "lam": lam,
        "min_det": float(np.min(dets)),
    }
    if np.min(dets) <= 0.0:
        raise MoserSolveError(f"transport produced a fold: min det {np.min(dets):.3e}")
    if max_res > tol:
        raise MoserSolveError(
            f"prescribed-Jacobian residual {max_res:.3e} exceeds tol {tol:.1e} "
            f"at grid_n={n}; refine the grid"
        )
    if boundary_disp > tol:
        raise MoserSolveError(
            f"boundary displacement {boundary_disp:.3e} exceeds tol {tol:.1e}"
        )

    phi_call = _displacement_interpolant_2d(
        rho_ax, th_ax, phi_nodes - nodes, center_img, rim_img - rim,
        polar_query,
    )
    inv_nodes = _advect(flat, velocity, 1.0, 0.0).reshape(nr, nt, 2)
    inv_center = _advect(np.zeros((1, 2)), velocity, 1.0, 0.0)[0]
    inv_rim = _advect(rim, velocity, 1.0, 0.0)
    phi_inv_call = _displacement_interpolant_2d(
        rho_ax, th_ax, inv_nodes - nodes, inv_center, inv_rim - rim,
        polar_query,
    )
    jac_call = _matrix_interpolant_2d(rho_ax, th_ax, dphi, polar_query)

    return MoserMap(
        dim=2, radius=r, phi=phi_call, phi_jacobian=jac_call, lam=lam,
        phi_inverse=phi_inv_call, info=info,
    )


def _displacement_interpolant_2d(rho_ax, th_ax, disp_nodes, center_disp,
                                 rim_disp, polar_query):
    nt = disp_nodes.shape[1]
    interps = []
    for c in range(2):
        full = np.vstack([
            np.full((1, nt), center_disp[c]),
            disp_nodes[:, :, c],
            rim_disp[None, :, c],
        ])
        padded = np.hstack([full[:, -1:], full, full[:, :1]])
        interps.append(RegularGridInterpolator(
            (rho_ax, th_ax), padded, method="linear"))

    def call(w):
        w = np.asarray(w, dtype=float)
        single = w.ndim == 1
        pts = w[None, :] if single else w
        q = polar_query(pts)
        out = pts + np.stack([interps[0](q), interps[1](q)], axis=-1)
        return out[0] if single else out

    return call


def _matrix_interpolant_2d(rho_ax, th_ax, dphi, polar_query):
    nt = dphi.shape[1]
    interps = {}
    for a in range(2):
        for b in range(2):
            f = dphi[:, :, a, b]
            full = np.vstack([
                np.full((1, nt), float(np.mean(f[0]))),
                f,
                (1.5 * f[-1] - 0.5 * f[-2])[None, :],
            ])
            padded = np.hstack([full[:, -1:], full, full[:, :1]])
            interps[a, b] = RegularGridInterpolator(
                (rho_ax, th_ax), padded, method="linear")

    def call(w):
        w = np.asarray(w, dtype=float)
        single = w.ndim == 1
        pts = w[None, :] if single else w
        q = polar_query(pts)
        out = np.empty((len(pts), 2, 2))
        for (a, b), itp in interps.items():
            out[:, a, b] = itp(q)
        return out[0] if single else out

    return call


def _moser_grid_3d(gv, n: int, tol: float, r: float) -> MoserMap:
    # latitude is discretized uniformly in the polar angle theta, not in its
    # cosine: the azimuthal modes of smooth fields behave like sin(theta)^m
    # near the poles, which is smooth in theta but has a square-root
    # singularity in cos(theta), and differencing across that singularity
    # costs all pointwise accuracy of the polar velocity components
    nr, nm, nf = n, n, 2 * n
    hr = r / nr
    hth = math.pi / nm
    hf = 2.0 * math.pi / nf
    rho = (np.arange(nr) + 0.5) * hr
    th = (np.arange(nm) + 0.5) * hth
    ph = (np.arange(nf) + 0.5) * hf
    pp, th3, ff = np.meshgrid(rho, th, ph, indexing="ij")
    ss, mm = np.sin(th3), np.cos(th3)
    nodes = np.stack(
        [pp * ss * np.cos(ff), pp * ss * np.sin(ff), pp * mm], axis=-1
    )  # (nr,nm,nf,3)
    gvals = gv(nodes.reshape(-1, 3)).reshape(nr, nm, nf)
    if np.min(gvals) <= 0.0:
        raise MoserSolveError("density g must be positive on the ball")
    th_faces = np.arange(nm + 1) * hth
    dmu = np.cos(th_faces[:-1]) - np.cos(th_faces[1:])  # cell extent in mu
    vols_angle = ((rho**2 + hr**2 / 12.0) * hr)[:, None] * dmu[None, :]
    vols = vols_angle[:, :, None] * np.full((1, 1, nf), hf)
    lam = float(np.sum(gvals * vols) / np.sum(vols))

    # --- Neumann Poisson, one (rho, theta) system per azimuthal mode -------
    # Same rationale as the disc solver: decoupling the periodic angle keeps
    # the remaining finite-volume truncation error smooth, so the gradient
    # stays second-order accurate up to the coordinate singularities.
    fhat = np.fft.rfft(lam - gvals, axis=2)
    n_modes = fhat.shape[2]

    def idx(i, j):
        return i * nm + j

    # transmissibilities per unit azimuthal angle
    rows, cols, base_vals = [], [], []
    jj = np.arange(nm)
    for i in range(nr - 1):  # radial faces
        t = ((i + 1) * hr) ** 2 / hr * dmu
        a, b = idx(i, jj), idx(i + 1, jj)
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        base_vals.extend([-t, -t, t, t])
    ii = np.arange(nr)
    for j in range(nm - 1):  # polar faces (coefficient vanishes on the axis)
        t = math.sin(th_faces[j + 1]) * hr / hth
        a, b = idx(ii, j), idx(ii, j + 1)
        rows.extend([a, b, a, b])
        cols.extend([a, b, b, a])
        base_vals.extend([np.full(nr, -t)] * 2 + [np.full(nr, t)] * 2)
    lap0 = sparse.coo_matrix(
        (
            np.concatenate(base_vals),
            (np.concatenate(rows), np.concatenate(cols)),
        ),
        shape=(nr * nm, nr * nm),
    ).tocsc()
    # azimuthal term: -m^2 * integral of dV / (rho sin(theta))^2 per cell
    azim_coeff = np.full((nr, 1), hr) * (hth / np.sin(th))[None, :]
    uhat = np.zeros((nr, nm, n_modes), dtype=complex)
    weights = vols_angle.ravel()
    # uhat = 0 is exact for constant density; otherwise solve mode by mode
    for m in range(n_modes) if np.any(fhat) else range(0):
        rhs_m = (fhat[:, :, m] * vols_angle).ravel()
        if m == 0:
            bordered = sparse.bmat(
                [[lap0, weights[:, None]], [weights[None, :], None]],
                format="csc",
            )
            sol = splu(bordered).solve(np.append(rhs_m.real, 0.0))
            uhat[:, :, 0] = sol[:-1].reshape(nr, nm)
        else:
            lap_m = lap0 - sparse.diags((m**2) * azim_coeff.ravel())
            lu = splu(lap_m.tocsc())
            uhat[:, :, m] = (
                lu.solve(rhs_m.real) + 1j * lu.solve(rhs_m.imag)
            ).reshape(nr, nm)

    # --- mass flux at cell centers -----------------------------------------
    im = 1j * np.arange(n_modes, dtype=float)
    if nf % 2 == 0:
        im[-1] = 0.0  # Nyquist mode has no well-defined odd derivative
    parity = 1.0 - 2.0 * (np.arange(n_modes) % 2)
    v_r_hat = np.empty_like(uhat)
    v_r_hat[1:-1] = (uhat[2:] - uhat[:-2]) / (2.0 * hr)
    # center stencil: the antipodal ray flips theta and adds half a turn,
    # i.e. reverses the theta rows and multiplies mode m by (-1)^m
    v_r_hat[0] = (uhat[1] - parity * uhat[0, ::-1]) / (2.0 * hr)
    v_r_hat[-1] = (uhat[-1] - uhat[-2]) / (2.0 * hr)  # Neumann outer face
    v_r = np.fft.irfft(v_r_hat, nf, axis=2)
    # polar-angle derivative with ghost rows across the poles: continuing a
    # meridian over a pole lands on the antipodal meridian, so the ghost
    # value of mode m is (-1)^m times the mirrored row
    du_dth_hat = np.empty_like(uhat)
    du_dth_hat[:, 1:-1] = (uhat[:, 2:] - uhat[:, :-2]) / (2.0 * hth)
    du_dth_hat[:, 0] = (uhat[:, 1] - parity * uhat[:, 0]) / (2.0 * hth)
    du_dth_hat[:, -1] = (parity * uhat[:, -1] - uhat[:, -2]) / (2.0 * hth)
    v_theta = np.fft.irfft(du_dth_hat, nf, axis=2) / pp
    v_phi = np.fft.irfft(uhat * im, nf, axis=2) / (pp * ss)

    cth, sth = mm, ss
    cph, sph = np.cos(ff), np.sin(ff)
    vx = v_r * sth * cph + v_theta * cth * cph - v_phi * sph
    vy = v_r * sth * sph + v_theta * cth * sph + v_phi * cph
    vz = v_r * cth - v_theta * sth

    rho_ax = np.concatenate([[0.0], rho, [r]])
    th_ax = np.concatenate([[0.0], th, [math.pi]])
    ph_ax = np.concatenate([[ph[0] - hf], ph, [ph[-1] + hf]])

    def _extrap3(f0, f1, f2):
        """Third-order extrapolation half a grid step beyond row 0."""
        return 1.875 * f0 - 1.25 * f1 + 0.375 * f2

    def pad_volume(f):
        """Pad (nr,nm,nf) in Cartesian components to the closed axes."""
        out = np.empty((nr + 2, nm + 2, nf + 2))
        core = np.empty((nr + 2, nm, nf))
        core[1:-1] = f
        core[0] = float(np.mean(_extrap3(f[0], f[1], f[2])))  # single center
        core[-1] = _extrap3(f[-1], f[-2], f[-3])  # provisional rim, fixed below
        closed = np.empty((nr + 2, nm + 2, nf))
        closed[:, 1:-1] = core
        # Cartesian components are single-valued at each geometric pole
        closed[:, 0] = np.mean(_extrap3(core[:, 0], core[:, 1], core[:, 2]),
                               axis=-1, keepdims=True)
        closed[:, -1] = np.mean(_extrap3(core[:, -1], core[:, -2], core[:, -3]),
                                axis=-1, keepdims=True)
        out[:, :, 1:-1] = closed
        out[:, :, 0] = closed[:, :, -1]
        out[:, :, -1] = closed[:, :, 0]
        return out

    px = pad_volume(vx)
    py = pad_volume(vy)
    pz = pad_volume(vz)
    # project the radial component out of the rim row so the sphere is invariant
    th_grid, ph_grid = np.meshgrid(th_ax, ph_ax, indexing="ij")
    s_grid, mu_grid = np.sin(th_grid), np.cos(th_grid)
    nx = s_grid * np.cos(ph_grid)
    ny = s_grid * np.sin(ph_grid)
    nz = mu_grid
    radial = px[-1] * nx + py[-1] * ny + pz[-1] * nz
    px[-1] -= radial * nx
    py[-1] -= radial * ny
    pz[-1] -= radial * nz

    interp = [
        RegularGridInterpolator((rho_ax, th_ax, ph_ax), f, method="linear")
        for f in (px, py, pz)
    ]

    def spherical_query(pts):
        p = np.linalg.norm(pts, axis=-1)
        safe = np.maximum(p, 1e-300)
        t = np.arccos(np.clip(pts[..., 2] / safe, -1.0, 1.0))
        a = np.arctan2(pts[..., 1], pts[..., 0])
        a = np.mod(a - ph_ax[0], 2.0 * math.pi) + ph_ax[0]
        return np.stack([np.minimum(p, r), t, a], axis=-1)

    def velocity(pts, t):
        q = spherical_query(pts)
        w = np.stack([interp[0](q), interp[1](q), interp[2](q)], axis=-1)
        den = (1.0 - t) * lam + t * gv(_clip_into_ball(pts, r))
        return w / den[..., None]

    flat = nodes.reshape(-1, 3)
    phi_nodes = _advect(flat, velocity, 0.0, 1.0).reshape(nr, nm, nf, 3)
    center_img = _advect(np.zeros((1, 3)), velocity, 0.0, 1.0)[0]

    # Jacobian by central FD of the transport itself (see the disc solver for
    # why differencing transported grid values would lose accuracy)
    dphi = _advect_jacobian(flat, velocity, 1e-6 * r).reshape(nr, nm, nf, 3, 3)
    dets = np.linalg.det(dphi)
    residual = np.abs(gv(phi_nodes.reshape(-1, 3)).reshape(nr, nm, nf) * dets - lam)
    max_res = float(np.max(residual))

    rng = np.random.default_rng(0)
    dirs = rng.standard_normal((400, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sphere = r * dirs
    sphere_img = _advect(sphere, velocity, 0.0, 1.0)
    radial_disp = float(np.max(np.abs(np.linalg.norm(sphere_img, axis=1) - r)))
    tangential_slip = float(np.max(np.linalg.norm(sphere_img - sphere, axis=1)))

    info = {
        "max_residual": max_res,
        "boundary_displacement": radial_disp,
        "boundary_tangential_slip": tangential_slip,
        "grid_n": n,
        "lam": lam,
        "min_det": float(np.min(dets)),
    }
    if np.min(dets) <= 0.0:
        raise MoserSolveError(f"transport produced a fold: min det {np.min(dets):.3e}")
    if max_res > tol:
        raise MoserSolveError(
            f"prescribed-Jacobian residual {max_res:.3e} exceeds tol {tol:.1e} "
            f"at grid_n={n}; refine the grid"
        )
    if radial_disp > tol:
        raise MoserSolveError(
            f"radial boundary displacement {radial_disp:.3e} exceeds tol {tol:.1e}"
        )

    disp = phi_nodes - nodes
    inv_nodes = _advect(flat, velocity, 1.0, 0.0).reshape(nr, nm, nf, 3)
    inv_center = _advect(np.zeros((1, 3)), velocity, 1.0, 0.0)[0]
    sphere_grid = np.stack(
        [r * s_grid * np.cos(ph_grid), r * s_grid * np.sin(ph_grid),
         r * mu_grid], axis=-1,
    )
    rim_fwd = _advect(sphere_grid.reshape(-1, 3), velocity, 0.0, 1.0).reshape(
        sphere_grid.shape
    )
    rim_bwd = _advect(sphere_grid.reshape(-1, 3), velocity, 1.0, 0.0).reshape(
        sphere_grid.shape
    )
    phi_call = _displacement_interpolant_3d(
        rho_ax, th_ax, ph_ax, disp, center_img, rim_fwd - sphere_grid,
        spherical_query,
    )
    phi_inv_call = _displacement_interpolant_3d(
        rho_ax, th_ax, ph_ax, inv_nodes - nodes, inv_center,
        rim_bwd - sphere_grid, spherical_query,
    )
    jac_call = _matrix_interpolant_3d(rho_ax, th_ax, ph_ax, dphi, spherical_query)

    return MoserMap(
        dim=3, radius=r, phi=phi_call, phi_jacobian=jac_call, lam=lam,
        phi_inverse=phi_inv_call, info=info,
    )


def _pad_scalar_3d(f, center_value, rim_row):
    """(nr,nm,nf) -> closed padded grid with given center and rim rows."""
    nr, nm, nf = f.shape
    core = np.empty((nr + 2, nm, nf))
    core[1:-1] = f
    core[0] = center_value
    core[-1] = rim_row
    closed = np.empty((nr + 2, nm + 2, nf))
    closed[:, 1:-1] = core
    closed[:, 0] = np.mean(1.5 * core[:, 0] - 0.5 * core[:, 1],
                           axis=-1, keepdims=True)
    closed[:, -1] = np.mean(1.5 * core[:, -1] - 0.5 * core[:, -2],
                            axis=-1, keepdims=True)
    out = np.empty((nr + 2, nm + 2, nf + 2))
    out[:, :, 1:-1] = closed
    out[:, :, 0] = closed[:, :, -1]
    out[:, :, -1] = closed[:, :, 0]
    return out


def _displacement_interpolant_3d(rho_ax, th_ax, ph_ax, disp, center_disp,
                                 rim_disp, spherical_query):
    interps = []
    for c in range(3):
        padded = _pad_scalar_3d(
            disp[..., c], center_disp[c], rim_disp[1:-1, 1:-1, c]
        )
        interps.append(RegularGridInterpolator(
            (rho_ax, th_ax, ph_ax), padded, method="linear"))

    def call(w):
        w = np.asarray(w, dtype=float)
        single = w.ndim == 1
        pts = w[None, :] if single else w
        q = spherical_query(pts)
        out = pts + np.stack([i(q) for i in interps], axis=-1)
        return out[0] if single else out

    return call


def _matrix_interpolant_3d(rho_ax, th_ax, ph_ax, dphi, spherical_query):
    interps = {}
    for a in range(3):
        for b in range(3):
            f = dphi[..., a, b]
            padded = _pad_scalar_3d(
                f, float(np.mean(1.5 * f[0] - 0.5 * f[1])),
                1.5 * f[-1] - 0.5 * f[-2],
            )
            interps[a, b] = RegularGridInterpolator(
                (rho_ax, th_ax, ph_ax), padded, method="linear")

    def call(w):
        w = np.asarray(w, dtype=float)
        single = w.ndim == 1
        pts = w[None, :] if single else w
        q = spherical_query(pts)
        out = np.empty((len(pts), 3, 3))
        for (a, b), itp in interps.items():
            out[:, a, b] = itp(q)
        return out[0] if single else out

    return call


# ---------------------------------------------------------------------------
# Flow-out charts
# ---------------------------------------------------------------------------


def normal_speed_function(sys, p, frame: np.ndarray | None = None) -> Callable:
    """Density for the chart's transverse solve: the flow's normal speed.

    Returns g(w) = <X(c(w)), unit velocity at p> over the section through p,
    so that the chart determinant g(phi(w)) det Dphi(w) / lam equals one.
    For the unit-speed suspension this is identically 1.
    """
    if isinstance(sys, SuspensionFlow):
        def g_const(w):
            w = np.asarray(w, dtype=float)
            return 1.0 if w.ndim == 1 else np.ones(len(w))

        return g_const
    if frame is None:
        frame = _chart_frame(sys, p)
    v = np.asarray(sys.velocity(p), dtype=float)
    v_hat = v / np.linalg.norm(v)
    p_arr = np.asarray(p, dtype=float)

    def g(w):
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            return float(np.dot(sys.velocity(p_arr + frame @ w), v_hat))
        return np.array(
            [float(np.dot(sys.velocity(p_arr + frame @ wi), v_hat)) for wi in w]
        )

    return g


def _chart_frame(sys, p) -> np.ndarray:
    """Oriented transverse frame: columns orthonormal, perpendicular to the
    velocity, ordered so the full [v | frame] basis is positively oriented."""
    if isinstance(sys, SuspensionFlow):
        frame = np.zeros((4, 3))
        frame[:3, :] = BASE_FRAME
    else:
        frame = normal_frame(sys, p).basis.copy()
    v = np.asarray(sys.velocity(p), dtype=float)
    v_hat = v / np.linalg.norm(v)
    if np.linalg.det(np.column_stack([v_hat, frame])) < 0.0:
        frame = frame.copy()
        frame[:, -1] = -frame[:, -1]
    return frame


def injectivity_radius(sys, p, *, cap: float = 0.25) -> float:
    """Largest transverse radius with a self-intersection-free unit flowbox.

    For the suspension the flowbox over [-1, 1] self-intersects exactly when
    the base ball meets its own image under the base map (stretch factor
    1 + lam_plus); generic systems are screened by sampled bisection along
    the orbit segment.
    """
    if isinstance(sys, SuspensionFlow):
        d = min(
            torus_distance(sys.base_step(p.base, 1), p.base),
            torus_distance(sys.base_step(p.base, -1), p.base),
        )
        return min(cap, d / (1.0 + LAMBDA_PLUS))

    x0 = np.asarray(p, dtype=float)
    speeds = []
    ts = np.linspace(-1.0, 1.0, 81)
    orbit = [sys.flow(x0, float(t)) for t in ts]
    for q in orbit:
        speeds.append(float(np.linalg.norm(sys.velocity(q))))
    s_min = min(speeds)
    if s_min <= 0.0:
        raise InjectivityError("flow speed vanishes on the chart orbit segment")

    def self_intersects(r: float) -> bool:
        # pairs of orbit points far apart in time but close in space
        min_sep_time = 4.0 * r / s_min
        for a in range(len(ts)):
            for b in range(a + 1, len(ts)):
                if ts[b] - ts[a] < min_sep_time:
                    continue
                if np.linalg.norm(orbit[b] - orbit[a]) < 2.0 * r:
                    return True
        return False

    lo, hi = 0.0, cap
    if not self_intersects(hi):
        return hi
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if self_intersects(mid):
            hi = mid
        else:
            lo = mid
    return lo


@dataclass(frozen=True)
class FlowboxChart:
    """Volume-preserving chart rectifying the flow near a non-periodic point.

    ``Phi`` maps chart coordinates (x1, w) with x1 in [-1, 1] and w in the
    transverse ball to phase space by flowing the transverse image for time
    x1/lam; ``Psi`` inverts it on the flowbox.  ``d_phi``/``d_psi`` are the
    exact Jacobians (via the variational flow), ``push_velocity`` returns
    DPsi.X = lam * e1 (equal to e1 for unit-speed systems, where lam = 1).
    """

    center: object
    radius: float
    lam: float
    frame: np.ndarray  # (n, n-1) oriented transverse frame
    moser: MoserMap
    system: object

    # -- coordinate helpers -------------------------------------------------
    def _section_point(self, v: np.ndarray):
        if isinstance(self.system, SuspensionFlow):
            base = (self.center.base + self.frame[:3, :] @ v) % 1.0
            return PhasePoint(base, self.center.height)
        return np.asarray(self.center, dtype=float) + self.frame @ v

    def Phi(self, coords):
        """Chart-to-phase map."""
        coords = np.asarray(coords, dtype=float)
        x1, w = float(coords[0]), coords[1:]
        v = np.asarray(self.moser.phi(w), dtype=float)
        return self.system.flow(self._section_point(v), x1 / self.lam)

    def d_phi(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        x1, w = float(coords[0]), coords[1:]
        v = np.asarray(self.moser.phi(w), dtype=float)
        jac_w = np.asarray(self.moser.phi_jacobian(w), dtype=float)
        q0 = self._section_point(v)
        end, dflow = self.system.tangent_flow(q0, x1 / self.lam)
        col0 = np.asarray(self.system.velocity(end), dtype=float) / self.lam
        cols = dflow @ (self.frame @ jac_w)
        return np.column_stack([col0, cols])

    def det_dphi(self, coords) -> float:
        return float(np.linalg.det(self.d_phi(coords)))

    def Psi(self, point) -> np.ndarray:
        """Phase-to-chart map; raises if the point is outside the flowbox."""
        if isinstance(self.system, SuspensionFlow):
            return self._psi_suspension(point)
        return self._psi_newton(point)

    def d_psi(self, point) -> np.ndarray:
        return np.linalg.inv(self.d_phi(self.Psi(point)))

    def push_velocity(self, point) -> np.ndarray:
        """DPsi.X at a point of the flowbox (= lam * e1 for exact charts)."""
        coords = self.Psi(point)
        x = np.asarray(self.system.velocity(point), dtype=float)
        return np.linalg.solve(self.d_phi(coords), x)

    # -- inversion ------------------------------------------------------------
    def _psi_suspension(self, q: PhasePoint) -> np.ndarray:
        p = self.center
        sysf = self.system
        base_frame = self.frame[:3, :]
        found = []
        for k in (-1, 0, 1):
            s = (q.height - p.height) + k
            if abs(s) > 1.0 / self.lam + 1e-12:
                continue
            base_sec = sysf.base_step(q.base, -k)
            w_raw = base_frame.T @ wrap_torus(base_sec - p.base)
            if float(np.linalg.norm(w_raw)) <= self.radius * (1.0 + 1e-12):
                found.append((self.lam * s, w_raw))
        if not found:
            raise ChartDomainError(
                "point is outside the flowbox of this chart"
            )
        if len(found) > 1:
            raise InjectivityError(
                "point has multiple chart preimages (flowbox self-overlap "
                "at the extreme time fibers)"
            )
        x1, w_raw = found[0]
        w = _invert_transverse(self.moser, w_raw)
        return np.concatenate([[x1], w])

    def _psi_newton(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        p = np.asarray(self.center, dtype=float)
        v = np.asarray(self.system.velocity(p), dtype=float)
        speed = float(np.linalg.norm(v))
        d = q - p
        x = np.concatenate([
            [self.lam * float(v @ d) / speed**2],
            self.frame.T @ d,
        ])
        scale = max(1.0, float(np.linalg.norm(q)))
        for _ in range(60):
            err = q - np.asarray(self.Phi(x), dtype=float)
            if float(np.linalg.norm(err)) <= 1e-12 * scale:
                break
            x = x + np.linalg.solve(self.d_phi(x), err)
        else:
            raise ChartDomainError("chart inversion did not converge")
        if abs(x[0]) > 1.0 + 1e-9 or np.linalg.norm(x[1:]) > self.radius * (
            1.0 + 1e-9
        ):
            raise ChartDomainError("point is outside the flowbox of this chart")
        return x

    def to_json_dict(self) -> dict:
        return {
            "center": (
                self.center.to_json_dict()
                if isinstance(self.center, PhasePoint)
                else [float(v) for v in np.asarray(self.center).ravel()]
            ),
            "radius": float(self.radius),
            "lam": float(self.lam),
            "frame": self.frame.tolist(),
        }


def _invert_transverse(moser: MoserMap, y: np.ndarray) -> np.ndarray:
    if moser.phi_inverse is not None:
        return np.asarray(moser.phi_inverse(y), dtype=float)
    w = np.asarray(y, dtype=float).copy()
    for _ in range(50):
        f = np.asarray(moser.phi(w), dtype=float) - y
        if float(np.linalg.norm(f)) <= 1e-13:
            return w
        w = w - np.linalg.solve(np.asarray(moser.phi_jacobian(w)), f)
    raise ChartDomainError("transverse map inversion did not converge")


def build_chart(sys, p, r: float, moser: MoserMap) -> FlowboxChart:
    """Assemble and validate the volume-preserving rectifying chart at p.

    Checks, in order: the transverse solver matches the chart dimension and
    radius; p is non-periodic over the chart's time horizon; r does not
    exceed the flowbox injectivity radius; and the chart's first-derivative
    distortion over the forward window stays in [1/2, 2].
    """
    n = sys.tangent_dimension
    if moser.dim != n - 1:
        raise CentralShiftError(
            f"transverse map dimension {moser.dim} != {n - 1}"
        )
    if abs(moser.radius - r) > 1e-9 * max(1.0, r):
        raise CentralShiftError(
            f"transverse map radius {moser.radius!r} does not match chart "
            f"radius {r!r}"
        )
    if not is_nonperiodic_sample(sys, p, horizon=1.0):
        raise InjectivityError("chart center is periodic within the horizon")
    r0 = injectivity_radius(sys, p)
    if r > r0 + 1e-12:
        raise InjectivityError(
            f"radius {r!r} exceeds the injectivity radius {r0!r} at this point"
        )
    chart = FlowboxChart(
        center=p, radius=float(r), lam=float(moser.lam),
        frame=_chart_frame(sys, p), moser=moser, system=sys,
    )
    _check_distortion(chart)
    return chart


def _check_distortion(chart: FlowboxChart, samples: int = 64) -> None:
    """Sampled first-derivative distortion over the forward window in [1/2, 2]."""
    rng = np.random.default_rng(0)
    n_trans = chart.frame.shape[1]
    worst_lo, worst_hi = np.inf, 0.0
    for _ in range(samples):
        x1 = float(rng.uniform(0.0, 0.999))
        w = rng.standard_normal(n_trans)
        w *= rng.uniform(0.0, 0.98) * chart.radius / np.linalg.norm(w)
        sv = np.linalg.svd(chart.d_phi(np.concatenate([[x1], w])),
                           compute_uv=False)
        worst_lo = min(worst_lo, float(sv[-1]))
        worst_hi = max(worst_hi, float(sv[0]))
    if worst_lo < 0.5 - 1e-9 or worst_hi > 2.0 + 1e-9:
        raise InjectivityError(
            f"chart distortion [{worst_lo:.3f}, {worst_hi:.3f}] leaves [1/2, 2]"
        )


# ---------------------------------------------------------------------------
# Chart fixtures (sampled grids for regression tests)
# ---------------------------------------------------------------------------


def chart_fixture(chart: FlowboxChart, n_samples: int = 64, seed: int = 0) -> dict:
    """Sample the chart into arrays: coords, image points, determinants."""
    rng = np.random.default_rng(seed)
    n_trans = chart.frame.shape[1]
    coords = np.empty((n_samples, n_trans + 1))
    points = np.empty((n_samples, chart.frame.shape[0]))
    dets = np.empty(n_samples)
    for i in range(n_samples):
        x1 = float(rng.uniform(-1.0, 1.0))
        w = rng.standard_normal(n_trans)
        w *= rng.uniform(0.0, 0.98) * chart.radius / np.linalg.norm(w)
        c = np.concatenate([[x1], w])
        coords[i] = c
        img = chart.Phi(c)
        points[i] = (
            img.as_array() if isinstance(img, PhasePoint) else np.asarray(img)
        )
        dets[i] = chart.det_dphi(c)
    return {
        "meta": {**chart.to_json_dict(), "n_samples": n_samples, "seed": seed},
        "coords": coords,
        "points": points,
        "dets": dets,
    }


def save_chart_fixture(fixture: dict, path_stem: str) -> None:
    """Write ``<stem>.json`` (metadata) and ``<stem>.npz`` (arrays)."""
    with open(path_stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(fixture["meta"], fh, indent=2, sort_keys=True)
    np.savez(
        path_stem + ".npz",
        coords=fixture["coords"],
        points=fixture["points"],
        dets=fixture["dets"],
    )


def load_chart_fixture(path_stem: str) -> dict:
    with open(path_stem + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    arrays = np.load(path_stem + ".npz")
    return {
        "meta": meta,
        "coords": arrays["coords"],
        "points": arrays["points"],
        "dets": arrays["dets"],
    }


def verify_chart_fixture(chart: FlowboxChart, fixture: dict,
                         tol: float = 1e-9) -> dict:
    """Re-evaluate the chart on a fixture's samples; raise on drift."""
    worst_point, worst_det = 0.0, 0.0
    for c, pt, det in zip(fixture["coords"], fixture["points"], fixture["dets"]):
        img = chart.Phi(c)
        arr = img.as_array() if isinstance(img, PhasePoint) else np.asarray(img)
        if isinstance(img, PhasePoint):
            gap_base = float(
                np.max(np.abs(wrap_torus(arr[:3] - np.asarray(pt)[:3])))
            )
            dh = abs(arr[3] - pt[3])
            gap = max(gap_base, min(dh, 1.0 - dh))
        else:
            gap = float(np.max(np.abs(arr - pt)))
        worst_point = max(worst_point, gap)
        worst_det = max(worst_det, abs(chart.det_dphi(c) - det))
    report = {"max_point_gap": worst_point, "max_det_gap": worst_det}
    if worst_point > tol or worst_det > tol:
        raise CentralShiftError(f"chart fixture drift: {report}")
    return report
