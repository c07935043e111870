"""Total-variation difference imaging by a primal-dual interior-point method.

Minimizes ``||J x - d||^2 + lam * sum_k w_k |x_i - x_j|`` over element
changes ``x``.  The absolute value is smoothed as ``sqrt(t^2 + beta)`` with
beta halved every iteration down to its floor; the dual variables
``y_k ~ t_k / |t_k|`` are projected back onto ``[-1, 1]`` after each step.  Each Newton
system ``2 J^T J + lam L^T E^-1 K L`` is a sparse graph Laplacian plus a
rank-``n_channels`` term, solved with one sparse factorization and the
Woodbury identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, NonFiniteIterate
from .forward import (ConductivityField, DrivePattern, MeasurementFrame, SensitivityMatrix,
                      compute_jacobian, solve_forward)
from .linear import ConductivityImage, check_frames, difference_data
from .mesh import AnnularMesh, ProbeSpec


@dataclass(frozen=True)
class TvConfig:
    """Hyperparameters; ``tv_lambda`` and both betas are dimensionless.

    The problem is solved after normalizing ``J`` and ``d`` to unit norm and
    the edge weights to unit mean, with TV weight ``tv_lambda / n_edges``.
    Reconstructions are therefore proportional to the data and unchanged by
    a uniform rescaling of the geometry.  ``beta`` is the smoothing floor,
    reached from ``beta_start`` by factors of ``beta_factor``.
    """

    tv_lambda: float = 30.0
    beta: float = 1e-5
    beta_start: float = 1e-2
    beta_factor: float = 0.5
    max_iters: int = 50
    duality_gap_tol: float = 1e-4
    line_search_shrink: float = 0.5
    line_search_max: int = 30
    relinearize: bool = False
    anchor_outer: bool = True

    def __post_init__(self):
        if not self.tv_lambda > 0:
            raise ValueError("tv_lambda must be positive")
        if not 0 < self.line_search_shrink < 1:
            raise ValueError("line_search_shrink must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.beta <= self.beta_start:
            raise ValueError("need 0 < beta <= beta_start")
        if not 0 < self.beta_factor <= 1:
            raise ValueError("beta_factor must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class PdipmResult:
    image: ConductivityImage
    iterations: int
    duality_gap: float
    converged: bool
    flags: tuple = ()
    log: list = field(default_factory=list, repr=False)


def build_edge_operator(mesh: AnnularMesh) -> sp.csr_matrix:
    """One row per interior adjacency: ``+w`` and ``-w`` with ``w`` the shared edge length."""
    pairs, w = mesh.adjacency
    m = len(pairs)
    rows = np.repeat(np.arange(m), 2)
    cols = pairs.ravel()
    data = np.column_stack([w, -w]).ravel()
    return sp.csr_matrix((data, (rows, cols)), shape=(m, mesh.n_elements))


def outer_boundary_operator(mesh: AnnularMesh) -> sp.csr_matrix:
    """One row ``+w`` per element edge on the outer circle.

    Appended to the edge operator it charges the jump to the background
    value (zero change) across the far boundary, so a uniform offset is no
    longer free of total variation.
    """
    el = mesh.elements
    e = np.concatenate([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]])
    owner = np.tile(np.arange(len(el)), 3)
    r = np.hypot(mesh.nodes[:, 0], mesh.nodes[:, 1])
    tol = 1e-9 * mesh.outer_radius
    on = (np.abs(r[e[:, 0]] - mesh.outer_radius) < tol) & (np.abs(r[e[:, 1]] - mesh.outer_radius) < tol)
    e, owner = e[on], owner[on]
    w = np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    return sp.csr_matrix((w, (np.arange(len(w)), owner)), shape=(len(w), mesh.n_elements))


def tv_operator(mesh: AnnularMesh, anchor_outer: bool = True) -> sp.csr_matrix:
    L = build_edge_operator(mesh)
    if anchor_outer:
        L = sp.vstack([L, outer_boundary_operator(mesh)]).tocsr()
    return L


def tv_objective(J: np.ndarray, d: np.ndarray, L, lam: float, x: np.ndarray) -> float:
    r = J @ x - d
    return float(r @ r + lam * np.abs(L @ x).sum())


def _smoothed(J, d, L, lam, beta, x):
    r = J @ x - d
    return float(r @ r + lam * np.sqrt((L @ x) ** 2 + beta).sum())


def _newton_direction(J, L, lam, x, y, eta, grad):
    """Solve ``(2 J^T J + lam L^T E^-1 K L + delta I) dx = -grad``.

    ``delta`` (1e-8 of the mean Laplacian diagonal) only lifts the constant
    null vector of the sparse part so it can be factorized; the full matrix
    is already definite through ``J``.
    """
    t = L @ x
    k = 1.0 - y * t / eta
    S = (lam * (L.T @ sp.diags(k / eta) @ L)).tocsc()
    delta = 1e-8 * float(S.diagonal().mean())
    S = (S + delta * sp.identity(S.shape[0], format="csc")).tocsc()
    lu = spla.splu(S)
    SJt = lu.solve(np.asfortranarray(J.T))
    Sg = lu.solve(grad)
    C = 0.5 * np.eye(J.shape[0]) + J @ SJt
    C = 0.5 * (C + C.T)
    corr = SJt @ la.solve(C, J @ Sg, assume_a="sym")
    return -(Sg - corr)


def reconstruct_pdipm(J: SensitivityMatrix, v_meas: MeasurementFrame, v_ref: MeasurementFrame,
                      cfg: TvConfig = TvConfig(), mesh: AnnularMesh | None = None,
                      probe: ProbeSpec | None = None, pattern: DrivePattern | None = None,
                      L=None) -> PdipmResult:
    """TV-regularized difference reconstruction.

    ``mesh`` is required for the edge operator unless ``L`` is given;
    ``probe`` and ``pattern`` are only needed with ``cfg.relinearize``.
    The iteration runs on ``x / (||d|| / ||J||_F)`` with data and Jacobian
    normalized to unit norm and edge weights to unit mean; the log reports
    the objective of the normalized problem.
    """
    check_frames(J.valid_mask, v_meas, v_ref)
    A = np.asarray(J.entries, dtype=float)
    d = difference_data(v_meas, v_ref)
    if A.shape[0] != d.shape[0]:
        raise DimensionMismatch("Jacobian rows differ from the valid channel count")
    if L is None:
        if mesh is None:
            raise ValueError("reconstruct_pdipm needs the mesh or an edge operator")
        L = tv_operator(mesh, cfg.anchor_outer)
    n = A.shape[1]
    if L.shape[1] != n:
        raise DimensionMismatch("edge operator does not match the Jacobian")
    if cfg.relinearize and (mesh is None or probe is None or pattern is None):
        raise ValueError("relinearize needs mesh, probe and pattern")
    mesh_id = J.reference_field.mesh_id
    dn = float(np.linalg.norm(d))
    jn = float(np.linalg.norm(A))
    if dn == 0.0:
        zero = ConductivityImage(np.zeros(n), mesh_id)
        return PdipmResult(zero, 0, 0.0, True, (), [(0, 0.0, 0.0, 0.0, 0.0, 0.0)])
    w = np.abs(L).sum(axis=1).A1 / 2.0
    Ls = (L / w.mean()).tocsr()
    lam = cfg.tv_lambda / L.shape[0]
    xs = dn / jn  # physical units per normalized unit
    Jn, dd = A / jn, d / dn
    beta = cfg.beta_start
    sigma_ref = J.reference_field.values

    x = np.zeros(n)
    y = np.zeros(L.shape[0])
    Jk, dk = Jn, dd
    best_x, best_f = x.copy(), tv_objective(Jn, dd, Ls, lam, x)
    log = [(0, best_f, float("nan"), beta, 0.0, 0.0)]
    flags = []
    gap = float("inf")
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if cfg.relinearize and it > 1:
            sigma = np.maximum(sigma_ref + x * xs, 1e-6 * sigma_ref)
            field_now = ConductivityField(sigma, mesh_id)
            Jk = compute_jacobian(mesh, field_now, pattern, probe).entries / jn
            v_now = solve_forward(mesh, field_now, pattern, probe).valid
            # model around x: Jk (x' - x) ~ (v_meas - v(x)) / ||d||
            dk = (v_meas.valid - v_now) / dn + Jk @ x
        t = Ls @ x
        eta = np.sqrt(t * t + beta)
        grad = 2.0 * Jk.T @ (Jk @ x - dk) + lam * (Ls.T @ (t / eta))
        dx = _newton_direction(Jk, Ls, lam, x, y, eta, grad)
        dy = -y + t / eta + (1.0 - y * t / eta) / eta * (Ls @ dx)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise NonFiniteIterate(f"non-finite Newton step at iteration {it}")

        f0 = _smoothed(Jk, dk, Ls, lam, beta, x)
        step = 1.0
        for _ in range(cfg.line_search_max):
            if _smoothed(Jk, dk, Ls, lam, beta, x + step * dx) <= f0:
                break
            step *= cfg.line_search_shrink
        else:
            step = 0.0
        y = np.clip(y + dy, -1.0, 1.0)
        if step == 0.0:
            flags.append("line_search_stall")
            break
        x = x + step * dx

        f = tv_objective(Jk, dk, Ls, lam, x)
        if f < best_f:
            best_f, best_x = f, x.copy()
        t = Ls @ x
        # conjugate of sqrt(t^2 + beta) gives the gap of the smoothed problem
        eta = np.sqrt(t * t + beta)
        gap = float(lam * (eta - y * t - np.sqrt(beta * (1.0 - y * y))).sum()) / max(f, 1e-300)
        log.append((it, f, gap, beta, step, float(np.abs(y).max(initial=0.0))))
        if beta <= cfg.beta and gap < cfg.duality_gap_tol:
            converged = True
            break
        beta = max(beta * cfg.beta_factor, cfg.beta)
    if not converged and "line_search_stall" not in flags:
        flags.append("max_iters")
    return PdipmResult(ConductivityImage(best_x * xs, mesh_id), it, gap, converged,
                       tuple(flags), log)


def write_convergence_log(result: PdipmResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "duality_gap", "beta", "step", "max_abs_dual"])
        for row in result.log:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
