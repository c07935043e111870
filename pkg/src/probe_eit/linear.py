"""One-step Gauss-Newton difference imaging."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, MaskMismatch, SingularRegularizedSystem
from .forward import ConductivityField, MeasurementFrame, SensitivityMatrix
from .mesh import AnnularMesh

PRIOR_KINDS = ("identity", "laplacian", "noser")


@dataclass(frozen=True)
class RegularizationPrior:
    """Prior kind and hyperparameter.

    ``lam=None`` selects ``lam**2 = lambda_factor * trace(J P^-1 J^T) / n_channels``,
    i.e. a fixed fraction of the mean eigenvalue of the data-space matrix, which
    keeps the amount of smoothing independent of units and of the prior's scale.

    The ``noser`` kind is ``diag(J^T J)**exponent * area**(1 - 2*exponent)``;
    the area factor makes it independent of the element size (exponent 0.5 is
    the classic square-root NOSER weighting).
    """

    kind: str = "noser"
    lam: float | None = None
    lambda_factor: float = 1e-4
    exponent: float = 0.125

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.kind!r}; expected one of {PRIOR_KINDS}")
        if self.lam is not None and (self.lam < 0 or not np.isfinite(self.lam)):
            raise ValueError("lambda must be finite and non-negative")
        if self.lambda_factor <= 0:
            raise ValueError("lambda_factor must be positive")


@dataclass(frozen=True)
class ConductivityImage:
    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def absolute(self, reference: ConductivityField) -> np.ndarray:
        return reference.values + self.values


@dataclass(frozen=True, eq=False)
class ReconstructionMatrix:
    entries: np.ndarray  # (n_elements, n_valid)
    prior: RegularizationPrior
    lam: float
    reference_field: ConductivityField
    valid_mask: np.ndarray

    @property
    def shape(self):
        return self.entries.shape


def laplacian_matrix(mesh: AnnularMesh) -> sp.csr_matrix:
    """Graph Laplacian of the element adjacency (unit weights)."""
    pairs, _ = mesh.adjacency
    m = len(pairs)
    D = sp.coo_matrix((np.r_[np.ones(m), -np.ones(m)],
                       (np.r_[np.arange(m), np.arange(m)], np.r_[pairs[:, 0], pairs[:, 1]])),
                      shape=(m, mesh.n_elements)).tocsr()
    return (D.T @ D).tocsr()


def prior_matrix(kind: str, J: np.ndarray, mesh: AnnularMesh | None = None,
                 exponent: float = 0.125):
    n = J.shape[1]
    if kind == "identity":
        return sp.identity(n, format="csc")
    if mesh is None:
        raise ValueError(f"{kind} prior needs the mesh")
    if mesh.n_elements != n:
        raise DimensionMismatch("Jacobian columns do not match the mesh")
    if kind == "noser":
        d = np.einsum("ij,ij->j", J, J)
        area = mesh.element_areas
        return sp.diags(d ** exponent * area ** (1.0 - 2.0 * exponent), format="csc")
    L = laplacian_matrix(mesh)
    # small ridge fixes the constant null vector so P can be factorized
    eps = 1e-6 * L.diagonal().mean()
    return (L + eps * sp.identity(n)).tocsc()


def build_reconstruction_matrix(J: SensitivityMatrix, prior: RegularizationPrior,
                                mesh: AnnularMesh | None = None) -> ReconstructionMatrix:
    """R = (J^T J + lam^2 P)^-1 J^T, evaluated as P^-1 J^T (J P^-1 J^T + lam^2 I)^-1.

    The push-through form only factorizes the sparse prior and a
    channels-by-channels matrix, never the dense elements-by-elements one.
    """
    A = np.asarray(J.entries, dtype=float)
    n_ch, n = A.shape
    P = prior_matrix(prior.kind, A, mesh, prior.exponent)
    diagP = P.diagonal()
    if np.any(diagP <= 0) or not np.all(np.isfinite(diagP)):
        raise SingularRegularizedSystem("prior has a zero or non-finite diagonal entry")
    if prior.kind == "laplacian":
        PinvJt = spla.splu(P).solve(np.asfortranarray(A.T))
    else:
        PinvJt = A.T / diagP[:, None]
    M = A @ PinvJt
    if prior.lam is None:
        lam2 = prior.lambda_factor * np.trace(M) / n_ch
    else:
        lam2 = prior.lam ** 2
    M[np.diag_indices(n_ch)] += lam2
    try:
        c, low = la.cho_factor(M)
        rcond = 1.0 / np.linalg.cond(M)
    except la.LinAlgError as exc:
        raise SingularRegularizedSystem(str(exc)) from exc
    if rcond < 1e-15:
        raise SingularRegularizedSystem(f"regularized normal matrix has rcond {rcond:.1e}")
    R = la.cho_solve((c, low), PinvJt.T).T
    return ReconstructionMatrix(np.ascontiguousarray(R), prior, float(np.sqrt(lam2)),
                                J.reference_field, J.valid_mask)


def check_frames(R_mask, v_meas: MeasurementFrame, v_ref: MeasurementFrame):
    if v_meas.voltages.shape != v_ref.voltages.shape or not np.array_equal(
            v_meas.valid_mask, v_ref.valid_mask):
        raise MaskMismatch("measurement and reference frames differ in channel layout")
    if v_meas.amplitude != v_ref.amplitude:
        raise MaskMismatch("measurement and reference frames use different amplitudes")
    if R_mask is not None and not np.array_equal(R_mask, v_meas.valid_mask):
        raise MaskMismatch("frame mask does not match the reconstruction matrix")


def difference_data(v_meas: MeasurementFrame, v_ref: MeasurementFrame) -> np.ndarray:
    return v_meas.voltages[v_meas.valid_mask] - v_ref.voltages[v_ref.valid_mask]


def reconstruct_gn(R: ReconstructionMatrix, v_meas: MeasurementFrame,
                   v_ref: MeasurementFrame) -> ConductivityImage:
    check_frames(R.valid_mask, v_meas, v_ref)
    dv = difference_data(v_meas, v_ref)
    if dv.shape[0] != R.entries.shape[1]:
        raise DimensionMismatch("valid channel count differs from reconstruction matrix")
    return ConductivityImage(R.entries @ dv, R.reference_field.mesh_id)


def total_variation(mesh: AnnularMesh, values) -> float:
    """Edge-length weighted sum of absolute jumps across element edges."""
    pairs, lengths = mesh.adjacency
    v = np.asarray(values)
    return float(np.sum(lengths * np.abs(v[pairs[:, 0]] - v[pairs[:, 1]])))


def write_image(image: ConductivityImage, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "delta_sigma"])
        for i, v in enumerate(image.values.tolist()):
            w.writerow([i, repr(v)])


def read_image(path, mesh_id: str = "") -> ConductivityImage:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [(int(a), float(b)) for a, b in r]
    values = np.zeros(len(rows))
    for i, v in rows:
        values[i] = v
    return ConductivityImage(values, mesh_id)
