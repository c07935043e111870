"""Complete-electrode-model forward solver and adjoint Jacobian.

The 2-D slab is modelled per unit depth (1 m): bulk stiffness is
``sigma * int(grad phi_i . grad phi_j)``, electrode terms use edge lengths in
metres against a contact impedance in ohm*m, so every block is in siemens.
Unknowns are ``[u (nodes); U (electrodes)]``.  The electrode potentials are
grounded to zero mean by adding ``alpha * e e^T`` on the electrode block,
which leaves solutions with ``sum(U) = 0`` untouched and removes the constant
null vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, SingularSystem
from .mesh import AnnularMesh, ProbeSpec

MM = 1e-3


@dataclass(frozen=True)
class ConductivityField:
    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, mesh: AnnularMesh, sigma: float = 1.0) -> "ConductivityField":
        return cls(np.full(mesh.n_elements, float(sigma)), mesh.mesh_id)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DrivePattern:
    """Adjacent injections ``(i, i+1)`` and adjacent measurement pairs."""

    injections: tuple
    measurements: tuple
    amplitude: float = 1.0  # mA

    @classmethod
    def adjacent(cls, n_electrodes: int = 8, amplitude: float = 1.0) -> "DrivePattern":
        pairs = tuple((i, (i + 1) % n_electrodes) for i in range(n_electrodes))
        return cls(pairs, pairs, amplitude)

    @property
    def n_channels(self) -> int:
        return len(self.injections) * len(self.measurements)

    @property
    def valid_mask(self) -> np.ndarray:
        """True for channels whose measuring pair avoids both injecting electrodes."""
        mask = [not ({a, b} & {s, t}) for s, t in self.injections for a, b in self.measurements]
        return np.array(mask, dtype=bool)

    def channel_labels(self) -> list[str]:
        return [f"{p}{q}" for p in range(len(self.injections)) for q in range(len(self.measurements))]


@dataclass(frozen=True)
class MeasurementFrame:
    """All channels of one drive cycle, injection-major; invalid ones masked."""

    voltages: np.ndarray
    valid_mask: np.ndarray
    amplitude: float = 1.0

    def __post_init__(self):
        v = np.array(self.voltages, dtype=float)
        m = np.array(self.valid_mask, dtype=bool)
        if v.shape != m.shape:
            raise DimensionMismatch("voltages and mask differ in length")
        v.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "valid_mask", m)

    @property
    def valid(self) -> np.ndarray:
        return self.voltages[self.valid_mask]

    def __len__(self):
        return len(self.voltages)


@dataclass(frozen=True)
class SensitivityMatrix:
    entries: np.ndarray
    reference_field: ConductivityField
    valid_mask: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    """Nodal and electrode potentials for every injection (columns)."""

    node_potentials: np.ndarray
    electrode_potentials: np.ndarray
    frame: MeasurementFrame


def _local_gradients(mesh: AnnularMesh):
    p = mesh.nodes[mesh.elements]
    x, y = p[..., 0], p[..., 1]
    area2 = 2.0 * mesh.element_areas
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / area2[:, None]
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / area2[:, None]
    return b, c


def element_gradients(mesh: AnnularMesh, u: np.ndarray) -> np.ndarray:
    """Constant gradient of a P1 field on every element; ``u`` may be (n,) or (n, k)."""
    b, c = _local_gradients(mesh)
    ue = u[mesh.elements]
    if ue.ndim == 2:
        return np.stack([(b * ue).sum(1), (c * ue).sum(1)], axis=-1)
    return np.stack([np.einsum("ej,ejk->ek", b, ue), np.einsum("ej,ejk->ek", c, ue)], axis=-1)


def stiffness_blocks(mesh: AnnularMesh) -> np.ndarray:
    """Unit-conductivity local stiffness matrices, shape (n_elements, 3, 3)."""
    b, c = _local_gradients(mesh)
    a = mesh.element_areas[:, None, None]
    return a * (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])


def _check_sigma(mesh, sigma):
    values = sigma.values if isinstance(sigma, ConductivityField) else np.asarray(sigma, float)
    if values.shape != (mesh.n_elements,):
        raise DimensionMismatch(f"conductivity has {values.size} entries, mesh has "
                                f"{mesh.n_elements} elements")
    return values


def assemble_system(mesh: AnnularMesh, sigma, probe: ProbeSpec, grounded: bool = True):
    """Assemble the CEM system matrix (CSC, size n_nodes + n_electrodes).

    With ``grounded=False`` the raw singular matrix is returned; its null space
    is the constant vector over nodes and electrodes.
    """
    values = _check_sigma(mesh, sigma)
    n, L = mesh.n_nodes, mesh.n_electrodes
    ke = stiffness_blocks(mesh) * values[:, None, None]
    el = mesh.elements
    rows = [np.repeat(el, 3, axis=1).ravel()]
    cols = [np.tile(el, (1, 3)).ravel()]
    data = [ke.ravel()]

    z = probe.contact_impedance
    for l, edges in enumerate(mesh.electrode_edges):
        h = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1) * MM
        i, j = edges[:, 0], edges[:, 1]
        el_idx = np.full_like(i, n + l)
        # int(phi_a phi_b)/z on the edge, then -int(phi_a)/z couplings
        rows += [i, j, i, j, i, j, el_idx, el_idx, np.array([n + l])]
        cols += [i, j, j, i, el_idx, el_idx, i, j, np.array([n + l])]
        data += [h / (3 * z), h / (3 * z), h / (6 * z), h / (6 * z),
                 -h / (2 * z), -h / (2 * z), -h / (2 * z), -h / (2 * z),
                 np.array([h.sum() / z])]
    A = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n + L, n + L)).tocsc()
    if grounded:
        alpha = A.diagonal()[n:].mean()
        e = np.arange(n, n + L)
        G = sp.coo_matrix((np.full(L * L, alpha), (np.repeat(e, L), np.tile(e, L))),
                          shape=(n + L, n + L))
        A = (A + G).tocsc()
    return A


def _factorize(A):
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:  # exactly singular
        raise SingularSystem(str(exc)) from exc
    return lu


def current_matrix(mesh: AnnularMesh, pattern: DrivePattern) -> np.ndarray:
    """Right-hand sides, one column per injection (currents in A)."""
    n, L = mesh.n_nodes, mesh.n_electrodes
    B = np.zeros((n + L, len(pattern.injections)))
    amp = pattern.amplitude * MM
    for k, (s, t) in enumerate(pattern.injections):
        B[n + s, k] = amp
        B[n + t, k] = -amp
    return B


def _frame(U, pattern):
    v = np.array([[U[a, k] - U[b, k] for a, b in pattern.measurements]
                  for k in range(len(pattern.injections))])
    return MeasurementFrame(v.ravel(), pattern.valid_mask, pattern.amplitude)


def _validate(mesh, sigma, pattern, probe):
    values = _check_sigma(mesh, sigma)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise SingularSystem("conductivity must be strictly positive and finite")
    if probe.electrode_count != mesh.n_electrodes:
        raise DimensionMismatch("probe and mesh disagree on electrode count")
    top = max(max(p) for p in pattern.injections + pattern.measurements)
    if top >= probe.electrode_count:
        raise DimensionMismatch("drive pattern references a missing electrode")
    return values


def solve_potentials(mesh: AnnularMesh, sigma, pattern: DrivePattern,
                     probe: ProbeSpec) -> ForwardSolution:
    """Solve every injection with a single factorization."""
    _validate(mesh, sigma, pattern, probe)
    A = assemble_system(mesh, sigma, probe)
    lu = _factorize(A)
    X = lu.solve(current_matrix(mesh, pattern))
    if not np.all(np.isfinite(X)):
        raise SingularSystem("non-finite potentials")
    n = mesh.n_nodes
    return ForwardSolution(X[:n], X[n:], _frame(X[n:], pattern))


def solve_forward(mesh: AnnularMesh, sigma, pattern: DrivePattern,
                  probe: ProbeSpec) -> MeasurementFrame:
    return solve_potentials(mesh, sigma, pattern, probe).frame


def electrode_currents(mesh: AnnularMesh, probe: ProbeSpec, sol: ForwardSolution) -> np.ndarray:
    """Current (A) entering the body through each electrode, per injection.

    Evaluated from the contact law ``I_l = (1/z) int_{e_l} (U_l - u) ds``.
    """
    z = probe.contact_impedance
    out = np.zeros((mesh.n_electrodes, sol.node_potentials.shape[1]))
    for l, edges in enumerate(mesh.electrode_edges):
        h = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1) * MM
        u_mean = 0.5 * (sol.node_potentials[edges[:, 0]] + sol.node_potentials[edges[:, 1]])
        out[l] = (h[:, None] * (sol.electrode_potentials[l] - u_mean)).sum(0) / z
    return out


def jacobian_from_solution(mesh: AnnularMesh, sol: ForwardSolution,
                           pattern: DrivePattern) -> np.ndarray:
    """Full (n_channels, n_elements) Jacobian by the adjoint identity.

    For adjacent drive the adjoint field of measuring pair q is the forward
    field of injection q divided by the amplitude, so no extra solves are
    needed: dV_pq / dsigma_e = -area_e * grad u_p . grad u_q / I.
    """
    if pattern.injections != pattern.measurements:
        raise ValueError("adjoint shortcut requires measurement pairs equal to injections")
    grads = element_gradients(mesh, sol.node_potentials)  # (m, k, 2)
    amp = pattern.amplitude * MM
    k = grads.shape[1]
    J = -np.einsum("epd,eqd->pqe", grads, grads) * (mesh.element_areas / amp)
    return J.reshape(k * k, mesh.n_elements)


def compute_jacobian(mesh: AnnularMesh, sigma0, pattern: DrivePattern,
                     probe: ProbeSpec) -> SensitivityMatrix:
    sol = solve_potentials(mesh, sigma0, pattern, probe)
    J = jacobian_from_solution(mesh, sol, pattern)
    field = sigma0 if isinstance(sigma0, ConductivityField) else ConductivityField(sigma0, mesh.mesh_id)
    mask = pattern.valid_mask
    return SensitivityMatrix(J[mask], field, mask)


def frame_columns(n_injections: int = 8, n_measurements: int = 8):
    volts = [f"v{p}{q}" for p in range(n_injections) for q in range(n_measurements)]
    masks = [f"m{p}{q}" for p in range(n_injections) for q in range(n_measurements)]
    return volts, masks


def write_frames(frames, path, n_electrodes: int = 8) -> None:
    """CSV: one row per frame, ``v00..v77``, ``m00..m77``, ``amplitude``."""
    volts, masks = frame_columns(n_electrodes, n_electrodes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(volts + masks + ["amplitude"])
        for f in frames:
            w.writerow([repr(float(x)) for x in f.voltages]
                       + [int(b) for b in f.valid_mask] + [repr(float(f.amplitude))])


def read_frames(path) -> list[MeasurementFrame]:
    with open(Path(path), newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        n = sum(1 for h in head if h.startswith("v"))
        frames = []
        for row in r:
            frames.append(MeasurementFrame([float(x) for x in row[:n]],
                                           [bool(int(x)) for x in row[n:2 * n]],
                                           float(row[2 * n])))
    return frames
