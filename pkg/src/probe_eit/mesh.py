"""Graded annular triangle meshes around a circular multi-electrode probe.

The mesh is built ring by ring: concentric circles whose spacing grows
geometrically away from the probe, each circle carrying an angular node count
that is halved whenever the tangential element size falls well below the
radial one.  Neighbouring circles are stitched with an angular sweep, which
reduces to alternating diagonals when both circles carry the same count.
Node 0..M0-1 always sit on the probe circle, starting at angle zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyRegion, InvalidGeometry

DEFAULT_NODE_BUDGET = 5000
DEFAULT_GRADING = 1.02
TILING_SLACK = 2.5e-3


@dataclass(frozen=True)
class ProbeSpec:
    """Circular probe with equally spaced electrodes.

    ``diameter`` is in mm, ``electrode_arc`` is the fraction of the
    circumference covered by one electrode and ``contact_impedance`` is the
    2-D contact impedance in ohm*m.  Electrode 0 is centred at angle zero.
    """

    diameter: float = 50.0
    electrode_count: int = 8
    electrode_arc: float = 1.0 / 16.0
    contact_impedance: float = 0.1

    def __post_init__(self):
        if not self.diameter > 0:
            raise InvalidGeometry(f"probe diameter must be positive, got {self.diameter}")
        if self.electrode_count < 4:
            raise InvalidGeometry("a probe needs at least 4 electrodes")
        if not 0 < self.electrode_arc or self.electrode_count * self.electrode_arc >= 1.0:
            raise InvalidGeometry("electrode arcs overlap or cover the whole circumference")
        if not self.contact_impedance > 0:
            raise InvalidGeometry("contact impedance must be positive")

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    def scaled(self, factor: float) -> "ProbeSpec":
        # contact impedance scales with length so the electrode boundary layer
        # stays geometrically similar
        return replace(self, diameter=self.diameter * factor,
                       contact_impedance=self.contact_impedance * factor)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AnnularMesh:
    """Triangulated annulus; coordinates in mm, elements counter-clockwise."""

    nodes: np.ndarray
    elements: np.ndarray
    electrode_edges: tuple
    inner_radius: float
    outer_radius: float
    ring_radii: np.ndarray | None = None
    element_areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = _readonly(np.asarray(self.nodes, dtype=float))
        elements = _readonly(np.asarray(self.elements, dtype=np.int64))
        edges = tuple(_readonly(np.asarray(e, dtype=np.int64).reshape(-1, 2))
                      for e in self.electrode_edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "electrode_edges", edges)
        if self.ring_radii is not None:
            object.__setattr__(self, "ring_radii",
                               _readonly(np.asarray(self.ring_radii, dtype=float)))
        object.__setattr__(self, "element_areas", _readonly(signed_areas(nodes, elements)))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_edges)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.nodes[self.elements].mean(axis=1))

    @cached_property
    def centroid_radius(self) -> np.ndarray:
        return _readonly(np.hypot(self.centroids[:, 0], self.centroids[:, 1]))

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha1()
        h.update(self.nodes.tobytes())
        h.update(self.elements.tobytes())
        for e in self.electrode_edges:
            h.update(e.tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def element_ring(self) -> np.ndarray:
        """Radial band index of every element (requires ``ring_radii``)."""
        if self.ring_radii is None:
            raise ValueError("mesh carries no ring structure")
        inner = np.hypot(*self.nodes[self.elements].transpose(2, 0, 1)).min(axis=1)
        idx = np.searchsorted(self.ring_radii, inner * (1 + 1e-9), side="right") - 1
        return _readonly(np.clip(idx, 0, len(self.ring_radii) - 2))

    @cached_property
    def element_diameters(self) -> np.ndarray:
        """Longest edge of every element."""
        p = self.nodes[self.elements]
        d = np.stack([np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)])
        return _readonly(d.max(axis=0))

    @cached_property
    def adjacency(self):
        """Interior element adjacencies as ``(pairs, shared_edge_lengths)``."""
        return interior_adjacency(self)

    def electrode_length(self, l: int) -> float:
        e = self.electrode_edges[l]
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).sum())


@dataclass(frozen=True)
class ReducedIndexSet:
    element_indices: np.ndarray
    cutoff_radius: float

    def __len__(self):
        return len(self.element_indices)


def signed_areas(nodes, elements):
    p = nodes[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def ring_layout(inner_radius, outer_radius, ring_count, grading, angular_count, electrode_count):
    """Circle radii and per-circle angular node counts.

    Ring thicknesses follow ``t_i = t_0 * grading**i`` and sum to the annulus
    width.  Going outward, the node count of the next circle is halved when the
    tangential spacing would be smaller than ``t_i / sqrt(2)`` (halving then
    brings it closer to ``t_i``), at most one halving per ring, and only while
    the count stays a multiple of ``2 * electrode_count`` so the mesh keeps
    the probe's rotational symmetry.  A halving is also skipped when the
    outer polygon would then lose more than ``TILING_SLACK`` of the annulus
    area (coarse outer circles on thin annuli).
    """
    width = outer_radius / inner_radius - 1.0
    if grading == 1.0:
        t = np.full(ring_count, width / ring_count)
    else:
        t0 = width * (grading - 1.0) / (grading ** ring_count - 1.0)
        t = t0 * grading ** np.arange(ring_count)
    rho = 1.0 + np.concatenate([[0.0], np.cumsum(t)])
    rho[-1] = outer_radius / inner_radius
    def deficit(n):
        # relative area a regular n-gon misses from its circumscribed circle
        x = 2 * np.pi / n
        return 1.0 - np.sin(x) / x

    R2 = rho[-1] ** 2
    base = deficit(angular_count)
    counts = [angular_count]
    m = angular_count
    for i in range(ring_count):
        arc = 2 * np.pi * rho[i + 1] / m
        lost = (R2 * deficit(m // 2) - base) / (R2 - 1.0)
        if arc < t[i] / np.sqrt(2) and m % (4 * electrode_count) == 0 and lost <= TILING_SLACK:
            m //= 2
        counts.append(m)
    return rho * inner_radius, np.array(counts)


def _stitch(a0, n1, b0, n2):
    """Triangles between an inner circle (n1 nodes) and an outer one (n2)."""
    tris = []
    i = j = 0
    while i < n1 or j < n2:
        a, an = a0 + i % n1, a0 + (i + 1) % n1
        b, bn = b0 + j % n2, b0 + (j + 1) % n2
        if j == n2:
            inner = True
        elif i == n1:
            inner = False
        else:
            lhs, rhs = (i + 1) * n2, (j + 1) * n1
            inner = lhs < rhs or (lhs == rhs and i % 2 == 0)
        if inner:
            tris.append((a, b, an))
            i += 1
        else:
            tris.append((a, b, bn))
            j += 1
    return tris


def default_angular_count(probe: ProbeSpec) -> int:
    # 16 edges per electrode pitch: two-plus edges per electrode for any arc
    # >= 1/(8N), and room for three halvings before the symmetry floor
    return 16 * probe.electrode_count


def build_mesh(probe: ProbeSpec, outer_radius: float, ring_count: int | None = None,
               grading: float = DEFAULT_GRADING, angular_count: int | None = None,
               node_budget: int = DEFAULT_NODE_BUDGET) -> AnnularMesh:
    """Build a graded annular mesh between the probe and ``outer_radius``.

    When ``ring_count`` is omitted, the smallest ring count whose node total
    reaches ``node_budget`` is used.
    """
    r0 = probe.radius
    if not outer_radius > r0:
        raise InvalidGeometry(f"outer radius {outer_radius} must exceed probe radius {r0}")
    if grading < 1:
        raise InvalidGeometry("grading must be >= 1")
    n_el = probe.electrode_count
    m0 = angular_count or default_angular_count(probe)
    if m0 % (2 * n_el):
        raise InvalidGeometry("angular count must be a multiple of twice the electrode count")
    per_el = max(2, int(round(probe.electrode_arc * m0)))
    if per_el >= m0 // n_el:
        raise InvalidGeometry("electrode arcs overlap at this angular resolution")

    if ring_count is None:
        ring_count = 3
        while True:
            _, counts = ring_layout(r0, outer_radius, ring_count, grading, m0, n_el)
            if counts.sum() >= node_budget or ring_count >= 2000:
                break
            ring_count += 1
    if ring_count < 3:
        raise InvalidGeometry("ring_count must be >= 3")
    radii, counts = ring_layout(r0, outer_radius, ring_count, grading, m0, n_el)

    starts = np.concatenate([[0], np.cumsum(counts)])
    nodes = np.empty((starts[-1], 2))
    for c, (rad, m) in enumerate(zip(radii, counts)):
        theta = 2 * np.pi * np.arange(m) / m
        nodes[starts[c]:starts[c + 1]] = rad * np.column_stack([np.cos(theta), np.sin(theta)])

    tris = []
    for c in range(ring_count):
        tris.extend(_stitch(starts[c], counts[c], starts[c + 1], counts[c + 1]))
    elements = np.array(tris, dtype=np.int64)
    area = signed_areas(nodes, elements)
    flip = area < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]

    edges = []
    for l in range(n_el):
        start = l * m0 // n_el - per_el // 2
        idx = (start + np.arange(per_el + 1)) % m0
        edges.append(np.column_stack([idx[:-1], idx[1:]]))
    return AnnularMesh(nodes, elements, tuple(edges), r0, float(outer_radius), radii)


def reduce_mesh(mesh: AnnularMesh, k: float) -> ReducedIndexSet:
    """Elements whose centroid lies within ``k`` probe radii of the origin."""
    if not k > 0:
        raise ValueError("k must be positive")
    cutoff = k * mesh.inner_radius
    idx = np.flatnonzero(mesh.centroid_radius <= cutoff)
    if idx.size == 0:
        raise EmptyRegion(f"no element centroid within {cutoff:g} mm")
    return ReducedIndexSet(_readonly(idx), cutoff)


def scale_mesh(mesh: AnnularMesh, factor: float) -> AnnularMesh:
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    rings = None if mesh.ring_radii is None else mesh.ring_radii * factor
    return AnnularMesh(mesh.nodes * factor, mesh.elements, mesh.electrode_edges,
                       mesh.inner_radius * factor, mesh.outer_radius * factor, rings)


def interior_adjacency(mesh: AnnularMesh):
    """Pairs of elements sharing an edge, with the shared edge lengths (mm)."""
    el = mesh.elements
    e = np.concatenate([el[:, [0, 1]], el[:, [1, 2]], el[:, [2, 0]]])
    owner = np.tile(np.arange(len(el)), 3)
    e.sort(axis=1)
    key = e[:, 0] * mesh.n_nodes + e[:, 1]
    order = np.argsort(key, kind="stable")
    key, owner, e = key[order], owner[order], e[order]
    dup = np.flatnonzero(key[1:] == key[:-1])
    pairs = np.column_stack([owner[dup], owner[dup + 1]])
    edge = e[dup]
    lengths = np.linalg.norm(mesh.nodes[edge[:, 0]] - mesh.nodes[edge[:, 1]], axis=1)
    return pairs, lengths


def element_to_node(mesh: AnnularMesh, values) -> np.ndarray:
    """Area-weighted average of element values onto incident nodes."""
    values = np.asarray(values, dtype=float)
    w = np.repeat(mesh.element_areas / 3.0, 3)
    idx = mesh.elements.ravel()
    num = np.bincount(idx, weights=w * np.repeat(values, 3), minlength=mesh.n_nodes)
    den = np.bincount(idx, weights=w, minlength=mesh.n_nodes)
    return num / den


def write_mesh(mesh: AnnularMesh, path) -> None:
    """Write the ``eitmesh v1`` text format (0-based indices)."""
    lines = [f"eitmesh v1 {mesh.n_nodes} {mesh.n_elements} {mesh.n_electrodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.elements.tolist()]
    for l, e in enumerate(mesh.electrode_edges):
        lines.append(f"elec {l} " + " ".join(f"{a},{b}" for a, b in e.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> AnnularMesh:
    text = Path(path).read_text().split("\n")
    head = text[0].split()
    if len(head) != 5 or head[:2] != ["eitmesh", "v1"]:
        raise ValueError(f"{path}: not an eitmesh v1 file")
    n, m, k = map(int, head[2:])
    nodes = np.array([[float(t) for t in s.split()] for s in text[1:1 + n]])
    elements = np.array([[int(t) for t in s.split()] for s in text[1 + n:1 + n + m]],
                        dtype=np.int64)
    edges = [None] * k
    for s in text[1 + n + m:1 + n + m + k]:
        parts = s.split()
        if parts[0] != "elec":
            raise ValueError(f"{path}: malformed electrode line {s!r}")
        edges[int(parts[1])] = [tuple(map(int, p.split(","))) for p in parts[2:]]
    r = np.hypot(nodes[:, 0], nodes[:, 1])
    return AnnularMesh(nodes, elements, tuple(edges), float(r.min()), float(r.max()))
