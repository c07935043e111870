"""Thresholded image-quality figures: |dRES|, shape deformation and NADE.

All areas are sums of whole element areas selected by centroid membership,
the same rule used to rasterize targets, so a perfect reconstruction scores
exactly zero on every metric.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .linear import ConductivityImage
from .mesh import AnnularMesh, ProbeSpec, ReducedIndexSet
from .scenario import EllipseTarget

DEFAULT_FRACTION = 0.25
ROI_SCALE = 2.0


@dataclass(frozen=True)
class BinaryImage:
    detected: np.ndarray
    threshold: float
    mesh_id: str

    def __post_init__(self):
        d = np.array(self.detected, dtype=bool)
        d.flags.writeable = False
        object.__setattr__(self, "detected", d)

    def __len__(self):
        return len(self.detected)


@dataclass(frozen=True)
class EvaluationReport:
    scenario_id: str
    method: str
    normalized_distance: float
    delta_res: float
    sd: float
    nade: float
    time_ms: float = 0.0
    flags: tuple = field(default_factory=tuple)


def domain_mask(n: int, domain) -> np.ndarray:
    """Boolean element mask from ``None`` (everything), a ReducedIndexSet or a mask."""
    if domain is None:
        return np.ones(n, dtype=bool)
    if isinstance(domain, ReducedIndexSet):
        m = np.zeros(n, dtype=bool)
        m[domain.element_indices] = True
        return m
    m = np.asarray(domain, dtype=bool)
    if m.shape != (n,):
        raise ValueError("domain mask length differs from the element count")
    return m


def threshold_image(image: ConductivityImage, fraction: float = DEFAULT_FRACTION,
                    domain=None) -> BinaryImage:
    """Flag elements with ``|dsigma| >= fraction * max |dsigma|``.

    With ``domain`` (mask or ReducedIndexSet) the maximum is taken over the
    domain and nothing outside it is flagged.
    """
    if not 0 < fraction < 1:
        raise ValueError("threshold fraction must lie in (0, 1)")
    v = np.abs(np.asarray(image.values))
    inside = domain_mask(len(v), domain)
    peak = float(v[inside].max()) if inside.any() else 0.0
    level = fraction * peak
    if peak == 0.0:
        return BinaryImage(np.zeros(len(v), dtype=bool), 0.0, image.mesh_id)
    return BinaryImage(inside & (v >= level), level, image.mesh_id)


def _target_mask(mesh, target, scale=1.0):
    return target.contains(mesh.centroids, scale)


def delta_res(binary: BinaryImage, target: EllipseTarget, mesh: AnnularMesh,
              domain=None) -> float:
    """Percent mismatch between detected and target resolution.

    ``RES = sqrt(area / domain area)``; the domain area cancels in the ratio
    but restricts which part of the target counts.  Empty detection or an
    empty target gives 100.
    """
    dom = domain_mask(mesh.n_elements, domain)
    a = mesh.element_areas
    at = a[_target_mask(mesh, target) & dom].sum()
    ad = a[binary.detected & dom].sum()
    if at == 0.0 or ad == 0.0:
        return 100.0
    area = a[dom].sum()
    res_rec = math.sqrt(ad / area)
    res_ideal = math.sqrt(at / area)
    return 100.0 * abs(res_rec - res_ideal) / res_ideal


def shape_deformation(binary: BinaryImage, target: EllipseTarget, mesh: AnnularMesh) -> float:
    """Percent of the detected area lying outside the target."""
    a = mesh.element_areas
    ad = a[binary.detected].sum()
    if ad == 0.0:
        return 100.0
    outside = a[binary.detected & ~_target_mask(mesh, target)].sum()
    return 100.0 * outside / ad


def area_error(binary: BinaryImage, target: EllipseTarget, mesh: AnnularMesh) -> float:
    """Area (mm^2) of detection/target disagreement inside the doubled ellipse."""
    roi = _target_mask(mesh, target, ROI_SCALE)
    wrong = binary.detected ^ _target_mask(mesh, target)
    return float(mesh.element_areas[roi & wrong].sum())


def nade_from_area(a_error: float, perimeter: float, diameter: float) -> float:
    return a_error / perimeter / diameter


def nade(binary: BinaryImage, target: EllipseTarget, probe: ProbeSpec,
         mesh: AnnularMesh) -> float:
    return nade_from_area(area_error(binary, target, mesh), target.perimeter, probe.diameter)


def evaluate(image: ConductivityImage, target: EllipseTarget, probe: ProbeSpec,
             mesh: AnnularMesh, method: str = "", time_ms: float = 0.0,
             scenario_id: str = "", fraction: float = DEFAULT_FRACTION,
             domain=None) -> EvaluationReport:
    b = threshold_image(image, fraction, domain)
    flags = ()
    if not b.detected.any():
        flags = ("empty_detection",)
    return EvaluationReport(
        scenario_id, method, target.edge_distance(probe.radius) / probe.radius,
        delta_res(b, target, mesh, domain), shape_deformation(b, target, mesh),
        nade(b, target, probe, mesh), float(time_ms), flags)


REPORT_COLUMNS = ["scenario_id", "method", "normalized_distance", "delta_res_pct", "sd_pct",
                  "nade", "time_ms", "flags"]


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.scenario_id, r.method, repr(float(r.normalized_distance)),
                        repr(float(r.delta_res)), repr(float(r.sd)), repr(float(r.nade)),
                        repr(float(r.time_ms)), ";".join(r.flags)])


def read_reports(path) -> list[EvaluationReport]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        if head != REPORT_COLUMNS:
            raise ValueError(f"unexpected report columns in {path}")
        return [EvaluationReport(row[0], row[1], float(row[2]), float(row[3]), float(row[4]),
                                 float(row[5]), float(row[6]),
                                 tuple(f for f in row[7].split(";") if f)) for row in r]


def summarize(reports) -> dict:
    """Mean metrics per method."""
    out = {}
    for m in sorted({r.method for r in reports}):
        rs = [r for r in reports if r.method == m]
        out[m] = {
            "delta_res": float(np.mean([r.delta_res for r in rs])),
            "sd": float(np.mean([r.sd for r in rs])),
            "nade": float(np.mean([r.nade for r in rs])),
            "time_ms": float(np.median([r.time_ms for r in rs])),
            "count": len(rs),
        }
    return out
