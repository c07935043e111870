"""Elliptical target scenarios, measurement noise and synthetic datasets."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EITError, RejectionOverflow, ScenarioError
from .forward import ConductivityField, DrivePattern, MeasurementFrame, solve_forward
from .linear import ReconstructionMatrix, reconstruct_gn
from .mesh import AnnularMesh, ProbeSpec, ReducedIndexSet

CARRIER_HZ = 1e5
SAMPLES_PER_PERIOD = 20


@dataclass(frozen=True)
class EllipseTarget:
    """Rotated ellipse; lengths in mm, rotation (rad) of the ``a`` axis from +x."""

    center: tuple
    semi_axes: tuple
    rotation: float = 0.0
    conductivity: float = 0.1
    background: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(s) for s in self.semi_axes))
        a, b = self.semi_axes
        if not (a > 0 and b > 0):
            raise ValueError("semi-axes must be positive")
        if not (self.conductivity > 0 and self.background > 0):
            raise ValueError("conductivities must be positive")

    @property
    def area(self) -> float:
        return math.pi * self.semi_axes[0] * self.semi_axes[1]

    @property
    def perimeter(self) -> float:
        """Ramanujan's second approximation."""
        a, b = self.semi_axes
        h = ((a - b) / (a + b)) ** 2
        return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))

    @property
    def contrast(self) -> float:
        return self.conductivity / self.background

    def level(self, points) -> np.ndarray:
        """Quadratic form: < 1 inside, 1 on the boundary."""
        p = np.asarray(points, dtype=float) - np.asarray(self.center)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = p[..., 0] * c + p[..., 1] * s
        w = -p[..., 0] * s + p[..., 1] * c
        a, b = self.semi_axes
        return (u / a) ** 2 + (w / b) ** 2

    def contains(self, points, scale: float = 1.0) -> np.ndarray:
        """Inside test for the ellipse with both semi-axes multiplied by ``scale``."""
        return self.level(points) <= scale * scale

    def boundary(self, n: int = 2048) -> np.ndarray:
        t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        a, b = self.semi_axes
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x = a * np.cos(t)
        y = b * np.sin(t)
        return np.stack([self.center[0] + c * x - s * y, self.center[1] + s * x + c * y], axis=1)

    def min_origin_distance(self) -> float:
        """Distance from the origin to the closest point of the ellipse (0 if inside)."""
        if self.level(np.zeros(2)) <= 1.0:
            return 0.0
        a, b = self.semi_axes
        c, s = math.cos(self.rotation), math.sin(self.rotation)

        def dist(t):
            x, y = a * np.cos(t), b * np.sin(t)
            return np.hypot(self.center[0] + c * x - s * y, self.center[1] + s * x + c * y)

        t = np.linspace(0.0, 2 * math.pi, 4096, endpoint=False)
        d = dist(t)
        k = int(np.argmin(d))
        lo, hi = t[k] - 2 * math.pi / 4096, t[k] + 2 * math.pi / 4096
        # golden-section polish on the bracketing interval
        g = (math.sqrt(5) - 1) / 2
        for _ in range(60):
            m1, m2 = hi - g * (hi - lo), lo + g * (hi - lo)
            if dist(m1) < dist(m2):
                hi = m2
            else:
                lo = m1
        return float(min(dist(0.5 * (lo + hi)), d[k]))

    def edge_distance(self, probe_radius: float) -> float:
        """Edge-to-edge gap between the probe circle and the ellipse (mm)."""
        return self.min_origin_distance() - probe_radius

    def clears_probe(self, probe_radius: float) -> bool:
        return self.edge_distance(probe_radius) > 0.0

    def scaled(self, factor: float) -> "EllipseTarget":
        return EllipseTarget((self.center[0] * factor, self.center[1] * factor),
                             (self.semi_axes[0] * factor, self.semi_axes[1] * factor),
                             self.rotation, self.conductivity, self.background)


@dataclass(frozen=True)
class PlacementConfig:
    """Sampling ranges, lengths in units of the probe radius."""

    placement_factor: float = 10.0
    semi_axis_range: tuple = (0.5, 2.0)
    contrast_range: tuple = (0.1, 10.0)
    background: float = 1.0
    max_attempts: int = 1000

    def __post_init__(self):
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise ValueError("semi-axis range must satisfy 0 < lo <= hi")
        clo, chi = self.contrast_range
        if not 0 < clo <= chi:
            raise ValueError("contrast range must satisfy 0 < lo <= hi")
        if self.placement_factor <= 0:
            raise ValueError("placement factor must be positive")


def sample_target(rng: np.random.Generator, probe: ProbeSpec,
                  placement: PlacementConfig = PlacementConfig()) -> EllipseTarget:
    """Center uniform over the annulus (r, placement_factor * r], rejection on probe overlap."""
    r = probe.radius
    R = placement.placement_factor * r
    lo, hi = placement.semi_axis_range
    clo, chi = placement.contrast_range
    for _ in range(placement.max_attempts):
        # 1 - U keeps the draw in (r^2, R^2]
        rho = math.sqrt(r * r + (R * R - r * r) * (1.0 - rng.random()))
        phi = 2 * math.pi * rng.random()
        a = lo + (hi - lo) * rng.random()
        b = lo + (hi - lo) * rng.random()
        rot = math.pi * rng.random()
        contrast = math.exp(math.log(clo) + (math.log(chi) - math.log(clo)) * rng.random())
        if rho <= r:
            continue
        t = EllipseTarget((rho * math.cos(phi), rho * math.sin(phi)), (a * r, b * r), rot,
                          contrast * placement.background, placement.background)
        if t.clears_probe(r):
            return t
    raise RejectionOverflow(f"no admissible target after {placement.max_attempts} attempts")


def target_at_distance(probe: ProbeSpec, distance: float, semi_axes, angle: float,
                       rotation: float = 0.0, contrast: float = 0.1,
                       background: float = 1.0) -> EllipseTarget:
    """Place an ellipse along direction ``angle`` with a prescribed normalized
    edge-to-edge distance; ``rotation`` is measured from the radial direction."""
    r = probe.radius
    a, b = semi_axes
    gap = distance * r

    def make(rho):
        return EllipseTarget((rho * math.cos(angle), rho * math.sin(angle)), (a, b),
                             angle + rotation, contrast * background, background)

    lo, hi = r, r + gap + 2 * max(a, b) + r
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if make(mid).edge_distance(r) < gap:
            lo = mid
        else:
            hi = mid
    return make(0.5 * (lo + hi))


def rasterize_target(mesh: AnnularMesh, target: EllipseTarget) -> ConductivityField:
    inside = target.contains(mesh.centroids)
    return ConductivityField(np.where(inside, target.conductivity, target.background),
                             mesh.mesh_id)


@dataclass(frozen=True)
class NoiseModel:
    """Independent Gaussian noise per channel (standard deviations in V)."""

    std: np.ndarray
    carrier_frequency: float = CARRIER_HZ
    samples_per_period: int = SAMPLES_PER_PERIOD
    snr_db: float | None = None

    def __post_init__(self):
        s = np.array(self.std, dtype=float)
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("noise standard deviations must be finite and non-negative")
        s.flags.writeable = False
        object.__setattr__(self, "std", s)

    @classmethod
    def from_snr(cls, reference: MeasurementFrame, snr_db: float) -> "NoiseModel":
        """Same SNR on every channel: s.d. of channel ``c`` is ``|v_c| / 10**(snr/20)``."""
        sd = np.abs(reference.voltages) * 10.0 ** (-snr_db / 20.0)
        return cls(sd, snr_db=float(snr_db))

    @classmethod
    def zero(cls, n_channels: int) -> "NoiseModel":
        return cls(np.zeros(n_channels))


def sample_times(frequency: float = CARRIER_HZ, samples_per_period: int = SAMPLES_PER_PERIOD):
    return np.arange(samples_per_period) / (samples_per_period * frequency)


def estimate_noise(samples, frequency: float = CARRIER_HZ) -> float:
    """Noise s.d. from one period of a sampled sine at ``frequency``.

    Fits ``p sin(wt) + q cos(wt)`` by least squares over evenly spaced
    samples spanning one period and returns the residual RMS.
    """
    y = np.asarray(samples, dtype=float)
    t = sample_times(frequency, len(y))
    w = 2 * math.pi * frequency
    A = np.stack([np.sin(w * t), np.cos(w * t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(np.sqrt(np.mean(res ** 2)))


def synthesize_waveform(amplitude: float, std: float, rng: np.random.Generator,
                        frequency: float = CARRIER_HZ,
                        samples_per_period: int = SAMPLES_PER_PERIOD,
                        phase: float = 0.0) -> np.ndarray:
    t = sample_times(frequency, samples_per_period)
    clean = amplitude * np.sin(2 * math.pi * frequency * t + phase)
    return clean + std * rng.standard_normal(samples_per_period)


def add_noise(frame: MeasurementFrame, model: NoiseModel,
              rng: np.random.Generator) -> MeasurementFrame:
    if len(model.std) != len(frame):
        raise ValueError("noise model and frame differ in channel count")
    if not np.any(model.std):
        return frame
    v = frame.voltages + model.std * rng.standard_normal(len(frame))
    return MeasurementFrame(v, frame.valid_mask, frame.amplitude)


def scenario_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass(eq=False)
class Dataset:
    """Scenarios with clean and noisy frames and GN images on the reduced region."""

    targets: list
    clean: list
    noisy: list
    gn_images: np.ndarray
    gn_indices: np.ndarray
    seed: int
    mesh_id: str
    noise: NoiseModel | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def field(self, mesh: AnnularMesh, i: int) -> ConductivityField:
        return rasterize_target(mesh, self.targets[i])

    def delta_sigma(self, mesh: AnnularMesh, indices=None) -> np.ndarray:
        """Conductivity-change labels (n, |indices|) for all scenarios."""
        idx = np.arange(mesh.n_elements) if indices is None else np.asarray(indices)
        pts = mesh.centroids[idx]
        out = np.zeros((len(self), len(idx)))
        for i, t in enumerate(self.targets):
            out[i, t.contains(pts)] = t.conductivity - t.background
        return out

    def frame_matrix(self, noisy: bool = False) -> np.ndarray:
        frames = self.noisy if noisy else self.clean
        return np.array([f.valid for f in frames])


def _scenario(index, seed, mesh, probe, pattern, noise, placement, R, v_ref, gn_indices):
    rng = scenario_rng(seed, index)
    try:
        target = sample_target(rng, probe, placement)
        clean = solve_forward(mesh, rasterize_target(mesh, target), pattern, probe)
        noisy = clean if noise is None else add_noise(clean, noise, rng)
        gn = reconstruct_gn(R, noisy, v_ref).values[gn_indices]
    except RejectionOverflow:
        raise
    except EITError as exc:
        raise ScenarioError(index, exc) from exc
    return target, clean, noisy, gn


def generate_dataset(n: int, mesh: AnnularMesh, probe: ProbeSpec, pattern: DrivePattern,
                     R: ReconstructionMatrix, reduced: ReducedIndexSet,
                     noise: NoiseModel | None = None, seed: int = 0,
                     placement: PlacementConfig = PlacementConfig(),
                     v_ref: MeasurementFrame | None = None) -> Dataset:
    """Sample, rasterize, solve, perturb and reconstruct ``n`` scenarios.

    Scenario ``i`` draws from its own stream seeded by ``(seed, i)``, so any
    subset can be regenerated independently.
    """
    if n < 1:
        raise ValueError("dataset needs at least one scenario")
    if v_ref is None:
        v_ref = solve_forward(mesh, R.reference_field, pattern, probe)
    idx = np.asarray(reduced.element_indices)
    rows = [_scenario(i, seed, mesh, probe, pattern, noise, placement, R, v_ref, idx)
            for i in range(n)]
    targets, clean, noisy, gn = zip(*rows)
    return Dataset(list(targets), list(clean), list(noisy), np.array(gn), idx, seed,
                   mesh.mesh_id, noise)


# -- dataset directory -------------------------------------------------------

TARGET_COLUMNS = ["index", "cx", "cy", "a", "b", "rotation", "conductivity", "background"]


def _manifest_lines(ds_meta: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in ds_meta.items())


def _read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


class DatasetWriter:
    """Appends scenarios to a dataset directory; reopening resumes after the
    last scenario present in every file."""

    def __init__(self, directory, gn_indices, n_channels: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.gn_indices = np.asarray(gn_indices)
        self.n_channels = n_channels
        self.paths = {k: self.dir / f"{k}.csv"
                      for k in ("targets", "frames_clean", "frames_noisy", "gn_images")}
        self.completed = self._recover()

    def _headers(self):
        volts = [f"v{i:02d}" for i in range(self.n_channels)]
        masks = [f"m{i:02d}" for i in range(self.n_channels)]
        return {"targets": TARGET_COLUMNS,
                "frames_clean": ["index"] + volts + masks + ["amplitude"],
                "frames_noisy": ["index"] + volts + masks + ["amplitude"],
                "gn_images": ["index"] + [f"e{i}" for i in self.gn_indices.tolist()]}

    def _recover(self) -> int:
        heads = self._headers()
        counts = []
        for k, p in self.paths.items():
            if not p.exists():
                counts.append(0)
                continue
            with open(p, newline="") as fh:
                lines = fh.read().split("\n")
            # a trailing partial row (no newline) is discarded
            complete = lines[:-1]
            if not complete or complete[0] != ",".join(heads[k]):
                counts.append(0)
            else:
                counts.append(len(complete) - 1)
        done = min(counts)
        for k, p in self.paths.items():
            if done == 0:
                with open(p, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(heads[k])
                continue
            with open(p, newline="") as fh:
                lines = fh.read().split("\n")[:done + 1]
            with open(p, "w", newline="") as fh:
                fh.write("\n".join(lines) + "\n")
        return done

    def append(self, index, target, clean, noisy, gn):
        def frame_row(f):
            return ([index] + [repr(float(x)) for x in f.voltages]
                    + [int(m) for m in f.valid_mask] + [repr(float(f.amplitude))])

        rows = {
            "targets": [index, repr(target.center[0]), repr(target.center[1]),
                        repr(target.semi_axes[0]), repr(target.semi_axes[1]),
                        repr(target.rotation), repr(target.conductivity),
                        repr(target.background)],
            "frames_clean": frame_row(clean),
            "frames_noisy": frame_row(noisy),
            "gn_images": [index] + [repr(float(x)) for x in gn],
        }
        for k, row in rows.items():
            with open(self.paths[k], "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
                fh.flush()
                os.fsync(fh.fileno())
        self.completed += 1

    def finish(self, meta: dict):
        with open(self.dir / "manifest", "w") as fh:
            fh.write(_manifest_lines(meta))


def noise_to_text(noise: NoiseModel | None) -> str:
    if noise is None:
        return "none"
    return " ".join(repr(float(s)) for s in noise.std)


def noise_from_text(text: str) -> NoiseModel | None:
    if text == "none":
        return None
    return NoiseModel(np.array([float(s) for s in text.split()]))


def write_dataset_dir(ds: Dataset, directory, n_channels: int = 64, extra: dict | None = None):
    w = DatasetWriter(directory, ds.gn_indices, n_channels)
    for i in range(w.completed, len(ds)):
        w.append(i, ds.targets[i], ds.clean[i], ds.noisy[i], ds.gn_images[i])
    meta = {"format": "eitdata v1", "seed": ds.seed, "count": len(ds), "mesh_id": ds.mesh_id,
            "noise": noise_to_text(ds.noise)}
    meta.update(ds.meta)
    meta.update(extra or {})
    w.finish(meta)


def generate_dataset_dir(directory, n: int, mesh: AnnularMesh, probe: ProbeSpec,
                         pattern: DrivePattern, R: ReconstructionMatrix,
                         reduced: ReducedIndexSet, noise: NoiseModel | None = None,
                         seed: int = 0, placement: PlacementConfig = PlacementConfig(),
                         meta: dict | None = None, progress=None) -> int:
    """Stream scenarios into ``directory``; already written scenarios are kept.

    Returns the number of scenarios generated by this call.
    """
    if n < 1:
        raise ValueError("dataset needs at least one scenario")
    idx = np.asarray(reduced.element_indices)
    w = DatasetWriter(directory, idx, pattern.n_channels)
    v_ref = solve_forward(mesh, R.reference_field, pattern, probe)
    start = min(w.completed, n)
    for i in range(start, n):
        w.append(i, *_scenario(i, seed, mesh, probe, pattern, noise, placement, R, v_ref, idx))
        if progress is not None:
            progress(i + 1, n)
    info = {"format": "eitdata v1", "seed": seed, "count": n, "mesh_id": mesh.mesh_id,
            "noise": noise_to_text(noise)}
    info.update(meta or {})
    w.finish(info)
    return n - start


def _read_rows(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        return head, list(r)


def read_dataset_dir(directory) -> Dataset:
    d = Path(directory)
    if not (d / "manifest").exists():
        raise FileNotFoundError(f"{d} has no manifest (incomplete dataset?)")
    meta = _read_manifest(d / "manifest")
    n = int(meta["count"])
    _, trows = _read_rows(d / "targets.csv")
    targets = [EllipseTarget((float(r[1]), float(r[2])), (float(r[3]), float(r[4])),
                             float(r[5]), float(r[6]), float(r[7])) for r in trows[:n]]

    def frames(name):
        head, rows = _read_rows(d / name)
        k = (len(head) - 2) // 2
        return [MeasurementFrame([float(x) for x in r[1:1 + k]],
                                 [bool(int(x)) for x in r[1 + k:1 + 2 * k]],
                                 float(r[1 + 2 * k])) for r in rows[:n]]

    head, grows = _read_rows(d / "gn_images.csv")
    gn_idx = np.array([int(h[1:]) for h in head[1:]], dtype=np.int64)
    gn = np.array([[float(x) for x in r[1:]] for r in grows[:n]]).reshape(n, len(gn_idx))
    extra = {k: v for k, v in meta.items()
             if k not in ("format", "seed", "count", "mesh_id", "noise")}
    return Dataset(targets, frames("frames_clean.csv"), frames("frames_noisy.csv"), gn,
                   gn_idx, int(meta["seed"]), meta["mesh_id"], noise_from_text(meta["noise"]),
                   extra)
