"""Experiment harness shared by the command line and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig, SweepSettings
from .errors import ConfigError
from .forward import (ConductivityField, DrivePattern, MeasurementFrame, SensitivityMatrix,
                      compute_jacobian, solve_forward)
from .linear import ConductivityImage, ReconstructionMatrix, build_reconstruction_matrix, reconstruct_gn
from .mesh import AnnularMesh, ProbeSpec, ReducedIndexSet, build_mesh, reduce_mesh
from .metrics import EvaluationReport, evaluate
from .network import (NetworkParams, TrainingResult, fit_pca, invert_direct, postprocess,
                      train_pso)
from .pdipm import reconstruct_pdipm, tv_operator
from .scenario import (Dataset, EllipseTarget, NoiseModel, add_noise, rasterize_target,
                       scenario_rng, target_at_distance)

METHODS = ("gn", "pdipm", "ann", "gn+ann", "pdipm+ann")
NETWORK_FOR = {"ann": "direct", "gn+ann": "post", "pdipm+ann": "post"}


@dataclass(eq=False)
class Setup:
    """Mesh, reference solution and precomputed operators for one probe."""

    probe: ProbeSpec
    mesh: AnnularMesh
    pattern: DrivePattern
    reduced: ReducedIndexSet
    sigma0: ConductivityField
    v_ref: MeasurementFrame
    J: SensitivityMatrix
    R: ReconstructionMatrix
    tv: object
    precompute_s: dict = field(default_factory=dict)


def experiment_mesh(cfg: ExperimentConfig, probe: ProbeSpec | None = None) -> AnnularMesh:
    probe = probe or cfg.probe
    m = cfg.mesh
    return build_mesh(probe, m.outer_factor * probe.radius, m.ring_count or None, m.grading,
                      m.angular_count or None, m.node_budget)


def build_setup(cfg: ExperimentConfig, probe: ProbeSpec | None = None,
                mesh: AnnularMesh | None = None) -> Setup:
    probe = probe or cfg.probe
    t = {}
    t0 = time.perf_counter()
    if mesh is None:
        mesh = experiment_mesh(cfg, probe)
    t["mesh"] = time.perf_counter() - t0
    pattern = DrivePattern.adjacent(probe.electrode_count)
    sigma0 = ConductivityField.uniform(mesh, cfg.placement.background)
    t0 = time.perf_counter()
    v_ref = solve_forward(mesh, sigma0, pattern, probe)
    J = compute_jacobian(mesh, sigma0, pattern, probe)
    t["jacobian"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    R = build_reconstruction_matrix(J, cfg.gn, mesh)
    t["gn_matrix"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    tv = tv_operator(mesh, cfg.pdipm.anchor_outer)
    t["tv_operator"] = time.perf_counter() - t0
    reduced = reduce_mesh(mesh, cfg.mesh.reduce_factor)
    return Setup(probe, mesh, pattern, reduced, sigma0, v_ref, J, R, tv, t)


# -- evaluation targets -------------------------------------------------------

def sweep_distances(s: SweepSettings) -> np.ndarray:
    return np.linspace(s.distance_min, s.distance_max, s.count)


def sweep_targets(s: SweepSettings, probe: ProbeSpec, background: float = 1.0) -> list:
    """Fixed-shape targets at evenly spaced normalized edge distances.

    Target ``i`` sits in direction ``angle_start + i * angle_step`` with its
    long axis turned ``i * rotation_step`` away from that direction, so the
    sweep visits many bearings and orientations.
    """
    r = probe.radius
    axes = (s.semi_axes[0] * r, s.semi_axes[1] * r)
    out = []
    for i, d in enumerate(sweep_distances(s)):
        out.append(target_at_distance(probe, float(d), axes, s.angle_start + i * s.angle_step,
                                      i * s.rotation_step, s.contrast * background, background))
    return out


def simulate_frames(setup: Setup, targets) -> list:
    return [solve_forward(setup.mesh, rasterize_target(setup.mesh, t), setup.pattern, setup.probe)
            for t in targets]


def noisy_frames(setup: Setup, frames, snr_db: float, seed: int) -> list:
    model = NoiseModel.from_snr(setup.v_ref, snr_db)
    return [add_noise(f, model, scenario_rng(seed, i)) for i, f in enumerate(frames)]


# -- reconstruction -------------------------------------------------------------

def reconstruct(method: str, setup: Setup, frame: MeasurementFrame, cfg: ExperimentConfig,
                networks: dict | None = None) -> ConductivityImage:
    """Image of ``frame`` by one of :data:`METHODS`.

    ``networks`` maps ``"direct"`` / ``"post"`` to trained parameters.  The
    post-processor is fed PDIPM images unchanged for ``pdipm+ann``.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    networks = networks or {}
    need = NETWORK_FOR.get(method)
    if need is not None and need not in networks:
        raise ConfigError(f"method {method} needs a trained {need} network")
    if method == "gn":
        return reconstruct_gn(setup.R, frame, setup.v_ref)
    if method == "pdipm":
        return _pdipm(setup, frame, cfg)
    if method == "ann":
        return invert_direct(frame, networks["direct"], setup.reduced, setup.mesh)
    if method == "gn+ann":
        return postprocess(reconstruct_gn(setup.R, frame, setup.v_ref), networks["post"],
                           setup.reduced)
    return postprocess(_pdipm(setup, frame, cfg), networks["post"], setup.reduced)


def _pdipm(setup, frame, cfg):
    return reconstruct_pdipm(setup.J, frame, setup.v_ref, cfg.pdipm, setup.mesh, setup.probe,
                             setup.pattern, L=setup.tv).image


def evaluate_methods(setup: Setup, targets, frames, methods, cfg: ExperimentConfig,
                     networks: dict | None = None, tag: str = "") -> list[EvaluationReport]:
    """One report per (method, target), scored on the reduced region.

    PDIPM images are computed once and reused by ``pdipm+ann``, whose time
    is the sum of both stages.
    """
    reports = []
    cache = {}
    for method in methods:
        name = method + tag
        for i, (t, f) in enumerate(zip(targets, frames)):
            if method in ("pdipm", "pdipm+ann") and i not in cache:
                t0 = time.perf_counter()
                cache[i] = (_pdipm(setup, f, cfg), 1e3 * (time.perf_counter() - t0))
            t0 = time.perf_counter()
            if method == "pdipm":
                img, ms = cache[i]
            elif method == "pdipm+ann":
                if "post" not in (networks or {}):
                    raise ConfigError("method pdipm+ann needs a trained post network")
                img = postprocess(cache[i][0], networks["post"], setup.reduced)
                ms = cache[i][1] + 1e3 * (time.perf_counter() - t0)
            else:
                img = reconstruct(method, setup, f, cfg, networks)
                ms = 1e3 * (time.perf_counter() - t0)
            reports.append(evaluate(img, t, setup.probe, setup.mesh, name, ms, f"sweep{i:03d}",
                                    domain=setup.reduced))
    return reports


# -- training -------------------------------------------------------------------

def training_arrays(setup: Setup, ds: Dataset, mode: str):
    """``(inputs, targets, pca)`` for ``mode`` ``direct`` or ``post``."""
    if ds.mesh_id != setup.mesh.mesh_id:
        raise ConfigError("dataset was generated on a different mesh")
    Y = ds.delta_sigma(setup.mesh, setup.reduced.element_indices)
    if mode == "direct":
        return ds.frame_matrix(noisy=True), Y, None
    if mode == "post":
        if not np.array_equal(ds.gn_indices, setup.reduced.element_indices):
            raise ConfigError("dataset GN images do not cover the configured reduced region")
        return ds.gn_images, Y, None
    raise ConfigError(f"unknown training mode {mode!r}; expected direct or post")


def train_network(setup: Setup, ds: Dataset, mode: str, cfg: ExperimentConfig,
                  progress=None) -> TrainingResult:
    """Direct mode learns frames -> image; post mode learns GN image -> image
    through a PCA of the GN images with one shared input scale."""
    X, Y, _ = training_arrays(setup, ds, mode)
    if mode == "direct":
        return train_pso(X, Y, cfg.network.hidden, cfg.pso, progress=progress)
    pca = fit_pca(X, cfg.network.pca_variance)
    return train_pso(X, Y, cfg.network.hidden, cfg.pso, shared_input_scale=True, pca=pca,
                     progress=progress)


# -- scale study ----------------------------------------------------------------

SCALE_COLUMNS = ["method", "diameter_mm", "delta_res_pct", "sd_pct", "nade"]


def scale_study(cfg: ExperimentConfig, methods=("gn", "pdipm"), networks: dict | None = None):
    """Same normalized scenario at every configured probe diameter.

    Returns ``(rows, spreads)``: one row per (method, diameter) and, per
    method, the max-minus-min of each metric across diameters.
    """
    rows = []
    s = cfg.scale
    for dia in s.diameters:
        probe = cfg.probe.scaled(float(dia) / cfg.probe.diameter)
        setup = build_setup(cfg, probe)
        r = probe.radius
        axes = (cfg.sweep.semi_axes[0] * r, cfg.sweep.semi_axes[1] * r)
        bg = cfg.placement.background
        target = target_at_distance(probe, s.distance, axes, s.angle, s.rotation,
                                    cfg.sweep.contrast * bg, bg)
        frame = simulate_frames(setup, [target])[0]
        for m in methods:
            img = reconstruct(m, setup, frame, cfg, networks)
            rep = evaluate(img, target, probe, setup.mesh, m, domain=setup.reduced)
            rows.append((m, float(dia), rep.delta_res, rep.sd, rep.nade))
    spreads = {}
    for m in methods:
        vals = np.array([r[2:] for r in rows if r[0] == m])
        spreads[m] = tuple(float(v) for v in vals.max(axis=0) - vals.min(axis=0))
    return rows, spreads


# -- timing ---------------------------------------------------------------------

BENCH_COLUMNS = ["method", "median_ms", "min_ms", "max_ms", "repeats", "model_bytes"]


def _model_bytes(method, setup, networks):
    n = 0
    if method in ("gn", "gn+ann"):
        n += setup.R.entries.nbytes
    if method in ("pdipm", "pdipm+ann"):
        n += setup.J.entries.nbytes + setup.tv.data.nbytes
    net = (networks or {}).get(NETWORK_FOR.get(method, ""))
    if net is not None:
        n += sum(a.nbytes for a in (net.W1, net.b1, net.W2, net.b2))
        if net.pca is not None:
            n += net.pca.components.nbytes
    return n


def bench(setup: Setup, frame: MeasurementFrame, cfg: ExperimentConfig, methods,
          networks: dict | None = None, repeats: int | None = None):
    """Median per-frame wall time per method after one warm-up call.

    Precomputation (Jacobian, GN matrix, TV operator, training) is excluded;
    it is reported separately in ``setup.precompute_s``.
    """
    repeats = cfg.bench.repeats if repeats is None else repeats
    if repeats < 1:
        raise ConfigError("bench repeats must be at least 1")
    rows = []
    for m in methods:
        reconstruct(m, setup, frame, cfg, networks)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            reconstruct(m, setup, frame, cfg, networks)
            times.append(1e3 * (time.perf_counter() - t0))
        rows.append((m, float(np.median(times)), float(min(times)), float(max(times)), repeats,
                     _model_bytes(m, setup, networks)))
    return rows


def with_pso_iterations(cfg: ExperimentConfig, iters: int) -> ExperimentConfig:
    return replace(cfg, pso=replace(cfg.pso, max_iters=iters))
