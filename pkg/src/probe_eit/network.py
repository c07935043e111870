"""Three-layer feedforward networks trained by particle swarm optimization.

The same network serves as a direct inverse (valid channel voltages ->
element changes on the reduced region) and as a post-processor of a linear
reconstruction (image on the reduced region -> refined image).

Training searches the hidden layer with a global-best PSO.  With
``output_layer="lstsq"`` every particle's output layer is the ridge
least-squares fit to its hidden activations, so the swarm only explores the
``n_hidden * (n_in + 1)`` hidden parameters; ``"pso"`` searches every weight.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .errors import DegenerateDataset, DimensionMismatch
from .forward import MeasurementFrame
from .linear import ConductivityImage
from .mesh import AnnularMesh, ReducedIndexSet


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    retained_variance: float
    explained: np.ndarray = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(inputs, retained_variance: float = 1.0) -> PcaBasis:
    """Leading principal directions reaching ``retained_variance`` of the total.

    The count is capped at the numerical rank of the centred data.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateDataset("PCA needs at least two samples")
    if not 0 < retained_variance <= 1:
        raise ValueError("retained_variance must lie in (0, 1]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    rank = int(np.sum(s > s[0] * max(Xc.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if total == 0.0 or rank == 0:
        k = 1
        frac = 1.0
    else:
        cum = np.cumsum(var) / total
        k = int(np.searchsorted(cum, retained_variance - 1e-12) + 1)
        k = max(1, min(k, rank))
        frac = float(cum[k - 1])
    # fix the sign of every component for reproducible bases
    comps = vt[:k].copy()
    sign = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps *= np.where(sign == 0, 1.0, sign)[:, None]
    n = X.shape[0]
    return PcaBasis(mean, comps, frac, var[:k] / (n - 1))


def apply_pca(basis: PcaBasis, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.mean.shape[0]:
        raise DimensionMismatch("input length differs from the PCA basis")
    return (x - basis.mean) @ basis.components.T


def invert_pca(basis: PcaBasis, z) -> np.ndarray:
    return np.asarray(z) @ basis.components + basis.mean


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Weights, biases and affine input/output normalization.

    ``W1`` is (n_hidden, n_in) and ``W2`` is (n_out, n_hidden).  When ``pca``
    is set, raw inputs are projected on it before normalization and
    ``n_in`` is the number of components.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    pca: PcaBasis | None = None

    def __post_init__(self):
        h, n_in = self.W1.shape
        n_out = self.W2.shape[0]
        shapes = {"b1": (self.b1, (h,)), "W2": (self.W2, (n_out, h)), "b2": (self.b2, (n_out,)),
                  "in_mean": (self.in_mean, (n_in,)), "in_scale": (self.in_scale, (n_in,)),
                  "out_mean": (self.out_mean, (n_out,)), "out_scale": (self.out_scale, (n_out,))}
        for name, (arr, shape) in shapes.items():
            if np.shape(arr) != shape:
                raise DimensionMismatch(f"{name} has shape {np.shape(arr)}, expected {shape}")
        for arr in (self.W1, self.b1, self.W2, self.b2, self.in_mean, self.in_scale,
                    self.out_mean, self.out_scale):
            if not np.all(np.isfinite(arr)):
                raise ValueError("network parameters must be finite")
        if self.pca is not None and self.pca.k != n_in:
            raise DimensionMismatch("PCA component count differs from n_in")

    @property
    def layer_sizes(self) -> tuple:
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    @property
    def raw_input_size(self) -> int:
        return self.pca.mean.shape[0] if self.pca is not None else self.W1.shape[1]


def forward_net(params: NetworkParams, x) -> np.ndarray:
    """``W2 tanh(W1 xn + b1) + b2`` de-normalized; ``x`` is (n_in,) or (batch, n_in)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.W1.shape[1]:
        raise DimensionMismatch(f"network expects {params.W1.shape[1]} inputs, got {x.shape[-1]}")
    xn = (x - params.in_mean) / params.in_scale
    h = np.tanh(xn @ params.W1.T + params.b1)
    return (h @ params.W2.T + params.b2) * params.out_scale + params.out_mean


def network_input(params: NetworkParams, raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != params.raw_input_size:
        raise DimensionMismatch(f"network expects {params.raw_input_size} raw inputs, "
                                f"got {raw.shape[-1]}")
    return apply_pca(params.pca, raw) if params.pca is not None else raw


def predict(params: NetworkParams, raw) -> np.ndarray:
    return forward_net(params, network_input(params, raw))


def _fill(mesh_n: int, reduced: ReducedIndexSet, values, mesh_id: str) -> ConductivityImage:
    out = np.zeros(mesh_n)
    out[reduced.element_indices] = values
    return ConductivityImage(out, mesh_id)


def invert_direct(frame: MeasurementFrame, params: NetworkParams, reduced: ReducedIndexSet,
                  mesh: AnnularMesh) -> ConductivityImage:
    if params.W2.shape[0] != len(reduced):
        raise DimensionMismatch("network output size differs from the reduced region")
    return _fill(mesh.n_elements, reduced, predict(params, frame.valid), mesh.mesh_id)


def postprocess(image: ConductivityImage, params: NetworkParams,
                reduced: ReducedIndexSet) -> ConductivityImage:
    if params.W2.shape[0] != len(reduced):
        raise DimensionMismatch("network output size differs from the reduced region")
    x = np.asarray(image.values)[reduced.element_indices]
    return _fill(len(image.values), reduced, predict(params, x), image.mesh_id)


# -- training ---------------------------------------------------------------

OUTPUT_LAYER_MODES = ("lstsq", "pso")


@dataclass(frozen=True)
class PsoConfig:
    """Global-best PSO settings.

    Positions are confined to ``+-weight_bound / sqrt(fan_in)`` per layer and
    velocities to ``velocity_clamp`` times that range.  ``ridge`` (relative
    to the mean diagonal of the Gram matrix) and ``target_rank`` only apply
    to the least-squares output layer.
    """

    swarm_size: int = 60
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    max_iters: int = 1000
    velocity_clamp: float = 0.2
    seed: int = 0
    weight_bound: float = 4.0
    output_layer: str = "lstsq"
    ridge: float = 1e-6
    target_rank: int = 64

    def __post_init__(self):
        if self.swarm_size < 1:
            raise ValueError("swarm_size must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 0 < self.inertia < 1:
            raise ValueError("inertia must lie in (0, 1)")
        if not self.velocity_clamp > 0:
            raise ValueError("velocity_clamp must be positive")
        if self.output_layer not in OUTPUT_LAYER_MODES:
            raise ValueError(f"output_layer must be one of {OUTPUT_LAYER_MODES}")
        if self.target_rank < 1:
            raise ValueError("target_rank must be >= 1")


@dataclass(frozen=True, eq=False)
class TrainingResult:
    params: NetworkParams
    log: list  # (iteration, best_mse)


def _scale(std):
    return np.where(std > 0, std, 1.0)


def _normalizers(X, Y, shared_input_scale):
    in_mean = X.mean(axis=0)
    if shared_input_scale:
        s = float(np.sqrt(np.mean(X.var(axis=0))))
        in_scale = np.full(X.shape[1], s if s > 0 else 1.0)
    else:
        in_scale = _scale(X.std(axis=0))
    return in_mean, in_scale, Y.mean(axis=0), _scale(Y.std(axis=0))


class _Layout:
    def __init__(self, n_in, h, n_out, with_output):
        self.n_in, self.h, self.n_out = n_in, h, n_out
        self.n_hidden_params = h * (n_in + 1)
        self.size = self.n_hidden_params + (n_out * (h + 1) if with_output else 0)

    def bounds(self, weight_bound):
        hb = np.full(self.n_hidden_params, weight_bound / np.sqrt(self.n_in))
        ob = np.full(self.size - self.n_hidden_params, weight_bound / np.sqrt(self.h))
        return np.concatenate([hb, ob])

    def hidden(self, p):
        k = self.h * self.n_in
        return p[..., :k].reshape(p.shape[:-1] + (self.h, self.n_in)), \
            p[..., k:self.n_hidden_params]

    def output(self, p):
        k = self.n_out * self.h
        q = p[..., self.n_hidden_params:]
        return q[..., :k].reshape(p.shape[:-1] + (self.n_out, self.h)), q[..., k:]


class _LstsqFitness:
    """Hidden activations -> best ridge output layer -> normalized MSE.

    Targets enter through a rank-``r`` factor ``Yr = U_r S_r`` of the
    normalized target matrix; energy outside it counts as unexplained, so
    the fitness upper-bounds the full least-squares MSE.
    """

    def __init__(self, Xn, Yn, rank, ridge):
        self.Xn = Xn
        n, o = Yn.shape
        self.n_out = o
        self.ridge = ridge
        total = float(np.sum(Yn * Yn))
        if o > rank and n > rank:
            G = Yn @ Yn.T
            w, U = np.linalg.eigh(G)
            top = np.argsort(w)[::-1][:rank]
            self.Yr = U[:, top] * np.sqrt(np.maximum(w[top], 0.0))
        else:
            self.Yr = Yn
        self.rest = max(total - float(np.sum(self.Yr * self.Yr)), 0.0)
        self.norm_r = float(np.sum(self.Yr * self.Yr))
        self.denom = n * o

    def gram(self, H):
        Ha = np.hstack([H, np.ones((H.shape[0], 1))])
        G = Ha.T @ Ha
        G[np.diag_indices_from(G)] += self.ridge * float(np.trace(G)) / G.shape[0]
        return Ha, G

    def __call__(self, W1, b1):
        H = np.tanh(self.Xn @ W1.T + b1)
        Ha, G = self.gram(H)
        HY = Ha.T @ self.Yr
        try:
            c = la.cho_factor(G)
            B = la.cho_solve(c, HY)
        except la.LinAlgError:
            return float("inf")
        # ||Yr - Ha B||^2 expanded through the normal equations
        resid = self.norm_r - 2.0 * float(np.sum(B * HY)) + float(np.sum(B * ((Ha.T @ Ha) @ B)))
        return (max(resid, 0.0) + self.rest) / self.denom

    def output_layer(self, W1, b1, Yn):
        H = np.tanh(self.Xn @ W1.T + b1)
        Ha, G = self.gram(H)
        B = la.solve(G, Ha.T @ Yn, assume_a="pos")
        return B[:-1].T, B[-1]


def _pure_fitness(layout, Xn, Yn, P):
    W1, b1 = layout.hidden(P)
    W2, b2 = layout.output(P)
    out = np.empty(P.shape[0])
    for i in range(P.shape[0]):
        H = np.tanh(Xn @ W1[i].T + b1[i])
        r = H @ W2[i].T + b2[i] - Yn
        out[i] = float(np.mean(r * r))
    return out


def init_swarm(layout, cfg: PsoConfig, rng: np.random.Generator):
    bound = layout.bounds(cfg.weight_bound)
    vmax = cfg.velocity_clamp * 2.0 * bound
    pos = rng.uniform(-bound, bound, size=(cfg.swarm_size, layout.size))
    vel = rng.uniform(-vmax, vmax, size=(cfg.swarm_size, layout.size))
    return pos, vel, bound, vmax


def train_pso(inputs, targets, n_hidden: int, cfg: PsoConfig = PsoConfig(),
              shared_input_scale: bool = False, pca: PcaBasis | None = None,
              progress=None) -> TrainingResult:
    """Minimize the normalized mean-squared error over ``(inputs, targets)``.

    ``inputs`` are raw network inputs; when ``pca`` is given they are
    projected first.  ``shared_input_scale`` uses one common input scale
    instead of per-feature standard deviations, which keeps the relative
    size of principal components.  The log holds the global-best fitness
    after initialization (iteration 0) and after every iteration.
    """
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DegenerateDataset("training needs at least one sample")
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise DimensionMismatch("inputs and targets differ in sample count")
    if n_hidden < 1:
        raise ValueError("n_hidden must be >= 1")
    if pca is not None:
        X = apply_pca(pca, X)
    in_mean, in_scale, out_mean, out_scale = _normalizers(X, Y, shared_input_scale)
    Xn = (X - in_mean) / in_scale
    Yn = (Y - out_mean) / out_scale
    n_in, n_out = X.shape[1], Y.shape[1]

    pure = cfg.output_layer == "pso"
    layout = _Layout(n_in, n_hidden, n_out, with_output=pure)
    rng = np.random.default_rng(cfg.seed)
    pos, vel, bound, vmax = init_swarm(layout, cfg, rng)
    if pure:
        def fitness(P):
            return _pure_fitness(layout, Xn, Yn, P)
    else:
        lsq = _LstsqFitness(Xn, Yn, cfg.target_rank, cfg.ridge)

        def fitness(P):
            W1, b1 = layout.hidden(P)
            return np.array([lsq(W1[i], b1[i]) for i in range(P.shape[0])])

    fit = fitness(pos)
    pbest, pbest_f = pos.copy(), fit.copy()
    g = int(np.argmin(pbest_f))
    gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])
    log = [(0, gbest_f)]
    for it in range(1, cfg.max_iters + 1):
        r1 = rng.random(pos.shape)
        r2 = rng.random(pos.shape)
        vel = (cfg.inertia * vel + cfg.cognitive * r1 * (pbest - pos)
               + cfg.social * r2 * (gbest - pos))
        np.clip(vel, -vmax, vmax, out=vel)
        pos = pos + vel
        out = np.abs(pos) > bound
        pos = np.clip(pos, -bound, bound)
        vel[out] = 0.0
        fit = fitness(pos)
        better = fit < pbest_f
        pbest[better] = pos[better]
        pbest_f[better] = fit[better]
        g = int(np.argmin(pbest_f))
        if pbest_f[g] < gbest_f:
            gbest, gbest_f = pbest[g].copy(), float(pbest_f[g])
        log.append((it, gbest_f))
        if progress is not None:
            progress(it, cfg.max_iters, gbest_f)

    W1, b1 = layout.hidden(gbest)
    if pure:
        W2, b2 = layout.output(gbest)
    else:
        W2, b2 = lsq.output_layer(W1, b1, Yn)
    params = NetworkParams(W1.copy(), b1.copy(), np.ascontiguousarray(W2), b2.copy(),
                           in_mean, in_scale, out_mean, out_scale, pca)
    return TrainingResult(params, log)


def training_mse(params: NetworkParams, inputs, targets) -> float:
    """Mean-squared error in normalized output units."""
    Y = np.asarray(targets, dtype=float)
    out = predict(params, inputs)
    r = (out - Y) / params.out_scale
    return float(np.mean(r * r))


# -- serialization ------------------------------------------------------------

def _vec(name, a):
    return name + " " + " ".join(repr(float(v)) for v in np.ravel(a))


def write_network(params: NetworkParams, path) -> None:
    """Text format ``eitnet v1``: sizes, normalization, row-major weights."""
    n_in, h, n_out = params.layer_sizes
    lines = ["eitnet v1", f"layers {n_in} {h} {n_out}",
             _vec("in_mean", params.in_mean), _vec("in_scale", params.in_scale),
             _vec("out_mean", params.out_mean), _vec("out_scale", params.out_scale),
             _vec("W1", params.W1), _vec("b1", params.b1),
             _vec("W2", params.W2), _vec("b2", params.b2)]
    if params.pca is None:
        lines.append("pca none")
    else:
        p = params.pca
        lines += [f"pca {p.k} {p.mean.shape[0]} {p.retained_variance!r}",
                  _vec("pca_mean", p.mean), _vec("pca_components", p.components),
                  _vec("pca_explained", p.explained if p.explained is not None
                       else np.zeros(p.k))]
    Path(path).write_text("\n".join(lines) + "\n")


def read_network(path) -> NetworkParams:
    lines = Path(path).read_text().split("\n")
    if lines[0].strip() != "eitnet v1":
        raise ValueError(f"{path}: not an eitnet v1 file")
    rows = {}
    for line in lines[1:]:
        if line:
            key, _, rest = line.partition(" ")
            rows[key] = rest
    n_in, h, n_out = map(int, rows["layers"].split())

    def arr(key, shape=None):
        a = np.array([float(v) for v in rows[key].split()]) if rows[key] else np.zeros(0)
        return a.reshape(shape) if shape else a

    pca = None
    head = rows["pca"].split()
    if head[0] != "none":
        k, d = int(head[0]), int(head[1])
        pca = PcaBasis(arr("pca_mean"), arr("pca_components", (k, d)), float(head[2]),
                       arr("pca_explained"))
    return NetworkParams(arr("W1", (h, n_in)), arr("b1"), arr("W2", (n_out, h)), arr("b2"),
                         arr("in_mean"), arr("in_scale"), arr("out_mean"), arr("out_scale"), pca)


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "best_mse"])
        for it, f in log:
            w.writerow([it, repr(float(f))])
