"""Rasterize element images to binary PPM with probe and target outlines.

Palette: a three-stop diverging ramp (blue, near-white, red) spanning
``[vmin, vmax]``; by default these are the image minimum and maximum, so the
two endpoints land exactly on the extreme values.  A constant image maps to
the middle stop.  Pixels outside the mesh (inside the probe) are light grey.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .linear import ConductivityImage
from .mesh import AnnularMesh, ProbeSpec

PALETTE = np.array([[33, 102, 172], [247, 247, 247], [178, 24, 43]], dtype=float)
OUTSIDE = (200, 200, 200)
PROBE_COLOR = (0, 0, 0)
TARGET_COLOR = (0, 160, 0)
DEFAULT_SIZE = 512
VIEW_FACTOR = 12.0


def palette_color(t) -> np.ndarray:
    """Map ``t`` in [0, 1] to uint8 RGB by piecewise-linear interpolation."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0) * 2.0
    lo = np.minimum(t.astype(int), 1)
    f = (t - lo)[..., None]
    rgb = PALETTE[lo] * (1 - f) + PALETTE[lo + 1] * f
    return np.rint(rgb).astype(np.uint8)


def pixel_centers(size: int, view_radius: float) -> np.ndarray:
    """``(size*size, 2)`` pixel centres; row 0 is the top (largest y)."""
    c = (np.arange(size) + 0.5) / size * 2 * view_radius - view_radius
    x, y = np.meshgrid(c, c[::-1])
    return np.column_stack([x.ravel(), y.ravel()])


def locate_elements(mesh: AnnularMesh, points, candidates: int = 12) -> np.ndarray:
    """Index of the element containing each point, ``-1`` outside the mesh.

    Tests barycentric membership against the nearest ``candidates``
    centroids, which always include the owner on these graded meshes.
    """
    pts = np.asarray(points, dtype=float)
    out = np.full(len(pts), -1, dtype=int)
    r = np.hypot(pts[:, 0], pts[:, 1])
    live = np.flatnonzero((r >= mesh.inner_radius) & (r <= mesh.outer_radius))
    if live.size == 0:
        return out
    k = min(candidates, mesh.n_elements)
    _, idx = cKDTree(mesh.centroids).query(pts[live], k=k)
    idx = idx.reshape(len(live), k)
    tri = mesh.nodes[mesh.elements]                       # (m, 3, 2)
    found = np.full(len(live), -1, dtype=int)
    for j in range(k):
        e = idx[:, j]
        todo = found < 0
        a, b, c = tri[e, 0], tri[e, 1], tri[e, 2]
        p = pts[live]
        v0, v1, v2 = b - a, c - a, p - a
        det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
        s = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
        t = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
        tol = -1e-12
        hit = todo & (s >= tol) & (t >= tol) & (s + t <= 1 - tol)
        found[hit] = e[hit]
    # points on the polygonal boundary gaps fall back to the nearest centroid
    miss = found < 0
    found[miss] = idx[miss, 0]
    out[live] = found
    return out


def _draw_curve(img, xy, view_radius, color, thickness=2):
    size = img.shape[0]
    col = (xy[:, 0] + view_radius) / (2 * view_radius) * size
    row = (view_radius - xy[:, 1]) / (2 * view_radius) * size
    h = thickness / 2.0
    for dr in np.arange(-h + 0.5, h, 1.0):
        for dc in np.arange(-h + 0.5, h, 1.0):
            ri = np.floor(row + dr).astype(int)
            ci = np.floor(col + dc).astype(int)
            ok = (ri >= 0) & (ri < size) & (ci >= 0) & (ci < size)
            img[ri[ok], ci[ok]] = color


def rasterize(image: ConductivityImage, mesh: AnnularMesh, size: int = DEFAULT_SIZE,
              view_radius: float | None = None, vmin: float | None = None,
              vmax: float | None = None, target=None, probe: ProbeSpec | None = None
              ) -> np.ndarray:
    """``(size, size, 3)`` uint8 RGB array of the image with overlays."""
    if image.mesh_id != mesh.mesh_id:
        raise ValueError("image and mesh do not match")
    if size < 1:
        raise ValueError("size must be positive")
    if view_radius is None:
        view_radius = mesh.outer_radius
        if probe is not None:
            view_radius = min(view_radius, VIEW_FACTOR * probe.radius)
    v = np.asarray(image.values, dtype=float)
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    owner = locate_elements(mesh, pixel_centers(size, view_radius))
    t = np.full(len(owner), 0.5)
    inside = owner >= 0
    if hi > lo:
        t[inside] = (v[owner[inside]] - lo) / (hi - lo)
    rgb = palette_color(t)
    rgb[~inside] = OUTSIDE
    img = rgb.reshape(size, size, 3)
    if target is not None:
        _draw_curve(img, target.boundary(4096), view_radius, TARGET_COLOR)
    if probe is not None:
        th = np.linspace(0, 2 * math.pi, 4096, endpoint=False)
        circle = probe.radius * np.column_stack([np.cos(th), np.sin(th)])
        _draw_curve(img, circle, view_radius, PROBE_COLOR)
    return img


def write_ppm(pixels: np.ndarray, path) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            break
        tokens.append(data[pos:end])
        pos = end
    if len(tokens) < 4 or tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path} is not a binary 8-bit PPM")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1: pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path} is truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def render_image(image: ConductivityImage, mesh: AnnularMesh, path, target=None,
                 probe: ProbeSpec | None = None, size: int = DEFAULT_SIZE,
                 view_radius: float | None = None, vmin: float | None = None,
                 vmax: float | None = None) -> np.ndarray:
    """Rasterize and write a binary PPM; returns the pixel array."""
    px = rasterize(image, mesh, size, view_radius, vmin, vmax, target, probe)
    write_ppm(px, path)
    return px
