"""Kernel-point convolution primitives: layouts, correlation, per-point conv."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .validation import as_float_array, check_points, check_positive, check_vector, readonly

# Influence width of the correlation function relative to the kernel extent.
SIGMA_RATIO = 2.5


class UnsupportedKernelSizeError(ValueError):
    """Requested a kernel point count with no shipped disposition table."""


@dataclass(frozen=True)
class KernelLayout:
    """Kernel point positions inside a ball plus the correlation width sigma."""

    points: np.ndarray
    sigma: float
    extent: float

    def __post_init__(self):
        pts = check_points(self.points, "kernel points")
        sigma = check_positive(self.sigma, "sigma")
        extent = check_positive(self.extent, "extent")
        radii = np.linalg.norm(pts, axis=1)
        if radii.max() > extent * (1.0 + 1e-9):
            raise ValueError("kernel points must lie within the extent ball")
        object.__setattr__(self, "points", readonly(pts))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "extent", extent)

    @property
    def k(self) -> int:
        return self.points.shape[0]

    def scaled(self, extent: float) -> "KernelLayout":
        """The same layout rescaled to a new extent (sigma scales with it)."""
        extent = check_positive(extent, "extent")
        factor = extent / self.extent
        return KernelLayout(self.points * factor, self.sigma * factor, extent)


def _load_table(k: int) -> np.ndarray:
    data = resources.files("kp3feat.data")
    try:
        raw = (data / f"kernel_dispositions_k{k}.bin").read_bytes()
    except FileNotFoundError:
        raise UnsupportedKernelSizeError(
            f"no shipped kernel disposition table for K={k} (shipped: K=1, K=15)"
        ) from None
    pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 3)
    meta = json.loads((data / f"kernel_dispositions_k{k}.json").read_text())
    if pts.shape[0] != k or meta["k"] != k:
        raise ValueError(f"kernel table for K={k} is corrupt")
    return pts


def kernel_dispositions(k: int, extent: float) -> KernelLayout:
    """Load the shipped kernel-point layout for ``k`` points, scaled to ``extent``.

    Layouts place one point at the origin and the rest by offline minimization
    of a pairwise repulsive potential inside the ball (see
    tools/generate_kernel_dispositions.py). Only shipped values of ``k`` are
    supported; the default configuration uses K=15.
    """
    k = int(k)
    if k < 1:
        raise ValueError("K must be >= 1")
    extent = check_positive(extent, "extent")
    if k == 1:
        canonical = np.zeros((1, 3))
    else:
        canonical = _load_table(k)
    return KernelLayout(canonical * extent, extent / SIGMA_RATIO, extent)


def correlation(offset, kernel_point, sigma: float) -> float:
    """Linear correlation max(0, 1 - ||offset - kernel_point|| / sigma)."""
    sigma = check_positive(sigma, "sigma")
    offset = check_vector(offset, "offset")
    kernel_point = check_vector(kernel_point, "kernel_point")
    d = float(np.linalg.norm(offset - kernel_point))
    return max(0.0, 1.0 - d / sigma)


def correlations(offsets: np.ndarray, kernel_points: np.ndarray, sigma: float) -> np.ndarray:
    """Correlation of every offset against every kernel point, shape (n, K)."""
    diff = offsets[:, None, :] - kernel_points[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    return np.maximum(0.0, 1.0 - d / sigma)


@dataclass(frozen=True)
class ConvLayer:
    """One kernel-point convolution: weights per kernel point plus the folded
    per-channel affine (inference-time batch norm) and rectifier flag."""

    weights: np.ndarray
    radius: float
    kernel: KernelLayout
    scale: np.ndarray
    shift: np.ndarray
    relu: bool = True

    def __post_init__(self):
        w = as_float_array(self.weights, "weights")
        if w.ndim != 3:
            raise ValueError("weights must have shape (K, d_in, d_out)")
        if w.shape[0] != self.kernel.k:
            raise ValueError(
                f"weights have {w.shape[0]} kernel slots but layout has {self.kernel.k} points"
            )
        radius = check_positive(self.radius, "radius")
        scale = as_float_array(self.scale, "scale").reshape(-1)
        shift = as_float_array(self.shift, "shift").reshape(-1)
        if scale.shape[0] != w.shape[2] or shift.shape[0] != w.shape[2]:
            raise ValueError("scale/shift must have one entry per output channel")
        object.__setattr__(self, "weights", readonly(w))
        object.__setattr__(self, "radius", radius)
        object.__setattr__(self, "scale", readonly(scale))
        object.__setattr__(self, "shift", readonly(shift))
        object.__setattr__(self, "relu", bool(self.relu))

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights.shape[2]


def kpconv_apply(center, neighbor_points, neighbor_features, layer: ConvLayer,
                 normalized: bool = True) -> np.ndarray:
    """Kernel-point convolution at one center point.

    Sums, over the neighbors, the correlation-weighted application of the
    kernel weight matrices to the neighbor features. With ``normalized`` the
    sum is divided by the neighbor count, which makes the output invariant to
    sampling density; an empty neighborhood yields the zero vector.
    """
    center = check_vector(center, "center")
    pts = check_points(neighbor_points, "neighbor_points", allow_empty=True)
    feats = as_float_array(neighbor_features, "neighbor_features")
    if feats.ndim == 1:
        feats = feats.reshape(-1, 1) if layer.d_in == 1 else feats.reshape(1, -1)
    if feats.shape[0] != pts.shape[0]:
        raise ValueError("one feature row per neighbor point required")
    if feats.shape[1] != layer.d_in:
        raise ValueError(f"features have dimension {feats.shape[1]}, layer expects {layer.d_in}")
    n = pts.shape[0]
    if n == 0:
        return np.zeros(layer.d_out)
    h = correlations(pts - center, layer.kernel.points, layer.kernel.sigma)  # (n, K)
    agg = h.T @ feats  # (K, d_in)
    out = np.einsum("kd,kde->e", agg, layer.weights)
    if normalized:
        out = out / n
    return out
