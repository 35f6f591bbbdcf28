"""Fully convolutional encoder/decoder producing dense per-point descriptors.

The network operates on a point pyramid built by repeated grid subsampling
(grid size doubling per stage). Encoder stages are residual bottleneck blocks
around the density-normalized kernel-point convolution; strided transitions
carry features onto the next, coarser stage. The decoder walks back up with
nearest-neighbor feature copies, skip concatenations and pointwise (1x1)
convolutions, ending in a pointwise head whose rectified output is the raw
response matrix; descriptors are its L2-normalized rows.

Inference only: batch normalization is folded into per-channel scale/shift.
Weights are kept as float32 masters (the on-disk format) and promoted to
float64 for computation, so a save/load cycle reproduces forwards bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import FeatureMap, PointCloud
from .kernels import ConvLayer, KernelLayout, kernel_dispositions
from .neighbors import NeighborLists, grid_subsample
from .validation import as_float_array, check_points

MAGIC = b"KP3FEAT\x00"
FORMAT_VERSION = 1

REQUIRED_CHANNELS = (64, 128, 256, 512, 1024)
REQUIRED_OUT_DIM = 32

_TAG_CONFIG = 0
_TAG_KPCONV = 1
_TAG_UNARY = 2


class WeightFormatError(ValueError):
    """Base class for weight-file problems."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class ShapeMismatchError(WeightFormatError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything else derives from these.

    ``base_grid`` is quantized to float32 (its on-disk precision) so that a
    freshly built model and its reloaded copy use identical stage radii.
    """

    k: int = 15
    in_dim: int = 1
    out_dim: int = REQUIRED_OUT_DIM
    channels: tuple[int, ...] = REQUIRED_CHANNELS
    base_grid: float = 0.03
    radius_ratio: float = 2.5
    bottleneck_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "base_grid", float(np.float32(self.base_grid)))
        object.__setattr__(self, "radius_ratio", float(np.float32(self.radius_ratio)))
        if self.channels != REQUIRED_CHANNELS:
            raise ShapeMismatchError(
                f"encoder channel plan must be {REQUIRED_CHANNELS}, got {self.channels}"
            )
        if self.out_dim != REQUIRED_OUT_DIM:
            raise ShapeMismatchError(f"descriptor dimension must be {REQUIRED_OUT_DIM}")
        if self.k < 1 or self.in_dim < 1 or self.base_grid <= 0 or self.bottleneck_ratio < 1:
            raise ValueError("invalid model configuration")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    def grid(self, stage: int) -> float:
        return self.base_grid * (2.0 ** stage)

    def radius(self, stage: int) -> float:
        return self.radius_ratio * self.grid(stage)

    def decoder_channels(self) -> tuple[int, ...]:
        # Decoder mirrors the encoder: output at stage i has channels[i] dims.
        return self.channels[: self.n_stages - 1]


@dataclass(frozen=True)
class _Unary:
    """Pointwise (1x1) convolution with folded affine and optional rectifier."""

    weights: np.ndarray  # float32 (d_in, d_out)
    scale: np.ndarray  # float32 (d_out,)
    shift: np.ndarray  # float32 (d_out,)
    relu: bool

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weights.astype(np.float64)
        y = y * self.scale.astype(np.float64) + self.shift.astype(np.float64)
        if self.relu:
            np.maximum(y, 0.0, out=y)
        return y


@dataclass(frozen=True)
class _KPConv:
    """Kernel-point convolution unit with folded affine and optional rectifier."""

    kernel_points: np.ndarray  # float32 (K, 3), already scaled to the layer extent
    weights: np.ndarray  # float32 (K, d_in, d_out)
    scale: np.ndarray  # float32 (d_out,)
    shift: np.ndarray  # float32 (d_out,)
    relu: bool
    radius: float
    sigma: float

    @property
    def d_out(self) -> int:
        return self.weights.shape[2]

    def apply(self, query_pts, support_pts, feats, nb_indices, nb_splits) -> np.ndarray:
        y = _segment_conv(
            query_pts,
            support_pts,
            feats,
            nb_indices,
            nb_splits,
            self.kernel_points.astype(np.float64),
            self.sigma,
            self.weights.astype(np.float64),
        )
        y = y * self.scale.astype(np.float64) + self.shift.astype(np.float64)
        if self.relu:
            np.maximum(y, 0.0, out=y)
        return y


@dataclass(frozen=True)
class _SimpleBlock:
    conv: _KPConv


@dataclass(frozen=True)
class _Bottleneck:
    """Residual block: 1x1 down, kernel-point conv, 1x1 up, projected shortcut.

    For strided blocks the conv queries live on the next (coarser) stage and
    the shortcut pools input features onto it by nearest neighbor first.
    """

    down: _Unary
    conv: _KPConv
    up: _Unary
    shortcut: _Unary | None  # None = identity
    strided: bool


@dataclass(frozen=True)
class KpConvModel:
    """Layer graph, kernel dispositions and weights of the descriptor network."""

    config: ModelConfig
    encoder: tuple  # per stage: (block, ...) tuples
    decoder: tuple  # one _Unary per decoder stage, coarse to fine
    head: _Unary

    @property
    def first_radius(self) -> float:
        """Radius of the first convolution; the default detection radius."""
        return self.config.radius(0)

    @classmethod
    def random(cls, seed, base_grid: float = 0.03, k: int = 15,
               in_dim: int = 1) -> "KpConvModel":
        """A randomly initialized model, deterministic in ``seed``."""
        config = ModelConfig(k=k, in_dim=in_dim, base_grid=base_grid)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        builder = _RandomInit(rng)
        return _build_model(config, builder)

    def save(self, path) -> None:
        save_weights(self, path)


# ---------------------------------------------------------------------------
# Architecture skeleton
# ---------------------------------------------------------------------------


class _RandomInit:
    """Draws parameters for each unit in a fixed construction order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def unary(self, d_in, d_out, relu):
        w = self.rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        scale = self.rng.uniform(0.75, 1.25, size=d_out)
        shift = self.rng.normal(0.0, 0.05, size=d_out)
        return _Unary(w.astype(np.float32), scale.astype(np.float32),
                      shift.astype(np.float32), relu)

    def kpconv(self, kernel: KernelLayout, radius, d_in, d_out, relu):
        w = self.rng.normal(0.0, np.sqrt(2.0 / d_in), size=(kernel.k, d_in, d_out))
        scale = self.rng.uniform(0.75, 1.25, size=d_out)
        shift = self.rng.normal(0.0, 0.05, size=d_out)
        return _KPConv(kernel.points.astype(np.float32), w.astype(np.float32),
                       scale.astype(np.float32), shift.astype(np.float32),
                       relu, radius, kernel.sigma)

    def head(self, d_in, d_out):
        w = self.rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        ones = np.ones(d_out, dtype=np.float32)
        zeros = np.zeros(d_out, dtype=np.float32)
        return _Unary(w.astype(np.float32), ones, zeros, True)


class _TensorInit:
    """Materializes units from a parsed record stream, validating shapes."""

    def __init__(self, records):
        self.records = records
        self.pos = 0

    def _next(self, tag, shapes):
        if self.pos >= len(self.records):
            raise ShapeMismatchError("weight file has fewer layer records than the model needs")
        rec_tag, tensors = self.records[self.pos]
        self.pos += 1
        if rec_tag != tag:
            raise ShapeMismatchError(
                f"record {self.pos - 1}: expected layer tag {tag}, found {rec_tag}"
            )
        if len(tensors) != len(shapes):
            raise ShapeMismatchError(f"record {self.pos - 1}: wrong tensor count")
        for t, s in zip(tensors, shapes):
            if t.shape != s:
                raise ShapeMismatchError(
                    f"record {self.pos - 1}: tensor shape {t.shape} != expected {s}"
                )
        return tensors

    def unary(self, d_in, d_out, relu):
        w, scale, shift = self._next(_TAG_UNARY, [(d_in, d_out), (d_out,), (d_out,)])
        return _Unary(w, scale, shift, relu)

    def kpconv(self, kernel: KernelLayout, radius, d_in, d_out, relu):
        kp, w, scale, shift = self._next(
            _TAG_KPCONV, [(kernel.k, 3), (kernel.k, d_in, d_out), (d_out,), (d_out,)]
        )
        return _KPConv(kp, w, scale, shift, relu, radius, kernel.sigma)

    def head(self, d_in, d_out):
        return self.unary(d_in, d_out, True)

    def finish(self):
        if self.pos != len(self.records):
            raise ShapeMismatchError(
                f"weight file has {len(self.records) - self.pos} unexpected trailing records"
            )


def _build_model(config: ModelConfig, init) -> KpConvModel:
    """Walk the architecture in serialization order, asking ``init`` for units."""
    canonical = kernel_dispositions(config.k, 1.0)

    def kernel_at(stage):
        return canonical.scaled(config.radius(stage))

    def bottleneck(d_in, d_out, stage, strided):
        mid = max(1, d_out // config.bottleneck_ratio)
        down = init.unary(d_in, mid, True)
        conv = init.kpconv(kernel_at(stage), config.radius(stage), mid, mid, True)
        up = init.unary(mid, d_out, False)
        shortcut = None if (d_in == d_out and not strided) else init.unary(d_in, d_out, False)
        return _Bottleneck(down, conv, up, shortcut, strided)

    channels = config.channels
    encoder = []
    stage0 = (
        _SimpleBlock(init.kpconv(kernel_at(0), config.radius(0), config.in_dim, channels[0], True)),
        bottleneck(channels[0], channels[0], 0, strided=False),
    )
    encoder.append(stage0)
    for i in range(1, config.n_stages):
        encoder.append(
            (
                bottleneck(channels[i - 1], channels[i], i - 1, strided=True),
                bottleneck(channels[i], channels[i], i, strided=False),
            )
        )

    decoder = []
    dec_channels = config.decoder_channels()
    prev = channels[-1]
    for i in reversed(range(config.n_stages - 1)):
        d_in = channels[i] + prev
        decoder.append(init.unary(d_in, dec_channels[i], True))
        prev = dec_channels[i]

    head = init.head(prev, config.out_dim)
    if isinstance(init, _TensorInit):
        init.finish()
    return KpConvModel(config, tuple(encoder), tuple(decoder), head)


def _walk_units(model: KpConvModel):
    """Units in the fixed serialization order."""
    for stage in model.encoder:
        for block in stage:
            if isinstance(block, _SimpleBlock):
                yield block.conv
            else:
                yield block.down
                yield block.conv
                yield block.up
                if block.shortcut is not None:
                    yield block.shortcut
    yield from model.decoder
    yield model.head


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class _Pyramid:
    points: list  # stage point arrays
    self_nb: list  # (indices, splits) per stage
    down_nb: list  # (indices, splits): queries = stage i, support = stage i-1
    cell_members: list  # per stage i: (indices, splits) of the stage-(i-1) points in each cell
    up_nearest: list  # per stage i: nearest stage-(i+1) index per stage-i point


def _flat_radius_neighbors(tree: cKDTree, support: np.ndarray, queries: np.ndarray,
                           r: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat neighbor arrays with a canonical (coordinate-sorted) order per query.

    Sorting each query's neighbors by support coordinates makes the summation
    order, and hence the forward pass bit pattern, independent of how the
    input points happened to be ordered.
    """
    lists = tree.query_ball_point(queries, r)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    splits = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum(counts, out=splits[1:])
    if splits[-1] == 0:
        return np.empty(0, dtype=np.int64), splits
    idx = np.concatenate([np.asarray(l, dtype=np.int64) for l in lists])
    qid = np.repeat(np.arange(len(lists), dtype=np.int64), counts)
    sp = support[idx]
    order = np.lexsort((sp[:, 2], sp[:, 1], sp[:, 0], qid))
    return idx[order], splits


def _build_pyramid(points: np.ndarray, config: ModelConfig) -> _Pyramid:
    # Grids anchor at the cloud's own min corner: shifting the whole cloud
    # then shifts the grids with it, which keeps forwards translation
    # invariant (everything downstream uses relative coordinates).
    anchor = points.min(axis=0)
    stage_points = [points]
    cell_members = [None]
    for i in range(1, config.n_stages):
        sub, members, splits = grid_subsample(
            stage_points[i - 1], config.grid(i), anchor, return_members=True
        )
        stage_points.append(sub)
        cell_members.append((members, splits))

    trees = [cKDTree(p) for p in stage_points]
    self_nb, down_nb, up_nearest = [], [None], []
    for i in range(config.n_stages):
        self_nb.append(_flat_radius_neighbors(trees[i], stage_points[i], stage_points[i], config.radius(i)))
    for i in range(1, config.n_stages):
        down_nb.append(
            _flat_radius_neighbors(trees[i - 1], stage_points[i - 1], stage_points[i], config.radius(i - 1))
        )
    for i in range(config.n_stages - 1):
        _, nearest = trees[i + 1].query(stage_points[i], k=1)
        up_nearest.append(np.asarray(nearest, dtype=np.int64).reshape(-1))
    return _Pyramid(stage_points, self_nb, down_nb, cell_members, up_nearest)


def _segment_conv(query_pts, support_pts, feats, nb_indices, nb_splits, kernel_pts,
                  sigma, weights, normalized: bool = True) -> np.ndarray:
    """Density-normalized kernel-point convolution over flat neighbor segments.

    Queries with empty neighborhoods get the zero vector. Work is chunked at
    segment boundaries so temporaries stay bounded on large clouds.
    """
    n_q = nb_splits.shape[0] - 1
    k, d_in, d_out = weights.shape
    counts = np.diff(nb_splits)
    out = np.zeros((n_q, d_out))
    if nb_indices.size == 0:
        return out
    budget = max(1, 4_000_000 // max(d_in, 1))  # flat entries per chunk

    start_q = 0
    while start_q < n_q:
        end_q = start_q + 1
        while end_q < n_q and nb_splits[end_q + 1] - nb_splits[start_q] <= budget:
            end_q += 1
        fa, fb = nb_splits[start_q], nb_splits[end_q]
        if fa == fb:
            start_q = end_q
            continue
        idx = nb_indices[fa:fb]
        c = counts[start_q:end_q]
        qid = np.repeat(np.arange(start_q, end_q, dtype=np.int64), c)
        offsets = support_pts[idx] - query_pts[qid]
        diff = offsets[:, None, :] - kernel_pts[None, :, :]
        h = np.maximum(0.0, 1.0 - np.sqrt(np.sum(diff * diff, axis=2)) / sigma)  # (nb, K)
        f = feats[idx]
        local_starts = (nb_splits[start_q:end_q] - fa).astype(np.int64)
        nonempty = c > 0
        acc = np.zeros((end_q - start_q, d_out))
        for kk in range(k):
            prod = h[:, kk : kk + 1] * f
            if nonempty.all():
                seg = np.add.reduceat(prod, local_starts, axis=0)
            else:
                seg = np.zeros((end_q - start_q, d_in))
                seg[nonempty] = np.add.reduceat(prod, local_starts[nonempty], axis=0)
            acc += seg @ weights[kk]
        out[start_q:end_q] = acc
        start_q = end_q

    if normalized:
        out /= np.maximum(counts, 1)[:, None]
    return out


def layer_forward(points, neighbors: NeighborLists, features, layer: ConvLayer,
                  queries=None) -> np.ndarray:
    """One convolution layer over a whole stage.

    Applies the density-normalized convolution at every query (default: the
    support points themselves), then the layer's folded affine and, if
    enabled, the rectifier.
    """
    points = check_points(points, "points")
    feats = as_float_array(features, "features")
    if feats.ndim != 2 or feats.shape[0] != points.shape[0]:
        raise ValueError("features must be (N, d_in) matching the support points")
    if feats.shape[1] != layer.d_in:
        raise ValueError(f"features have dimension {feats.shape[1]}, layer expects {layer.d_in}")
    query_pts = points if queries is None else check_points(queries, "queries")
    if len(neighbors) != query_pts.shape[0]:
        raise ValueError("one neighbor list per query required")
    out = _segment_conv(
        query_pts,
        points,
        feats,
        neighbors.indices,
        neighbors.splits,
        layer.kernel.points,
        layer.kernel.sigma,
        layer.weights,
    )
    out = out * layer.scale + layer.shift
    if layer.relu:
        np.maximum(out, 0.0, out=out)
    return out


def _block_forward(block, x, pyramid: _Pyramid, stage: int) -> np.ndarray:
    pts = pyramid.points
    if isinstance(block, _SimpleBlock):
        idx, splits = pyramid.self_nb[stage]
        return block.conv.apply(pts[stage], pts[stage], x, idx, splits)
    if block.strided:
        # stage is the *destination*; conv pulls from the finer stage below.
        idx, splits = pyramid.down_nb[stage]
        a = block.down.apply(x)
        c = block.conv.apply(pts[stage], pts[stage - 1], a, idx, splits)
        # Shortcut pools input features over each cell's members, mirroring
        # the barycenter subsampling of the coordinates.
        members, msplits = pyramid.cell_members[stage]
        sums = np.add.reduceat(x[members], msplits[:-1], axis=0)
        pooled = sums / np.diff(msplits)[:, None]
        s = block.shortcut.apply(pooled) if block.shortcut is not None else pooled
    else:
        idx, splits = pyramid.self_nb[stage]
        a = block.down.apply(x)
        c = block.conv.apply(pts[stage], pts[stage], a, idx, splits)
        s = block.shortcut.apply(x) if block.shortcut is not None else x
    y = block.up.apply(c) + s
    np.maximum(y, 0.0, out=y)
    return y


def network_forward(model: KpConvModel, cloud: PointCloud) -> FeatureMap:
    """Dense forward pass: one response row and one unit descriptor per point."""
    config = model.config
    points = cloud.points
    pyramid = _build_pyramid(points, config)

    x = np.ones((points.shape[0], config.in_dim))
    skips = []
    for stage, blocks in enumerate(model.encoder):
        for block in blocks:
            x = _block_forward(block, x, pyramid, stage)
        if stage < config.n_stages - 1:
            skips.append(x)

    for j, unary in enumerate(model.decoder):
        stage = config.n_stages - 2 - j
        up = x[pyramid.up_nearest[stage]]
        x = unary.apply(np.concatenate([skips[stage], up], axis=1))

    responses = model.head.apply(x)
    return FeatureMap.from_responses(responses)


# ---------------------------------------------------------------------------
# Weight file format (little-endian)
#
#   8 bytes  magic "KP3FEAT\0"
#   u32      format version
#   u32      record count
#   records: u32 tag, u32 n_tensors,
#            per tensor: u32 ndim, u32 dims[ndim], f32 data (row-major)
#
# The first record is the model configuration; the rest are layer records in
# the architecture's fixed order.
# ---------------------------------------------------------------------------


def _config_tensors(config: ModelConfig):
    params = np.array(
        [
            config.k,
            config.in_dim,
            config.out_dim,
            config.n_stages,
            config.base_grid,
            config.radius_ratio,
            config.bottleneck_ratio,
        ],
        dtype=np.float32,
    )
    channels = np.array(config.channels, dtype=np.float32)
    return [params, channels]


def _config_from_tensors(tensors) -> ModelConfig:
    if len(tensors) != 2 or tensors[0].shape != (7,):
        raise ShapeMismatchError("malformed configuration record")
    params, channels = tensors
    n_stages = int(params[3])
    if channels.shape != (n_stages,):
        raise ShapeMismatchError("configuration channel plan has the wrong length")
    return ModelConfig(
        k=int(params[0]),
        in_dim=int(params[1]),
        out_dim=int(params[2]),
        channels=tuple(int(c) for c in channels),
        base_grid=float(params[4]),
        radius_ratio=float(params[5]),
        bottleneck_ratio=int(params[6]),
    )


def _unit_record(unit):
    if isinstance(unit, _Unary):
        return _TAG_UNARY, [unit.weights, unit.scale, unit.shift]
    return _TAG_KPCONV, [unit.kernel_points, unit.weights, unit.scale, unit.shift]


def save_weights(model: KpConvModel, path) -> None:
    """Write the model in the binary weight format (bit-exact round trips)."""
    records = [( _TAG_CONFIG, _config_tensors(model.config))]
    records += [_unit_record(u) for u in _walk_units(model)]
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", FORMAT_VERSION, len(records))
    for tag, tensors in records:
        buf += struct.pack("<II", tag, len(tensors))
        for t in tensors:
            t = np.ascontiguousarray(t, dtype="<f4")
            buf += struct.pack("<I", t.ndim)
            buf += struct.pack(f"<{t.ndim}I", *t.shape)
            buf += t.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"weight file truncated: needed {n} bytes at offset {self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_weights(path) -> KpConvModel:
    """Read and fully validate a model from the binary weight format."""
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    if cur.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: not a weight file (bad magic)")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    n_records = cur.u32()
    records = []
    for _ in range(n_records):
        tag = cur.u32()
        n_tensors = cur.u32()
        tensors = []
        for _ in range(n_tensors):
            ndim = cur.u32()
            if ndim > 8:
                raise ShapeMismatchError(f"{path}: implausible tensor rank {ndim}")
            shape = tuple(cur.u32() for _ in range(ndim))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = cur.take(4 * count)
            tensors.append(np.frombuffer(raw, dtype="<f4").reshape(shape))
        records.append((tag, tensors))
    if cur.pos != len(data):
        raise TruncatedFileError(f"{path}: {len(data) - cur.pos} trailing bytes")
    if not records or records[0][0] != _TAG_CONFIG:
        raise ShapeMismatchError(f"{path}: first record must be the model configuration")
    config = _config_from_tensors(records[0][1])
    return _build_model(config, _TensorInit(records[1:]))
