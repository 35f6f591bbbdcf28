"""File formats: PLY clouds, pose files, feature binaries, pair manifests."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FeatureMap, PointCloud, RigidTransform

# ---------------------------------------------------------------------------
# PLY point clouds (ASCII and binary little-endian, x/y/z required)
# ---------------------------------------------------------------------------


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    pass


class PlyTruncatedError(PlyError):
    pass


class PlyMissingCoordinatesError(PlyError):
    pass


_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyHeaderError("no end_header line")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_start = end + len(b"end_header\n")
    if not header or header[0].strip() != "ply":
        raise PlyHeaderError("file does not start with 'ply'")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code)]), in order
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment" or parts[0] == "obj_info":
            continue
        if parts[0] == "format":
            if len(parts) < 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(f"unsupported format line: {line.strip()!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyHeaderError(f"malformed element line: {line.strip()!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyHeaderError(f"bad element count: {line.strip()!r}") from None
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise PlyHeaderError("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_DTYPES:
                    raise PlyHeaderError(f"unsupported property: {line.strip()!r}")
                elements[-1][2].append((parts[2], _PLY_DTYPES[parts[1]]))
        else:
            raise PlyHeaderError(f"unrecognized header line: {line.strip()!r}")
    if fmt is None:
        raise PlyHeaderError("missing format line")
    return fmt, elements, body_start


def read_ply(path) -> PointCloud:
    """Read an ASCII or binary little-endian PLY with float x/y/z properties.

    Properties other than the coordinates are ignored (with a warning naming
    them), so clouds carrying colors or normals still load.
    """
    data = Path(path).read_bytes()
    fmt, elements, pos = _parse_ply_header(data)

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyMissingCoordinatesError("no vertex element")
    names = [p[0] for p in vertex[2]]
    if any(c not in names for c in ("x", "y", "z")):
        raise PlyMissingCoordinatesError(f"vertex element lacks x/y/z (has {names})")
    extra = [n for n in names if n not in ("x", "y", "z")]
    if extra:
        warnings.warn(f"ignoring vertex properties {extra}", stacklevel=2)

    if fmt == "ascii":
        lines = data[pos:].decode("ascii", errors="replace").splitlines()
        lines = [l for l in lines if l.strip()]
        cursor = 0
        points = None
        for name, count, props in elements:
            if len(lines) - cursor < count:
                raise PlyTruncatedError(
                    f"element {name!r} needs {count} lines, {len(lines) - cursor} left"
                )
            if name == "vertex":
                cols = {p: i for i, (p, _) in enumerate(props)}
                points = np.empty((count, 3))
                for i in range(count):
                    fields = lines[cursor + i].split()
                    if len(fields) < len(props):
                        raise PlyTruncatedError(f"vertex line {i} has too few fields")
                    try:
                        points[i] = [float(fields[cols[c]]) for c in ("x", "y", "z")]
                    except ValueError:
                        raise PlyError(f"non-numeric vertex line {i}") from None
            cursor += count
        return PointCloud(points)

    # binary little-endian; elements after the vertex data are never read
    for name, count, props in elements:
        if any(code == "list" for _, code in props):
            # reached only while the vertex element is still ahead of us
            raise PlyHeaderError(f"list properties in element {name!r} are not supported")
        dtype = np.dtype([(p, "<" + code) for p, code in props])
        nbytes = dtype.itemsize * count
        if len(data) - pos < nbytes:
            raise PlyTruncatedError(
                f"element {name!r} needs {nbytes} bytes, {len(data) - pos} left"
            )
        if name == "vertex":
            rows = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            points = np.stack(
                [rows["x"].astype(np.float64), rows["y"].astype(np.float64),
                 rows["z"].astype(np.float64)],
                axis=1,
            )
            return PointCloud(points)
        pos += nbytes
    raise PlyMissingCoordinatesError("no vertex element")  # unreachable after check above


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    """Write a cloud as PLY; binary preserves float64 coordinates bit-exactly."""
    n = cloud.n
    coord_type = "double" if binary else "float"
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        f"property {coord_type} x",
        f"property {coord_type} y",
        f"property {coord_type} z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        else:
            body = "\n".join(
                " ".join(f"{v:.9g}" for v in row) for row in cloud.points
            )
            fh.write((body + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Pose files: a pair header line of ids, then a 4x4 row-major matrix on 4 lines
# ---------------------------------------------------------------------------


class PoseFormatError(ValueError):
    pass


def _project_to_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1
        rot = u @ vt
    return rot


def read_pose_file(path) -> list[tuple[tuple[str, ...], RigidTransform]]:
    """Parse pose entries; rotations are re-orthonormalized if within 1e-6.

    Each entry is a header line of whitespace-separated ids followed by four
    lines of four numbers (row-major homogeneous matrix). Blank lines and
    ``#`` comments are skipped. Matrices whose rotation part deviates from
    orthonormal by more than 1e-6 per entry are rejected.
    """
    lines = [
        l.strip()
        for l in Path(path).read_text().splitlines()
        if l.strip() and not l.strip().startswith("#")
    ]
    entries = []
    i = 0
    while i < len(lines):
        key = tuple(lines[i].split())
        if len(lines) - i < 5:
            raise PoseFormatError(f"{path}: incomplete matrix block after {lines[i]!r}")
        rows = []
        for j in range(1, 5):
            fields = lines[i + j].split()
            if len(fields) != 4:
                raise PoseFormatError(f"{path}: matrix row needs 4 values: {lines[i + j]!r}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise PoseFormatError(f"{path}: non-numeric matrix row {lines[i + j]!r}") from None
        m = np.array(rows)
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise PoseFormatError(f"{path}: last matrix row must be 0 0 0 1 for {key}")
        rot = m[:3, :3]
        err = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if err > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise PoseFormatError(f"{path}: non-rigid rotation for {key} (error {err:.2e})")
        entries.append((key, RigidTransform(_project_to_rotation(rot), m[:3, 3])))
        i += 5
    return entries


def write_pose_file(path, entries) -> None:
    """Companion writer for :func:`read_pose_file`."""
    out = []
    for key, transform in entries:
        key = (key,) if isinstance(key, str) else tuple(key)
        out.append(" ".join(str(k) for k in key))
        m = transform.as_matrix()
        out.extend(" ".join(f"{v:.17g}" for v in row) for row in m)
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Feature binary: magic "K3FT", u32 N, u32 c, then responses and descriptors
# as float32 row-major matrices
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"K3FT"


class FeatureFormatError(ValueError):
    pass


def write_features(path, feature_map: FeatureMap) -> None:
    n, c = feature_map.responses.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, c))
        fh.write(np.ascontiguousarray(feature_map.responses, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(feature_map.descriptors, dtype="<f4").tobytes())


def read_features(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: not a feature file (bad magic)")
    if len(data) < 12:
        raise FeatureFormatError(f"{path}: truncated header")
    n, c = struct.unpack("<II", data[4:12])
    need = 12 + 2 * 4 * n * c
    if len(data) != need:
        raise FeatureFormatError(f"{path}: expected {need} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    responses = flat[: n * c].reshape(n, c)
    descriptors = flat[n * c :].reshape(n, c)
    return FeatureMap(responses, descriptors)


# ---------------------------------------------------------------------------
# Pair manifests: one evaluation pair per line
# ---------------------------------------------------------------------------


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairEntry:
    scene: str
    path_a: Path
    path_b: Path
    overlap: float
    transform: RigidTransform  # maps cloud B into cloud A's frame

    @property
    def key(self) -> tuple[str, str]:
        return (self.path_a.stem, self.path_b.stem)

    @property
    def pair_id(self) -> str:
        return f"{self.scene}/{self.path_a.stem}-{self.path_b.stem}"

    @property
    def in_evaluation_set(self) -> bool:
        return self.overlap > 0.30


@dataclass(frozen=True)
class PairManifest:
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    def evaluation_set(self) -> list:
        return [e for e in self.entries if e.in_evaluation_set]


def load_manifest(manifest_path, poses_path) -> PairManifest:
    """Read a pair manifest and attach ground-truth poses.

    Manifest lines are ``scene path_a path_b overlap`` (whitespace separated,
    ``#`` comments allowed); relative paths resolve against the manifest
    location. Poses are looked up in the pose file under the header
    ``<stem_a> <stem_b>``.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    poses = {}
    for key, transform in read_pose_file(poses_path):
        poses[tuple(key)] = transform

    entries = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ManifestError(
                f"{manifest_path}:{lineno}: expected 'scene path_a path_b overlap'"
            )
        scene, a, b, overlap_text = parts
        try:
            overlap = float(overlap_text)
        except ValueError:
            raise ManifestError(f"{manifest_path}:{lineno}: bad overlap {overlap_text!r}") from None
        if not 0.0 <= overlap <= 1.0:
            raise ManifestError(f"{manifest_path}:{lineno}: overlap must be in [0, 1]")
        path_a = (base / a).resolve() if not Path(a).is_absolute() else Path(a)
        path_b = (base / b).resolve() if not Path(b).is_absolute() else Path(b)
        key = (path_a.stem, path_b.stem)
        if key not in poses:
            raise ManifestError(f"{manifest_path}:{lineno}: no pose for pair {key}")
        entries.append(PairEntry(scene, path_a, path_b, overlap, poses[key]))
    if not entries:
        raise ManifestError(f"{manifest_path}: no pairs")
    return PairManifest(tuple(entries))
