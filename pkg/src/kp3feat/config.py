"""Dataset configuration profiles and the key=value config file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

DEFAULT_KEYPOINT_COUNTS = (5000, 2500, 1000, 500, 250)
DEFAULT_REPEATABILITY_COUNTS = (4, 8, 16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class DatasetConfig:
    """Every knob of an evaluation run, with the two standard profiles baked in.

    ``detection_radius`` of 0 means "use the model's first convolution
    radius". All values can be overridden via config file or CLI flags.
    """

    profile: str = "indoor"
    voxel_size: float = 0.03
    detection_radius: float = 0.0
    tau1: float = 0.10
    tau2: float = 0.05
    ransac_iterations: int = 50_000
    ransac_threshold: float = 0.10
    repeatability_threshold: float = 0.10
    rte_max: float = 2.0
    rre_max: float = 5.0
    registration_rmse_threshold: float = 0.2
    seed: int = 0
    pair_list: str = ""
    keypoint_counts: tuple[int, ...] = DEFAULT_KEYPOINT_COUNTS
    repeatability_counts: tuple[int, ...] = DEFAULT_REPEATABILITY_COUNTS

    def __post_init__(self):
        object.__setattr__(self, "keypoint_counts", tuple(int(k) for k in self.keypoint_counts))
        object.__setattr__(
            self, "repeatability_counts", tuple(int(k) for k in self.repeatability_counts)
        )
        for name in ("voxel_size", "tau1", "tau2", "ransac_threshold",
                     "repeatability_threshold", "rte_max", "rre_max",
                     "registration_rmse_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.detection_radius < 0:
            raise ValueError("detection_radius must be >= 0 (0 = model default)")
        if min(self.keypoint_counts, default=0) < 1 or min(self.repeatability_counts, default=0) < 1:
            raise ValueError("keypoint counts must be positive")


PROFILES = {
    # indoor fragments: 3 cm voxels, 10 cm inlier distance, 5% inlier ratio,
    # 50k RANSAC iterations, 0.1 m repeatability threshold
    "indoor": DatasetConfig(profile="indoor"),
    # outdoor scans: 30 cm voxels, success below 2 m / 5 degrees, 0.5 m
    # repeatability threshold; RANSAC inlier threshold follows the voxel size
    "outdoor": DatasetConfig(
        profile="outdoor",
        voxel_size=0.30,
        ransac_threshold=0.30,
        repeatability_threshold=0.50,
    ),
}


def profile_config(name: str, **overrides) -> DatasetConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r} (available: {sorted(PROFILES)})")
    return replace(PROFILES[name], **overrides) if overrides else PROFILES[name]


def _parse_value(field_type, text: str):
    if field_type == "int":
        return int(text)
    if field_type == "float":
        return float(text)
    if field_type == "str":
        return text
    # tuple of ints, comma separated
    return tuple(int(v) for v in text.split(",") if v.strip())


def read_config(path) -> DatasetConfig:
    """Parse a key=value config file.

    Unknown keys are rejected. A ``profile`` line selects the base profile
    (and may appear anywhere); other lines override individual fields.
    """
    field_types = {f.name: ("tuple" if "tuple" in str(f.type) else str(f.type)) for f in fields(DatasetConfig)}
    overrides = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in field_types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                overrides[key] = _parse_value(field_types[key], value)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    profile = overrides.pop("profile", "indoor")
    return profile_config(profile, **overrides)


def write_config(path, config: DatasetConfig) -> None:
    lines = []
    for f in fields(DatasetConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
