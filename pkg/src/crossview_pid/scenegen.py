"""Procedural cross-view scenes: a satellite world with repetitive structure, a
LiDAR-like point cloud and per-point ground features with a synthetic domain
shift.

World layout (world metric frame, origin at the world center, y down-image):

* a road along ``y`` centered at ``x = 0`` with dashed center markings,
* building-like blobs in rows on both sides of the road, repeating every
  ``repeat_period_m`` along the road (the ambiguity the candidate branch targets),
* optional random blobs ("vegetation") and unique high-contrast landmarks.

Each scene crops ``map_size`` pixels around the initial pose (so the initial
pose sits at the crop center) and expresses poses in the crop frame.
"""

from __future__ import annotations

import configparser
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    GroundIntrinsics,
    PointCloud,
    Pose,
    SatelliteIntrinsics,
    ground_plane_coords,
    metric_to_pixel,
    project_ground,
    sample_initial_pose,
    wrap_angle,
)
from .sampling import FeatureMap, bilinear_sample, build_pyramid

FORMAT_VERSION = 1
BLOB_MAGIC = b"XVPA"
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<i4")}


class SceneGenerationError(ValueError):
    """The requested scene would not be well posed."""


class DatasetFormatError(Exception):
    """Base class for dataset file problems."""


class DatasetVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of the procedural world and of the sensor rig."""

    map_size: int = 128
    world_height: int = 512
    world_width: int = 256
    meters_per_pixel: float = 0.5
    channels: int = 4
    road_width_m: float = 8.0
    repeat_period_m: float = 8.0
    blob_density: float = 2.0
    landmark_count: int = 12
    noise_sigma: float = 0.02
    domain_shift_seed: int = 7
    domain_shift_strength: float = 0.2
    n_worlds: int = 8
    n_points: int = 256
    heading_jitter_deg: float = 10.0
    lane_offset_m: float = 2.0
    min_range_m: float = 4.0
    max_range_m: float = 14.0
    fov_deg: float = 90.0
    camera_height_m: float = 1.65
    blur_px: float = 0.75

    def __post_init__(self):
        if self.repeat_period_m <= 0:
            raise ValueError("repeat period must be positive")
        if self.landmark_count < 0:
            raise ValueError("landmark count must be non-negative")
        if self.noise_sigma < 0 or self.blob_density < 0 or self.domain_shift_strength < 0:
            raise ValueError("noise sigma, blob density and shift strength must be non-negative")
        if self.channels < 1 or self.n_points < 1 or self.n_worlds < 1:
            raise ValueError("channels, n_points and n_worlds must be positive")
        if self.map_size > min(self.world_height, self.world_width):
            raise ValueError("scene map must fit inside the world")
        if not 0 < self.min_range_m < self.max_range_m:
            raise ValueError("need 0 < min_range_m < max_range_m")

    @property
    def scene_intrinsics(self) -> SatelliteIntrinsics:
        return SatelliteIntrinsics.centered(self.map_size, self.map_size, self.meters_per_pixel)

    @property
    def world_intrinsics(self) -> SatelliteIntrinsics:
        return SatelliteIntrinsics.centered(self.world_width, self.world_height, self.meters_per_pixel)

    @property
    def ground_intrinsics(self) -> GroundIntrinsics:
        half = math.radians(self.fov_deg) / 2.0
        width = 640.0
        f = (width / 2.0) / math.tan(half)
        # tall enough for ground points at min range and raised points above the horizon
        height = 2.0 * f * (self.camera_height_m / self.min_range_m) + 2.0
        return GroundIntrinsics(f, f, width / 2.0, height / 2.0, 0.1, width, height)


@dataclass(frozen=True)
class SceneSample:
    """One localization problem, poses in the crop frame."""

    satellite: FeatureMap
    cloud: PointCloud
    ground_features: np.ndarray = field(repr=False)
    gt: Pose = None
    init: Pose = None
    seed: int = 0
    K_s: SatelliteIntrinsics = None
    K_g: GroundIntrinsics = None

    @property
    def ground_valid(self) -> np.ndarray:
        return project_ground(self.K_g, self.cloud)[1]


# -- world -----------------------------------------------------------------------
def _pattern_mix(channels: int) -> np.ndarray:
    """Fixed channel mixture of the four base patterns; rows sum to one."""
    base = np.array(
        [
            [0.55, 0.25, 0.05, 0.15],
            [0.10, 0.05, 0.70, 0.15],
            [0.05, 0.35, 0.20, 0.40],
            [0.30, 0.10, 0.45, 0.15],
        ]
    )
    if channels <= 4:
        return base[:channels]
    extra = np.random.default_rng(12345).uniform(0.0, 1.0, size=(channels - 4, 4))
    extra /= extra.sum(axis=1, keepdims=True)
    return np.vstack([base, extra])


def _blob(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, radius: float,
          value: float = 1.0) -> None:
    """Soft disc (max-composited) in metric coordinates."""
    d2 = (xs - cx) ** 2 + (ys[:, None] - cy) ** 2
    np.maximum(canvas, value * np.exp(-0.5 * d2 / (0.6 * radius) ** 2) * (d2 < (2.5 * radius) ** 2),
               out=canvas)


def _box(canvas: np.ndarray, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, hw: float,
         hh: float) -> None:
    inside = (np.abs(xs - cx) <= hw) & (np.abs(ys[:, None] - cy) <= hh)
    canvas[inside] = 1.0


def generate_world(spec: WorldSpec, seed) -> FeatureMap:
    """Deterministic world raster ``(world_height, world_width, channels)`` in [0, 1]."""
    rng = np.random.default_rng(seed)
    H, W, res = spec.world_height, spec.world_width, spec.meters_per_pixel
    K = spec.world_intrinsics
    xs = (np.arange(W) - K.cu) * res
    ys = (np.arange(H) - K.cv) * res
    half_road = spec.road_width_m / 2.0
    period = spec.repeat_period_m

    road = np.broadcast_to(
        np.clip(half_road + 0.5 - np.abs(xs), 0.0, 1.0)[None, :], (H, W)
    ).copy()

    phase = rng.uniform(0.0, period)
    markings = np.zeros((H, W))
    dash = ((ys - phase) % period) < 0.5 * period
    markings[np.ix_(dash, np.abs(xs) <= 0.3)] = 1.0

    lattice = np.zeros((H, W))
    n_rows = int(math.ceil((H * res) / period)) + 2
    offsets = [half_road + 2.5, half_road + 7.0]
    for j in range(-1, n_rows):
        cy = ys[0] + phase + j * period
        for off in offsets:
            for side in (-1.0, 1.0):
                _box(lattice, xs, ys, side * off, cy, 1.5, 0.3 * period)

    blobs = np.zeros((H, W))
    area = H * W * res * res
    for _ in range(int(round(spec.blob_density * area / 1000.0))):
        _blob(blobs, xs, ys, rng.uniform(xs[0], xs[-1]), rng.uniform(ys[0], ys[-1]),
              rng.uniform(1.0, 3.0))

    stack = np.stack([road, markings, lattice, blobs], axis=-1)
    world = stack @ _pattern_mix(spec.channels).T

    for _ in range(spec.landmark_count):
        mark = np.zeros((H, W))
        cx = rng.uniform(-(half_road + 10.0), half_road + 10.0)
        cy = rng.uniform(ys[0], ys[-1])
        _box(mark, xs, ys, cx, cy, rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6))
        signature = rng.uniform(-1.0, 1.0, size=spec.channels)
        world = world + mark[..., None] * signature

    world = np.clip(world, 0.0, 1.0)
    if spec.blur_px > 0:
        world = gaussian_filter(world, sigma=(spec.blur_px, spec.blur_px, 0), mode="nearest")
    return FeatureMap(world.astype(np.float32))


def domain_shift_matrix(spec: WorldSpec) -> np.ndarray:
    """Fixed invertible channel map ``I + strength * R`` (float32)."""
    rng = np.random.default_rng(spec.domain_shift_seed)
    C = spec.channels
    while True:
        A = np.eye(C) + spec.domain_shift_strength * rng.normal(size=(C, C)) / math.sqrt(C)
        if np.linalg.cond(A) < 10.0:
            return A.astype(np.float32)


def scan_pattern(spec: WorldSpec) -> np.ndarray:
    """Index-stable LiDAR template ``(N, 3)``: rings of increasing range, left to right.

    Every fourth point is raised above the ground plane (building walls);
    the rest lie on the road surface.
    """
    n = spec.n_points
    n_rings = max(1, int(round(math.sqrt(n))))
    per_ring = int(math.ceil(n / n_rings))
    half = math.radians(spec.fov_deg) / 2.0 * 0.9
    pts = []
    for k in range(n):
        ring, col = divmod(k, per_ring)
        t = (ring + 0.5) / n_rings
        rng_m = spec.min_range_m * (spec.max_range_m / spec.min_range_m) ** t
        az = -half + (col + 0.5) / per_ring * 2 * half
        X = rng_m * math.sin(az)
        Z = rng_m * math.cos(az)
        if k % 4 == 3:
            Z = max(Z, 6.0)
            Y = -2.0 * ((k // 4) % 5) / 4.0
        else:
            Y = spec.camera_height_m
        pts.append((X, Y, Z))
    return np.array(pts, dtype=np.float64)


# -- scenes -----------------------------------------------------------------------
def _round_pose32(p: Pose) -> np.ndarray:
    a = p.as_array().astype(np.float32)
    a[2] = np.float32(wrap_angle(float(a[2])))
    return a


def _within(init32: np.ndarray, gt32: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Step float32 components toward ``gt32`` until rounding no longer pushes them past the radii."""
    out = init32.copy()
    for i in range(3):
        while abs(float(out[i]) - float(gt32[i])) > radii[i]:
            out[i] = np.nextafter(out[i], gt32[i])
    return out


def generate_scene(world: FeatureMap, spec: WorldSpec, gt: Pose, noise_radii, seed,
                   domain_shift: np.ndarray | None = None, template: np.ndarray | None = None):
    """Build one scene around world-frame ground truth ``gt``.

    Returns ``(SceneSample, crop_origin)`` where ``crop_origin = (row0, col0)``
    locates the crop in the world raster.
    """
    radii = np.asarray(noise_radii, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(seed)
    Kw = spec.world_intrinsics
    Kc = spec.scene_intrinsics
    S = spec.map_size
    res = spec.meters_per_pixel

    init_w = sample_initial_pose(gt, radii, rng.integers(2**31))
    col0 = int(round(Kw.cu + init_w.x / res - S / 2.0))
    row0 = int(round(Kw.cv + init_w.y / res - S / 2.0))
    if col0 < 0 or row0 < 0 or col0 + S > spec.world_width or row0 + S > spec.world_height:
        raise SceneGenerationError(f"crop at ({row0}, {col0}) leaves the {spec.world_height}x{spec.world_width} world")
    ox = (col0 + S / 2.0 - Kw.cu) * res
    oy = (row0 + S / 2.0 - Kw.cv) * res

    gt32 = _round_pose32(Pose(gt.x - ox, gt.y - oy, gt.theta))
    init32 = _within(_round_pose32(Pose(init_w.x - ox, init_w.y - oy, init_w.theta)), gt32, radii)

    if template is None:
        template = scan_pattern(spec)
    jitter = rng.uniform(-0.15, 0.15, size=template.shape) * np.array([1.0, 0.0, 1.0])
    cloud32 = (template + jitter).astype(np.float32)
    cloud = PointCloud(cloud32.astype(np.float64))

    gt_pose = Pose.from_array(gt32.astype(np.float64))
    uv_crop = metric_to_pixel(Kc, ground_plane_coords(gt_pose.as_array(), cloud.points))
    sat_valid = (uv_crop[:, 0] >= 0) & (uv_crop[:, 0] <= S - 1) & (uv_crop[:, 1] >= 0) & (uv_crop[:, 1] <= S - 1)
    _, ground_valid = project_ground(spec.ground_intrinsics, cloud)
    frac = float(np.mean(sat_valid & ground_valid))
    if frac < 0.5:
        raise SceneGenerationError(f"only {frac:.0%} of points valid in both views at the ground truth")

    uv_world = uv_crop + np.array([col0, row0], dtype=np.float64)
    sat_feats, in_world = bilinear_sample(world, uv_world)
    A = np.eye(spec.channels, dtype=np.float32) if domain_shift is None else domain_shift
    feats = sat_feats @ A.T.astype(np.float64)
    if spec.noise_sigma > 0:
        feats = feats + rng.normal(0.0, spec.noise_sigma, size=feats.shape)
    feats = np.where(in_world[:, None], feats, 0.0).astype(np.float32)

    crop = FeatureMap(world.data[row0:row0 + S, col0:col0 + S])
    sample = SceneSample(
        satellite=crop,
        cloud=cloud,
        ground_features=feats,
        gt=gt_pose,
        init=Pose.from_array(init32.astype(np.float64)),
        seed=int(seed) if np.isscalar(seed) else 0,
        K_s=Kc,
        K_g=spec.ground_intrinsics,
    )
    return sample, (row0, col0)


def scene_seed(seed: int, index: int) -> int:
    """Per-scene seed derived only from (dataset seed, scene index)."""
    return int(np.random.default_rng([int(seed), 1, int(index)]).integers(2**31 - 1))


def sample_ground_truth(spec: WorldSpec, noise_radii, rng: np.random.Generator) -> tuple[int, Pose]:
    """World index and a world-frame ground-truth pose on the road."""
    radii = np.asarray(noise_radii, dtype=np.float64)
    res = spec.meters_per_pixel
    half_crop = spec.map_size * res / 2.0
    y_lim = spec.world_height * res / 2.0 - half_crop - radii[1] - 2.0
    if y_lim <= 0:
        raise SceneGenerationError("world too short for this crop size and noise")
    x = rng.uniform(-spec.lane_offset_m, spec.lane_offset_m)
    y = rng.uniform(-y_lim, y_lim)
    theta = math.radians(rng.uniform(-spec.heading_jitter_deg, spec.heading_jitter_deg))
    return int(rng.integers(spec.n_worlds)), Pose(x, y, theta)


# -- dataset ----------------------------------------------------------------------
@dataclass
class SceneBatch:
    """Stacked arrays for a batch of scenes sharing map size and point count."""

    levels: list  # per level (B, H_l, W_l, C) float32, coarsest first
    intrinsics: list  # SatelliteIntrinsics per level
    clouds: np.ndarray  # (B, N, 3) float64
    ground: np.ndarray  # (B, N, C) float32
    ground_valid: np.ndarray  # (B, N) bool
    init: np.ndarray  # (B, 3) float64
    gt: np.ndarray  # (B, 3) float64
    indices: np.ndarray

    def __len__(self) -> int:
        return self.clouds.shape[0]


@dataclass
class Dataset:
    spec: WorldSpec
    noise_radii: tuple
    seed: int
    worlds: np.ndarray  # (n_worlds, H, W, C) float32
    domain_shift: np.ndarray  # (C, C) float32
    scene_meta: np.ndarray  # (S, 4) int32: world, row0, col0, seed
    clouds: np.ndarray  # (S, N, 3) float32
    ground: np.ndarray  # (S, N, C) float32
    poses: np.ndarray  # (S, 2, 3) float32: gt, init (crop frame)

    def __len__(self) -> int:
        return int(self.scene_meta.shape[0])

    @property
    def K_s(self) -> SatelliteIntrinsics:
        return self.spec.scene_intrinsics

    @property
    def K_g(self) -> GroundIntrinsics:
        return self.spec.ground_intrinsics

    def satellite(self, i: int) -> np.ndarray:
        w, r0, c0, _ = (int(v) for v in self.scene_meta[i])
        S = self.spec.map_size
        return self.worlds[w, r0:r0 + S, c0:c0 + S]

    def scene(self, i: int) -> SceneSample:
        return SceneSample(
            satellite=FeatureMap(self.satellite(i)),
            cloud=PointCloud(self.clouds[i].astype(np.float64)),
            ground_features=self.ground[i],
            gt=Pose.from_array(self.poses[i, 0].astype(np.float64)),
            init=Pose.from_array(self.poses[i, 1].astype(np.float64)),
            seed=int(self.scene_meta[i, 3]),
            K_s=self.K_s,
            K_g=self.K_g,
        )

    def batch(self, indices, levels: int = 3) -> SceneBatch:
        indices = np.asarray(indices, dtype=np.int64)
        per_level = [[] for _ in range(levels)]
        intr = None
        for i in indices:
            pyr = build_pyramid(FeatureMap(self.satellite(int(i))), levels, self.K_s)
            for l, fm in enumerate(pyr.levels):
                per_level[l].append(fm.data)
            intr = list(pyr.intrinsics)
        if intr is None:
            intr = list(build_pyramid(FeatureMap(np.zeros((self.spec.map_size,) * 2 + (1,))), levels,
                                      self.K_s).intrinsics)
        clouds = self.clouds[indices].astype(np.float64)
        gv = np.stack([project_ground(self.K_g, c)[1] for c in clouds]) if len(indices) else np.zeros((0, 0), bool)
        return SceneBatch(
            levels=[np.stack(l).astype(np.float32) for l in per_level] if len(indices) else [],
            intrinsics=intr,
            clouds=clouds,
            ground=self.ground[indices].astype(np.float32),
            ground_valid=gv,
            init=self.poses[indices, 1].astype(np.float64),
            gt=self.poses[indices, 0].astype(np.float64),
            indices=indices,
        )

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.spec, self.noise_radii, self.seed, self.worlds, self.domain_shift,
                       self.scene_meta[idx], self.clouds[idx], self.ground[idx], self.poses[idx])


def _one_scene(args):
    spec, worlds, A, template, radii, seed, idx = args
    s = scene_seed(seed, idx)
    for attempt in range(32):
        rng = np.random.default_rng([s, attempt])
        w, gt = sample_ground_truth(spec, radii, rng)
        try:
            sample, (r0, c0) = generate_scene(FeatureMap(worlds[w]), spec, gt, radii,
                                              int(rng.integers(2**31 - 1)), A, template)
        except SceneGenerationError:
            continue
        return (w, r0, c0, s), sample
    raise SceneGenerationError(f"scene {idx}: no well-posed ground truth after 32 attempts")


def generate_dataset(spec: WorldSpec, n_scenes: int, noise_radii, seed: int, workers: int = 1) -> Dataset:
    """Pure function of ``(spec, n_scenes, noise_radii, seed)``; ``workers`` only changes speed."""
    radii = tuple(float(r) for r in noise_radii)
    worlds = np.stack([generate_world(spec, [int(seed), 0, w]).data for w in range(spec.n_worlds)])
    A = domain_shift_matrix(spec)
    template = scan_pattern(spec)
    jobs = [(spec, worlds, A, template, radii, seed, i) for i in range(n_scenes)]
    if workers > 1 and n_scenes > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_one_scene, jobs, chunksize=16))
    else:
        results = [_one_scene(j) for j in jobs]
    N, C = spec.n_points, spec.channels
    meta = np.array([r[0] for r in results], dtype=np.int32).reshape(n_scenes, 4)
    clouds = np.array([r[1].cloud.points for r in results], dtype=np.float32).reshape(n_scenes, N, 3)
    ground = np.array([r[1].ground_features for r in results], dtype=np.float32).reshape(n_scenes, N, C)
    poses = np.array([[r[1].gt.as_array(), r[1].init.as_array()] for r in results],
                     dtype=np.float32).reshape(n_scenes, 2, 3)
    return Dataset(spec, radii, int(seed), worlds.astype(np.float32), A, meta, clouds, ground, poses)


# -- persistence ------------------------------------------------------------------
_BLOBS = ("worlds", "domain_shift", "scene_meta", "clouds", "ground", "poses")


def write_blob(path: Path, arr: np.ndarray) -> None:
    """16-byte header (magic, dtype tag, rank, five u16 dims), payload, CRC32."""
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        tag, data = 1, arr.astype("<f4")
    elif arr.dtype.kind in "iu":
        tag, data = 2, arr.astype("<i4")
    else:
        raise TypeError(f"unsupported blob dtype {arr.dtype}")
    if arr.ndim > 5 or any(d > 0xFFFF for d in arr.shape):
        raise ValueError(f"blob shape {arr.shape} exceeds the header limits (rank <= 5, dims < 65536)")
    dims = list(arr.shape) + [0] * (5 - arr.ndim)
    header = BLOB_MAGIC + struct.pack("<BB5H", tag, arr.ndim, *dims)
    body = header + np.ascontiguousarray(data).tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_blob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than header + checksum")
    if raw[:4] != BLOB_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}")
    tag, rank, *dims = struct.unpack("<BB5H", raw[4:16])
    if tag not in DTYPE_TAGS or rank > 5:
        raise DatasetFormatError(f"{path}: bad dtype tag {tag} or rank {rank}")
    shape = tuple(dims[:rank])
    dt = DTYPE_TAGS[tag]
    expected = 16 + int(np.prod(shape, dtype=np.int64)) * dt.itemsize + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise DatasetFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    return np.frombuffer(raw[16:-4], dtype=dt).reshape(shape).copy()


def save_dataset(dataset: Dataset, path) -> Path:
    """Write ``manifest.txt`` plus one blob per array into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["dataset"] = {
        "format_version": str(FORMAT_VERSION),
        "seed": str(dataset.seed),
        "n_scenes": str(len(dataset)),
        "noise_x_m": repr(float(dataset.noise_radii[0])),
        "noise_y_m": repr(float(dataset.noise_radii[1])),
        "noise_theta_rad": repr(float(dataset.noise_radii[2])),
        "noise_theta_deg": f"{math.degrees(dataset.noise_radii[2]):.6g}",
    }
    cp["world"] = {k: repr(v) for k, v in asdict(dataset.spec).items()}
    cp["blobs"] = {name: f"{name}.bin" for name in _BLOBS}
    with open(root / "manifest.txt", "w", encoding="utf-8") as fh:
        cp.write(fh)
    for name in _BLOBS:
        write_blob(root / f"{name}.bin", getattr(dataset, name))
    return root


def _parse_value(text: str, kind):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    raise TypeError(kind)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    cp = configparser.ConfigParser()
    cp.read(manifest, encoding="utf-8")
    version = cp.getint("dataset", "format_version", fallback=-1)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{manifest}: format version {version}, expected {FORMAT_VERSION}")
    kinds = {f.name: f.type for f in fields(WorldSpec)}
    spec_kwargs = {}
    for key, text in cp["world"].items():
        if key not in kinds:
            raise DatasetFormatError(f"{manifest}: unknown world key {key!r}")
        spec_kwargs[key] = _parse_value(text, int if kinds[key] in (int, "int") else float)
    spec = WorldSpec(**spec_kwargs)
    arrays = {name: read_blob(root / cp["blobs"][name]) for name in _BLOBS}
    radii = (
        float(cp["dataset"]["noise_x_m"]),
        float(cp["dataset"]["noise_y_m"]),
        float(cp["dataset"]["noise_theta_rad"]),
    )
    ds = Dataset(spec, radii, cp.getint("dataset", "seed"), **arrays)
    if len(ds) != cp.getint("dataset", "n_scenes"):
        raise DatasetFormatError(f"{manifest}: n_scenes disagrees with the blobs")
    return ds
