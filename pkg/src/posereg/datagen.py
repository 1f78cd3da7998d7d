"""Synthetic pose-labelled data and the image preprocessing chain.

A scene is a handful of flat-shaded coloured boxes standing on a ground
plane under a sky gradient. Rendering is per-pixel ray casting, so it is a
pure function of (scene, pose). Trajectories imitate a pedestrian walking in
front of the landmark field.
"""
from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import (
    Pose,
    format_pose_fields,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
)

logger = logging.getLogger(__name__)

LABEL_HEADER = "# posereg labels: frame_id X Y Z W P Q R (camera-to-world, quaternion scalar first)"

# camera looking along world +y: x right, y down (world -z), z forward (world +y)
_LOOK_FORWARD = quat_from_axis_angle([1.0, 0.0, 0.0], -math.pi / 2)
_FACE_SHADE = np.array([0.8, 1.0, 0.65])
_SKY_HORIZON = np.array([0.86, 0.9, 0.95])
_SKY_ZENITH = np.array([0.3, 0.5, 0.88])
_GROUND_HORIZON = np.array([0.62, 0.58, 0.52])
_GROUND_NEAR = np.array([0.3, 0.33, 0.26])


class DegenerateViewError(ValueError):
    pass


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class Landmark:
    id: int
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    color: tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.subtract(self.center, self.half_size)

    @property
    def hi(self) -> np.ndarray:
        return np.add(self.center, self.half_size)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent: tuple[float, float, float]
    landmarks: tuple[Landmark, ...]
    intrinsics: Intrinsics

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def walk_region(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box that camera positions are drawn from."""
        ex, ey, ez = self.extent
        lo = np.array([0.05 * ex, 0.05 * ey, 0.5 * ez])
        hi = np.array([0.95 * ex, 0.4 * ey, 0.85 * ez])
        return lo, hi


@dataclass
class PoseSample:
    """One rendered frame. ``image`` is ``[3, H, W]`` in [0, 1]."""

    image: np.ndarray
    pose: Pose
    frame_id: str = ""
    landmark_mask: np.ndarray | None = None
    # per-pixel landmark id, -1 for background; synthetic-only
    landmark_index: np.ndarray | None = None


@dataclass(frozen=True)
class CropSpec:
    rescale_side: int = 256
    crop_side: int = 224
    mode: str = "center"
    dense_count: int = 128

    def __post_init__(self):
        if self.crop_side > self.rescale_side:
            raise ValueError(f"crop_side {self.crop_side} exceeds rescale_side {self.rescale_side}")
        if self.mode not in ("random", "center", "dense"):
            raise ValueError(f"unknown crop mode {self.mode!r}")
        if self.dense_count < 1:
            raise ValueError("dense_count must be positive")


def desk_crop_spec(input_size: int = 64, mode: str = "center") -> CropSpec:
    """Crop spec with the 256 -> 224 ratio scaled down to ``input_size``."""
    return CropSpec(rescale_side=int(math.floor(input_size * 256 / 224 + 0.5)), crop_side=input_size, mode=mode)


# -- scene --------------------------------------------------------------------


def generate_scene(
    seed: int,
    extent=(10.0, 10.0, 2.0),
    n_landmarks: int = 16,
    resolution: int = 64,
    focal: float | None = None,
) -> SceneSpec:
    extent = tuple(float(e) for e in extent)
    if len(extent) != 3 or min(extent) <= 0:
        raise ValueError(f"extent must be three positive lengths, got {extent}")
    if n_landmarks < 8:
        raise ValueError("a scene needs at least 8 landmarks")
    ex, ey, ez = extent
    rng = np.random.default_rng(seed)
    hues = (np.arange(n_landmarks) + rng.uniform(0, 0.5)) / n_landmarks
    rng.shuffle(hues)
    landmarks = []
    for k in range(n_landmarks):
        hx = rng.uniform(0.03, 0.08) * ex
        hy = rng.uniform(0.03, 0.08) * ey
        height = rng.uniform(0.3, 1.0) * ez
        cx = rng.uniform(hx, ex - hx)
        cy = rng.uniform(0.5 * ey + hy, ey - hy)
        color = colorsys.hsv_to_rgb(float(hues[k]), rng.uniform(0.55, 1.0), rng.uniform(0.45, 1.0))
        landmarks.append(
            Landmark(
                id=k,
                center=(float(cx), float(cy), float(height / 2)),
                half_size=(float(hx), float(hy), float(height / 2)),
                color=tuple(float(c) for c in color),
            )
        )
    if focal is None:
        focal = 0.75 * resolution
    intr = Intrinsics(focal=float(focal), cx=resolution / 2, cy=resolution / 2, width=resolution, height=resolution)
    return SceneSpec(seed=int(seed), extent=extent, landmarks=tuple(landmarks), intrinsics=intr)


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions through pixel centers, ``[H, W, 3]``."""
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.focal
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.focal
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def project_points(intr: Intrinsics, pose: Pose, points) -> np.ndarray:
    """Pinhole projection ``u = f X / Z + cx`` of world points, ``[N, 2]``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = (points - pose.position) @ pose.rotation_matrix()
    return np.stack([intr.focal * cam[:, 0] / cam[:, 2] + intr.cx, intr.focal * cam[:, 1] / cam[:, 2] + intr.cy], axis=1)


def render_view(scene: SceneSpec, pose: Pose, frame_id: str = "") -> PoseSample:
    intr = scene.intrinsics
    origin = pose.position
    lo = np.array([lm.lo for lm in scene.landmarks])
    hi = np.array([lm.hi for lm in scene.landmarks])
    inside = np.all((origin >= lo) & (origin <= hi), axis=1)
    if np.any(inside):
        raise DegenerateViewError(f"camera at {origin} is inside landmark {int(np.argmax(inside))}")

    dirs = pixel_rays(intr) @ pose.rotation_matrix().T
    d = dirs.reshape(-1, 1, 3)
    d_safe = np.where(np.abs(d) < 1e-300, np.copysign(1e-300, d), d)
    t1 = (lo[None] - origin) / d_safe
    t2 = (hi[None] - origin) / d_safe
    tmin = np.minimum(t1, t2)
    t_near = tmin.max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_far >= t_near) & (t_near > 1e-9)
    depth = np.where(hit, t_near, np.inf)
    nearest = np.argmin(depth, axis=1)
    rows = np.arange(depth.shape[0])
    any_hit = np.isfinite(depth[rows, nearest])
    face = np.argmax(tmin[rows, nearest], axis=1)

    albedo = np.array([lm.color for lm in scene.landmarks])
    lm_color = albedo[nearest] * _FACE_SHADE[face][:, None]

    flat = dirs.reshape(-1, 3)
    elev = flat[:, 2] / np.linalg.norm(flat, axis=1)
    up = np.sqrt(np.clip(elev, 0.0, 1.0))[:, None]
    down = np.sqrt(np.clip(-elev, 0.0, 1.0))[:, None]
    sky = _SKY_HORIZON + (_SKY_ZENITH - _SKY_HORIZON) * up
    ground = _GROUND_HORIZON + (_GROUND_NEAR - _GROUND_HORIZON) * down
    background = np.where((elev > 0)[:, None], sky, ground)

    rgb = np.where(any_hit[:, None], lm_color, background)
    rgb = np.clip(rgb, 0.0, 1.0)
    h, w = intr.height, intr.width
    image = rgb.reshape(h, w, 3).transpose(2, 0, 1).copy()
    ids = np.where(any_hit, nearest, -1).reshape(h, w)
    return PoseSample(image=image, pose=pose, frame_id=frame_id, landmark_mask=ids >= 0, landmark_index=ids)


def dominant_landmark(sample: PoseSample) -> int:
    """Id of the landmark covering the most pixels, or -1 if none is visible."""
    ids = sample.landmark_index[sample.landmark_index >= 0]
    if ids.size == 0:
        return -1
    return int(np.argmax(np.bincount(ids)))


def perturb_image(image: np.ndarray, blur_sigma: float = 0.0, brightness: float = 1.0) -> np.ndarray:
    """Optional Gaussian blur and brightness scaling (qualitative robustness probes)."""
    out = np.asarray(image, dtype=np.float64)
    if blur_sigma > 0:
        from scipy.ndimage import gaussian_filter

        out = np.stack([gaussian_filter(ch, blur_sigma, mode="nearest") for ch in out])
    return np.clip(out * brightness, 0.0, 1.0)


# -- trajectories -------------------------------------------------------------


def look_orientation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Camera-to-world quaternion for a camera looking along +y, then yawed
    about world z, pitched about its own x axis and rolled about its view axis."""
    q = quat_multiply(quat_from_axis_angle([0, 0, 1], yaw), _LOOK_FORWARD)
    q = quat_multiply(q, quat_from_axis_angle([1, 0, 0], pitch))
    q = quat_multiply(q, quat_from_axis_angle([0, 0, 1], roll))
    return quat_normalize(q)


def sample_trajectory(scene: SceneSpec, spacing: float, count: int, seed: int) -> list[Pose]:
    """Walking-path poses with consecutive positions about ``spacing`` apart."""
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng([int(seed), 7919])
    lo, hi = scene.walk_region()
    pos = rng.uniform(lo, hi)
    heading = rng.uniform(-math.pi, math.pi)
    yaw = rng.uniform(-math.radians(30), math.radians(30))
    max_yaw = math.radians(45)
    poses = []
    for k in range(count):
        if k > 0:
            for attempt in range(1000):
                if attempt:
                    heading = rng.uniform(-math.pi, math.pi)
                else:
                    heading += rng.normal(0.0, math.radians(25))
                step = spacing * rng.uniform(0.85, 1.15)
                dz = float(np.clip(rng.normal(0.0, 0.1 * spacing), -0.3 * spacing, 0.3 * spacing))
                cand = pos + np.array([step * math.cos(heading), step * math.sin(heading), dz])
                cand[2] = np.clip(cand[2], lo[2], hi[2])
                if np.all(cand[:2] >= lo[:2]) and np.all(cand[:2] <= hi[:2]):
                    pos = cand
                    break
            else:
                raise RuntimeError(f"could not place trajectory step {k} at spacing {spacing}")
            yaw = float(np.clip(yaw + rng.normal(0.0, math.radians(12)), -max_yaw, max_yaw))
        pitch = float(np.clip(rng.normal(0.0, math.radians(5)), -math.radians(10), math.radians(10)))
        roll = float(np.clip(rng.normal(0.0, math.radians(3)), -math.radians(6), math.radians(6)))
        poses.append(Pose(pos.copy(), look_orientation(yaw, pitch, roll)))
    return poses


def interpolation_poses(train_poses: Sequence[Pose], count: int, lateral_offset: float, scene: SceneSpec) -> list[Pose]:
    """Test poses midway between consecutive training poses, shifted sideways.

    The shift is perpendicular to the walking direction in the ground plane,
    giving a path parallel to the training path.
    """
    if len(train_poses) < 2:
        raise ValueError("need at least two training poses")
    lo, hi = scene.walk_region()
    pick = np.unique(np.linspace(0, len(train_poses) - 2, count).round().astype(int))
    out = []
    for i in pick:
        a, b = train_poses[i], train_poses[i + 1]
        mid = 0.5 * (a.position + b.position)
        step = b.position[:2] - a.position[:2]
        norm = np.linalg.norm(step)
        side = np.array([-step[1], step[0]]) / norm if norm > 0 else np.array([1.0, 0.0])
        pos = mid.copy()
        pos[:2] += lateral_offset * side
        pos = np.clip(pos, lo, hi)
        qb = b.orientation if a.orientation @ b.orientation >= 0 else -b.orientation
        out.append(Pose(pos, quat_normalize(a.orientation + qb)))
    return out


def render_poses(scene: SceneSpec, poses: Sequence[Pose], prefix: str = "frame") -> list[PoseSample]:
    return [render_view(scene, p, frame_id=f"{prefix}{i:05d}.ppm") for i, p in enumerate(poses)]


# -- preprocessing ------------------------------------------------------------


def _resize_axis(arr: np.ndarray, axis: int, out_size: int) -> np.ndarray:
    in_size = arr.shape[axis]
    if in_size == out_size:
        return arr
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    shape = [1] * arr.ndim
    shape[axis] = out_size
    frac = frac.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - frac) + np.take(arr, i1, axis=axis) * frac


def rescale_shortest_side(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of ``[3, H, W]`` so that min(H', W') == target."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if h <= w:
        nh, nw = target, int(math.floor(w * target / h + 0.5))
    else:
        nh, nw = int(math.floor(h * target / w + 0.5)), target
    return _resize_axis(_resize_axis(image, 1, nh), 2, nw)


def _dense_grid(dense_count: int, span_h: int, span_w: int) -> tuple[int, int]:
    best = None
    for r in range(1, dense_count + 1):
        if dense_count % r:
            continue
        s = dense_count // r
        if span_h == 0 and r > 1 or span_w == 0 and s > 1:
            continue
        if span_h and span_w:
            score = abs(math.log(r / s) - math.log(span_h / span_w))
        else:
            score = 0.0
        if best is None or score < best[0] - 1e-12:
            best = (score, r, s)
    if best is None:
        # one of the spans is zero: all crops coincide along that axis
        return (1, dense_count) if span_h == 0 else (dense_count, 1)
    return best[1], best[2]


def crop_offsets(h: int, w: int, spec: CropSpec, rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    c = spec.crop_side
    if c > h or c > w:
        raise ValueError(f"crop side {c} exceeds image size {h}x{w}")
    span_h, span_w = h - c, w - c
    if spec.mode == "center":
        return [(span_h // 2, span_w // 2)]
    if spec.mode == "random":
        if rng is None:
            raise ValueError("random crops need an rng")
        return [(int(rng.integers(0, span_h + 1)), int(rng.integers(0, span_w + 1)))]
    r, s = _dense_grid(spec.dense_count, span_h, span_w)
    rows = np.floor(np.linspace(0, span_h, r) + 0.5).astype(int)
    cols = np.floor(np.linspace(0, span_w, s) + 0.5).astype(int)
    return [(int(a), int(b)) for a in rows for b in cols]


def crop(image: np.ndarray, spec: CropSpec, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    _, h, w = image.shape
    c = spec.crop_side
    return [image[:, r : r + c, s : s + c] for r, s in crop_offsets(h, w, spec, rng)]


def compute_scene_mean(images: Iterable[np.ndarray]) -> np.ndarray:
    total = None
    n = 0
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if total is None:
            total = np.zeros_like(img)
        elif img.shape != total.shape:
            raise ValueError(f"image shape {img.shape} differs from {total.shape}")
        total += img
        n += 1
    if n == 0:
        raise ValueError("cannot compute a mean of zero images")
    return total / n


# -- files --------------------------------------------------------------------


def write_label_file(path, records) -> None:
    """Write ``(frame_id, Pose)`` pairs (or PoseSamples) one per line."""
    lines = [LABEL_HEADER]
    for rec in records:
        frame_id, pose = (rec.frame_id, rec.pose) if isinstance(rec, PoseSample) else rec
        if not frame_id or any(ch.isspace() for ch in frame_id):
            raise ValueError(f"frame id must be non-empty without whitespace: {frame_id!r}")
        lines.append(f"{frame_id} {format_pose_fields(pose)}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_label_lines(lines: Iterable[str]) -> tuple[list[tuple[str, Pose]], int]:
    """Parse label lines; returns the records and the number of skipped lines."""
    records = []
    skipped = 0
    for lineno, line in enumerate(lines, start=1):
        fields = line.replace(",", " ").split()
        if len(fields) != 8:
            if line.strip():
                skipped += 1
            continue
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError:
            skipped += 1
            continue
        if not all(math.isfinite(v) for v in values):
            raise LabelFormatError(f"line {lineno}: non-finite number")
        try:
            pose = Pose.from_vector(np.array(values))
        except ValueError as exc:
            raise LabelFormatError(f"line {lineno}: {exc}") from exc
        records.append((fields[0], pose))
    if not records:
        raise LabelFormatError("no parseable label lines")
    return records, skipped


def read_label_file(path) -> list[tuple[str, Pose]]:
    with open(path) as fh:
        records, skipped = parse_label_lines(fh)
    if skipped:
        logger.info("%s: skipped %d non-data lines", path, skipped)
    return records


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary 8-bit RGB portable pixmap from a ``[3, H, W]`` image in [0, 1]."""
    _, h, w = image.shape
    payload = to_uint8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + payload)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap from an ``[H, W]`` image in [0, 1]."""
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + to_uint8(image).tobytes())


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    return np.frombuffer(blob, dtype=np.uint8, offset=pos + 1), h, w


def read_ppm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P6")
    return data[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def read_pgm(path) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P5")
    return data[: h * w].reshape(h, w) / 255.0


def write_scene_spec(path, scene: SceneSpec) -> None:
    intr = scene.intrinsics
    lines = [
        "# posereg scene",
        f"seed = {scene.seed}",
        "extent = " + " ".join(format(e, ".17g") for e in scene.extent),
        f"n_landmarks = {len(scene.landmarks)}",
        f"resolution = {intr.width}",
        f"focal = {intr.focal!r}",
        "# landmark id cx cy cz hx hy hz r g b",
    ]
    for lm in scene.landmarks:
        vals = [*lm.center, *lm.half_size, *lm.color]
        lines.append(f"landmark {lm.id} " + " ".join(format(v, ".17g") for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene_spec(path) -> SceneSpec:
    """Load a scene file; the landmark table must match what the seed regenerates."""
    values: dict[str, str] = {}
    table = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("landmark "):
            table.append(line.split()[1:])
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    scene = generate_scene(
        int(values["seed"]),
        [float(v) for v in values["extent"].split()],
        n_landmarks=int(values["n_landmarks"]),
        resolution=int(values["resolution"]),
        focal=float(values["focal"]),
    )
    for row, lm in zip(table, scene.landmarks):
        stored = np.array([float(v) for v in row[1:]])
        if not np.array_equal(stored, np.array([*lm.center, *lm.half_size, *lm.color])):
            raise ValueError(f"{path}: landmark {row[0]} does not match the regenerated scene")
    if len(table) != len(scene.landmarks):
        raise ValueError(f"{path}: landmark table has {len(table)} rows, expected {len(scene.landmarks)}")
    return scene


def save_split(root, name: str, samples: Sequence[PoseSample]) -> None:
    root = Path(root)
    (root / "images" / name).mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"images/{name}/{s.frame_id}"
        write_ppm(root / rel, s.image)
        records.append((rel, s.pose))
    write_label_file(root / f"{name}.txt", records)


def load_split(root, name: str, scene: SceneSpec | None = None) -> list[PoseSample]:
    """Load a split; with ``scene`` given, landmark masks are re-rendered."""
    root = Path(root)
    out = []
    for frame_id, pose in read_label_file(root / f"{name}.txt"):
        image = read_ppm(root / frame_id)
        mask = ids = None
        if scene is not None:
            ref = render_view(scene, pose)
            mask, ids = ref.landmark_mask, ref.landmark_index
        out.append(PoseSample(image=image, pose=pose, frame_id=frame_id, landmark_mask=mask, landmark_index=ids))
    return out


class ScenePreprocessor(TransformerMixin, BaseEstimator):
    """Rescale, crop and subtract the per-scene mean image.

    ``fit`` stores the mean of the rescaled training images in ``mean_``;
    ``transform`` returns mean-subtracted center crops as ``[N, 3, c, c]``.
    The mean is sliced at each crop's offset before subtracting.
    """

    def __init__(self, rescale_side: int = 256, crop_side: int = 224, dense_count: int = 128):
        self.rescale_side = rescale_side
        self.crop_side = crop_side
        self.dense_count = dense_count

    def _spec(self, mode: str) -> CropSpec:
        return CropSpec(self.rescale_side, self.crop_side, mode, self.dense_count)

    def rescale(self, images) -> list[np.ndarray]:
        return [rescale_shortest_side(img, self.rescale_side) for img in images]

    def fit(self, X, y=None):
        self._spec("center")
        self.mean_ = compute_scene_mean(self.rescale(X))
        return self

    def _cut(self, rescaled: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
        check_is_fitted(self, "mean_")
        if rescaled.shape != self.mean_.shape:
            raise ValueError(f"image shape {rescaled.shape} differs from the fitted mean {self.mean_.shape}")
        r, s = offset
        c = self.crop_side
        return rescaled[:, r : r + c, s : s + c] - self.mean_[:, r : r + c, s : s + c]

    def crops(self, rescaled: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
        """Mean-subtracted crops of one already-rescaled image, ``[K, 3, c, c]``."""
        _, h, w = rescaled.shape
        offsets = crop_offsets(h, w, self._spec(mode), rng)
        return np.stack([self._cut(rescaled, off) for off in offsets])

    def transform(self, X) -> np.ndarray:
        return np.stack([self.crops(img, "center")[0] for img in self.rescale(X)])
