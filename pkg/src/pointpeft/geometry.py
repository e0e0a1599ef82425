"""Point-cloud spatial structure.

Voxel binning with floor semantics, Morton (z-order) serialization, patch
partitioning for local attention, a 3x3x3 voxel stencil neighbor index, and a
deterministic synthetic scene generator over labeled geometric primitives.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

Array = np.ndarray

SCENE_EXTENT = 4.0
WALL_HEIGHT = 2.0
SHAPE_NAMES = ("floor", "wall", "box", "sphere")

_MORTON_BITS = 21


@dataclass
class PointCloud:
    """n points with coordinates, per-point features, and optional labels."""

    coords: Array
    feats: Array
    labels: Array | None = None
    num_classes: int = 0

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DataError(f"coords must be n x 3, got {self.coords.shape}")
        if self.n < 1:
            raise DataError("point cloud must contain at least one point")
        if not np.isfinite(self.coords).all():
            raise DataError("coords must be finite")
        if self.feats.shape[0] != self.n:
            raise DataError(
                f"feats rows {self.feats.shape[0]} disagree with n={self.n}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DataError("labels must be a length-n vector")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise DataError(
                    f"labels outside [0, {self.num_classes}) in annotated cloud"
                )

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def c(self) -> int:
        return self.feats.shape[1]


def voxel_keys(coords: Array, voxel_size: float) -> Array:
    """Integer voxel index per point: floor(coord / voxel_size) per axis."""
    if voxel_size <= 0:
        raise UsageError(f"voxel_size must be positive, got {voxel_size}")
    return np.floor(np.asarray(coords, dtype=np.float64) / voxel_size).astype(np.int64)


def voxelize(cloud: PointCloud, voxel_size: float) -> dict[tuple[int, int, int], list[int]]:
    """Bucket point indices by voxel key; every point lands in exactly one bucket."""
    keys = voxel_keys(cloud.coords, voxel_size)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(keys):
        buckets.setdefault(tuple(int(v) for v in key), []).append(i)
    return buckets


def _spread_bits(v: Array) -> Array:
    """Spread the low 21 bits of each value so bit j moves to bit 3j."""
    v = v.astype(np.uint64)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_codes(keys: Array) -> Array:
    """63-bit Morton code per voxel key, x in the least significant bit slot.

    Keys are offset to nonnegative per axis first; each axis must then fit in
    21 bits.
    """
    keys = np.asarray(keys, dtype=np.int64)
    if keys.ndim != 2 or keys.shape[1] != 3:
        raise UsageError(f"keys must be n x 3, got {keys.shape}")
    shifted = keys - np.minimum(keys.min(axis=0), 0)
    if shifted.max(initial=0) >= (1 << _MORTON_BITS):
        raise DataError(
            f"voxel index range exceeds {_MORTON_BITS} bits per axis after offsetting"
        )
    x, y, z = (shifted[:, a].astype(np.uint64) for a in range(3))
    return (
        _spread_bits(x)
        | (_spread_bits(y) << np.uint64(1))
        | (_spread_bits(z) << np.uint64(2))
    )


def morton_order(keys: Array) -> Array:
    """Permutation sorting points by Morton code, ties kept in input order."""
    return np.argsort(morton_codes(keys), kind="stable")


@dataclass(frozen=True)
class PatchPartition:
    """Contiguous chunks of a serialized point order, last chunk padded."""

    order: Array
    patch_size: int
    num_patches: int
    index: Array  # (num_patches, patch_size) point indices, -1 in padded slots
    pad_mask: Array  # (num_patches, patch_size) True where the slot is padding

    @property
    def n(self) -> int:
        return self.order.shape[0]


def partition(order: Array, n: int, p: int) -> PatchPartition:
    """Chunk the ordered points into ceil(n/p) patches of size p."""
    order = np.asarray(order, dtype=np.int64)
    if p < 1:
        raise UsageError(f"patch size must be >= 1, got {p}")
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise UsageError("order must be a permutation of [0, n)")
    num_patches = -(-n // p)
    index = np.full(num_patches * p, -1, dtype=np.int64)
    index[:n] = order
    index = index.reshape(num_patches, p)
    return PatchPartition(
        order=order,
        patch_size=p,
        num_patches=num_patches,
        index=index,
        pad_mask=index < 0,
    )


def serialize(cloud: PointCloud, voxel_size: float, p: int) -> PatchPartition:
    """Morton-order the cloud at the given voxel size and partition into patches."""
    return partition(morton_order(voxel_keys(cloud.coords, voxel_size)), cloud.n, p)


def stencil_offsets(k: int = 3) -> Array:
    """The k^3 integer offsets of a centered stencil, in base-k slot order."""
    if k % 2 == 0 or k < 1:
        raise UsageError(f"stencil size must be a positive odd integer, got {k}")
    half = k // 2
    return np.array(
        list(itertools.product(range(-half, half + 1), repeat=3)), dtype=np.int64
    )


@dataclass(frozen=True)
class NeighborIndex:
    """Per-voxel stencil adjacency with a point-to-voxel assignment.

    neighbor_voxels[v, s] is the voxel id found at stencil offset s from voxel
    v, or -1 when that voxel is empty.  Point-level neighbor lists are derived:
    neighbors(i, o) = points of the voxel at key(i) + o.
    """

    num_points: int
    k: int
    offsets: Array  # (k^3, 3)
    voxel_of_point: Array  # (n,) voxel id per point
    voxel_points: tuple[Array, ...]  # point indices per voxel id
    neighbor_voxels: Array  # (num_voxels, k^3)

    @property
    def num_voxels(self) -> int:
        return len(self.voxel_points)

    @property
    def center_slot(self) -> int:
        return self.offsets.shape[0] // 2

    def slot(self, offset) -> int:
        half = self.k // 2
        dx, dy, dz = (int(v) + half for v in offset)
        for v in (dx, dy, dz):
            if not 0 <= v < self.k:
                raise UsageError(f"offset {tuple(offset)} outside the stencil")
        return (dx * self.k + dy) * self.k + dz

    def neighbors(self, i: int, offset) -> Array:
        """Point indices whose voxel key equals key(i) + offset."""
        v = self.neighbor_voxels[self.voxel_of_point[i], self.slot(offset)]
        if v < 0:
            return np.empty(0, dtype=np.int64)
        return self.voxel_points[v]


def build_neighbor_index(cloud: PointCloud, voxel_size: float, k: int = 3) -> NeighborIndex:
    """Index each point's k^3 stencil of vicinity voxels."""
    offsets = stencil_offsets(k)
    keys = voxel_keys(cloud.coords, voxel_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    by_voxel = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    voxel_points = tuple(np.split(by_voxel, np.cumsum(counts)[:-1]))
    ids = {tuple(int(v) for v in key): vid for vid, key in enumerate(uniq)}
    neighbor_voxels = np.full((uniq.shape[0], offsets.shape[0]), -1, dtype=np.int64)
    for vid, key in enumerate(uniq):
        for s, off in enumerate(offsets):
            neighbor_voxels[vid, s] = ids.get(
                (int(key[0] + off[0]), int(key[1] + off[1]), int(key[2] + off[2])), -1
            )
    return NeighborIndex(
        num_points=cloud.n,
        k=k,
        offsets=offsets,
        voxel_of_point=inverse,
        voxel_points=voxel_points,
        neighbor_voxels=neighbor_voxels,
    )


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene: which primitives, how many points, noise.

    `labels` maps each class entry to an integer label, letting distinct
    geometry share a label (defaults to 0..len(classes)-1).  `scale` multiplies
    all clean coordinates before noise is added.
    """

    classes: tuple[str, ...]
    points_per_class: int
    noise_sigma: float
    seed: int = 0
    scale: float = 1.0
    labels: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.classes:
            raise UsageError("scene spec lists no classes")
        for name in self.classes:
            if name not in SHAPE_NAMES:
                raise UsageError(f"unknown primitive {name!r}; choose from {SHAPE_NAMES}")
        if self.points_per_class < 1:
            raise UsageError("points_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise UsageError("noise_sigma must be >= 0")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(len(self.classes))))
        if len(self.labels) != len(self.classes):
            raise UsageError("labels must pair up with classes")
        if min(self.labels) < 0:
            raise UsageError("labels must be nonnegative")

    @property
    def num_classes(self) -> int:
        return max(self.labels) + 1


def _sample_floor(rng: np.random.Generator, n: int) -> tuple[Array, Array]:
    pts = np.zeros((n, 3))
    pts[:, 0] = rng.uniform(0.0, SCENE_EXTENT, n)
    pts[:, 1] = rng.uniform(0.0, SCENE_EXTENT, n)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    return pts, normals


def _sample_wall(rng: np.random.Generator, n: int) -> tuple[Array, Array]:
    axis = int(rng.integers(0, 2))
    offset = rng.uniform(0.0, SCENE_EXTENT)
    pts = np.zeros((n, 3))
    pts[:, axis] = offset
    pts[:, 1 - axis] = rng.uniform(0.0, SCENE_EXTENT, n)
    pts[:, 2] = rng.uniform(0.0, WALL_HEIGHT, n)
    normals = np.zeros((n, 3))
    normals[:, axis] = 1.0
    return pts, normals


def _sample_box(rng: np.random.Generator, n: int) -> tuple[Array, Array]:
    center = np.array(
        [
            rng.uniform(1.0, SCENE_EXTENT - 1.0),
            rng.uniform(1.0, SCENE_EXTENT - 1.0),
            rng.uniform(0.5, 1.2),
        ]
    )
    half = rng.uniform(0.3, 0.8, 3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, n, p=areas / areas.sum())
    face_sign = rng.choice([-1.0, 1.0], n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    pts[np.arange(n), face_axis] = face_sign * half[face_axis]
    normals = np.zeros((n, 3))
    normals[np.arange(n), face_axis] = face_sign
    return center + pts, normals


def _sample_sphere(rng: np.random.Generator, n: int) -> tuple[Array, Array]:
    center = np.array(
        [
            rng.uniform(1.0, SCENE_EXTENT - 1.0),
            rng.uniform(1.0, SCENE_EXTENT - 1.0),
            rng.uniform(0.8, 1.6),
        ]
    )
    radius = rng.uniform(0.3, 0.8)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return center + radius * dirs, dirs


_SAMPLERS = {
    "floor": _sample_floor,
    "wall": _sample_wall,
    "box": _sample_box,
    "sphere": _sample_sphere,
}


def generate_scene(seed: int, spec: SceneSpec) -> PointCloud:
    """Deterministic labeled scene: features are noisy coords plus the exact
    surface normal of the generating primitive (c=6)."""
    rng = np.random.default_rng(seed)
    coords, normals, labels = [], [], []
    for name, label in zip(spec.classes, spec.labels):
        pts, nrm = _SAMPLERS[name](rng, spec.points_per_class)
        pts = pts * spec.scale
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
        coords.append(pts)
        normals.append(nrm)
        labels.append(np.full(spec.points_per_class, label, dtype=np.int64))
    coords = np.concatenate(coords)
    feats = np.concatenate([coords, np.concatenate(normals)], axis=1)
    return PointCloud(
        coords=coords,
        feats=feats,
        labels=np.concatenate(labels),
        num_classes=spec.num_classes,
    )


# ---------------------------------------------------------------------------
# text formats


def save_cloud(path, cloud: PointCloud) -> None:
    """One point per line `x y z f1 .. fc label`, label -1 when unannotated."""
    lines = [f"#points {cloud.n} channels {cloud.c} classes {cloud.num_classes}"]
    labels = cloud.labels if cloud.labels is not None else np.full(cloud.n, -1)
    for i in range(cloud.n):
        cols = [repr(float(v)) for v in cloud.coords[i]]
        cols += [repr(float(v)) for v in cloud.feats[i]]
        cols.append(str(int(labels[i])))
        lines.append(" ".join(cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    with open(path) as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw or not raw[0].startswith("#points"):
        raise DataError(f"{path}: missing '#points n channels c classes C' header")
    head = raw[0].split()
    try:
        n, c, num_classes = int(head[1]), int(head[3]), int(head[5])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed header {raw[0]!r}") from exc
    body = raw[1:]
    if len(body) != n:
        raise DataError(f"{path}: header says {n} points, found {len(body)} lines")
    rows = np.array([[float(v) for v in ln.split()] for ln in body])
    if rows.shape[1] != 3 + c + 1:
        raise DataError(f"{path}: expected {3 + c + 1} columns, got {rows.shape[1]}")
    labels = rows[:, -1].astype(np.int64)
    return PointCloud(
        coords=rows[:, :3],
        feats=rows[:, 3 : 3 + c],
        labels=None if (labels < 0).all() else labels,
        num_classes=num_classes,
    )


_SPEC_KEYS = {"classes", "points_per_class", "noise_sigma", "seed", "scale", "labels"}


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse `key = value` lines; `#` starts a comment."""
    fields: dict[str, str] = {}
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise DataError(f"scene spec line {ln!r} is not 'key = value'")
        key, value = (part.strip() for part in ln.split("=", 1))
        if key not in _SPEC_KEYS:
            raise DataError(f"unknown scene spec key {key!r}")
        fields[key] = value
    for key in ("classes", "points_per_class", "noise_sigma"):
        if key not in fields:
            raise DataError(f"scene spec is missing required key {key!r}")
    try:
        return SceneSpec(
            classes=tuple(v.strip() for v in fields["classes"].split(",") if v.strip()),
            points_per_class=int(fields["points_per_class"]),
            noise_sigma=float(fields["noise_sigma"]),
            seed=int(fields.get("seed", "0")),
            scale=float(fields.get("scale", "1.0")),
            labels=tuple(
                int(v) for v in fields.get("labels", "").split(",") if v.strip()
            ),
        )
    except ValueError as exc:
        raise DataError(f"scene spec value malformed: {exc}") from exc


def load_scene_spec(path) -> SceneSpec:
    with open(path) as fh:
        return parse_scene_spec(fh.read())


def scene_spec_text(spec: SceneSpec) -> str:
    return "\n".join(
        [
            f"classes = {', '.join(spec.classes)}",
            f"labels = {', '.join(str(v) for v in spec.labels)}",
            f"points_per_class = {spec.points_per_class}",
            f"noise_sigma = {spec.noise_sigma}",
            f"scale = {spec.scale}",
            f"seed = {spec.seed}",
        ]
    )
