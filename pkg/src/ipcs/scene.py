"""Synthetic indoor scenes with per-point semantic labels.

Rooms contain planar structure (floor / ceiling / walls) plus simple object
archetypes (boxes, cylinders, spheres) mapped to eight classes. A controlled
domain shift (color jitter, geometry scale, dropout) is applied to test
scenes only, so a network trained on clean scenes mis-segments them in a
repeatable way. Also hosts the preprocessing used everywhere: grid
subsampling, longest-axis cropping, and ASCII PLY I/O.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from .tensor import DTYPE

CLASS_NAMES = ("floor", "ceiling", "wall", "table", "crate", "column", "bin", "ball")
NUM_CLASSES = len(CLASS_NAMES)

PALETTE = np.array([
    [0.45, 0.42, 0.38],   # floor
    [0.86, 0.86, 0.83],   # ceiling
    [0.74, 0.72, 0.66],   # wall
    [0.55, 0.34, 0.18],   # table
    [0.70, 0.50, 0.28],   # crate
    [0.58, 0.59, 0.62],   # column
    [0.18, 0.46, 0.30],   # bin
    [0.72, 0.22, 0.22],   # ball
], dtype=DTYPE)

UNLABELED = 255


class SceneError(Exception):
    pass


class PlyParseError(SceneError):
    def __init__(self, message, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class LabeledCloud:
    """N points with positions (meters), input features and optional labels.

    instances groups points by generating object (floor, one wall, one crate,
    ...); it exists transiently for the shift machinery and is not persisted.
    """

    positions: np.ndarray          # N x 3 float32
    features: np.ndarray           # N x C float32 (xyz + rgb by default)
    labels: Optional[np.ndarray]   # N int64 in [0, M) or None
    name: str = "cloud"
    instances: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=DTYPE)
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise SceneError(f"positions must be N x 3, got {self.positions.shape}")
        if len(self.features) != len(self.positions):
            raise SceneError("features and positions row counts disagree")
        if not np.all(np.isfinite(self.positions)) or not np.all(np.isfinite(self.features)):
            raise SceneError("cloud contains non-finite values")
        if self.labels is not None and len(self.labels) != len(self.positions):
            raise SceneError("labels and positions row counts disagree")

    @property
    def num_points(self):
        return len(self.positions)

    @property
    def colors(self):
        return self.features[:, 3:6]

    def subset(self, idx, name=None) -> "LabeledCloud":
        return LabeledCloud(
            positions=self.positions[idx],
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            name=name or self.name,
            instances=None if self.instances is None else self.instances[idx],
        )


@dataclass
class DomainShift:
    """Test-scene perturbation; color_jitter is the master knob.

    Each generated object gets its own color bias ~ N(0, color_jitter)
    (structure classes drift at half strength) plus per-point noise
    ~ N(0, color_jitter / 8). Afterwards the scene's per-channel color mean
    and variance are restored to their pre-shift values, so the shift moves
    object appearances relative to each other without moving scene-level
    statistics that batch-norm adaptation could simply re-absorb.
    """

    color_jitter: float = 0.14
    scale_range: tuple = (0.99, 1.01)  # per-scene uniform geometry scale
    dropout: float = 0.1               # fraction of points removed

    def __post_init__(self):
        if not (0.0 <= self.dropout < 1.0):
            raise SceneError("dropout must lie in [0, 1)")


@dataclass
class SceneSpec:
    extents: tuple = (3.0, 2.5, 2.4)   # room width, depth, height in meters
    floors: int = 1
    ceilings: int = 1
    walls: int = 4
    tables: int = 1
    crates: int = 2
    columns: int = 1
    bins: int = 1
    balls: int = 1
    points_per_m2: float = 210.0
    color_noise: float = 0.04          # per-point texture, part of generation
    position_noise: float = 0.003      # sensor-style jitter in meters
    # benchmark scenes vary around this template: extents scaled per axis by
    # U(1-v, 1+v), object counts redrawn near the template counts
    variation: float = 0.2
    shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def __post_init__(self):
        if any(e <= 0 for e in self.extents):
            raise SceneError("room extents must be positive")
        if self.points_per_m2 <= 0:
            raise SceneError("points_per_m2 must be positive")
        if not (0.0 <= self.variation < 1.0):
            raise SceneError("variation must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["shift"]["scale_range"] = list(self.shift.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        shift = dict(d.pop("shift", {}))
        if "scale_range" in shift:
            shift["scale_range"] = tuple(shift["scale_range"])
        spec = cls(**{k: (tuple(v) if k == "extents" else v) for k, v in d.items()},
                   shift=DomainShift(**shift))
        return spec


# ---------------------------------------------------------------------------
# surface construction


@dataclass
class Surface:
    cls: int
    area: float
    sampler: object  # callable(rng, n) -> n x 3 positions
    instance: int = 0


def _rect_sampler(origin, u, v):
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))

    def sample(rng, n):
        a = rng.random((n, 1))
        b = rng.random((n, 1))
        return origin + a * u + b * v

    return sample


def _box_surfaces(cls, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    d = hi - lo
    faces = []
    # two faces per axis
    for ax in range(3):
        u_ax, v_ax = [a for a in range(3) if a != ax]
        u = np.zeros(3); u[u_ax] = d[u_ax]
        v = np.zeros(3); v[v_ax] = d[v_ax]
        area = d[u_ax] * d[v_ax]
        for side in (lo[ax], hi[ax]):
            origin = lo.copy()
            origin[ax] = side
            faces.append(Surface(cls, float(area), _rect_sampler(origin, u, v)))
    return faces


def _cylinder_surfaces(cls, center_xy, radius, z_lo, z_hi, cap_top):
    h = z_hi - z_lo
    cx, cy = center_xy

    def lateral(rng, n):
        theta = rng.random(n) * 2 * math.pi
        z = z_lo + rng.random(n) * h
        return np.stack([cx + radius * np.cos(theta),
                         cy + radius * np.sin(theta), z], axis=1)

    out = [Surface(cls, float(2 * math.pi * radius * h), lateral)]
    if cap_top:
        def cap(rng, n):
            r = radius * np.sqrt(rng.random(n))
            theta = rng.random(n) * 2 * math.pi
            return np.stack([cx + r * np.cos(theta), cy + r * np.sin(theta),
                             np.full(n, z_hi)], axis=1)

        out.append(Surface(cls, float(math.pi * radius ** 2), cap))
    return out


def _sphere_surface(cls, center, radius):
    center = np.asarray(center, dtype=np.float64)

    def sample(rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return center + radius * v

    return Surface(cls, float(4 * math.pi * radius ** 2), sample)


def _place_objects(spec: SceneSpec, rng, next_instance: int) -> list:
    """Random non-overlapping footprints on the floor."""
    w, d, h = spec.extents
    surfaces: list[Surface] = []
    taken: list[tuple[float, float, float]] = []  # (x, y, clearance radius)
    inst = next_instance

    def fits(x, y, r):
        margin = 0.15
        if not (r + margin <= x <= w - r - margin and r + margin <= y <= d - r - margin):
            return False
        return all((x - tx) ** 2 + (y - ty) ** 2 >= (r + tr) ** 2 for tx, ty, tr in taken)

    def place(r):
        for _ in range(60):
            x = rng.random() * w
            y = rng.random() * d
            if fits(x, y, r):
                taken.append((x, y, r))
                return x, y
        return None

    def tag(parts):
        nonlocal inst
        for s in parts:
            s.instance = inst
        inst += 1
        return parts

    for _ in range(spec.tables):
        tw = 0.9 + rng.random() * 0.5
        td = 0.6 + rng.random() * 0.3
        th = 0.65 + rng.random() * 0.13
        pos = place(math.hypot(tw, td) / 2)
        if pos is None:
            continue
        x, y = pos
        surfaces += tag(_box_surfaces(3, (x - tw / 2, y - td / 2, 0.0),
                                      (x + tw / 2, y + td / 2, th)))
    for _ in range(spec.crates):
        s = 0.35 + rng.random() * 0.25
        pos = place(s * 0.71)
        if pos is None:
            continue
        x, y = pos
        surfaces += tag(_box_surfaces(4, (x - s / 2, y - s / 2, 0.0),
                                      (x + s / 2, y + s / 2, s)))
    for _ in range(spec.columns):
        r = 0.12 + rng.random() * 0.08
        pos = place(r)
        if pos is None:
            continue
        surfaces += tag(_cylinder_surfaces(5, pos, r, 0.0, h, cap_top=False))
    for _ in range(spec.bins):
        r = 0.15 + rng.random() * 0.10
        bh = 0.35 + rng.random() * 0.20
        pos = place(r)
        if pos is None:
            continue
        surfaces += tag(_cylinder_surfaces(6, pos, r, 0.0, bh, cap_top=True))
    for _ in range(spec.balls):
        r = 0.12 + rng.random() * 0.10
        pos = place(r)
        if pos is None:
            continue
        x, y = pos
        surfaces += tag([_sphere_surface(7, (x, y, r), r)])
    return surfaces


def build_surfaces(spec: SceneSpec) -> List[Surface]:
    """Deterministic surface layout for a spec (seeded); exposes analytic areas."""
    rng = np.random.default_rng(spec.seed)
    w, d, h = spec.extents
    surfaces: list[Surface] = []
    inst = 0
    if spec.floors:
        surfaces.append(Surface(0, w * d, _rect_sampler((0, 0, 0), (w, 0, 0), (0, d, 0)),
                                instance=inst))
        inst += 1
    if spec.ceilings:
        surfaces.append(Surface(1, w * d, _rect_sampler((0, 0, h), (w, 0, 0), (0, d, 0)),
                                instance=inst))
        inst += 1
    wall_defs = [
        ((0, 0, 0), (w, 0, 0), (0, 0, h)),
        ((0, d, 0), (w, 0, 0), (0, 0, h)),
        ((0, 0, 0), (0, d, 0), (0, 0, h)),
        ((w, 0, 0), (0, d, 0), (0, 0, h)),
    ]
    for origin, u, v in wall_defs[: spec.walls]:
        area = np.linalg.norm(u) * np.linalg.norm(v)
        surfaces.append(Surface(2, float(area), _rect_sampler(origin, u, v),
                                instance=inst))
        inst += 1
    surfaces += _place_objects(spec, rng, inst)
    return surfaces


def class_areas(spec: SceneSpec) -> np.ndarray:
    areas = np.zeros(NUM_CLASSES)
    for s in build_surfaces(spec):
        areas[s.cls] += s.area
    return areas


def generate_scene(spec: SceneSpec, name: Optional[str] = None) -> LabeledCloud:
    """Sample a labeled cloud; point counts per surface are proportional to area."""
    surfaces = build_surfaces(spec)
    # separate stream so adding surfaces never perturbs the layout
    rng = np.random.default_rng(spec.seed + 0x5CE11E)
    pos_parts, label_parts, color_parts, inst_parts = [], [], [], []
    for s in surfaces:
        n = max(1, int(round(s.area * spec.points_per_m2)))
        pts = s.sampler(rng, n)
        tint = rng.normal(0.0, 0.02, size=3)
        cols = PALETTE[s.cls] + tint + rng.normal(0.0, spec.color_noise, size=(n, 3))
        pos_parts.append(pts)
        color_parts.append(np.clip(cols, 0.0, 1.0))
        label_parts.append(np.full(n, s.cls, dtype=np.int64))
        inst_parts.append(np.full(n, s.instance, dtype=np.int64))
    positions = np.concatenate(pos_parts).astype(DTYPE)
    if spec.position_noise > 0:
        positions = positions + rng.normal(0, spec.position_noise,
                                           size=positions.shape).astype(DTYPE)
    colors = np.concatenate(color_parts).astype(DTYPE)
    labels = np.concatenate(label_parts)
    features = np.concatenate([positions, colors], axis=1)
    return LabeledCloud(positions, features, labels,
                        name=name or f"scene_{spec.seed}",
                        instances=np.concatenate(inst_parts))


def apply_shift(cloud: LabeledCloud, shift: DomainShift, seed: int) -> LabeledCloud:
    """Domain shift for test scenes: geometry scale plus color bias at three
    granularities (per object, per scene, per point)."""
    rng = np.random.default_rng(seed)
    lo, hi = shift.scale_range
    s = lo + rng.random() * (hi - lo)
    center = cloud.positions.mean(axis=0)
    positions = (center + s * (cloud.positions - center)).astype(DTYPE)
    sigma = shift.color_jitter
    colors = cloud.colors.astype(np.float64)
    mean0, std0 = colors.mean(axis=0), colors.std(axis=0)
    if cloud.instances is not None and sigma > 0:
        point_bias = np.zeros_like(colors)
        for inst in np.unique(cloud.instances):
            pick = cloud.instances == inst
            scale_factor = 1.0
            if cloud.labels is not None and cloud.labels[pick][0] <= 2:
                scale_factor = 0.5  # structure (floor/ceiling/wall) drifts less
            point_bias[pick] = rng.normal(0.0, sigma * scale_factor, size=3)
        colors = colors + point_bias
    colors = colors + rng.normal(0.0, sigma / 8, size=colors.shape)
    # restore scene-level color moments: the shift must not be undoable by
    # re-estimating normalization statistics alone
    std1 = colors.std(axis=0)
    std1[std1 == 0] = 1.0
    colors = (colors - colors.mean(axis=0)) / std1 * std0 + mean0
    colors = np.clip(colors, 0.0, 1.0).astype(DTYPE)
    features = np.concatenate([positions, colors], axis=1)
    return LabeledCloud(positions, features,
                        None if cloud.labels is None else cloud.labels.copy(),
                        name=cloud.name,
                        instances=None if cloud.instances is None
                        else cloud.instances.copy())


def apply_dropout(cloud: LabeledCloud, rate: float, seed: int) -> LabeledCloud:
    if rate <= 0:
        return cloud
    rng = np.random.default_rng(seed)
    keep = rng.random(cloud.num_points) >= rate
    if not np.any(keep):
        keep[0] = True
    return cloud.subset(np.nonzero(keep)[0])


# ---------------------------------------------------------------------------
# preprocessing


def grid_subsample(cloud: LabeledCloud, cell: float) -> LabeledCloud:
    """One representative per occupied voxel: the point nearest the voxel centroid."""
    if cell <= 0:
        raise SceneError("cell size must be positive")
    pos = cloud.positions.astype(np.float64)
    lo = pos.min(axis=0)
    ijk = np.floor((pos - lo) / cell).astype(np.int64)
    dims = ijk.max(axis=0) + 1
    key = (ijk[:, 0] * dims[1] + ijk[:, 1]) * dims[2] + ijk[:, 2]
    centroid = lo + (ijk + 0.5) * cell
    d2 = ((pos - centroid) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(pos)), d2, key))
    sorted_keys = key[order]
    first = np.ones(len(pos), dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    reps = np.sort(order[first])
    return cloud.subset(reps)


def crop_longest_axis(cloud: LabeledCloud, max_points: int) -> List[LabeledCloud]:
    """Split into equal-width slabs along the longest axis until all fit."""
    if max_points <= 0:
        raise SceneError("max_points must be positive")
    if cloud.num_points <= max_points:
        return [cloud]
    pos = cloud.positions
    extent = pos.max(axis=0) - pos.min(axis=0)
    axis = int(np.argmax(extent))
    if extent[axis] <= 0:
        # all points coincide: fall back to index-order chunks
        chunks = []
        for i in range(0, cloud.num_points, max_points):
            idx = np.arange(i, min(i + max_points, cloud.num_points))
            chunks.append(cloud.subset(idx, name=f"{cloud.name}_part{len(chunks)}"))
        return chunks
    slabs = max(2, math.ceil(cloud.num_points / max_points))
    lo = pos[:, axis].min()
    width = extent[axis] / slabs
    # boundary points belong to the lower slab
    bin_idx = np.clip(np.ceil((pos[:, axis] - lo) / width).astype(np.int64) - 1,
                      0, slabs - 1)
    out: list[LabeledCloud] = []
    for b in range(slabs):
        idx = np.nonzero(bin_idx == b)[0]
        if len(idx) == 0:
            continue
        part = cloud.subset(idx, name=f"{cloud.name}_s{b}")
        if part.num_points > max_points:
            out.extend(crop_longest_axis(part, max_points))
        else:
            out.append(part)
    return out


# ---------------------------------------------------------------------------
# PLY I/O


def save_ply(cloud: LabeledCloud, path) -> None:
    n = cloud.num_points
    rgb = np.clip(np.round(cloud.colors * 255), 0, 255).astype(np.int64)
    labels = (np.full(n, UNLABELED, dtype=np.int64)
              if cloud.labels is None else cloud.labels)
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment {cloud.name}",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        "end_header",
    ]
    body = [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {l}"
        for p, c, l in zip(cloud.positions, rgb, labels)
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines + body) + "\n")


def load_ply(path) -> LabeledCloud:
    with open(path) as f:
        raw = f.read().splitlines()
    if not raw or raw[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", line=1)
    n = None
    props: list[str] = []
    name = os.path.splitext(os.path.basename(str(path)))[0]
    body_start = None
    for ln, line in enumerate(raw[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise PlyParseError(f"unsupported format {tok[1]!r}", line=ln)
        elif tok[0] == "comment":
            name = " ".join(tok[1:]) or name
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise PlyParseError(f"unsupported element {tok[1]!r}", line=ln)
            n = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = ln
            break
    if n is None or body_start is None:
        raise PlyParseError("incomplete header")
    required = ["x", "y", "z", "red", "green", "blue"]
    for r in required:
        if r not in props:
            raise PlyParseError(f"missing property {r!r}")
    body = [l for l in raw[body_start:] if l.strip()]
    if len(body) != n:
        raise PlyParseError(f"expected {n} vertices, found {len(body)}",
                            line=body_start + 1)
    cols = {p: i for i, p in enumerate(props)}
    try:
        data = np.array([[float(v) for v in line.split()] for line in body])
    except ValueError as e:
        raise PlyParseError(f"bad vertex data: {e}") from e
    if data.shape[1] != len(props):
        raise PlyParseError("vertex column count does not match properties")
    positions = data[:, [cols["x"], cols["y"], cols["z"]]].astype(DTYPE)
    colors = (data[:, [cols["red"], cols["green"], cols["blue"]]] / 255.0).astype(DTYPE)
    labels = None
    if "label" in cols:
        lab = data[:, cols["label"]].astype(np.int64)
        if not np.all(lab == UNLABELED):
            labels = lab
    features = np.concatenate([positions, colors], axis=1)
    return LabeledCloud(positions, features, labels, name=name)


# ---------------------------------------------------------------------------
# benchmark assembly


def vary_spec(spec: SceneSpec, scene_seed: int) -> SceneSpec:
    """Per-scene draw around the template: room size and object counts."""
    import dataclasses
    if spec.variation <= 0:
        return dataclasses.replace(spec, seed=scene_seed)
    rng = np.random.default_rng(scene_seed ^ 0xA5A5)
    v = spec.variation
    extents = tuple(float(e * rng.uniform(1 - v, 1 + v)) for e in spec.extents)

    def near(c):
        return int(max(0, c + rng.integers(-1, 2)))

    return dataclasses.replace(
        spec, seed=scene_seed, extents=extents,
        tables=near(spec.tables), crates=near(spec.crates),
        columns=near(spec.columns), bins=near(spec.bins), balls=near(spec.balls))


def make_benchmark(num_train: int, num_test: int, spec: SceneSpec, out_dir,
                   grid_cell: float = 0.03, max_points: int = 150000) -> dict:
    """Write train (clean) and test (shifted) scenes plus a JSON manifest."""
    if num_train < 1 or num_test < 1:
        raise SceneError("need at least one train and one test scene")
    os.makedirs(out_dir, exist_ok=True)
    entries = {"train": [], "test": []}

    def emit(split, index, scene_seed, shifted):
        sub = vary_spec(spec, scene_seed)
        cloud = generate_scene(sub, name=f"{split}_{index:03d}")
        if shifted:
            cloud = apply_shift(cloud, spec.shift, seed=scene_seed + 7_777)
        cloud = grid_subsample(cloud, grid_cell)
        if shifted and spec.shift.dropout > 0:
            cloud = apply_dropout(cloud, spec.shift.dropout, seed=scene_seed + 8_888)
        parts = crop_longest_axis(cloud, max_points)
        for j, part in enumerate(parts):
            pname = part.name if len(parts) == 1 else f"{cloud.name}_p{j}"
            part.name = pname
            rel = f"{pname}.ply"
            save_ply(part, os.path.join(out_dir, rel))
            entries[split].append({"name": pname, "path": rel, "seed": scene_seed,
                                   "num_points": part.num_points})

    for i in range(num_train):
        emit("train", i, spec.seed + 1 + i, shifted=False)
    for i in range(num_test):
        emit("test", i, spec.seed + 100_001 + i, shifted=True)

    manifest = {
        "format": "ipcs-benchmark/1",
        "class_names": list(CLASS_NAMES),
        "palette": [[float(v) for v in row] for row in PALETTE],
        "grid_cell": grid_cell,
        "max_points": max_points,
        "spec": spec.to_dict(),
        "train": entries["train"],
        "test": entries["test"],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


def manifest_clouds(manifest: dict, base_dir, split: str) -> List[LabeledCloud]:
    return [load_ply(os.path.join(base_dir, e["path"])) for e in manifest[split]]
