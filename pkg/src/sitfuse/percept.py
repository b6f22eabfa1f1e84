"""Synthetic per-step representation bank computed from map ground truth.

Each registered extractor produces a flat feature vector at the agent's
position, tagged with a domain (2d / 3d / semantic) and an observation-noise
scale. Clone extractors repeat another extractor's signal with independent
noise, giving the bank deliberate redundancy.

Distance conventions match the grid: a ray or openness value of 1 means the
adjacent cell is already wall, and a "k x k room" is the room footprint
including its wall ring.
"""
from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .gridworld import FLOOR, OBJECT_CLASSES, OFFSETS, GridMap, NavGraph

DOMAINS = ("2d", "3d", "semantic")

# unit direction vectors in compass order, used to bin bearings
_UNIT_DIRS = np.array(OFFSETS, dtype=np.float64)
_UNIT_DIRS /= np.linalg.norm(_UNIT_DIRS, axis=1, keepdims=True)


@dataclass(frozen=True)
class ExtractorSpec:
    name: str
    domain: str
    dim: int
    noise_sigma: float = 0.0
    clone_of: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class BankConfig:
    """Declares the default bank; dims follow from window/projection sizes.

    2d-domain extractors stand in for lossy low-level views: they read a
    smaller window and carry a higher noise scale than the 3d and semantic
    extractors, which model sharper task-specific signals.
    """

    n: int = 10
    noise_sigma: float = 0.02
    noise_sigma_2d: float = 0.1
    window: int = 5
    window_2d: int = 3
    ray_cap: int = 8
    vis_radius: int = 8
    proj_dim: int = 8
    noise_overrides: dict = field(default_factory=dict)

    @property
    def raw_dim(self) -> int:
        # occupancy window + class counts + target bearings + target one-hot
        return self.window * self.window + len(OBJECT_CLASSES) + 8 + len(OBJECT_CLASSES)


@dataclass
class RepresentationSet:
    """Per-step feature vectors in registry order plus the raw observation."""

    names: tuple[str, ...]
    vectors: list[np.ndarray]
    raw_obs: np.ndarray

    def by_name(self, name: str) -> np.ndarray:
        return self.vectors[self.names.index(name)]


@dataclass(eq=False)
class PerceptCache:
    """Per-map lookup tables shared by every extractor."""

    occ: np.ndarray            # (h, w) float, wall = 1
    ray: np.ndarray            # (h, w, 8) int, offset of first wall per direction
    wall_dist: np.ndarray      # (h, w) int, 8-connected steps to nearest wall
    openness_map: np.ndarray   # (h, w) int, min cardinal ray
    objects_by_class: dict[str, np.ndarray]

    @classmethod
    def build(cls, gmap: GridMap) -> "PerceptCache":
        h, w = gmap.height, gmap.width
        occ = (gmap.cells != FLOOR).astype(np.float64)
        ray = np.zeros((h, w, 8), dtype=np.int32)
        for y in range(h):
            for x in range(w):
                if occ[y, x]:
                    continue
                for d, (dx, dy) in enumerate(OFFSETS):
                    t = 1
                    while gmap.is_floor(x + t * dx, y + t * dy):
                        t += 1
                    ray[y, x, d] = t
        # BFS on a wall-padded copy so out-of-bounds counts as wall
        padded = np.ones((h + 2, w + 2), dtype=np.float64)
        padded[1:-1, 1:-1] = occ
        dist = np.full(padded.shape, -1, dtype=np.int32)
        queue: deque[tuple[int, int]] = deque()
        for (py, px) in np.argwhere(padded == 1.0):
            dist[py, px] = 0
            queue.append((int(px), int(py)))
        while queue:
            x, y = queue.popleft()
            for dx, dy in OFFSETS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < w + 2 and 0 <= ny < h + 2 and dist[ny, nx] < 0:
                    dist[ny, nx] = dist[y, x] + 1
                    queue.append((nx, ny))
        wall_dist = dist[1:-1, 1:-1]
        openness_map = ray[:, :, (0, 2, 4, 6)].min(axis=2)
        objects_by_class = {
            c: np.array([(o.x, o.y) for o in gmap.objects if o.cls == c], dtype=np.int64)
            for c in OBJECT_CLASSES
        }
        return cls(occ, ray, wall_dist, openness_map, objects_by_class)


@dataclass(eq=False)
class ObservationContext:
    gmap: GridMap
    graph: NavGraph
    cache: PerceptCache
    position: int
    target_class: str
    rng: np.random.Generator

    @property
    def xy(self) -> tuple[int, int]:
        return self.graph.xy(self.position)


def openness(gmap_or_cache, position: tuple[int, int]) -> int:
    """Min over the four cardinal directions of the first-wall offset.

    Wall-adjacent cells score 1; a one-cell-wide corridor scores 1.
    """
    x, y = position
    if isinstance(gmap_or_cache, PerceptCache):
        return int(gmap_or_cache.openness_map[y, x])
    gmap = gmap_or_cache
    best = None
    for dx, dy in (OFFSETS[0], OFFSETS[2], OFFSETS[4], OFFSETS[6]):
        t = 1
        while gmap.is_floor(x + t * dx, y + t * dy):
            t += 1
        best = t if best is None else min(best, t)
    return best


def ray_depths(cache: PerceptCache, x: int, y: int) -> np.ndarray:
    """Raw cell counts to the first wall in the eight compass directions."""
    return cache.ray[y, x].astype(np.float64)


def _window(arr: np.ndarray, x: int, y: int, radius: int, fill: float) -> np.ndarray:
    h, w = arr.shape
    out = np.full((2 * radius + 1, 2 * radius + 1), fill, dtype=np.float64)
    x0, x1 = max(0, x - radius), min(w, x + radius + 1)
    y0, y1 = max(0, y - radius), min(h, y + radius + 1)
    out[y0 - (y - radius):y1 - (y - radius), x0 - (x - radius):x1 - (x - radius)] = \
        arr[y0:y1, x0:x1]
    return out


def _bearing_bin(dx: int, dy: int) -> int:
    v = np.array([dx, dy], dtype=np.float64)
    v /= np.linalg.norm(v)
    return int(np.argmax(_UNIT_DIRS @ v))


def _f_ray_depth(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    return np.minimum(ray_depths(ctx.cache, x, y), cfg.ray_cap) / cfg.ray_cap


def _f_obstacle_patch(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    patch = _window(ctx.cache.wall_dist.astype(np.float64), x, y, cfg.window // 2, 0.0)
    return np.minimum(patch, cfg.ray_cap).ravel() / cfg.ray_cap


def _f_openness(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    return np.array([min(openness(ctx.cache, (x, y)), cfg.ray_cap) / cfg.ray_cap])


def _f_class_counts(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    radius = cfg.window // 2
    out = np.zeros(len(OBJECT_CLASSES))
    for i, c in enumerate(OBJECT_CLASSES):
        pos = ctx.cache.objects_by_class[c]
        if len(pos) == 0:
            continue
        cheb = np.max(np.abs(pos - np.array([x, y])), axis=1)
        out[i] = min(int((cheb <= radius).sum()), 3) / 3.0
    return out


def _f_target_bearing(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    out = np.zeros(8)
    pos = ctx.cache.objects_by_class[ctx.target_class]
    for px, py in pos:
        cheb = max(abs(int(px) - x), abs(int(py) - y))
        if cheb == 0 or cheb > cfg.vis_radius:
            continue
        weight = 1.0 - cheb / (cfg.vis_radius + 1.0)
        out[_bearing_bin(int(px) - x, int(py) - y)] += weight
    return np.minimum(out, 1.0)


def _f_occupancy_patch(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    return _window(ctx.cache.occ, x, y, cfg.window_2d // 2, 1.0).ravel()


def _f_occupancy_edges(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    x, y = ctx.xy
    radius = cfg.window_2d // 2
    padded = _window(ctx.cache.occ, x, y, radius + 1, 1.0)
    inner = padded[1:-1, 1:-1]
    edges = np.zeros_like(inner)
    for sy, sx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        shifted = padded[1 + sy:padded.shape[0] - 1 + sy,
                         1 + sx:padded.shape[1] - 1 + sx]
        edges = np.maximum(edges, (shifted != inner).astype(np.float64))
    return edges.ravel()


def _projection_matrix(name: str, out_dim: int, in_dim: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    return rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))


def _f_random_projection(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    patch = _f_occupancy_patch(ctx, cfg)
    proj = _projection_matrix("random_projection", cfg.proj_dim, patch.size)
    return proj @ patch


_COMPUTE: dict[str, Callable[[ObservationContext, BankConfig], np.ndarray]] = {
    "ray_depth": _f_ray_depth,
    "obstacle_patch": _f_obstacle_patch,
    "openness": _f_openness,
    "class_counts": _f_class_counts,
    "target_bearing": _f_target_bearing,
    "occupancy_patch": _f_occupancy_patch,
    "occupancy_edges": _f_occupancy_edges,
    "random_projection": _f_random_projection,
}


def _default_specs(cfg: BankConfig) -> list[ExtractorSpec]:
    win2 = cfg.window * cfg.window
    win2d = cfg.window_2d * cfg.window_2d
    base = [
        ExtractorSpec("ray_depth", "3d", 8),
        ExtractorSpec("occupancy_patch", "2d", win2d),
        ExtractorSpec("class_counts", "semantic", len(OBJECT_CLASSES)),
        ExtractorSpec("obstacle_patch", "3d", win2),
        ExtractorSpec("target_bearing", "semantic", 8),
        ExtractorSpec("occupancy_edges", "2d", win2d),
        ExtractorSpec("openness", "3d", 1),
        ExtractorSpec("random_projection", "2d", cfg.proj_dim),
        # redundancy probes: clones of extractors whose signal the rest of
        # the bank can substitute for
        ExtractorSpec("ray_depth_b", "3d", 8, clone_of="ray_depth"),
        ExtractorSpec("occupancy_patch_b", "2d", win2d, clone_of="occupancy_patch"),
    ]
    return base


def register_default_bank(cfg: BankConfig) -> list[ExtractorSpec]:
    """The shipped bank, truncated to cfg.n; noise applied per config."""
    if cfg.n < 6:
        raise ValueError(f"bank needs at least 6 extractors, got {cfg.n}")
    specs = _default_specs(cfg)
    if cfg.n > len(specs):
        raise ValueError(f"default bank has at most {len(specs)} extractors")
    specs = specs[:cfg.n]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate extractor names")
    out = []
    for s in specs:
        default = cfg.noise_sigma_2d if s.domain == "2d" else cfg.noise_sigma
        sigma = cfg.noise_overrides.get(s.name, default)
        if s.clone_of is not None and s.clone_of not in names:
            raise ValueError(f"clone {s.name} has no parent {s.clone_of} in bank")
        out.append(replace(s, noise_sigma=float(sigma)))
    return out


def compute_signal(ctx: ObservationContext, cfg: BankConfig,
                   spec: ExtractorSpec) -> np.ndarray:
    """Noiseless signal for one extractor (clones defer to their parent)."""
    return _COMPUTE[spec.clone_of or spec.name](ctx, cfg)


def raw_observation(ctx: ObservationContext, cfg: BankConfig) -> np.ndarray:
    """Base local observation: full-window occupancy, nearby class counts,
    target bearings, and the commanded class; independent of the 2d bank."""
    x, y = ctx.xy
    onehot = np.zeros(len(OBJECT_CLASSES))
    onehot[OBJECT_CLASSES.index(ctx.target_class)] = 1.0
    return np.concatenate([
        _window(ctx.cache.occ, x, y, cfg.window // 2, 1.0).ravel(),
        _f_class_counts(ctx, cfg),
        _f_target_bearing(ctx, cfg),
        onehot,
    ])


def extract(ctx: ObservationContext, bank: list[ExtractorSpec],
            cfg: BankConfig) -> RepresentationSet:
    """Compute every bank vector at the agent's position, with noise drawn
    from the context's RNG stream in registry order."""
    vectors = []
    for spec in bank:
        vec = compute_signal(ctx, cfg, spec)
        if vec.shape != (spec.dim,):
            raise ValueError(
                f"extractor {spec.name} produced shape {vec.shape}, wanted ({spec.dim},)")
        if spec.noise_sigma > 0:
            vec = vec + ctx.rng.normal(0.0, spec.noise_sigma, size=spec.dim)
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"extractor {spec.name} produced non-finite values")
        vectors.append(vec)
    return RepresentationSet(tuple(s.name for s in bank), vectors,
                             raw_observation(ctx, cfg))
