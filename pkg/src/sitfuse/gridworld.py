"""Procedural indoor grid environments with an octagonal traversal graph.

Conventions
-----------
- Cells are addressed as (x, y): x is the column, y the row, origin at the
  top-left. North decreases y, east increases x.
- The eight compass directions are ordered N, NE, E, SE, S, SW, W, NW.
  Every deterministic tie-break in this module uses that order.
- Terrain is wall or floor; the map border is always wall.
- A diagonal edge exists only if both axis-aligned neighbour cells are
  floor, so paths never thread between two wall corners.
- Every edge costs one step, diagonals included. Goal distances fold the
  success radius in: d(v) = 0 means v is within `goal_radius` steps of an
  instance of the target class.

Maps are generated from non-overlapping rectangular rooms joined in
sequence by one-cell-wide L-shaped corridors, with object instances
scattered inside rooms. Generation is a pure function of (seed, params).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable

import numpy as np

WALL = 0
FLOOR = 1

OBJECT_CLASSES = ("chair", "table", "bed", "door")

DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
OFFSETS = ((0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1))
UNREACHABLE = np.iinfo(np.int32).max


class Action(IntEnum):
    """Eight directional moves plus Stop; index order matches DIRECTIONS."""

    MOVE_N = 0
    MOVE_NE = 1
    MOVE_E = 2
    MOVE_SE = 3
    MOVE_S = 4
    MOVE_SW = 5
    MOVE_W = 6
    MOVE_NW = 7
    STOP = 8


NUM_ACTIONS = len(Action)


def opposite(direction: int) -> int:
    return (direction + 4) % 8


class GenerationError(RuntimeError):
    """Raised when no valid map can be produced within the retry budget."""


@dataclass(frozen=True)
class ObjectInstance:
    cls: str
    x: int
    y: int


@dataclass(frozen=True)
class Room:
    """Interior floor rectangle of a room (walls excluded)."""

    x: int
    y: int
    w: int
    h: int

    def contains(self, x: int, y: int) -> bool:
        return self.x <= x < self.x + self.w and self.y <= y < self.y + self.h

    def cells(self) -> Iterable[tuple[int, int]]:
        for yy in range(self.y, self.y + self.h):
            for xx in range(self.x, self.x + self.w):
                yield xx, yy


@dataclass(frozen=True)
class GenParams:
    width: int = 22
    height: int = 22
    rooms: int = 4
    room_min: int = 5
    room_max: int = 9
    objects_per_class: int = 2
    max_tries: int = 50

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError(f"grid must be at least 16x16, got {self.width}x{self.height}")
        if self.rooms < 2:
            raise ValueError(f"room count must be >= 2, got {self.rooms}")
        if self.objects_per_class < 1:
            raise ValueError("objects_per_class must be >= 1")
        if not (2 <= self.room_min <= self.room_max):
            raise ValueError("need 2 <= room_min <= room_max")
        if self.room_max + 2 > min(self.width, self.height) - 2:
            raise ValueError("room_max does not fit inside the grid")
        if self.objects_per_class * len(OBJECT_CLASSES) < self.rooms:
            raise ValueError("not enough objects to give every room at least one")


@dataclass(eq=False)
class GridMap:
    """Immutable after construction; cells is a (height, width) uint8 array."""

    width: int
    height: int
    cells: np.ndarray
    objects: list[ObjectInstance]
    rooms: list[Room]
    seed: int
    params: GenParams

    def is_floor(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y, x] == FLOOR


@dataclass(frozen=True)
class AgentState:
    position: int
    steps_taken: int
    target_class: str
    done: bool = False


@dataclass(eq=False)
class NavGraph:
    """Directed octagonal adjacency over floor cells.

    neighbours[u, d] is the node id reached from u along direction d, or -1.
    """

    nodes: list[tuple[int, int]]
    ids: dict[tuple[int, int], int]
    neighbours: np.ndarray
    node_objects: dict[int, tuple[str, ...]]
    objects_by_class: dict[str, list[int]]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def xy(self, node: int) -> tuple[int, int]:
        return self.nodes[node]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _try_place_rooms(rng: np.random.Generator, params: GenParams) -> list[Room] | None:
    rooms: list[Room] = []
    for _ in range(params.rooms):
        placed = False
        for _ in range(200):
            w = int(rng.integers(params.room_min, params.room_max + 1))
            h = int(rng.integers(params.room_min, params.room_max + 1))
            x = int(rng.integers(1, params.width - w - 1))
            y = int(rng.integers(1, params.height - h - 1))
            cand = Room(x, y, w, h)
            # keep one wall cell between room interiors
            if all(
                cand.x + cand.w + 1 <= r.x or r.x + r.w + 1 <= cand.x
                or cand.y + cand.h + 1 <= r.y or r.y + r.h + 1 <= cand.y
                for r in rooms
            ):
                rooms.append(cand)
                placed = True
                break
        if not placed:
            return None
    return rooms


def _carve_corridor(cells: np.ndarray, rng: np.random.Generator,
                    a: tuple[int, int], b: tuple[int, int]) -> None:
    (ax, ay), (bx, by) = a, b
    if rng.integers(0, 2) == 0:
        cells[ay, min(ax, bx):max(ax, bx) + 1] = FLOOR
        cells[min(ay, by):max(ay, by) + 1, bx] = FLOOR
    else:
        cells[min(ay, by):max(ay, by) + 1, ax] = FLOOR
        cells[by, min(ax, bx):max(ax, bx) + 1] = FLOOR


def _room_point(rng: np.random.Generator, room: Room) -> tuple[int, int]:
    return (int(rng.integers(room.x, room.x + room.w)),
            int(rng.integers(room.y, room.y + room.h)))


def _scatter_objects(rng: np.random.Generator, rooms: list[Room],
                     params: GenParams) -> list[ObjectInstance]:
    per_class = params.objects_per_class
    slots = [(cls, k) for cls in OBJECT_CLASSES for k in range(per_class)]
    order = rng.permutation(len(slots))
    used: set[tuple[int, int]] = set()
    objects: list[ObjectInstance] = []
    for rank, slot_idx in enumerate(order):
        cls, _ = slots[slot_idx]
        # the first len(rooms) placements cover each room once
        room = rooms[rank] if rank < len(rooms) else rooms[int(rng.integers(0, len(rooms)))]
        for _ in range(200):
            pos = _room_point(rng, room)
            if pos not in used:
                used.add(pos)
                objects.append(ObjectInstance(cls, pos[0], pos[1]))
                break
        else:
            raise GenerationError("could not place object without overlap")
    return objects


def _connected_under_graph_adjacency(cells: np.ndarray) -> bool:
    floor = np.argwhere(cells == FLOOR)
    if len(floor) == 0:
        return False
    h, w = cells.shape
    start = (int(floor[0][1]), int(floor[0][0]))
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for d, (dx, dy) in enumerate(OFFSETS):
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or cells[ny, nx] != FLOOR:
                continue
            if dx != 0 and dy != 0:
                if cells[y, nx] != FLOOR or cells[ny, x] != FLOOR:
                    continue
            if (nx, ny) not in seen:
                seen.add((nx, ny))
                queue.append((nx, ny))
    return len(seen) == len(floor)


def generate_environment(seed: int, params: GenParams) -> GridMap:
    """Generate a connected room-and-corridor map; deterministic in (seed, params).

    Raises GenerationError if no valid layout is found within the retry budget.
    """
    params.validate()
    for attempt in range(params.max_tries):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), attempt]))
        rooms = _try_place_rooms(rng, params)
        if rooms is None:
            continue
        cells = np.full((params.height, params.width), WALL, dtype=np.uint8)
        for room in rooms:
            cells[room.y:room.y + room.h, room.x:room.x + room.w] = FLOOR
        for i in range(1, len(rooms)):
            _carve_corridor(cells, rng, _room_point(rng, rooms[i - 1]),
                            _room_point(rng, rooms[i]))
        if not _connected_under_graph_adjacency(cells):
            continue
        try:
            objects = _scatter_objects(rng, rooms, params)
        except GenerationError:
            continue
        return GridMap(params.width, params.height, cells, objects, rooms,
                       int(seed), params)
    raise GenerationError(
        f"no valid map after {params.max_tries} attempts (seed={seed})")


# ---------------------------------------------------------------------------
# Graph construction and shortest paths
# ---------------------------------------------------------------------------

def build_graph(gmap: GridMap) -> NavGraph:
    """Octagonal traversal graph over floor cells, no corner cutting."""
    nodes = [(x, y) for y in range(gmap.height) for x in range(gmap.width)
             if gmap.cells[y, x] == FLOOR]
    ids = {xy: i for i, xy in enumerate(nodes)}
    nbr = np.full((len(nodes), 8), -1, dtype=np.int32)
    for u, (x, y) in enumerate(nodes):
        for d, (dx, dy) in enumerate(OFFSETS):
            nx, ny = x + dx, y + dy
            if not gmap.is_floor(nx, ny):
                continue
            if dx != 0 and dy != 0:
                if not (gmap.is_floor(x + dx, y) and gmap.is_floor(x, y + dy)):
                    continue
            nbr[u, d] = ids[(nx, ny)]
    node_objects: dict[int, tuple[str, ...]] = {}
    objects_by_class: dict[str, list[int]] = {cls: [] for cls in OBJECT_CLASSES}
    for obj in gmap.objects:
        node = ids[(obj.x, obj.y)]
        node_objects[node] = tuple(sorted(set(node_objects.get(node, ())) | {obj.cls}))
        objects_by_class[obj.cls].append(node)
    return NavGraph(nodes, ids, nbr, node_objects, objects_by_class)


def _bfs_from(graph: NavGraph, sources: Iterable[int]) -> np.ndarray:
    dist = np.full(graph.num_nodes, UNREACHABLE, dtype=np.int64)
    queue: deque[int] = deque()
    for s in sources:
        if dist[s] != 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        for v in graph.neighbours[u]:
            if v >= 0 and dist[v] == UNREACHABLE:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def instance_distances(graph: NavGraph, target_class: str) -> np.ndarray:
    """Per-node step count to the nearest instance of target_class."""
    sources = graph.objects_by_class.get(target_class, [])
    if not sources:
        raise ValueError(f"no instance of class {target_class!r} in graph")
    return _bfs_from(graph, sources)


def shortest_distances(graph: NavGraph, target_class: str,
                       goal_radius: int = 3) -> np.ndarray:
    """Distance to the goal set: nodes within goal_radius steps of an instance.

    d(v) = 0 marks success positions; unreachable nodes get UNREACHABLE.
    """
    inst = instance_distances(graph, target_class)
    goal_nodes = np.flatnonzero(inst <= goal_radius)
    return _bfs_from(graph, goal_nodes.tolist())


def optimal_action(graph: NavGraph, distances: np.ndarray, node: int) -> Action:
    """Stop at distance 0, otherwise the first direction (N..NW order) that
    decreases the distance by one."""
    d = distances[node]
    if d == UNREACHABLE:
        raise ValueError(f"goal unreachable from node {node}")
    if d == 0:
        return Action.STOP
    for direction in range(8):
        v = graph.neighbours[node, direction]
        if v >= 0 and distances[v] == d - 1:
            return Action(direction)
    raise AssertionError("BFS distance field lost its gradient")  # pragma: no cover


def step(graph: NavGraph, state: AgentState, action: Action) -> AgentState:
    """Apply an action. Moves into a missing edge are collision no-ops that
    still consume a step; Stop terminates without consuming one."""
    if state.done:
        raise ValueError("episode already terminated")
    if action == Action.STOP:
        return AgentState(state.position, state.steps_taken, state.target_class, True)
    v = graph.neighbours[state.position, int(action)]
    pos = int(v) if v >= 0 else state.position
    return AgentState(pos, state.steps_taken + 1, state.target_class, False)


def nodes_in_rooms_with_instance(graph: NavGraph, gmap: GridMap,
                                 target_class: str) -> list[int]:
    rooms_with = [
        room for room in gmap.rooms
        if any(obj.cls == target_class and room.contains(obj.x, obj.y)
               for obj in gmap.objects)
    ]
    out = []
    for node, (x, y) in enumerate(graph.nodes):
        if any(room.contains(x, y) for room in rooms_with):
            out.append(node)
    return out


def sample_start(graph: NavGraph, gmap: GridMap, target_class: str,
                 seed: int | np.random.Generator,
                 d_min: int = 6, d_max: int = 32,
                 goal_radius: int = 3,
                 distances: np.ndarray | None = None) -> int:
    """Uniform start among nodes inside a room holding the target class whose
    goal distance lies in [d_min, d_max]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if distances is None:
        distances = shortest_distances(graph, target_class, goal_radius)
    pool = [n for n in nodes_in_rooms_with_instance(graph, gmap, target_class)
            if d_min <= distances[n] <= d_max]
    if not pool:
        raise ValueError(
            f"no start with distance in [{d_min}, {d_max}] for class {target_class!r}")
    return int(pool[int(rng.integers(0, len(pool)))])


# ---------------------------------------------------------------------------
# Environment bundle and serialization
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EnvBundle:
    """A generated map plus its graph and a per-class distance cache."""

    env_id: str
    gmap: GridMap
    graph: NavGraph
    _dist: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, env_id: str, gmap: GridMap) -> "EnvBundle":
        return cls(env_id, gmap, build_graph(gmap))

    def distances(self, target_class: str, goal_radius: int) -> np.ndarray:
        key = (target_class, goal_radius)
        if key not in self._dist:
            self._dist[key] = shortest_distances(self.graph, target_class, goal_radius)
        return self._dist[key]


def map_to_json(gmap: GridMap) -> dict:
    return {
        "format": "sitfuse-env-v1",
        "seed": gmap.seed,
        "params": {
            "width": gmap.params.width,
            "height": gmap.params.height,
            "rooms": gmap.params.rooms,
            "room_min": gmap.params.room_min,
            "room_max": gmap.params.room_max,
            "objects_per_class": gmap.params.objects_per_class,
            "max_tries": gmap.params.max_tries,
        },
        "cells": ["".join("." if c == FLOOR else "#" for c in row)
                  for row in gmap.cells],
        "objects": [{"class": o.cls, "x": o.x, "y": o.y} for o in gmap.objects],
        "rooms": [{"x": r.x, "y": r.y, "w": r.w, "h": r.h} for r in gmap.rooms],
    }


def map_from_json(doc: dict) -> GridMap:
    params = GenParams(**doc["params"])
    rows = doc["cells"]
    cells = np.array([[FLOOR if ch == "." else WALL for ch in row] for row in rows],
                     dtype=np.uint8)
    objects = [ObjectInstance(o["class"], o["x"], o["y"]) for o in doc["objects"]]
    rooms = [Room(r["x"], r["y"], r["w"], r["h"]) for r in doc["rooms"]]
    return GridMap(params.width, params.height, cells, objects, rooms,
                   doc["seed"], params)


def save_map(gmap: GridMap, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(map_to_json(gmap), indent=1, sort_keys=True))


def load_map(path: str | Path) -> GridMap:
    return map_from_json(json.loads(Path(path).read_text()))
