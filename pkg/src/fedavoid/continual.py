"""Gridworld robot with a simulated lidar for continual, auto-labelled data collection.

World coordinates are metres with the origin at the grid corner; cell
``(ix, iy)`` covers ``[ix*cell, (ix+1)*cell) x [iy*cell, (iy+1)*cell)`` and is
stored at ``occupancy[iy, ix]``. Headings are radians, counter-clockwise from
+x. Beam angles in a :class:`LidarScan` are relative to the heading.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import data, federation as fed, kernels
from .data import Blob, LabeledExample, Scene
from .errors import ConfigError, NavigationError, StateError

log = logging.getLogger(__name__)

D_TRIG = 0.5
FOV = math.radians(60.0)
N_BEAMS = 16
MAX_RANGE = 10.0
N_BUF = 64

# forward camera: 32 columns over the field of view
CAM_HORIZON = 12.0
CAM_HEIGHT = 0.25
OBSTACLE_HEIGHT = 0.40
RENDER_RANGE = 3.0


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float


@dataclass
class GridWorld:
    occupancy: np.ndarray
    cell_size: float
    realm: str = "sim"

    def __post_init__(self):
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 2:
            raise ConfigError("occupancy must be a 2-D grid")
        if self.cell_size <= 0:
            raise ConfigError("cell_size must be positive")
        if self.realm not in ("sim", "real"):
            raise ConfigError(f"unknown realm {self.realm!r}")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def env(self):
        return data.HUSKY_SIM if self.realm == "sim" else data.HUSKY_REAL

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def in_bounds(self, x: float, y: float) -> bool:
        return 0 <= x < self.width * self.cell_size and 0 <= y < self.height * self.cell_size

    def is_free(self, x: float, y: float) -> bool:
        if not self.in_bounds(x, y):
            return False
        ix, iy = self.cell_of(x, y)
        return not self.occupancy[iy, ix]

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size

    def with_obstacle(self, cells) -> "GridWorld":
        occ = self.occupancy.copy()
        for ix, iy in cells:
            occ[iy, ix] = True
        return GridWorld(occ, self.cell_size, self.realm)

    # world files ---------------------------------------------------------

    def to_json(self) -> dict:
        iy, ix = np.nonzero(self.occupancy)
        return {
            "cell_size": self.cell_size,
            "width": self.width,
            "height": self.height,
            "occupied": [[int(x), int(y)] for x, y in zip(ix, iy)],
            "realm": self.realm,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GridWorld":
        try:
            w, h = int(obj["width"]), int(obj["height"])
            occ = np.zeros((h, w), dtype=bool)
            for x, y in obj["occupied"]:
                if not (0 <= x < w and 0 <= y < h):
                    raise ConfigError(f"occupied cell ({x}, {y}) outside a {w}x{h} grid")
                occ[y, x] = True
            return cls(occ, float(obj["cell_size"]), obj.get("realm", "sim"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad world file: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "GridWorld":
        return cls.from_json(json.loads(Path(path).read_text()))


def random_world(seed: int, realm: str = "sim", width: int = 80, height: int = 80, cell_size: float = 0.1, n_boxes: int = 14) -> GridWorld:
    """Walled room with axis-aligned boxes (a playpen / office floor)."""
    rng = np.random.default_rng([int(seed), 0 if realm == "sim" else 1])
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    for _ in range(n_boxes):
        bw, bh = rng.integers(2, 9, size=2)
        x0 = int(rng.integers(4, width - 4 - bw))
        y0 = int(rng.integers(4, height - 4 - bh))
        occ[y0 : y0 + bh, x0 : x0 + bw] = True
    return GridWorld(occ, cell_size, realm)


# ---------------------------------------------------------------------------
# lidar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LidarScan:
    angles: np.ndarray  # relative to heading, strictly increasing
    ranges: np.ndarray
    max_range: float

    def __post_init__(self):
        if len(self.angles) != len(self.ranges):
            raise ConfigError("angles and ranges differ in length")
        if np.any(np.diff(self.angles) <= 0):
            raise ConfigError("beam angles must be strictly increasing")
        if np.any(self.ranges <= 0) or np.any(self.ranges > self.max_range):
            raise ConfigError("ranges must lie in (0, max_range]")

    @property
    def min_range(self) -> float:
        return float(self.ranges.min())


def default_beams(n: int = N_BEAMS, fov: float = FOV) -> np.ndarray:
    return np.linspace(-fov / 2, fov / 2, n)


def check_pose(world: GridWorld, pose: Pose) -> None:
    if not world.in_bounds(pose.x, pose.y):
        raise StateError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside the world")
    if not world.is_free(pose.x, pose.y):
        raise StateError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is inside an obstacle")


def raycast(world: GridWorld, pose: Pose, beam_angles=None, max_range: float = MAX_RANGE) -> LidarScan:
    """DDA traversal: each range is the distance to the first occupied cell, else ``max_range``."""
    check_pose(world, pose)
    rel = default_beams() if beam_angles is None else np.asarray(beam_angles, dtype=np.float64)
    ranges = kernels.raycast_grid(world.occupancy, pose.x, pose.y, rel + pose.heading, world.cell_size, max_range)
    return LidarScan(rel.copy(), ranges, float(max_range))


def label_from_scan(scan: LidarScan, d_trig: float = D_TRIG, fov: float = FOV) -> int:
    """Blocked iff the nearest return within +-fov/2 of the heading is closer than ``d_trig``."""
    if d_trig <= 0:
        raise ConfigError("d_trig must be positive")
    sel = np.abs(scan.angles) <= fov / 2 + 1e-12
    if not sel.any():
        raise ConfigError("no lidar beams inside the field of view")
    return data.BLOCKED if float(scan.ranges[sel].min()) < d_trig else data.FREE


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


def camera_columns(world: GridWorld, pose: Pose, fov: float = FOV, n: int = 32) -> np.ndarray:
    """Depth seen through each image column, left to right."""
    rel = fov / 2 - (np.arange(n) + 0.5) * fov / n
    return kernels.raycast_grid(world.occupancy, pose.x, pose.y, rel + pose.heading, world.cell_size, RENDER_RANGE)


def camera_scene(world: GridWorld, pose: Pose, rng, fov: float = FOV, shift=data.DEFAULT_SHIFT) -> Scene:
    """Scene of the forward camera: one box per run of columns at similar depth."""
    check_pose(world, pose)
    depth = camera_columns(world, pose, fov)
    # pinhole focal length in pixels for a 32-pixel-wide image
    f = 16.0 / math.tan(fov / 2)
    env = world.env
    st = data.STYLES[env.index]
    blobs = []
    j = 0
    while j < len(depth):
        if depth[j] >= RENDER_RANGE:
            j += 1
            continue
        k = j
        while k + 1 < len(depth) and depth[k + 1] < RENDER_RANGE and abs(depth[k + 1] - depth[k]) < 0.15:
            k += 1
        d = max(float(depth[j : k + 1].mean()), 0.05)
        bottom = min(CAM_HORIZON + f * CAM_HEIGHT / d, 40.0)
        top = max(CAM_HORIZON - f * (OBSTACLE_HEIGHT - CAM_HEIGHT) / d, -8.0)
        color = data._obstacle_color(st, rng)
        blobs.append(Blob("box", (j + k + 1) / 2.0, (top + bottom) / 2.0, (k - j + 1) / 2.0, (bottom - top) / 2.0, color))
        j = k + 1
    gain, bias = data._realm_params(env, shift, rng)
    return Scene(env, float(rng.uniform(0, 2 * math.pi)), tuple(blobs), int(rng.integers(0, 2**63 - 1)), gain, bias, shift)


@dataclass
class Observation:
    example: LabeledExample
    scan: LidarScan
    scene: Scene
    pose: Pose


def observe(world, pose, rng, d_trig=D_TRIG, fov=FOV, renderer=data.render, beams=None) -> Observation:
    scan = raycast(world, pose, beams)
    scene = camera_scene(world, pose, rng, fov)
    ex = LabeledExample(renderer(scene), label_from_scan(scan, d_trig, fov), world.env)
    return Observation(ex, scan, scene, pose)


def collect_step(world: GridWorld, pose: Pose, renderer=data.render, d_trig: float = D_TRIG, rng=None) -> LabeledExample:
    """Render the forward frame at ``pose`` and label it from the lidar."""
    rng = np.random.default_rng(0) if rng is None else rng
    return observe(world, pose, rng, d_trig, renderer=renderer).example


# ---------------------------------------------------------------------------
# navigation
# ---------------------------------------------------------------------------

_MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def inflate(world: GridWorld, clearance_cells: int) -> np.ndarray:
    if clearance_cells <= 0:
        return world.occupancy.copy()
    return ndimage.binary_dilation(world.occupancy, iterations=clearance_cells)


def plan_path(blocked: np.ndarray, start: tuple, goal: tuple) -> list[tuple[int, int]]:
    """Breadth-first 8-connected grid path from ``start`` to ``goal`` cells (x, y)."""
    h, w = blocked.shape
    if blocked[start[1], start[0]] or blocked[goal[1], goal[0]]:
        raise NavigationError(f"no path from {start} to {goal}: endpoint blocked")
    prev = {start: None}
    q = deque([start])
    while q:
        cur = q.popleft()
        if cur == goal:
            break
        for dx, dy in _MOVES:
            nx, ny = cur[0] + dx, cur[1] + dy
            if 0 <= nx < w and 0 <= ny < h and not blocked[ny, nx] and (nx, ny) not in prev:
                # no corner cutting
                if dx and dy and (blocked[cur[1], nx] or blocked[ny, cur[0]]):
                    continue
                prev[(nx, ny)] = cur
                q.append((nx, ny))
    if goal not in prev:
        raise NavigationError(f"waypoint {goal} unreachable from {start}")
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


@dataclass
class Schedule:
    """Seeded waypoint tour: ``steps`` collection steps, ``stride`` cells per step."""

    seed: int = 0
    steps: int = 200
    stride: int = 3
    clearance: int = 2
    look_jitter: float = math.radians(75.0)
    n_waypoints: int = 64


@dataclass
class TrainCfg:
    epochs: int = 2
    lr: float = fed.LR
    batch_size: int = fed.BATCH_SIZE
    seed: int = 0
    clip_norm: float = fed.CLIP_NORM


def _waypoints(world: GridWorld, blocked: np.ndarray, sched: Schedule, rng) -> list[tuple[int, int]]:
    ys, xs = np.nonzero(~blocked)
    if len(xs) == 0:
        raise NavigationError("world has no free cell with the required clearance")
    pick = rng.integers(0, len(xs), size=sched.n_waypoints)
    return [(int(xs[i]), int(ys[i])) for i in pick]


def trajectory(world: GridWorld, sched: Schedule):
    """Yield ``sched.steps`` poses along the waypoint tour.

    Unreachable waypoints are logged and skipped.
    """
    rng = np.random.default_rng([int(sched.seed), 17])
    blocked = inflate(world, sched.clearance)
    wps = _waypoints(world, blocked, sched, rng)
    cur = wps[0]
    produced = 0
    wi = 1
    stalls = 0
    while produced < sched.steps:
        goal = wps[wi % len(wps)]
        wi += 1
        try:
            path = plan_path(blocked, cur, goal)
        except NavigationError as exc:
            log.info("skipping waypoint: %s", exc)
            stalls += 1
            if stalls > len(wps):
                raise NavigationError("no reachable waypoint left") from exc
            continue
        stalls = 0
        for a in range(sched.stride, len(path) + sched.stride - 1, sched.stride):
            b = min(a, len(path) - 1)
            p, q = path[b - 1] if b > 0 else path[0], path[b]
            heading = math.atan2(q[1] - p[1], q[0] - p[0]) if p != q else 0.0
            heading += float(rng.uniform(-sched.look_jitter, sched.look_jitter))
            x, y = world.cell_center(*path[b])
            yield Pose(x, y, heading)
            produced += 1
            if produced >= sched.steps:
                return
        cur = goal


# ---------------------------------------------------------------------------
# continual session
# ---------------------------------------------------------------------------


@dataclass
class LogRow:
    step: int
    x: float
    y: float
    heading: float
    min_range: float
    label: int


@dataclass
class CollectionBuffer:
    capacity: int
    examples: list = field(default_factory=list)

    def add(self, ex: LabeledExample) -> bool:
        """Append; returns True when the hand-off threshold is reached."""
        self.examples.append(ex)
        return len(self.examples) >= self.capacity

    def drain(self) -> list:
        if len(self.examples) < self.capacity:
            raise StateError("buffer below hand-off threshold")
        out, self.examples = self.examples, []
        return out


class ContinualSession:
    """Collect auto-labelled frames along a tour; train and emit an update per full buffer.

    ``global_provider()`` returns the latest global model each time training
    starts. ``log`` holds one :class:`LogRow` per collection step and
    ``observations`` the scans behind each label.
    """

    def __init__(self, world, schedule: Schedule, n_buf: int, train: TrainCfg, global_provider, client_id=None,
                 d_trig=D_TRIG, fov=FOV, keep_observations=False):
        if n_buf < train.batch_size:
            raise ConfigError("N_buf must be at least the batch size")
        self.world = world
        self.schedule = schedule
        self.n_buf = n_buf
        self.train = train
        self.global_provider = global_provider
        self.client_id = client_id or world.env.name
        self.d_trig = d_trig
        self.fov = fov
        self.keep = keep_observations
        self.log: list[LogRow] = []
        self.observations: list[Observation] = []
        self.buffer = CollectionBuffer(n_buf)
        self.trained_sizes: list[int] = []

    def run(self):
        rng = np.random.default_rng([int(self.schedule.seed), 29])
        n_updates = 0
        for step, pose in enumerate(trajectory(self.world, self.schedule)):
            obs = observe(self.world, pose, rng, self.d_trig, self.fov)
            self.log.append(LogRow(step, pose.x, pose.y, pose.heading, obs.scan.min_range, obs.example.label))
            if self.keep:
                self.observations.append(obs)
            if self.buffer.add(obs.example):
                batch = self.buffer.drain()
                self.trained_sizes.append(len(batch))
                ds = data.from_examples(batch, "train", self.train.seed)
                g = self.global_provider()
                yield fed.local_train(
                    g, ds, self.train.epochs, self.train.lr, self.train.batch_size,
                    self.train.seed + n_updates, self.client_id, self.train.clip_norm,
                )
                n_updates += 1

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "x", "y", "heading", "min_range", "label"])
            for r in self.log:
                w.writerow([r.step, f"{r.x:.4f}", f"{r.y:.4f}", f"{r.heading:.6f}", f"{r.min_range:.6f}", r.label])


def continual_session(world, schedule: Schedule, n_buf: int, train: TrainCfg, global_provider, **kw):
    """Generator of ClientUpdates; see :class:`ContinualSession`."""
    return ContinualSession(world, schedule, n_buf, train, global_provider, **kw).run()


def collect_validation(world: GridWorld, n: int, seed: int, d_trig: float = D_TRIG, clearance: int = 1) -> data.EnvironmentDataset:
    """Balanced labelled frames from random free poses (independent of any tour)."""
    if n < 2:
        raise ConfigError("validation size must be >= 2")
    rng = np.random.default_rng([int(seed), 31])
    free = ~inflate(world, clearance)
    ys, xs = np.nonzero(free)
    want = {data.BLOCKED: n // 2, data.FREE: n - n // 2}
    got = {data.BLOCKED: [], data.FREE: []}
    for _ in range(200 * n):
        if all(len(got[k]) >= want[k] for k in want):
            break
        i = int(rng.integers(0, len(xs)))
        x, y = world.cell_center(int(xs[i]), int(ys[i]))
        pose = Pose(x, y, float(rng.uniform(-math.pi, math.pi)))
        ex = observe(world, pose, rng, d_trig).example
        if len(got[ex.label]) < want[ex.label]:
            got[ex.label].append(ex)
    else:  # pragma: no cover
        raise ConfigError("could not collect a balanced validation set")
    exs = [e for pair in zip(got[data.BLOCKED], got[data.FREE]) for e in pair]
    exs += got[data.FREE][len(got[data.BLOCKED]):]
    return data.from_examples(exs, "val", seed)
