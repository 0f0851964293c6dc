"""Navigation toward a fallen object on the scene occupancy grid.

The agent moves 0.25 m per Forward action and turns in 30 degree steps. It
sees objects through a geometric visibility check (90 degree field of view,
8 m range, ray march against the occupancy grid) and plans with A*.
"""

from __future__ import annotations

import csv
import enum
import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .frames import wrap_angle
from .synthworld import Episode, SceneSpec

STEP = 0.25
TURN = math.pi / 6
HEADINGS = 12
MAX_STEPS = 200
SUCCESS_DISTANCE = 2.0
FOUND_DISTANCE = 1.5
FOV = math.pi / 2
VIEW_RANGE = 8.0
RAY_STEP = 0.05
SQRT2 = math.sqrt(2.0)
POLICIES = ("full", "no-lossmap", "random", "oracle")


class Action(enum.Enum):
    FORWARD = "Forward"
    ROTATE_LEFT = "RotateLeft"
    ROTATE_RIGHT = "RotateRight"
    FOUND = "Found"


@dataclass(frozen=True)
class AgentState:
    """Pose plus counters; the heading is stored as a multiple of 30 degrees."""

    x: float
    y: float
    heading_index: int = 0
    steps_taken: int = 0
    collisions: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heading_index", int(self.heading_index) % HEADINGS)

    @property
    def heading(self) -> float:
        return wrap_angle(self.heading_index * TURN)

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    @classmethod
    def from_pose(cls, pose) -> "AgentState":
        x, y, theta = pose
        return cls(float(x), float(y), heading_index_of(theta))


def heading_index_of(theta: float) -> int:
    """Nearest multiple of 30 degrees, as an index in 0..11."""
    return int(round(theta / TURN)) % HEADINGS


@dataclass
class NavWorld:
    """Scene geometry plus the objects lying in it."""

    scene: SceneSpec
    target_type: int
    target: tuple[float, float]
    distractors: list[tuple[int, tuple[float, float]]] = field(default_factory=list)

    @classmethod
    def from_episode(cls, ep: Episode) -> "NavWorld":
        return cls(ep.scene, ep.event.type_id, tuple(ep.event.position),
                   [(int(t), tuple(p)) for t, p in ep.distractors])

    def objects(self) -> list[tuple[int, tuple[float, float]]]:
        """Target first, then distractors."""
        return [(self.target_type, self.target), *self.distractors]

    @property
    def grid(self) -> np.ndarray:
        return self.scene.occupancy


@dataclass
class Observation:
    visible: list[int]              # indices into world.objects()
    found: bool | None = None       # outcome of a Found action


@dataclass
class EpisodeResult:
    index: int
    policy: str
    success: bool
    path_length: float
    shortest_length: float
    action_count: int
    min_actions: int
    steps_capped: bool
    collisions: int = 0
    trajectory: list[tuple[int, float, float, float, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("trajectory")
        return d


@dataclass(frozen=True)
class Metrics:
    sr: float
    spl: float
    sna: float
    episodes: int


# ---------------------------------------------------------------- stepping

def _free_point(scene: SceneSpec, x: float, y: float) -> bool:
    r, c = scene.cell_of(x, y)
    return scene.in_bounds(r, c) and not scene.blocked(r, c)


def step(world: NavWorld, agent: AgentState, action: Action) -> tuple[AgentState, Observation]:
    """Apply one action; blocked Forward moves count as collisions."""
    n = agent.steps_taken + 1
    found = None
    if action is Action.FORWARD:
        x = agent.x + STEP * math.cos(agent.heading)
        y = agent.y + STEP * math.sin(agent.heading)
        if _free_point(world.scene, x, y):
            agent = AgentState(x, y, agent.heading_index, n, agent.collisions)
        else:
            agent = AgentState(agent.x, agent.y, agent.heading_index, n, agent.collisions + 1)
    elif action is Action.ROTATE_LEFT:
        agent = AgentState(agent.x, agent.y, agent.heading_index + 1, n, agent.collisions)
    elif action is Action.ROTATE_RIGHT:
        agent = AgentState(agent.x, agent.y, agent.heading_index - 1, n, agent.collisions)
    elif action is Action.FOUND:
        agent = AgentState(agent.x, agent.y, agent.heading_index, n, agent.collisions)
        found = check_found(world, agent, world.target)
    else:
        raise ValueError(f"unknown action {action!r}")
    seen = [i for i, (_, p) in enumerate(world.objects()) if visible(agent, p, world.scene)]
    return agent, Observation(seen, found)


def line_clear(scene: SceneSpec, a, b) -> bool:
    """True when no sample of the segment a-b (every 0.05 m, ends included) is blocked."""
    ax, ay = a
    bx, by = b
    length = math.hypot(bx - ax, by - ay)
    n = max(1, int(math.ceil(length / RAY_STEP)))
    for i in range(n + 1):
        t = i / n
        if not _free_point(scene, ax + t * (bx - ax), ay + t * (by - ay)):
            return False
    return True


def visible(agent: AgentState, point, scene: SceneSpec) -> bool:
    dx, dy = point[0] - agent.x, point[1] - agent.y
    dist = math.hypot(dx, dy)
    if dist > VIEW_RANGE:
        return False
    if dist > 0 and abs(wrap_angle(math.atan2(dy, dx) - agent.heading)) > FOV / 2 + 1e-12:
        return False
    return line_clear(scene, agent.position, point)


def check_found(world: NavWorld, agent: AgentState, target) -> bool:
    return (math.hypot(target[0] - agent.x, target[1] - agent.y) < SUCCESS_DISTANCE
            and visible(agent, target, world.scene)
            and agent.steps_taken <= MAX_STEPS)


# ---------------------------------------------------------------- search

_MOVES = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def neighbors(grid: np.ndarray, cell) -> list[tuple[tuple[int, int], float]]:
    """8-connected free neighbors; diagonals need both orthogonal cells free."""
    r, c = cell
    rows, cols = grid.shape
    out = []
    for dr, dc in _MOVES:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < rows and 0 <= nc < cols) or grid[nr, nc]:
            continue
        if dr and dc:
            if grid[r + dr, c] or grid[r, c + dc]:
                continue
            out.append(((nr, nc), SQRT2))
        else:
            out.append(((nr, nc), 1.0))
    return out


def octile(a, b) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc)


def _search(grid: np.ndarray, start, is_goal: Callable, heuristic: Callable):
    start = (int(start[0]), int(start[1]))
    g = {start: 0.0}
    parent = {start: None}
    heap = [(heuristic(start), start)]
    closed = set()
    while heap:
        _, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if is_goal(cell):
            path = [cell]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1], g[cell]
        closed.add(cell)
        for nb, cost in neighbors(grid, cell):
            if nb in closed:
                continue
            ng = g[cell] + cost
            if ng < g.get(nb, math.inf):
                g[nb] = ng
                parent[nb] = cell
                # (f, row, col) ordering breaks equal-f ties by smaller cell
                heapq.heappush(heap, (ng + heuristic(nb), nb))
    return None, math.inf


def astar(grid: np.ndarray, start, goal) -> list[tuple[int, int]] | None:
    """Cost-optimal 8-connected path of cells from start to goal, or None."""
    grid = np.asarray(grid, dtype=bool)
    for name, cell in (("start", start), ("goal", goal)):
        r, c = cell
        if not (0 <= r < grid.shape[0] and 0 <= c < grid.shape[1]) or grid[r, c]:
            raise ValueError(f"{name} cell {tuple(cell)} is not a free cell")
    goal = (int(goal[0]), int(goal[1]))
    path, _ = _search(grid, start, lambda c: c == goal, lambda c: octile(c, goal))
    return path


def path_cost(path: Sequence) -> float:
    return float(sum(SQRT2 if (a[0] != b[0] and a[1] != b[1]) else 1.0 for a, b in zip(path, path[1:])))


def astar_to_any(grid: np.ndarray, start, goals) -> tuple[list | None, float]:
    """Cheapest path to the nearest of several goal cells (octile heuristic to the closest goal)."""
    goals = {(int(r), int(c)) for r, c in goals}
    if not goals:
        return None, math.inf
    g_arr = np.array(sorted(goals), dtype=float)

    def h(cell):
        dr = np.abs(g_arr[:, 0] - cell[0])
        dc = np.abs(g_arr[:, 1] - cell[1])
        return float(np.min(np.maximum(dr, dc) + (SQRT2 - 1.0) * np.minimum(dr, dc)))

    return _search(np.asarray(grid, dtype=bool), start, lambda c: c in goals, h)


# ---------------------------------------------------------------- oracle

def success_cells(world: NavWorld) -> list[tuple[int, int]]:
    """Free cells whose centers are within the success distance with line of sight."""
    scene, (tx, ty) = world.scene, world.target
    out = []
    for r, c in scene.free_cells():
        x, y = scene.cell_center(r, c)
        if math.hypot(tx - x, ty - y) < SUCCESS_DISTANCE and line_clear(scene, (x, y), (tx, ty)):
            out.append((int(r), int(c)))
    return out


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def oracle_shortest(world: NavWorld, start_pose) -> tuple[float, int]:
    """(shortest path length in meters, minimum action count including Found).

    Length is the A* cost from the start cell to the nearest success cell.
    Actions come from a breadth-first search over (cell, heading) where
    Forward moves to the neighbor cell in the rounded heading direction.
    Unreachable success gives (inf, MAX_STEPS + 1).
    """
    scene = world.scene
    agent = AgentState.from_pose(start_pose)
    start = scene.cell_of(agent.x, agent.y)
    goals = success_cells(world)
    _, cost = astar_to_any(scene.occupancy, start, goals)
    length = cost * scene.resolution

    offsets = [(_round_half_away(math.sin(k * TURN)), _round_half_away(math.cos(k * TURN)))
               for k in range(HEADINGS)]

    def done(cell, k):
        x, y = scene.cell_center(*cell)
        probe = AgentState(x, y, k)
        return (math.hypot(world.target[0] - x, world.target[1] - y) < SUCCESS_DISTANCE
                and visible(probe, world.target, scene))

    s0 = (start, agent.heading_index)
    if done(*s0):
        return length, 1
    seen = {s0}
    frontier = [s0]
    depth = 0
    while frontier and depth < MAX_STEPS:
        depth += 1
        nxt = []
        for cell, k in frontier:
            dr, dc = offsets[k]
            moved = (cell[0] + dr, cell[1] + dc)
            cand = [(cell, (k + 1) % HEADINGS), (cell, (k - 1) % HEADINGS)]
            if scene.in_bounds(*moved) and not scene.blocked(*moved):
                cand.append((moved, k))
            for s in cand:
                if s in seen:
                    continue
                if done(*s):
                    return length, depth + 1
                seen.add(s)
                nxt.append(s)
        frontier = nxt
    return length, MAX_STEPS + 1


# ---------------------------------------------------------------- metrics

def _ratio(best: float, actual: float) -> float:
    # a zero-length optimal path walked with zero length scores 1
    top = max(actual, best)
    return 1.0 if top == 0 else best / top


def compute_metrics(results: Sequence[EpisodeResult]) -> Metrics:
    if len(results) == 0:
        raise ValueError("compute_metrics needs at least one result")
    s = np.array([1.0 if r.success else 0.0 for r in results])
    spl = [_ratio(r.shortest_length, r.path_length) if si else 0.0 for si, r in zip(s, results)]
    sna = [_ratio(r.min_actions, r.action_count) if si else 0.0 for si, r in zip(s, results)]
    return Metrics(float(s.mean()), float(np.mean(spl)), float(np.mean(sna)), len(results))


# ---------------------------------------------------------------- policies

@dataclass
class Belief:
    """What the acoustic model tells the planner about the fallen object."""

    types: list[int]                          # top-3 candidate types
    position: tuple[float, float]             # predicted global position
    minima: list[tuple[float, float]] = field(default_factory=list)  # loss-map minima, global
    score: Callable[[tuple[float, float]], float] | None = None      # loss-map value at a point


def make_belief(model, waveform, tf, workers: int | None = None) -> tuple[Belief, "LossMap"]:
    """Run the acoustic model on one recording: top-3 types, position and loss map."""
    from .infer import GeneratorSynth, loss_map, local_minima, model_encoder
    from .signal import log_psd, log_stft
    from .frames import r2g

    S = log_stft(waveform)
    pred = model.predict(S)
    lmap = loss_map(S, log_psd(waveform), GeneratorSynth(model), model_encoder(model), tf, workers)
    minima = [tuple(float(v) for v in m) for m in local_minima(lmap, 3)]
    position = tuple(float(v) for v in r2g(pred["position"], tf))
    return Belief(list(pred["types"]), position, minima, lmap.value_at_global), lmap


@dataclass(frozen=True)
class PolicyConfig:
    policy: str = "full"
    seed: int = 0
    random_waypoints: int = 12

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")


class _Runner:
    """Executes actions and records the trajectory under the step cap."""

    def __init__(self, world: NavWorld, agent: AgentState):
        self.world = world
        self.agent = agent
        self.path_length = 0.0
        self.success = False
        self.ended = False
        self.trajectory: list[tuple[int, float, float, float, str]] = []
        self.seen: list[int] = []
        self._note(visible_objects(world, agent))

    @property
    def exhausted(self) -> bool:
        return self.ended or self.agent.steps_taken >= MAX_STEPS

    def _note(self, idx):
        for i in idx:
            if i not in self.seen:
                self.seen.append(i)

    def act(self, action: Action) -> Observation:
        before = self.agent.position
        self.agent, obs = step(self.world, self.agent, action)
        self.path_length += math.hypot(self.agent.x - before[0], self.agent.y - before[1])
        self.trajectory.append((self.agent.steps_taken, self.agent.x, self.agent.y,
                                self.agent.heading, action.value))
        self._note(obs.visible)
        if action is Action.FOUND:
            # Found ends the episode whether or not it was right
            self.ended = True
            self.success = bool(obs.found)
        return obs


def visible_objects(world: NavWorld, agent: AgentState) -> list[int]:
    return [i for i, (_, p) in enumerate(world.objects()) if visible(agent, p, world.scene)]


def _turn_toward(k_now: int, k_goal: int) -> Action:
    diff = (k_goal - k_now) % HEADINGS
    return Action.ROTATE_LEFT if diff <= HEADINGS // 2 else Action.ROTATE_RIGHT


def _nearest_free_cell(scene: SceneSpec, point) -> tuple[int, int] | None:
    free = scene.free_cells()
    if len(free) == 0:
        return None
    centers = (free[:, ::-1] + 0.5) * scene.resolution
    d = np.hypot(centers[:, 0] - point[0], centers[:, 1] - point[1])
    r, c = free[int(np.argmin(d))]
    return int(r), int(c)


def _goal_cell(scene: SceneSpec, point) -> tuple[int, int] | None:
    r, c = scene.cell_of(*point)
    if scene.in_bounds(r, c) and not scene.blocked(r, c):
        return r, c
    return _nearest_free_cell(scene, point)


def _heading_step(run: _Runner, desired: float) -> Action:
    """Rotate toward the free heading closest to ``desired``, or step forward."""
    a = run.agent
    order = sorted(range(HEADINGS), key=lambda k: (abs(wrap_angle(k * TURN - desired)), k))
    for k in order[:5]:
        x = a.x + STEP * math.cos(k * TURN)
        y = a.y + STEP * math.sin(k * TURN)
        if _free_point(run.world.scene, x, y):
            return Action.FORWARD if k == a.heading_index else _turn_toward(a.heading_index, k)
    return _turn_toward(a.heading_index, order[0])


def _drive(run: _Runner, goal_point, arrive: Callable[[], bool], interrupt: Callable[[], bool]) -> bool:
    """Follow A* toward ``goal_point`` until ``arrive`` or ``interrupt``; True on arrival."""
    scene = run.world.scene
    goal = _goal_cell(scene, goal_point)
    if goal is None:
        return False
    path = None
    stalls = 0
    while not run.exhausted:
        if arrive():
            return True
        if interrupt():
            return False
        cell = scene.cell_of(run.agent.x, run.agent.y)
        if path is None or cell not in path:
            path = astar(scene.occupancy, cell, goal)
            if path is None:
                return False
        i = path.index(cell)
        if i == len(path) - 1:
            target = goal_point if _free_point(scene, *goal_point) else scene.cell_center(*goal)
            if math.hypot(target[0] - run.agent.x, target[1] - run.agent.y) < STEP / 2:
                return arrive()
        else:
            # farthest of the next few waypoints reachable in a straight line
            target = scene.cell_center(*path[i + 1])
            for j in range(min(len(path) - 1, i + 4), i + 1, -1):
                c = scene.cell_center(*path[j])
                if line_clear(scene, run.agent.position, c):
                    target = c
                    break
        desired = math.atan2(target[1] - run.agent.y, target[0] - run.agent.x)
        before = (run.agent.position, run.agent.collisions)
        action = _heading_step(run, desired)
        run.act(action)
        if action is Action.FORWARD and run.agent.collisions > before[1]:
            stalls += 1
            if stalls > 3:
                return False
    return False


def _approach_and_find(run: _Runner, obj_index: int) -> bool:
    """Walk to an object, face it and issue Found; True when the episode succeeded."""
    _, p = run.world.objects()[obj_index]

    def close_and_seen():
        a = run.agent
        return math.hypot(p[0] - a.x, p[1] - a.y) <= FOUND_DISTANCE and visible(a, p, run.world.scene)

    def close():
        a = run.agent
        return math.hypot(p[0] - a.x, p[1] - a.y) <= FOUND_DISTANCE

    if not _drive(run, p, close, lambda: False):
        return False
    # turn to face the object, then confirm it
    for _ in range(HEADINGS // 2):
        if close_and_seen() or run.exhausted:
            break
        desired = heading_index_of(math.atan2(p[1] - run.agent.y, p[0] - run.agent.x))
        run.act(_turn_toward(run.agent.heading_index, desired))
    if not close_and_seen():
        # occluded at arrival distance: keep closing in along the path
        def very_close_seen():
            a = run.agent
            return math.hypot(p[0] - a.x, p[1] - a.y) <= 0.75 * FOUND_DISTANCE and visible(a, p, run.world.scene)
        _drive(run, p, very_close_seen, lambda: False)
    if run.exhausted or not close_and_seen():
        return False
    run.act(Action.FOUND)
    return run.success


def _scan(run: _Runner, stop: Callable[[], bool]) -> None:
    for _ in range(HEADINGS - 1):
        if stop() or run.exhausted:
            return
        run.act(Action.ROTATE_LEFT)


def plan_episode(world: NavWorld, start_pose, belief: Belief | None, config: PolicyConfig,
                 index: int = 0) -> EpisodeResult:
    """Run one search episode under ``config.policy``.

    Found ends the episode, so each policy commits to one object. ``full``
    claims a candidate object (type in the belief's top 3) visible at the
    start; otherwise it walks to the predicted position, looks around, and
    claims the known candidate with the lowest loss-map value, falling back to
    the loss-map minima in ranked order. ``no-lossmap`` uses the same candidates in seeded random
    order. ``random`` has no audio: it wanders between random free cells and
    claims the first object it sees. ``oracle`` walks straight to the true
    target.
    """
    shortest, min_actions = oracle_shortest(world, start_pose)
    run = _Runner(world, AgentState.from_pose(start_pose))
    rng = np.random.default_rng([config.seed, index, 0x9A])
    objects = world.objects()
    tried: set[int] = set()

    if config.policy == "oracle":
        _approach_and_find(run, 0)
    elif config.policy == "random":
        # no audio: wander between random free cells and claim the first object seen
        free = world.scene.free_cells()
        for _ in range(config.random_waypoints):
            if run.seen:
                _approach_and_find(run, run.seen[0])
                break
            if run.exhausted:
                break
            r, c = free[int(rng.integers(len(free)))]
            point = world.scene.cell_center(r, c)
            _drive(run, point, lambda: False, lambda: bool(run.seen))
            _scan(run, lambda: bool(run.seen))
    else:
        if belief is None:
            raise ValueError(f"policy {config.policy!r} needs a belief")
        types = set(belief.types)
        ranked = config.policy == "full" and belief.score is not None

        def candidates():
            c = [i for i in run.seen if i not in tried and objects[i][0] in types]
            if ranked:
                return sorted(c, key=lambda i: belief.score(objects[i][1]))
            return list(rng.permutation(c)) if len(c) > 1 else c

        minima = list(belief.minima)
        if ranked:
            minima.sort(key=belief.score)
        elif len(minima) > 1:
            minima = [minima[i] for i in rng.permutation(len(minima))]
        points = [tuple(belief.position), *[tuple(m) for m in minima]]

        def claim() -> bool:
            # Found ends the episode; an unreachable candidate falls through to the next
            while not run.exhausted:
                cand = candidates()
                if not cand:
                    return False
                tried.add(int(cand[0]))
                _approach_and_find(run, int(cand[0]))
            return True

        if not claim():
            for point in points:
                if run.exhausted:
                    break
                _drive(run, point, lambda: math.hypot(point[0] - run.agent.x, point[1] - run.agent.y) < 0.5,
                       lambda: False)
                _scan(run, lambda: False)
                if claim():
                    break

    return EpisodeResult(index, config.policy, run.success, run.path_length, shortest,
                         run.agent.steps_taken, min_actions, run.agent.steps_taken >= MAX_STEPS,
                         run.agent.collisions, run.trajectory)


# ---------------------------------------------------------------- output

def write_results(path: str | Path, results: Sequence[EpisodeResult], metrics: Metrics) -> None:
    doc = {"episodes": [r.to_json() for r in results], "metrics": asdict(metrics)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_trajectory(path: str | Path, result: EpisodeResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "y", "theta", "action"])
        for s, x, y, th, a in result.trajectory:
            w.writerow([s, repr(x), repr(y), repr(th), a])
