"""Deterministic 2.5-D tabletop simulator with rendered observations.

The world is a unit square holding colored shapes, a gripper with planar
position, grasp height z, yaw, and an open/close state, and optionally a
target zone. Actions are the usual 7-vector: xyz translation deltas,
axis-angle rotation (only the z component drives yaw here), and a
gripper command thresholded at 0.5. Closing the gripper near an object
at low z attaches it; the attached object tracks the gripper until
released. Everything — spawning, dynamics, rendering — is a pure
function of (seed, task, view), which is what makes bitwise-reproducible
closed-loop evaluation possible.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import make_rng

# All tunable world constants in one place.
MAX_DELTA = 0.05          # per-step translation clip, world units
MAX_DYAW = 0.2
GRASP_RADIUS = 0.03       # xy attach radius
GRASP_HEIGHT = 0.06       # z must be at or below this to attach
GRASP_Z = 0.02            # expert's grasp depth
LIFT_HEIGHT = 0.12        # pick succeeds at or above this
TRAVEL_Z = 0.15
Z_MAX = 0.2
POS_TOL = 0.012
SPAWN_LO, SPAWN_HI = 0.18, 0.82
OBJECT_SIZE = 0.07           # half-extent
MIN_OBJECT_GAP = 0.18
ZONE_RADIUS = 0.07
STACK_TOL = 0.05
MAX_STEPS_DEFAULT = 120

COLOR_TABLE = {
    "red": (220, 50, 50),
    "green": (60, 200, 70),
    "blue": (70, 100, 235),
    "yellow": (225, 210, 60),
}
SHAPES = ("cube", "bar", "disk")

BACKGROUND = (28, 28, 34)
ZONE_COLOR = (90, 90, 90)
GRIPPER_OPEN = (255, 255, 255)
GRIPPER_CLOSED = (165, 165, 165)

TASK_KINDS = ("pick", "pick_place", "stack", "pick_distractors")


class SpawnError(RuntimeError):
    """Could not place objects without overlap within the retry budget."""


class ExpertError(RuntimeError):
    """Scripted expert asked to act from an infeasible state."""


@dataclass
class ObjectState:
    id: int
    color: str
    shape: str
    x: float
    y: float
    size: float = OBJECT_SIZE


@dataclass
class Gripper:
    x: float
    y: float
    z: float
    yaw: float
    open: bool


@dataclass
class WorldState:
    gripper: Gripper
    objects: list
    attached: int | None = None
    target_zone: tuple | None = None   # (x, y, r)
    target_ids: tuple = ()             # instruction-matching object ids
    base_id: int | None = None         # stack destination
    expert_goal: int | None = None     # hidden per-episode choice


@dataclass(frozen=True)
class ViewParams:
    dx: float
    dy: float
    rot: float
    zoom: float


@dataclass
class TaskSpec:
    kind: str
    n_distractors: int = 0
    two_targets: bool = False
    target_color: str | None = None    # None: drawn per episode
    target_shape: str | None = None
    lift_height: float = LIFT_HEIGHT
    place_radius: float = ZONE_RADIUS

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    actions_executed: list
    task: TaskSpec
    view: ViewParams
    seed: int
    inferences: int = 0


TASKS = {
    "pick": TaskSpec(kind="pick"),
    "pick_place": TaskSpec(kind="pick_place"),
    "stack": TaskSpec(kind="stack"),
    "pick_distractors": TaskSpec(kind="pick_distractors", n_distractors=3),
    "pick_two_targets": TaskSpec(kind="pick", two_targets=True),
}


def task_names():
    return list(TASKS)


def make_task(name):
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; known: {task_names()}")
    return replace(TASKS[name])


def vocab_for_task(name):
    """Closed phrase list covering everything the task can ask for."""
    task = make_task(name)
    colors = list(COLOR_TABLE)
    shapes = list(SHAPES)
    if task.kind == "pick" or task.kind == "pick_distractors":
        return tuple(f"pick the {c} {s}" for c in colors for s in shapes)
    if task.kind == "pick_place":
        return tuple(f"put the {c} {s} in the zone"
                     for c in colors for s in shapes)
    return tuple(f"stack the {c} {s} on the {c2} {s2}"
                 for c in colors for s in shapes
                 for c2 in colors for s2 in shapes if c2 != c)


def instruction_for(task: TaskSpec, target: ObjectState,
                    base: ObjectState | None = None):
    if task.kind in ("pick", "pick_distractors"):
        return f"pick the {target.color} {target.shape}"
    if task.kind == "pick_place":
        return f"put the {target.color} {target.shape} in the zone"
    return (f"stack the {target.color} {target.shape} "
            f"on the {base.color} {base.shape}")


def make_view_pool(seed, n, pool):
    """Seeded pool of camera perturbations; ranges keep objects in frame."""
    rng = make_rng(seed, "views", pool)
    views = []
    for _ in range(n):
        views.append(ViewParams(
            dx=float(rng.uniform(-0.05, 0.05)),
            dy=float(rng.uniform(-0.05, 0.05)),
            rot=float(rng.uniform(-0.44, 0.44)),
            zoom=float(rng.uniform(0.65, 0.80)),
        ))
    return views


IDENTITY_VIEW = ViewParams(dx=0.0, dy=0.0, rot=0.0, zoom=0.74)


# ---- spawning ----


def _sample_position(rng):
    return (float(rng.uniform(SPAWN_LO, SPAWN_HI)),
            float(rng.uniform(SPAWN_LO, SPAWN_HI)))


def _far_enough(pos, others, gap=MIN_OBJECT_GAP):
    return all(math.hypot(pos[0] - o[0], pos[1] - o[1]) >= gap for o in others)


def reset(task: TaskSpec, view: ViewParams, rng):
    """Spawn the episode; returns (state, first observation, instruction)."""
    colors = list(COLOR_TABLE)
    shapes = list(SHAPES)
    t_color = task.target_color or colors[rng.integers(len(colors))]
    t_shape = task.target_shape or shapes[rng.integers(len(shapes))]

    objects = []
    placed = []

    def place(color, shape, pos=None):
        for _ in range(100):
            p = pos if pos is not None else _sample_position(rng)
            if _far_enough(p, placed):
                placed.append(p)
                objects.append(ObjectState(
                    id=len(objects), color=color, shape=shape,
                    x=p[0], y=p[1]))
                return objects[-1]
            pos = None
        raise SpawnError("no overlap-free position after 100 attempts")

    target_ids = []
    base_id = None
    zone = None
    expert_goal = None

    if task.two_targets:
        # Mirrored pair with small jitter; the expert's pick between them
        # is a hidden coin flip, so demonstrations are genuinely bimodal.
        off = 0.24 + float(rng.uniform(-0.02, 0.02))
        cy = 0.5 + float(rng.uniform(-0.02, 0.02))
        left = place(t_color, t_shape, (0.5 - off, cy))
        right = place(t_color, t_shape, (0.5 + off, cy))
        target_ids = [left.id, right.id]
        expert_goal = int(target_ids[rng.integers(2)])
    else:
        target = place(t_color, t_shape)
        target_ids = [target.id]

    if task.kind == "pick_distractors":
        pool = [(c, s) for c in colors for s in shapes if c != t_color]
        order = rng.permutation(len(pool))
        for i in range(task.n_distractors):
            c, s = pool[order[i % len(pool)]]
            place(c, s)

    if task.kind == "stack":
        b_choices = [(c, s) for c in colors for s in shapes if c != t_color]
        bc, bs = b_choices[rng.integers(len(b_choices))]
        base = place(bc, bs)
        base_id = base.id

    if task.kind == "pick_place":
        tx, ty = placed[0]
        for _ in range(100):
            zp = _sample_position(rng)
            if math.hypot(zp[0] - tx, zp[1] - ty) >= 0.3:
                zone = (zp[0], zp[1], task.place_radius)
                break
        else:
            raise SpawnError("no zone position after 100 attempts")

    gripper = Gripper(
        x=0.5 + float(rng.uniform(-0.04, 0.04)),
        y=0.5 + float(rng.uniform(-0.04, 0.04)),
        z=TRAVEL_Z, yaw=0.0, open=True,
    )
    state = WorldState(gripper=gripper, objects=objects,
                       target_zone=zone, target_ids=tuple(target_ids),
                       base_id=base_id, expert_goal=expert_goal)
    target = objects[target_ids[0]]
    base = objects[base_id] if base_id is not None else None
    instruction = instruction_for(task, target, base)
    return state, render(state, view), instruction


# ---- dynamics ----


def _success(state: WorldState, task: TaskSpec):
    if task.kind in ("pick",):
        return (state.attached in state.target_ids
                and state.gripper.z >= task.lift_height)
    if task.kind == "pick_distractors":
        return (state.attached == state.target_ids[0]
                and state.gripper.z >= task.lift_height)
    if task.kind == "pick_place":
        tx, ty, r = state.target_zone
        obj = state.objects[state.target_ids[0]]
        return (state.attached is None
                and math.hypot(obj.x - tx, obj.y - ty) <= r)
    if task.kind == "stack":
        obj = state.objects[state.target_ids[0]]
        base = state.objects[state.base_id]
        return (state.attached is None
                and math.hypot(obj.x - base.x, obj.y - base.y) <= STACK_TOL)
    raise ValueError(task.kind)


def step(state: WorldState, action, task: TaskSpec):
    """Apply one raw 7-vector action; returns (state', done, success)."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (7,) or not np.all(np.isfinite(a)):
        raise ValueError("action must be a finite 7-vector")
    g = state.gripper
    nx = float(np.clip(g.x + np.clip(a[0], -MAX_DELTA, MAX_DELTA), 0.0, 1.0))
    ny = float(np.clip(g.y + np.clip(a[1], -MAX_DELTA, MAX_DELTA), 0.0, 1.0))
    nz = float(np.clip(g.z + np.clip(a[2], -MAX_DELTA, MAX_DELTA), 0.0, Z_MAX))
    nyaw = float((g.yaw + np.clip(a[5], -MAX_DYAW, MAX_DYAW))
                 % (2.0 * math.pi))
    closing = a[6] > 0.5

    objects = [replace(o) for o in state.objects]
    attached = state.attached

    if closing and attached is None and nz <= GRASP_HEIGHT:
        best, best_d = None, GRASP_RADIUS
        for o in objects:
            d = math.hypot(o.x - nx, o.y - ny)
            if d <= best_d:
                best, best_d = o.id, d
        attached = best
    if not closing:
        attached = None

    if attached is not None:
        objects[attached].x = nx
        objects[attached].y = ny

    new_state = replace(
        state,
        gripper=Gripper(x=nx, y=ny, z=nz, yaw=nyaw, open=not closing),
        objects=objects,
        attached=attached,
    )
    success = _success(new_state, task)
    return new_state, success, success


# ---- scripted expert ----


def _expert_goal_object(state: WorldState, task: TaskSpec):
    if state.expert_goal is not None:
        return state.objects[state.expert_goal]
    if not state.target_ids:
        raise ExpertError("no target object in state")
    return state.objects[state.target_ids[0]]


def _toward(cur, dest):
    return float(np.clip(dest - cur, -MAX_DELTA, MAX_DELTA))


def scripted_expert(state: WorldState, task: TaskSpec):
    """Proportional controller: approach, descend, close, lift, transport,
    open. Deterministic given (state, task)."""
    g = state.gripper
    a = np.zeros(7)

    if state.attached is None:
        obj = _expert_goal_object(state, task)
        d_xy = math.hypot(obj.x - g.x, obj.y - g.y)
        if d_xy > POS_TOL:
            a[0] = _toward(g.x, obj.x)
            a[1] = _toward(g.y, obj.y)
            a[2] = _toward(g.z, TRAVEL_Z)
            a[6] = 0.0
        elif g.z > GRASP_Z + POS_TOL:
            a[0] = _toward(g.x, obj.x)
            a[1] = _toward(g.y, obj.y)
            a[2] = _toward(g.z, GRASP_Z)
            a[6] = 0.0
        else:
            a[6] = 1.0  # close; attach happens inside step()
        return a

    # Attached: lift, then transport if the task has a destination.
    a[6] = 1.0
    if task.kind in ("pick",):
        a[2] = _toward(g.z, task.lift_height + 0.02)
        return a
    if task.kind == "pick_distractors":
        if state.attached != state.target_ids[0]:
            a[6] = 0.0  # grabbed a distractor; drop it and retry
            return a
        a[2] = _toward(g.z, task.lift_height + 0.02)
        return a

    if task.kind == "pick_place":
        dest = state.target_zone[:2]
        tol = state.target_zone[2] * 0.5
    else:
        base = state.objects[state.base_id]
        dest = (base.x, base.y)
        tol = STACK_TOL * 0.5
    d_xy = math.hypot(dest[0] - g.x, dest[1] - g.y)
    if g.z < TRAVEL_Z - POS_TOL and d_xy > tol:
        a[2] = _toward(g.z, TRAVEL_Z)
        return a
    if d_xy > tol:
        a[0] = _toward(g.x, dest[0])
        a[1] = _toward(g.y, dest[1])
        return a
    a[6] = 0.0  # release over the destination
    return a


# ---- rendering ----


def _world_to_px(x, y, view: ViewParams, hw):
    c, s = math.cos(view.rot), math.sin(view.rot)
    vx = view.zoom * (c * (x - 0.5) - s * (y - 0.5)) + view.dx + 0.5
    vy = view.zoom * (s * (x - 0.5) + c * (y - 0.5)) + view.dy + 0.5
    return vx * (hw - 1), vy * (hw - 1)


def render(state: WorldState, view: ViewParams, hw=32):
    """Deterministic rasterization to an (hw, hw, 3) integer image."""
    img = np.empty((hw, hw, 3), dtype=np.int64)
    img[:, :] = BACKGROUND
    yy, xx = np.mgrid[0:hw, 0:hw]

    if state.target_zone is not None:
        zx, zy, zr = state.target_zone
        px, py = _world_to_px(zx, zy, view, hw)
        pr = zr * view.zoom * (hw - 1)
        ring = (xx - px) ** 2 + (yy - py) ** 2 <= pr**2
        img[ring] = ZONE_COLOR

    for o in state.objects:
        px, py = _world_to_px(o.x, o.y, view, hw)
        half = max(o.size * view.zoom * (hw - 1), 1.0)
        color = COLOR_TABLE[o.color]
        if o.shape == "cube":
            m = (np.abs(xx - px) <= half) & (np.abs(yy - py) <= half)
        elif o.shape == "bar":
            m = (np.abs(xx - px) <= 1.8 * half) & (np.abs(yy - py) <= 0.55 * half)
        else:  # disk
            m = (xx - px) ** 2 + (yy - py) ** 2 <= (1.15 * half) ** 2
        img[m] = color

    g = state.gripper
    px, py = _world_to_px(g.x, g.y, view, hw)
    arm = 1 + int(round(2.0 * g.z / Z_MAX))
    color = GRIPPER_OPEN if g.open else GRIPPER_CLOSED
    cross = ((np.abs(xx - px) <= 0.6) & (np.abs(yy - py) <= arm)) | (
        (np.abs(yy - py) <= 0.6) & (np.abs(xx - px) <= arm))
    img[cross] = color
    return img


# ---- closed-loop harness ----


def rollout(policy, task: TaskSpec, view: ViewParams, exec_steps, max_steps,
            rng, seed=0, hw=32):
    """Closed loop: infer a chunk, execute exec_steps of it, repeat.

    `policy` provides n_obs, chunk_len, and predict_actions(instruction,
    obs_history, rng) -> (K, 7) raw actions. A policy with
    wants_state=True (the scripted oracle) is fed the privileged world
    state instead of pixels.
    """
    wants_state = getattr(policy, "wants_state", False)
    chunk_len = getattr(policy, "chunk_len", 1)
    if not 1 <= exec_steps <= chunk_len:
        raise ValueError(f"need 1 <= exec_steps <= {chunk_len}")
    state, obs, instruction = reset(task, view, rng)
    n_obs = getattr(policy, "n_obs", 1)
    history = [obs] * n_obs
    actions = []
    steps = 0
    inferences = 0
    success = False
    while steps < max_steps and not success:
        if wants_state:
            chunk = policy.predict_from_state(state, task)
        else:
            chunk = policy.predict_actions(instruction, list(history), rng)
        inferences += 1
        for k in range(min(exec_steps, len(chunk))):
            state, done, success = step(state, chunk[k], task)
            actions.append(np.asarray(chunk[k], dtype=np.float64))
            steps += 1
            obs = render(state, view, hw=hw)
            history.append(obs)
            history.pop(0)
            if success or steps >= max_steps:
                break
    return EpisodeResult(success=bool(success), steps=steps,
                         actions_executed=actions, task=task, view=view,
                         seed=seed, inferences=inferences)


class ExpertPolicy:
    """Privileged scripted expert wrapped in the policy protocol."""

    wants_state = True
    n_obs = 1
    chunk_len = 1

    def predict_from_state(self, state, task):
        return scripted_expert(state, task)[None, :]


def generate_demos(task_name, n_episodes, views, seed, hw=32,
                   max_steps=MAX_STEPS_DEFAULT, action_noise=0.006):
    """Expert demonstrations as TrajectoryRecords, one per episode.

    `action_noise` perturbs the executed translation deltas (the expert
    replans each step, so episodes still succeed). The jitter widens
    state coverage and keeps the recorded action distribution
    continuous; without it the bang-bang controller's actions collapse
    onto a few grid values and imitation loses its gradient signal.
    """
    from .data import TrajectoryRecord

    task = make_task(task_name)
    trajs = []
    for i in range(n_episodes):
        rng = make_rng(seed, "demo", task_name, i)
        view = views[i % len(views)]
        state, obs, instruction = reset(task, view, rng)
        observations = [obs]
        actions = []
        success = False
        for _ in range(max_steps):
            a = scripted_expert(state, task)
            if action_noise:
                a = a.copy()
                a[:3] += rng.normal(0.0, action_noise, size=3)
                a[:3] = np.clip(a[:3], -MAX_DELTA, MAX_DELTA)
            state, done, success = step(state, a, task)
            actions.append(a)
            observations.append(render(state, view, hw=hw))
            if success:
                break
        if not success:
            raise ExpertError(
                f"expert failed episode {i} of {task_name}; "
                "the task parameters are infeasible")
        trajs.append(TrajectoryRecord(
            instruction=instruction,
            observations=observations,
            actions=np.array(actions),
            dataset_tag=task_name,
        ))
    return trajs


def evaluate(policy, task_suite, n_episodes, view_pools, exec_steps, seed,
             max_steps=MAX_STEPS_DEFAULT, hw=32):
    """Success rates per (task, view pool); returns a list of row dicts."""
    rows = []
    for task_name in task_suite:
        task = make_task(task_name)
        for pool_name, views in view_pools.items():
            successes = 0
            for i in range(n_episodes):
                ep_rng = make_rng(seed, "eval", task_name, pool_name, i)
                view = views[i % len(views)]
                result = rollout(policy, task, view, exec_steps, max_steps,
                                 ep_rng, seed=i, hw=hw)
                successes += int(result.success)
            rows.append({
                "task": task_name,
                "view_pool": pool_name,
                "exec_steps": exec_steps,
                "episodes": n_episodes,
                "successes": successes,
                "rate": successes / n_episodes,
                "seed_base": seed,
            })
    return rows
