"""Deterministic kinematic tabletop world.

Pure kinematics, no contact dynamics: boxes sit where placed, the gripper is a
point that moves by commanded deltas, and a closed gripper within the grasp
radius rigidly carries the nearest object. Depth frames come from an analytic
ray/box intersection per pixel, so every rendered value is exactly checkable
against the camera model. Everything is seeded and single-threaded per world,
which makes episodes byte-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (CameraIntrinsics, CameraPose, DepthMap,
                       axis_angle_from_rotation, look_at_pose,
                       rotation_from_axis_angle)
from .types import ProprioState, SimFrame, SpatioTemporalAction


class SimError(RuntimeError):
    pass


SUITES = ("spatial", "object", "goal", "long")
VARIANTS_PER_SUITE = 10

# instruction grammar; every instruction is built from these templates
TEMPLATES = {
    "spatial": "move the {side} cube onto the pad",
    "object": "move the {size} cube onto the pad",
    "goal": "place the cube onto the {side} pad",
    "long": "move small onto {first} pad then large onto {second} pad",
}


def template_words() -> list[str]:
    words = set()
    for suite in SUITES:
        for variant in range(VARIANTS_PER_SUITE):
            words.update(instruction_for(suite, variant).split())
    return sorted(words)


def instruction_for(suite: str, variant: int) -> str:
    side = ("left", "right")[variant % 2]
    if suite == "spatial":
        return TEMPLATES["spatial"].format(side=side)
    if suite == "object":
        return TEMPLATES["object"].format(size=("small", "large")[variant % 2])
    if suite == "goal":
        return TEMPLATES["goal"].format(side=side)
    if suite == "long":
        first, second = (("left", "right"), ("right", "left"))[variant % 2]
        return TEMPLATES["long"].format(first=first, second=second)
    raise SimError(f"unknown suite {suite!r}")


@dataclass(frozen=True)
class TaskSpec:
    suite: str  # spatial | object | goal | long
    variant: int
    instruction: str
    scene_seed: int

    @property
    def template_id(self) -> str:
        return f"{self.suite}/{self.variant}"


def make_task(suite: str, variant: int, scene_seed: int) -> TaskSpec:
    return TaskSpec(suite, variant, instruction_for(suite, variant), int(scene_seed))


def all_subtasks(n: int = 40) -> list[tuple[str, int]]:
    subtasks = [(suite, v) for suite in SUITES for v in range(VARIANTS_PER_SUITE)]
    return subtasks[:n]


def scene_seed_for(master_seed: int, subtask_index: int, episode_index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(subtask_index), int(episode_index)])
    return int(ss.generate_state(1)[0])


@dataclass
class SimConfig:
    hz: float = 20.0
    render_size: int = 16
    patch_grid: int = 4
    workspace_half: float = 0.28  # x/y half extent, meters
    z_min: float = 0.02
    z_max: float = 0.42
    grasp_radius: float = 0.03
    goal_radius: float = 0.07
    hover_z: float = 0.16
    v_max: float = 0.35  # expert cruise speed, m/s
    accel: float = 1.75  # expert accel, m/s^2
    dt_min: float = 0.05
    # expert hover waypoints are perturbed by up to this much in x/y and the
    # descend segment corrects diagonally; demonstrations thereby contain the
    # close-range corrections a cloned policy needs off the nominal path
    approach_jitter: float = 0.08
    # the fixed third-person camera is zoomed onto the workspace; the wrist
    # camera trades angular resolution for a wide close-range field of view
    fx_third: float = 24.0
    fx_wrist: float = 10.0
    third_cam_pos: tuple = (0.0, -0.50, 0.62)
    third_cam_target: tuple = (0.0, 0.02, 0.0)
    wrist_cam_lift: float = 0.10

    def intrinsics_for(self, view: str) -> CameraIntrinsics:
        c = (self.render_size - 1) / 2.0
        fx = self.fx_third if view == "third" else self.fx_wrist
        return CameraIntrinsics(fx, fx, c, c)


@dataclass
class Box:
    box_id: str
    half_extents: np.ndarray  # (3,)
    position: np.ndarray  # (3,) center, world frame
    graspable: bool = True

    def copy(self) -> "Box":
        return Box(self.box_id, self.half_extents.copy(), self.position.copy(),
                   self.graspable)


@dataclass
class Target:
    object_id: str
    center: np.ndarray  # (3,) goal region center
    radius: float


@dataclass
class World:
    objects: list  # graspable Boxes
    scenery: list  # table, goal pads (rendered, never grasped)
    targets: list  # Target records
    gripper_pos: np.ndarray
    gripper_rot: np.ndarray  # 3x3
    grip_closed: bool
    held: str | None
    held_offset: np.ndarray  # gripper-frame offset of the held object center
    clock: float
    config: SimConfig
    seed: int

    def copy(self) -> "World":
        return World(
            objects=[b.copy() for b in self.objects],
            scenery=[b.copy() for b in self.scenery],
            targets=[Target(t.object_id, t.center.copy(), t.radius) for t in self.targets],
            gripper_pos=self.gripper_pos.copy(),
            gripper_rot=self.gripper_rot.copy(),
            grip_closed=self.grip_closed,
            held=self.held,
            held_offset=self.held_offset.copy(),
            clock=self.clock,
            config=self.config,
            seed=self.seed,
        )

    def find_object(self, box_id: str) -> Box:
        for b in self.objects:
            if b.box_id == box_id:
                return b
        raise SimError(f"no object {box_id!r}")

    def proprio(self) -> ProprioState:
        return ProprioState(self.gripper_pos.copy(),
                            axis_angle_from_rotation(self.gripper_rot),
                            1.0 if self.grip_closed else 0.0)

    def all_boxes(self) -> list:
        return self.scenery + self.objects


# ---------------------------------------------------------------------------
# rendering


def _camera_pose(world: World, view: str) -> CameraPose:
    cfg = world.config
    if view == "third":
        return look_at_pose(np.array(cfg.third_cam_pos), np.array(cfg.third_cam_target))
    if view == "wrist":
        # rigidly attached above the gripper, looking along gripper -z
        r_down = np.diag([1.0, -1.0, -1.0])
        r = r_down @ world.gripper_rot.T
        center = world.gripper_pos + world.gripper_rot @ np.array([0.0, 0.0, cfg.wrist_cam_lift])
        return CameraPose(r, -r @ center)
    raise SimError(f"unknown view {view!r}")


def render_depth(boxes: list, k: CameraIntrinsics, pose: CameraPose, size: int) -> DepthMap:
    """Analytic ray/axis-aligned-box z-depth render; background is sentinel 0."""
    u = np.arange(size, dtype=np.float64)
    uu, vv = np.meshgrid(u, u)  # uu: column index, vv: row index
    dirs_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ pose.rotation  # row-vector transform by R^T
    # avoid 0/0 in the slab test; sign-preserving clamp changes nothing visible
    dirs = np.where(np.abs(dirs) < 1e-12, np.where(dirs < 0, -1e-12, 1e-12), dirs)
    origin = pose.camera_center()

    best = np.full((size, size), np.inf)
    for box in boxes:
        lo = (box.position - box.half_extents - origin) / dirs
        hi = (box.position + box.half_extents - origin) / dirs
        near = np.minimum(lo, hi).max(axis=-1)
        far = np.maximum(lo, hi).min(axis=-1)
        hit = (far >= near) & (near > 1e-9)
        best = np.where(hit & (near < best), near, best)
    depth = np.where(np.isfinite(best), best, 0.0)
    return DepthMap(depth)


def render_frame(world: World, view: str) -> SimFrame:
    cfg = world.config
    pose = _camera_pose(world, view)
    k = cfg.intrinsics_for(view)
    depth = render_depth(world.all_boxes(), k, pose, cfg.render_size)
    return SimFrame(timestamp=world.clock, view=view, depth=depth,
                    intrinsics=k, pose=pose, proprio=world.proprio())


def render_frame_pair(world: World) -> tuple[SimFrame, SimFrame]:
    return render_frame(world, "third"), render_frame(world, "wrist")


# ---------------------------------------------------------------------------
# stepping


def step(world: World, a: SpatioTemporalAction) -> World:
    """Advance the world by one spatiotemporal action.

    Motion is collision-free kinematics clamped to the workspace; the grip
    threshold is applied after the motion. An attached object follows the
    gripper rigidly (constant offset in the gripper frame).
    """
    cfg = world.config
    w = world.copy()
    w.clock += a.delta_t
    w.gripper_pos = np.clip(
        w.gripper_pos + a.delta_x,
        [-cfg.workspace_half, -cfg.workspace_half, cfg.z_min],
        [cfg.workspace_half, cfg.workspace_half, cfg.z_max],
    )
    w.gripper_rot = rotation_from_axis_angle(a.delta_theta) @ w.gripper_rot
    if w.held is not None:
        w.find_object(w.held).position = w.gripper_pos + w.gripper_rot @ w.held_offset

    close = a.grip >= 0.5
    if close:
        w.grip_closed = True
        if w.held is None:
            best_id, best_d = None, cfg.grasp_radius
            for b in w.objects:
                d = float(np.linalg.norm(b.position - w.gripper_pos))
                if d <= best_d:
                    best_id, best_d = b.box_id, d
            if best_id is not None:
                w.held = best_id
                w.held_offset = w.gripper_rot.T @ (w.find_object(best_id).position
                                                   - w.gripper_pos)
    else:
        w.grip_closed = False
        w.held = None
    return w


def success(world: World) -> bool:
    """All targets placed, gripper open, holding nothing."""
    if world.grip_closed or world.held is not None:
        return False
    for t in world.targets:
        obj = world.find_object(t.object_id)
        if float(np.linalg.norm(obj.position - t.center)) > t.radius:
            return False
    return True


# ---------------------------------------------------------------------------
# scene construction


def _sample_positions(rng, count, cfg, min_sep=0.15, inset=0.20):
    for _ in range(200):
        pts = rng.uniform(-inset, inset, size=(count, 2))
        ok = True
        for i in range(count):
            for j in range(i + 1, count):
                if np.linalg.norm(pts[i] - pts[j]) < min_sep:
                    ok = False
        if ok:
            return pts
    return None


def _make_pad(pad_id, xy):
    half = np.array([0.06, 0.06, 0.015])
    return Box(pad_id, half, np.array([xy[0], xy[1], 0.015]), graspable=False)


def _make_cube(cube_id, xy, half_side):
    half = np.full(3, half_side)
    return Box(cube_id, half, np.array([xy[0], xy[1], half_side]), graspable=True)


def _goal_center(pad: Box, obj: Box) -> np.ndarray:
    # where a perfectly placed object center rests on this pad
    top = pad.position[2] + pad.half_extents[2]
    return np.array([pad.position[0], pad.position[1], top + obj.half_extents[2]])


def _attempt_scene(task: TaskSpec, cfg: SimConfig, attempt: int):
    rng = np.random.default_rng([task.scene_seed, attempt])
    table = Box("table", np.array([2.5, 2.5, 0.025]), np.array([0.0, 0.0, -0.025]),
                graspable=False)
    v = task.variant
    objects, scenery, targets = [], [table], []

    if task.suite in ("spatial", "object"):
        pts = _sample_positions(rng, 3, cfg)
        if pts is None:
            return None
        if task.suite == "spatial":
            # two same-size cubes; the instruction names a side, so force a gap in x
            xs = sorted([pts[0][0], pts[1][0]])
            if xs[1] - xs[0] < 0.10:
                return None
            a = _make_cube("cube_a", pts[0], 0.05)
            b = _make_cube("cube_b", pts[1], 0.05)
            objects = [a, b]
            want_left = v % 2 == 0
            target_obj = a if (a.position[0] < b.position[0]) == want_left else b
        else:
            small = _make_cube("cube_small", pts[0], 0.03)
            large = _make_cube("cube_large", pts[1], 0.055)
            objects = [small, large]
            target_obj = small if v % 2 == 0 else large
        pad = _make_pad("pad", pts[2])
        scenery.append(pad)
        targets = [Target(target_obj.box_id, _goal_center(pad, target_obj), cfg.goal_radius)]

    elif task.suite == "goal":
        pts = _sample_positions(rng, 3, cfg)
        if pts is None:
            return None
        xs = sorted([pts[1][0], pts[0][0]])
        if xs[1] - xs[0] < 0.10:
            return None
        cube = _make_cube("cube", pts[2], 0.05)
        objects = [cube]
        pad_l = _make_pad("pad_left", pts[0] if pts[0][0] < pts[1][0] else pts[1])
        pad_r = _make_pad("pad_right", pts[1] if pts[0][0] < pts[1][0] else pts[0])
        scenery += [pad_l, pad_r]
        pad = pad_l if v % 2 == 0 else pad_r
        targets = [Target("cube", _goal_center(pad, cube), cfg.goal_radius)]

    elif task.suite == "long":
        pts = _sample_positions(rng, 4, cfg)
        if pts is None:
            return None
        if abs(pts[2][0] - pts[3][0]) < 0.10:
            return None
        small = _make_cube("cube_small", pts[0], 0.03)
        large = _make_cube("cube_large", pts[1], 0.055)
        objects = [small, large]
        pad_l = _make_pad("pad_left", pts[2] if pts[2][0] < pts[3][0] else pts[3])
        pad_r = _make_pad("pad_right", pts[3] if pts[2][0] < pts[3][0] else pts[2])
        scenery += [pad_l, pad_r]
        first_left = v % 2 == 0
        targets = [
            Target("cube_small", _goal_center(pad_l if first_left else pad_r, small),
                   cfg.goal_radius),
            Target("cube_large", _goal_center(pad_r if first_left else pad_l, large),
                   cfg.goal_radius),
        ]
    else:
        raise SimError(f"unknown suite {task.suite!r}")

    for b in objects:
        if np.abs(b.position[:2]).max() > cfg.workspace_half:
            return None
    start = np.array([rng.uniform(-0.05, 0.05), rng.uniform(-0.09, 0.01),
                      rng.uniform(0.18, 0.23)])
    return World(objects=objects, scenery=scenery, targets=targets,
                 gripper_pos=start, gripper_rot=np.eye(3), grip_closed=False,
                 held=None, held_offset=np.zeros(3), clock=0.0, config=cfg,
                 seed=task.scene_seed)


def build_scene(task: TaskSpec, cfg: SimConfig | None = None) -> World:
    cfg = cfg or SimConfig()
    for attempt in range(100):
        world = _attempt_scene(task, cfg, attempt)
        if world is not None:
            return world
    raise SimError(f"infeasible scene for {task.template_id} seed {task.scene_seed}")


# ---------------------------------------------------------------------------
# expert demonstrations


def _trapezoid_offsets(length: float, hz: float, v_max: float, accel: float) -> np.ndarray:
    """Distances covered at each sample tick of a trapezoidal speed profile.

    Returns cumulative distances s(t_1..t_n) with s(t_n) == length exactly.
    """
    if length <= 0:
        return np.zeros(0)
    t_ramp = v_max / accel
    d_ramp = 0.5 * accel * t_ramp**2
    if 2 * d_ramp >= length:  # triangular profile
        t_ramp = math.sqrt(length / accel)
        total = 2 * t_ramp
        v_peak = accel * t_ramp
        cruise_t = 0.0
    else:
        cruise_t = (length - 2 * d_ramp) / v_max
        total = 2 * t_ramp + cruise_t
        v_peak = v_max
    n = max(1, math.ceil(total * hz - 1e-9))
    ts = np.arange(1, n + 1) / hz
    s = np.empty(n)
    for i, t in enumerate(ts):
        if t >= total:
            s[i] = length
        elif t < t_ramp:
            s[i] = 0.5 * accel * t * t
        elif t < t_ramp + cruise_t:
            s[i] = 0.5 * accel * t_ramp**2 + v_peak * (t - t_ramp)
        else:
            td = total - t
            s[i] = length - 0.5 * accel * td * td
    s[-1] = length
    return s


@dataclass
class _Segment:
    end: np.ndarray  # gripper target position
    grip: float  # grip signal held during the segment
    yaw_delta: float = 0.0  # world-z rotation spread across the segment
    pause_steps: int = 0  # zero-motion steps instead of a move (grip events)


def _expert_segments(world: World, cfg: SimConfig,
                     rng: np.random.Generator) -> list[_Segment]:
    segs = []
    for t in world.targets:
        obj = world.find_object(t.object_id)
        j_obj = rng.uniform(-cfg.approach_jitter, cfg.approach_jitter, size=2)
        j_goal = rng.uniform(-cfg.approach_jitter, cfg.approach_jitter, size=2)
        above_obj = np.array([obj.position[0] + j_obj[0],
                              obj.position[1] + j_obj[1], cfg.hover_z])
        grasp = obj.position.copy()
        lift = np.array([obj.position[0], obj.position[1], cfg.hover_z])
        above_goal = np.array([t.center[0] + j_goal[0],
                               t.center[1] + j_goal[1], cfg.hover_z])
        place = t.center.copy()
        move = above_goal[:2] - lift[:2]
        yaw = float(np.clip(math.atan2(move[1], move[0]), -1.0, 1.0)) * 0.5
        segs += [
            _Segment(above_obj, 0.0),
            _Segment(grasp, 0.0),  # diagonal descend corrects the hover jitter
            _Segment(grasp, 1.0, pause_steps=1),  # close
            _Segment(lift, 1.0),
            _Segment(above_goal, 1.0, yaw_delta=yaw),
            _Segment(place, 1.0),
            _Segment(place, 0.0, pause_steps=1),  # open
        ]
    return segs


def synthesize_expert(world: World, cfg: SimConfig, hz: float) -> list[SpatioTemporalAction]:
    """Per-step spatial actions tracing straight segments with trapezoidal speed."""
    actions = []
    rng = np.random.default_rng([world.seed & 0x7FFFFFFF, 0xE1])
    pos = world.gripper_pos.copy()
    for seg in _expert_segments(world, cfg, rng):
        if seg.pause_steps:
            for _ in range(seg.pause_steps):
                actions.append(SpatioTemporalAction(np.zeros(3), np.zeros(3), seg.grip,
                                                    1.0 / hz))
            continue
        delta = seg.end - pos
        length = float(np.linalg.norm(delta))
        if length < 1e-12:
            continue
        direction = delta / length
        offsets = _trapezoid_offsets(length, hz, cfg.v_max, cfg.accel)
        n = len(offsets)
        prev = 0.0
        for i, s_now in enumerate(offsets):
            dx = direction * (s_now - prev)
            dyaw = seg.yaw_delta / n if seg.yaw_delta else 0.0
            actions.append(SpatioTemporalAction(dx, np.array([0.0, 0.0, dyaw]),
                                                seg.grip, 1.0 / hz))
            prev = s_now
        pos = seg.end.copy()
    return actions


@dataclass
class Episode:
    spec: TaskSpec
    hz: float
    frames: list  # list of (third SimFrame, wrist SimFrame), one per step
    actions: list  # list of SpatioTemporalAction (delta_t = 1/hz)
    final_world: World

    def duration(self) -> float:
        """Recorded clock at the end; equals the sequential sum of step delta_t."""
        return self.final_world.clock


def generate_episode(task: TaskSpec, hz: float = 20.0,
                     cfg: SimConfig | None = None) -> Episode:
    """Build the scene, synthesize the expert, and record frames plus actions.

    Deterministic per (task, hz). The recorded episode replays exactly: pushing
    the recorded actions through step() reproduces the recorded poses and ends
    in success.
    """
    if hz <= 0:
        raise SimError("hz must be positive")
    cfg = cfg or SimConfig()
    if abs(cfg.hz - hz) > 1e-12:
        cfg = replace(cfg, hz=hz)
    world = build_scene(task, cfg)
    if success(world):
        frame = render_frame_pair(world)
        null = SpatioTemporalAction.null(1.0 / hz)
        return Episode(task, hz, [frame], [null], step(world, null))

    actions = synthesize_expert(world, cfg, hz)
    frames = []
    w = world
    for a in actions:
        frames.append(render_frame_pair(w))
        w = step(w, a)
    if not success(w):
        raise SimError(f"expert failed on {task.template_id} seed {task.scene_seed}")
    return Episode(task, hz, frames, actions, w)


# ---------------------------------------------------------------------------
# closed-loop evaluation


@dataclass
class TraceRow:
    t: float
    pos: np.ndarray
    rot_aa: np.ndarray
    grip: float
    event: str


@dataclass
class RolloutResult:
    task: TaskSpec
    success: bool
    completion_time: float
    steps: int
    trace: list
    failure_reason: str = ""


def evaluate_rollout(task: TaskSpec, policy, cfg: SimConfig | None = None,
                     budget: float = 20.0, history_frames: int = 2) -> RolloutResult:
    """Closed loop: render, maintain frame history, act, step, until success.

    `policy` is any callable (history, instruction) -> SpatioTemporalAction,
    where history is a list of (third, wrist) SimFrame pairs, oldest first.
    Policy failures (numeric blowup, bad outputs) are recorded as rollout
    failures, not raised.
    """
    if budget <= 0:
        raise SimError("budget must be positive")
    cfg = cfg or SimConfig()
    world = build_scene(task, cfg)
    trace = [TraceRow(world.clock, world.gripper_pos.copy(),
                      axis_angle_from_rotation(world.gripper_rot),
                      1.0 if world.grip_closed else 0.0, "start")]
    if success(world):
        return RolloutResult(task, True, 0.0, 0, trace)

    history: list = []
    max_steps = int(budget / cfg.dt_min) + 2
    for n in range(1, max_steps + 1):
        history.append(render_frame_pair(world))
        history = history[-history_frames:]
        try:
            action = policy(list(history), task.instruction)
        except Exception as exc:  # recorded, not raised: failures are data
            return RolloutResult(task, False, world.clock, n - 1, trace,
                                 failure_reason=f"policy error: {exc}")
        held_before = world.held
        world = step(world, action)
        event = ""
        if world.held is not None and held_before is None:
            event = "attach"
        elif world.held is None and held_before is not None:
            event = "release"
        done = success(world)
        if done:
            event = "success"
        elif world.clock >= budget:
            event = event or "timeout"
        trace.append(TraceRow(world.clock, world.gripper_pos.copy(),
                              axis_angle_from_rotation(world.gripper_rot),
                              action.grip, event))
        if done:
            return RolloutResult(task, True, world.clock, n, trace)
        if world.clock >= budget:
            break
    return RolloutResult(task, False, world.clock, len(trace) - 1, trace,
                         failure_reason="budget exhausted")


class ExpertReplayPolicy:
    """Replays a recorded episode's actions verbatim, ignoring observations."""

    def __init__(self, episode: Episode):
        self.actions = list(episode.actions)
        self.cursor = 0

    def __call__(self, history, instruction) -> SpatioTemporalAction:
        if self.cursor >= len(self.actions):
            return SpatioTemporalAction.null(self.actions[-1].delta_t if self.actions else 0.05)
        a = self.actions[self.cursor]
        self.cursor += 1
        return a


class NullPolicy:
    """Does nothing; establishes the floor for success-rate comparisons."""

    def __init__(self, delta_t: float = 0.25):
        self.delta_t = delta_t

    def __call__(self, history, instruction) -> SpatioTemporalAction:
        return SpatioTemporalAction.null(self.delta_t)


def target_quadrant(world: World) -> int:
    """Scene attribute for the alignment proxy task: quadrant (by x/y sign)
    of the first target object's starting center."""
    obj = world.find_object(world.targets[0].object_id)
    return int(obj.position[0] >= 0) + 2 * int(obj.position[1] >= 0)
