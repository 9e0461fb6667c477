"""Kinematic bimanual world: gripper motion with per-step caps, grasp/release
attachment rules, bimanual hold-break and collision flags, scripted experts
for the three coordination types, and trace-level success evaluation.

There is no dynamics here on purpose: objects move only while rigidly
attached to a gripper, which is enough to exercise coordination and ordering
effects. Environments are immutable values, so rollouts for different seeds
can run concurrently without shared state.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose, Quaternion, compose, inverse, slerp
from .signals import (
    Box,
    Cylinder,
    DemoStep,
    Demonstration,
    action_vector,
    split_action,
)

__all__ = [
    "WorldParams",
    "ObjectModel",
    "TaskSpec",
    "WorldState",
    "RolloutResult",
    "World",
    "make_task",
    "scripted_expert",
    "evaluate_success",
    "TASK_IDS",
]

GRIP_OPEN = 1.0
GRIP_CLOSED = 0.0
_SPEED_POS_SCALE = 20.0
_SPEED_ROT_SCALE = 2.0


@dataclass(frozen=True)
class WorldParams:
    max_step_translation: float = 0.05
    max_step_rotation: float = 0.2
    grasp_radius: float = 0.03
    collision_radius: float = 0.04
    hold_break_pos: float = 1e-2
    hold_break_rot: float = 0.1
    workspace_low: tuple = (-0.6, -0.45, 0.0)
    workspace_high: tuple = (0.6, 0.45, 0.6)


@dataclass(frozen=True)
class ObjectModel:
    name: str
    shape: object
    grasp_features: tuple  # local-frame 3-vectors


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    coordination: str  # symmetric | synchronous | asynchronous
    objects: tuple  # ObjectModel per object
    initial_centers: tuple  # nominal world position per object
    initial_yaws: tuple  # nominal yaw per object
    target_positions: tuple  # goal position per object (unused entries None)
    position_jitter: float = 0.05
    yaw_jitter: float = math.radians(15.0)
    place_tolerance: float = 0.04
    lift_height: float = 0.15
    require_bimanual_transport: bool = False
    require_tilt_before_grasp: bool = False
    tilt_min_angle: float = math.radians(15.0)
    flow_object: int = 0
    episode_cap: int = 240
    params: WorldParams = WorldParams()

    def __post_init__(self):
        lo = np.asarray(self.params.workspace_low)
        hi = np.asarray(self.params.workspace_high)
        for center in self.initial_centers:
            c = np.asarray(center)
            if ((c[:2] - self.position_jitter < lo[:2]).any()
                    or (c[:2] + self.position_jitter > hi[:2]).any()):
                raise ValueError("initial pose distribution leaves the workspace box")


@dataclass(frozen=True)
class Attachment:
    arm: str  # "left" | "right"
    offset: Pose  # gripper frame -> object frame, fixed at grasp time


@dataclass(frozen=True)
class WorldState:
    left: Pose
    left_open: float
    right: Pose
    right_open: float
    object_poses: tuple
    attachments: tuple  # per object: tuple of Attachment (0, 1, or 2 entries)
    step_count: int = 0
    collision_event: bool = False  # events raised by the transition into this state
    drop_event: bool = False

    def arm_pose(self, arm: str) -> Pose:
        return self.left if arm == "left" else self.right

    def attached_arms(self, obj_index: int) -> tuple:
        return tuple(a.arm for a in self.attachments[obj_index])


@dataclass(frozen=True)
class RolloutResult:
    success: bool
    failure_reason: str | None  # drop | collision | timeout | constraint-violation
    trace: tuple

    def __post_init__(self):
        if self.success == (self.failure_reason is not None):
            raise ValueError("exactly one of success / failure reason must be set")


def _clamp_motion(current: Pose, target: Pose, params: WorldParams) -> Pose:
    delta = target.position - current.position
    dist = float(np.linalg.norm(delta))
    if dist > params.max_step_translation:
        delta = delta * (params.max_step_translation / dist)
    pos = np.clip(
        current.position + delta,
        np.asarray(params.workspace_low),
        np.asarray(params.workspace_high),
    )
    angle = current.orientation.angle_to(target.orientation)
    if angle > params.max_step_rotation:
        q = slerp(current.orientation, target.orientation,
                  params.max_step_rotation / angle)
    else:
        q = target.orientation
    return Pose(pos, q)


@dataclass(frozen=True)
class World:
    """Deterministic kinematic environment for one task."""

    task: TaskSpec

    def initial_state(self, seed: int) -> WorldState:
        rng = np.random.default_rng(seed)
        poses = []
        for center, yaw in zip(self.task.initial_centers, self.task.initial_yaws):
            jitter = rng.uniform(-self.task.position_jitter,
                                 self.task.position_jitter, size=2)
            dyaw = rng.uniform(-self.task.yaw_jitter, self.task.yaw_jitter)
            pos = np.array([center[0] + jitter[0], center[1] + jitter[1], center[2]])
            poses.append(Pose(pos, Quaternion.from_axis_angle([0, 0, 1], yaw + dyaw)))
        return WorldState(
            left=Pose(np.array([-0.25, -0.05, 0.28])),
            left_open=GRIP_OPEN,
            right=Pose(np.array([0.25, -0.05, 0.28])),
            right_open=GRIP_OPEN,
            object_poses=tuple(poses),
            attachments=tuple(() for _ in poses),
        )

    def grasp_feature_points(self, state: WorldState, obj_index: int) -> np.ndarray:
        """World-frame grasp feature points of one object."""
        obj = self.task.objects[obj_index]
        pose = state.object_poses[obj_index]
        rot = pose.orientation.as_matrix()
        return np.array([rot @ f + pose.position for f in obj.grasp_features])

    def step(self, state: WorldState, action) -> WorldState:
        """Advance one timestep under a 16-dim bimanual action.

        Grippers move toward the commanded poses subject to per-step motion
        caps; closing within the grasp radius of a feature attaches, opening
        detaches; attached objects follow rigidly; a bimanual hold breaks
        (drop) when the two implied object poses diverge. Violations are
        recorded on the state, never raised.
        """
        params = self.task.params
        left_t, l_open, right_t, r_open = split_action(np.asarray(action))
        new_left = _clamp_motion(state.left, left_t, params)
        new_right = _clamp_motion(state.right, right_t, params)
        l_open = float(np.clip(l_open, 0.0, 1.0))
        r_open = float(np.clip(r_open, 0.0, 1.0))

        closing = {
            "left": state.left_open >= 0.5 > l_open,
            "right": state.right_open >= 0.5 > r_open,
        }
        opening = {
            "left": state.left_open < 0.5 <= l_open,
            "right": state.right_open < 0.5 <= r_open,
        }
        new_arm_pose = {"left": new_left, "right": new_right}

        drop_event = False
        obj_poses = list(state.object_poses)
        attachments = [list(a) for a in state.attachments]

        # Attached objects follow the arms that moved.
        for i, atts in enumerate(attachments):
            if len(atts) == 1:
                obj_poses[i] = compose(new_arm_pose[atts[0].arm], atts[0].offset)
            elif len(atts) == 2:
                implied = {
                    a.arm: compose(new_arm_pose[a.arm], a.offset) for a in atts
                }
                d_pos = float(
                    np.linalg.norm(implied["left"].position - implied["right"].position)
                )
                d_rot = implied["left"].orientation.angle_to(
                    implied["right"].orientation
                )
                if d_pos > params.hold_break_pos or d_rot > params.hold_break_rot:
                    drop_event = True
                    attachments[i] = []
                else:
                    obj_poses[i] = implied["left"]

        for arm in ("left", "right"):
            if opening[arm]:
                for atts in attachments:
                    atts[:] = [a for a in atts if a.arm != arm]

        for arm in ("left", "right"):
            if not closing[arm]:
                continue
            grip_pos = new_arm_pose[arm].position
            best = None
            for i in range(len(obj_poses)):
                if any(a.arm == arm for a in attachments[i]):
                    continue
                interim = replace(state, object_poses=tuple(obj_poses))
                for feature in self.grasp_feature_points(interim, i):
                    d = float(np.linalg.norm(feature - grip_pos))
                    if d <= params.grasp_radius and (best is None or d < best[0]):
                        best = (d, i)
            if best is not None:
                i = best[1]
                offset = compose(inverse(new_arm_pose[arm]), obj_poses[i])
                attachments[i].append(Attachment(arm=arm, offset=offset))

        collision_event = (
            float(np.linalg.norm(new_left.position - new_right.position))
            < params.collision_radius
        )

        return WorldState(
            left=new_left,
            left_open=l_open,
            right=new_right,
            right_open=r_open,
            object_poses=tuple(obj_poses),
            attachments=tuple(tuple(a) for a in attachments),
            step_count=state.step_count + 1,
            collision_event=collision_event,
            drop_event=drop_event,
        )


# -- tasks -----------------------------------------------------------------

TASK_IDS = ("dual_place", "lift_tray", "tilt_plate")


def make_task(task_id: str) -> TaskSpec:
    if task_id == "dual_place":
        cube = Box((0.04, 0.04, 0.04))
        return TaskSpec(
            task_id=task_id,
            coordination="symmetric",
            objects=(
                ObjectModel("cube_left", cube, (np.zeros(3),)),
                ObjectModel("cube_right", cube, (np.zeros(3),)),
            ),
            initial_centers=(
                np.array([-0.22, 0.12, 0.02]),
                np.array([0.22, 0.12, 0.02]),
            ),
            initial_yaws=(0.0, 0.0),
            target_positions=(
                np.array([-0.22, -0.18, 0.02]),
                np.array([0.22, -0.18, 0.02]),
            ),
        )
    if task_id == "lift_tray":
        tray = Box((0.3, 0.12, 0.02))
        return TaskSpec(
            task_id=task_id,
            coordination="synchronous",
            objects=(
                ObjectModel(
                    "tray",
                    tray,
                    (np.array([-0.14, 0.0, 0.0]), np.array([0.14, 0.0, 0.0])),
                ),
            ),
            initial_centers=(np.array([0.0, 0.12, 0.01]),),
            initial_yaws=(0.0,),
            target_positions=(np.array([0.0, -0.2, 0.13]),),
            require_bimanual_transport=True,
            lift_height=0.15,
        )
    if task_id == "tilt_plate":
        plate = Cylinder(radius=0.09, height=0.012)
        return TaskSpec(
            task_id=task_id,
            coordination="asynchronous",
            objects=(
                ObjectModel(
                    "plate",
                    plate,
                    (np.array([-0.08, 0.0, 0.0]), np.array([0.08, 0.0, 0.0])),
                ),
            ),
            initial_centers=(np.array([0.08, 0.1, 0.006]),),
            initial_yaws=(0.0,),
            target_positions=(np.array([0.3, -0.14, 0.15]),),
            require_tilt_before_grasp=True,
            tilt_min_angle=math.radians(15.0),
            position_jitter=0.04,
        )
    raise ValueError(f"unknown task id {task_id!r}")


# -- scripted experts --------------------------------------------------------


class _ArmScript:
    """Per-arm sequence of commanded (pose, openness) targets."""

    def __init__(self, start: Pose, openness: float):
        self.poses = [start]
        self.opens = [openness]

    def __len__(self):
        return len(self.poses)

    def move_to(self, target: Pose, step_size: float = 0.03):
        start = self.poses[-1]
        dist = float(np.linalg.norm(target.position - start.position))
        angle = start.orientation.angle_to(target.orientation)
        n = max(int(math.ceil(dist / step_size)), int(math.ceil(angle / 0.1)), 1)
        for j in range(1, n + 1):
            u = j / n
            self.poses.append(
                Pose(
                    start.position + u * (target.position - start.position),
                    slerp(start.orientation, target.orientation, u),
                )
            )
            self.opens.append(self.opens[-1])

    def hold(self, n: int = 1):
        for _ in range(n):
            self.poses.append(self.poses[-1])
            self.opens.append(self.opens[-1])

    def set_grip(self, openness: float):
        """Toggle the gripper over two stationary steps (event on the first)."""
        self.hold(1)
        self.opens[-1] = openness
        self.hold(1)


def _sync(*scripts: _ArmScript):
    longest = max(len(s) for s in scripts)
    for s in scripts:
        s.hold(longest - len(s))


def _above(p: np.ndarray, z: float) -> Pose:
    return Pose(np.array([p[0], p[1], z]))


def _tilt_axis(edge: np.ndarray, rim: np.ndarray) -> np.ndarray:
    """Axis that raises the rim when the plate pivots about the edge."""
    direction = rim - edge
    direction[2] = 0.0
    direction /= np.linalg.norm(direction)
    return np.array([direction[1], -direction[0], 0.0])


def _plan_dual_place(world: World, state: WorldState) -> tuple:
    task = world.task
    left = _ArmScript(state.left, state.left_open)
    right = _ArmScript(state.right, state.right_open)
    pick = [state.object_poses[i].position for i in range(2)]
    place = [np.asarray(task.target_positions[i]) for i in range(2)]
    for arm, i in ((left, 0), (right, 1)):
        arm.move_to(_above(pick[i], 0.16))
        arm.move_to(Pose(pick[i]))
    _sync(left, right)
    left.set_grip(GRIP_CLOSED)
    right.set_grip(GRIP_CLOSED)
    for arm, i in ((left, 0), (right, 1)):
        arm.move_to(_above(pick[i], 0.18))
        arm.move_to(_above(place[i], 0.18))
        arm.move_to(Pose(place[i]))
    _sync(left, right)
    left.set_grip(GRIP_OPEN)
    right.set_grip(GRIP_OPEN)
    for arm, i in ((left, 0), (right, 1)):
        arm.move_to(_above(place[i], 0.16))
    _sync(left, right)
    return left, right


def _plan_lift_tray(world: World, state: WorldState) -> tuple:
    task = world.task
    left = _ArmScript(state.left, state.left_open)
    right = _ArmScript(state.right, state.right_open)
    tray = state.object_poses[0]
    handles = world.grasp_feature_points(state, 0)
    # Left arm takes the handle with the smaller x.
    lh, rh = (handles[0], handles[1]) if handles[0][0] <= handles[1][0] else (
        handles[1], handles[0])
    left.move_to(_above(lh, 0.14))
    right.move_to(_above(rh, 0.14))
    left.move_to(Pose(lh))
    right.move_to(Pose(rh))
    _sync(left, right)
    left.set_grip(GRIP_CLOSED)
    right.set_grip(GRIP_CLOSED)

    # Transport: plan tray poses, derive both grippers from fixed offsets so
    # the bimanual hold stays exactly consistent.
    off_l = compose(inverse(Pose(lh)), tray)
    off_r = compose(inverse(Pose(rh)), tray)
    goal = np.asarray(task.target_positions[0])
    waypoints = [
        Pose(np.array([tray.position[0], tray.position[1], 0.19]), tray.orientation),
        Pose(np.array([goal[0], goal[1], 0.19]), tray.orientation),
        Pose(goal, tray.orientation),
    ]
    current = tray
    for wp in waypoints:
        dist = float(np.linalg.norm(wp.position - current.position))
        n = max(int(math.ceil(dist / 0.03)), 1)
        for j in range(1, n + 1):
            u = j / n
            tray_pose = Pose(
                current.position + u * (wp.position - current.position),
                slerp(current.orientation, wp.orientation, u),
            )
            left.poses.append(compose(tray_pose, inverse(off_l)))
            left.opens.append(left.opens[-1])
            right.poses.append(compose(tray_pose, inverse(off_r)))
            right.opens.append(right.opens[-1])
        current = wp
    left.set_grip(GRIP_OPEN)
    right.set_grip(GRIP_OPEN)
    left.move_to(Pose(left.poses[-1].position + np.array([0.0, 0.0, 0.08]),
                      left.poses[-1].orientation))
    right.move_to(Pose(right.poses[-1].position + np.array([0.0, 0.0, 0.08]),
                       right.poses[-1].orientation))
    _sync(left, right)
    return left, right


def _plan_tilt_plate(world: World, state: WorldState) -> tuple:
    task = world.task
    left = _ArmScript(state.left, state.left_open)
    right = _ArmScript(state.right, state.right_open)
    plate = state.object_poses[0]
    edge, rim = world.grasp_feature_points(state, 0)

    # Left presses the near edge; right waits at a standoff above the rim.
    left.move_to(_above(edge, 0.12))
    left.move_to(Pose(edge))
    right.move_to(_above(rim, 0.16))
    _sync(left, right)
    left.set_grip(GRIP_CLOSED)
    _sync(left, right)

    # Tilt: rotate the left gripper in place so the plate pivots about the
    # edge contact and the far rim rises.
    tilt = math.radians(32.0)
    axis = _tilt_axis(edge, rim)
    q_goal = Quaternion.from_axis_angle(axis, tilt).multiply(left.poses[-1].orientation)
    n_tilt = max(int(math.ceil(tilt / 0.08)), 1)
    q_start = left.poses[-1].orientation
    for j in range(1, n_tilt + 1):
        left.poses.append(Pose(left.poses[-1].position,
                               slerp(q_start, q_goal, j / n_tilt)))
        left.opens.append(left.opens[-1])
    _sync(left, right)

    # Right approaches the raised rim on the tilted plate and grasps it.
    plate_tilted = compose(
        compose(Pose(edge, Quaternion.from_axis_angle(axis, tilt)),
                inverse(Pose(edge))),
        plate,
    )
    rim_raised = plate_tilted.orientation.as_matrix() @ np.array([0.08, 0.0, 0.0]) \
        + plate_tilted.position
    right.move_to(_above(rim_raised, rim_raised[2] + 0.08))
    right.move_to(Pose(rim_raised))
    _sync(left, right)
    right.set_grip(GRIP_CLOSED)
    _sync(left, right)
    left.set_grip(GRIP_OPEN)
    _sync(left, right)

    # Left retreats; right carries the plate to the rack and levels it.
    left.move_to(Pose(left.poses[-1].position + np.array([-0.10, 0.0, 0.12]),
                      Quaternion.identity()))
    off_r = compose(inverse(right.poses[-1]), plate_tilted)
    goal = np.asarray(task.target_positions[0])
    plate_goal = Pose(goal, plate.orientation)
    lift_wp = Pose(
        np.array([plate_tilted.position[0], plate_tilted.position[1], 0.2]),
        slerp(plate_tilted.orientation, plate.orientation, 0.7),
    )
    current = plate_tilted
    for wp in (lift_wp, plate_goal):
        dist = float(np.linalg.norm(wp.position - current.position))
        angle = current.orientation.angle_to(wp.orientation)
        n = max(int(math.ceil(dist / 0.03)), int(math.ceil(angle / 0.08)), 1)
        for j in range(1, n + 1):
            u = j / n
            plate_pose = Pose(
                current.position + u * (wp.position - current.position),
                slerp(current.orientation, wp.orientation, u),
            )
            right.poses.append(compose(plate_pose, inverse(off_r)))
            right.opens.append(right.opens[-1])
        current = wp
    _sync(left, right)
    right.set_grip(GRIP_OPEN)
    _sync(left, right)
    right.move_to(Pose(right.poses[-1].position + np.array([0.0, 0.0, 0.1]),
                       right.poses[-1].orientation))
    _sync(left, right)
    return left, right


_PLANNERS = {
    "dual_place": _plan_dual_place,
    "lift_tray": _plan_lift_tray,
    "tilt_plate": _plan_tilt_plate,
}


def _speeds(prev: WorldState, cur: WorldState) -> tuple:
    out = []
    for arm in ("left", "right"):
        a, b = prev.arm_pose(arm), cur.arm_pose(arm)
        out.append(
            _SPEED_POS_SCALE * float(np.linalg.norm(b.position - a.position))
            + _SPEED_ROT_SCALE * a.orientation.angle_to(b.orientation)
        )
    return tuple(out)


def trace_to_demo(trace) -> Demonstration:
    steps = []
    for t, state in enumerate(trace):
        sl, sr = _speeds(trace[t - 1], state) if t > 0 else (0.0, 0.0)
        steps.append(
            DemoStep(
                index=t,
                left=state.left,
                left_open=state.left_open,
                right=state.right,
                right_open=state.right_open,
                object_poses=state.object_poses,
                speed_left=sl,
                speed_right=sr,
            )
        )
    return Demonstration(tuple(steps))


def run_actions(world: World, state: WorldState, actions) -> list:
    """Step through a whole action sequence, returning the full trace."""
    trace = [state]
    for a in actions:
        state = world.step(state, a)
        trace.append(state)
    return trace


def scripted_expert(task: TaskSpec, seed: int,
                    max_resamples: int = 10) -> tuple:
    """Generate one successful demonstration.

    Returns (Demonstration, trace, episode_seed). Initial states that do not
    yield a verified success are resampled with derived seeds, up to
    ``max_resamples`` attempts.
    """
    world = World(task)
    planner = _PLANNERS[task.task_id]
    for attempt in range(max_resamples):
        episode_seed = seed + 1_000_003 * attempt
        state = world.initial_state(episode_seed)
        left, right = planner(world, state)
        actions = [
            action_vector(lp, lo, rp, ro)
            for lp, lo, rp, ro in zip(
                left.poses[1:], left.opens[1:], right.poses[1:], right.opens[1:]
            )
        ]
        if len(actions) + 1 > task.episode_cap:
            continue
        trace = run_actions(world, state, actions)
        result = evaluate_success(task, trace)
        if result.success:
            return trace_to_demo(trace), trace, episode_seed
    raise RuntimeError(
        f"no feasible expert plan for task {task.task_id!r} after "
        f"{max_resamples} attempts (seed {seed})"
    )


# -- success evaluation ------------------------------------------------------


def _tilt_angle(pose: Pose) -> float:
    """Angle between the object z-axis and world vertical."""
    r = pose.orientation.as_matrix()
    return math.acos(min(1.0, max(-1.0, float(r[2, 2]))))


def _first_event_step(trace, attr: str):
    for state in trace:
        if getattr(state, attr):
            return state.step_count
    return None


def _predicate(task: TaskSpec, trace) -> tuple:
    """(holds, ordering_violation) for the task's end-state predicate."""
    end = trace[-1]
    ok = True
    for i, target in enumerate(task.target_positions):
        if target is None:
            continue
        d = float(np.linalg.norm(end.object_poses[i].position - np.asarray(target)))
        if d > task.place_tolerance:
            ok = False

    violation = False
    if task.require_bimanual_transport:
        carried_high = any(
            len(s.attachments[0]) == 2
            and s.object_poses[0].position[2] >= task.lift_height
            for s in trace
        )
        if not carried_high:
            ok = False
            violation = violation or any(len(s.attachments[0]) == 2 for s in trace)

    if task.require_tilt_before_grasp:
        right_attach = None
        for prev, cur in zip(trace, trace[1:]):
            if "right" not in prev.attached_arms(0) and "right" in cur.attached_arms(0):
                right_attach = cur.step_count
                break
        tilted_at_grasp = (
            right_attach is not None
            and _tilt_angle(trace[right_attach].object_poses[0])
            >= task.tilt_min_angle
        )
        if not tilted_at_grasp:
            ok = False
            if right_attach is not None:
                violation = True
        # The pressing arm must hand over: at its release the other arm holds.
        for prev, cur in zip(trace, trace[1:]):
            if "left" in prev.attached_arms(0) and "left" not in cur.attached_arms(0):
                if "right" not in cur.attached_arms(0):
                    ok = False
                    violation = True
                break
    return ok, violation


def evaluate_success(task: TaskSpec, trace) -> RolloutResult:
    """Success iff the task predicate holds at the end of the trace and no
    drop or collision occurred; otherwise the first violation names the
    failure."""
    trace = tuple(trace)
    drop_step = _first_event_step(trace, "drop_event")
    collision_step = _first_event_step(trace, "collision_event")
    predicate_ok, ordering_violation = _predicate(task, trace)

    if drop_step is None and collision_step is None and predicate_ok:
        return RolloutResult(True, None, trace)
    events = []
    if drop_step is not None:
        events.append((drop_step, "drop"))
    if collision_step is not None:
        events.append((collision_step, "collision"))
    if events:
        reason = min(events)[1]
    elif ordering_violation:
        reason = "constraint-violation"
    else:
        reason = "timeout"
    return RolloutResult(False, reason, trace)
