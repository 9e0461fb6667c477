import math

import numpy as np
import pytest

from triadiff.geometry import Pose, Quaternion, compose
from triadiff.signals import action_vector, extract_keyposes
from triadiff.world import (
    Attachment,
    RolloutResult,
    TaskSpec,
    World,
    WorldState,
    evaluate_success,
    make_task,
    run_actions,
    scripted_expert,
    trace_to_demo,
)


def hold_action(state):
    return action_vector(state.left, state.left_open, state.right, state.right_open)


def arm_action(state, left=None, left_open=None, right=None, right_open=None):
    return action_vector(
        left if left is not None else state.left,
        state.left_open if left_open is None else left_open,
        right if right is not None else state.right,
        state.right_open if right_open is None else right_open,
    )


class TestStep:
    def setup_method(self):
        self.task = make_task("dual_place")
        self.world = World(self.task)
        self.state = self.world.initial_state(seed=3)

    def test_zero_displacement_only_counts(self):
        nxt = self.world.step(self.state, hold_action(self.state))
        assert nxt.step_count == self.state.step_count + 1
        assert np.array_equal(nxt.left.position, self.state.left.position)
        assert np.array_equal(nxt.right.position, self.state.right.position)
        assert nxt.object_poses == self.state.object_poses
        assert not nxt.collision_event and not nxt.drop_event

    def test_translation_clamped_to_cap(self):
        target = Pose(self.state.left.position + np.array([0.3, 0.0, 0.0]))
        nxt = self.world.step(self.state, arm_action(self.state, left=target))
        moved = np.linalg.norm(nxt.left.position - self.state.left.position)
        assert moved == pytest.approx(self.task.params.max_step_translation)

    def test_rotation_clamped_to_cap(self):
        q = Quaternion.from_axis_angle([0, 0, 1], 1.2)
        target = Pose(self.state.left.position, q)
        nxt = self.world.step(self.state, arm_action(self.state, left=target))
        turned = self.state.left.orientation.angle_to(nxt.left.orientation)
        assert turned == pytest.approx(self.task.params.max_step_rotation, abs=1e-9)

    def test_workspace_clamp(self):
        target = Pose(np.array([5.0, 0.0, 0.3]))
        state = self.state
        for _ in range(200):
            state = self.world.step(state, arm_action(state, left=target))
        assert state.left.position[0] <= self.task.params.workspace_high[0] + 1e-12

    def test_close_near_feature_attaches_and_carries(self):
        cube = self.state.object_poses[0]
        near = Pose(cube.position + np.array([0.02, 0.0, 0.0]))
        state = self.state
        for _ in range(30):
            state = self.world.step(state, arm_action(state, left=near))
        assert not state.attachments[0]
        state = self.world.step(state, arm_action(state, left_open=0.0))
        assert state.attached_arms(0) == ("left",)
        obj_before = state.object_poses[0]
        lifted = Pose(state.left.position + np.array([0.0, 0.0, 0.04]))
        state = self.world.step(state, arm_action(state, left=lifted))
        assert state.object_poses[0].position[2] == pytest.approx(
            obj_before.position[2] + 0.04
        )

    def test_close_far_from_feature_does_not_attach(self):
        state = self.world.step(self.state, arm_action(self.state, left_open=0.0))
        assert not state.attachments[0] and not state.attachments[1]

    def test_open_detaches(self):
        cube = self.state.object_poses[0]
        state = self.state
        for _ in range(30):
            state = self.world.step(state, arm_action(state, left=Pose(cube.position)))
        state = self.world.step(state, arm_action(state, left_open=0.0))
        assert state.attached_arms(0) == ("left",)
        state = self.world.step(state, arm_action(state, left_open=1.0))
        assert state.attached_arms(0) == ()

    def test_attachment_rigidity_exact(self):
        cube = self.state.object_poses[0]
        state = self.state
        for _ in range(30):
            state = self.world.step(state, arm_action(state, left=Pose(cube.position)))
        state = self.world.step(state, arm_action(state, left_open=0.0))
        offset = state.attachments[0][0].offset
        rng = np.random.default_rng(0)
        for _ in range(10):
            target = Pose(state.left.position + rng.uniform(-0.03, 0.03, 3))
            state = self.world.step(state, arm_action(state, left=target))
            expected = compose(state.left, offset)
            assert np.array_equal(state.object_poses[0].position, expected.position)

    def test_collision_flagged(self):
        state = self.state
        meet = Pose(np.array([0.0, -0.05, 0.28]))
        for _ in range(40):
            state = self.world.step(state, arm_action(state, left=meet, right=meet))
            if state.collision_event:
                break
        assert state.collision_event

    def test_bimanual_divergence_drops(self):
        task = make_task("lift_tray")
        world = World(task)
        state = world.initial_state(seed=1)
        handles = world.grasp_feature_points(state, 0)
        lh, rh = (handles[0], handles[1]) if handles[0][0] < handles[1][0] else (
            handles[1], handles[0])
        for _ in range(40):
            state = world.step(
                state, arm_action(state, left=Pose(lh), right=Pose(rh))
            )
        state = world.step(state, arm_action(state, left_open=0.0, right_open=0.0))
        assert state.attached_arms(0) == ("left", "right")
        # Arms diverge by 0.05 m in opposite directions: hold must break.
        left_t = Pose(state.left.position + np.array([-0.05, 0.0, 0.0]))
        right_t = Pose(state.right.position + np.array([0.05, 0.0, 0.0]))
        state = world.step(state, arm_action(state, left=left_t, right=right_t))
        assert state.drop_event
        assert state.attached_arms(0) == ()

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(5)
        actions = []
        state = self.state
        for _ in range(20):
            target = Pose(state.left.position + rng.uniform(-0.04, 0.04, 3))
            actions.append(arm_action(state, left=target))
        t1 = run_actions(self.world, self.world.initial_state(7), actions)
        t2 = run_actions(self.world, self.world.initial_state(7), actions)
        for a, b in zip(t1, t2):
            assert np.array_equal(a.left.position, b.left.position)
            assert a.left.orientation == b.left.orientation
            for pa, pb in zip(a.object_poses, b.object_poses):
                assert np.array_equal(pa.position, pb.position)


class TestTasks:
    def test_initial_distribution_bounded(self):
        with pytest.raises(ValueError, match="workspace"):
            make_task("dual_place").__class__(
                **{
                    **make_task("dual_place").__dict__,
                    "initial_centers": (np.array([0.59, 0.0, 0.02]),
                                        np.array([0.2, 0.0, 0.02])),
                }
            )

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            make_task("juggle")

    @pytest.mark.parametrize("task_id,coordination", [
        ("dual_place", "symmetric"),
        ("lift_tray", "synchronous"),
        ("tilt_plate", "asynchronous"),
    ])
    def test_coordination_types(self, task_id, coordination):
        assert make_task(task_id).coordination == coordination


class TestExperts:
    @pytest.mark.parametrize("task_id", ["dual_place", "lift_tray", "tilt_plate"])
    def test_experts_verified_over_seeds(self, task_id):
        task = make_task(task_id)
        n = 200 if task_id == "lift_tray" else 50
        for seed in range(n):
            demo, trace, _ = scripted_expert(task, seed=seed)
            assert evaluate_success(task, trace).success
            assert len(demo) <= task.episode_cap

    def test_synchronous_postconditions(self):
        task = make_task("lift_tray")
        _, trace, _ = scripted_expert(task, seed=4)
        carried_high = [
            s for s in trace
            if len(s.attachments[0]) == 2
            and s.object_poses[0].position[2] >= task.lift_height
        ]
        assert carried_high
        assert trace[-1].object_poses[0].position[2] >= 0.1

    def test_asynchronous_ordering_postcondition(self):
        task = make_task("tilt_plate")
        _, trace, _ = scripted_expert(task, seed=6)
        first_left = next(
            s.step_count for s in trace if "left" in s.attached_arms(0)
        )
        first_right = next(
            s.step_count for s in trace if "right" in s.attached_arms(0)
        )
        assert first_right > first_left
        # The plate is already tilted when the second arm grasps.
        grasp_state = trace[first_right]
        r = grasp_state.object_poses[0].orientation.as_matrix()
        tilt = math.acos(max(-1.0, min(1.0, float(r[2, 2]))))
        assert tilt >= task.tilt_min_angle

    def test_expert_demo_keyposes_cover_grip_events(self):
        task = make_task("tilt_plate")
        demo, _, _ = scripted_expert(task, seed=2)
        kp = extract_keyposes(demo)
        assert kp.indices[-1] == len(demo) - 1
        assert len(kp.indices) >= 4


class TestEvaluate:
    def test_expert_trace_success(self):
        task = make_task("dual_place")
        _, trace, _ = scripted_expert(task, seed=9)
        res = evaluate_success(task, trace)
        assert res.success and res.failure_reason is None

    def test_truncated_trace_timeout(self):
        task = make_task("dual_place")
        _, trace, _ = scripted_expert(task, seed=9)
        res = evaluate_success(task, trace[: len(trace) // 2])
        assert not res.success and res.failure_reason == "timeout"

    def test_collision_reason(self):
        task = make_task("dual_place")
        world = World(task)
        state = world.initial_state(seed=2)
        meet = Pose(np.array([0.0, -0.05, 0.28]))
        trace = [state]
        for _ in range(40):
            state = world.step(state, arm_action(state, left=meet, right=meet))
            trace.append(state)
        res = evaluate_success(task, trace)
        assert not res.success and res.failure_reason == "collision"

    def test_drop_reason_wins_when_first(self):
        task = make_task("lift_tray")
        world = World(task)
        state = world.initial_state(seed=1)
        handles = world.grasp_feature_points(state, 0)
        lh, rh = (handles[0], handles[1]) if handles[0][0] < handles[1][0] else (
            handles[1], handles[0])
        trace = [state]
        for _ in range(40):
            state = world.step(state, arm_action(state, left=Pose(lh), right=Pose(rh)))
            trace.append(state)
        state = world.step(state, arm_action(state, left_open=0.0, right_open=0.0))
        trace.append(state)
        left_t = Pose(state.left.position + np.array([-0.05, 0.0, 0.0]))
        right_t = Pose(state.right.position + np.array([0.05, 0.0, 0.0]))
        state = world.step(state, arm_action(state, left=left_t, right=right_t))
        trace.append(state)
        res = evaluate_success(task, trace)
        assert res.failure_reason == "drop"

    def test_result_invariant(self):
        with pytest.raises(ValueError):
            RolloutResult(True, "drop", ())
        with pytest.raises(ValueError):
            RolloutResult(False, None, ())

    def test_trace_to_demo_speeds(self):
        task = make_task("dual_place")
        _, trace, _ = scripted_expert(task, seed=0)
        demo = trace_to_demo(trace)
        assert demo.steps[0].speed_left == 0.0
        moving = [s for s in demo.steps if s.speed_left > 0]
        assert moving
