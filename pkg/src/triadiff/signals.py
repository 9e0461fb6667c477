"""Expert demonstrations and the three guidance signals derived from them:
keyposes, object pointflow, and per-step triad deltas, packaged per decision
timestep into training bundles.
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Quaternion, TriadVector, aggregate_triads, triad_from_poses

__all__ = [
    "DemoStep",
    "Demonstration",
    "KeyposeSet",
    "Pointflow",
    "TriadSequence",
    "GuidanceBundle",
    "Box",
    "Cylinder",
    "Composite",
    "action_vector",
    "split_action",
    "extract_keyposes",
    "sample_surface_points",
    "compute_pointflow",
    "compute_triad_sequence",
    "accumulate_triad",
    "accumulate_window",
    "build_guidance_bundles",
]

DEFAULT_N_POINTS = 200
DEFAULT_H_CONTINUOUS = 50
DEFAULT_H_KEYPOSE = 4
DEFAULT_SPEED_EPS = 1e-3
DEFAULT_MIN_GAP = 5
GRIP_THRESHOLD = 0.5
ACTION_DIM = 16


def action_vector(left: Pose, left_open: float, right: Pose,
                  right_open: float) -> np.ndarray:
    """Flatten a bimanual action: per arm position(3) + quaternion(4) + openness."""
    return np.concatenate(
        [left.as_array(), [left_open], right.as_array(), [right_open]]
    )


def split_action(vec) -> tuple[Pose, float, Pose, float]:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (ACTION_DIM,):
        raise ValueError(f"action vector must have {ACTION_DIM} entries")
    return (
        Pose.from_array(vec[0:7]),
        float(vec[7]),
        Pose.from_array(vec[8:15]),
        float(vec[15]),
    )


@dataclass(frozen=True)
class DemoStep:
    index: int
    left: Pose
    left_open: float
    right: Pose
    right_open: float
    object_poses: tuple
    speed_left: float
    speed_right: float

    def action(self) -> np.ndarray:
        return action_vector(self.left, self.left_open, self.right, self.right_open)


@dataclass(frozen=True)
class Demonstration:
    """Timestamped bimanual trajectory with per-step object poses and speeds."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        if len(steps) < 2:
            raise ValueError("a demonstration needs at least two steps")
        if steps[0].index != 0:
            raise ValueError("timestep indices must start at 0")
        for prev, cur in zip(steps, steps[1:]):
            if cur.index <= prev.index:
                raise ValueError("timestep indices must be strictly increasing")
            if len(cur.object_poses) != len(steps[0].object_poses):
                raise ValueError("object count must be constant over the trajectory")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def indices(self) -> list[int]:
        return [s.index for s in self.steps]

    @property
    def n_objects(self) -> int:
        return len(self.steps[0].object_poses)

    def position_of(self, index: int) -> int:
        """Record position of a timestep index."""
        for p, s in enumerate(self.steps):
            if s.index == index:
                return p
        raise KeyError(f"timestep {index} not in demonstration")

    def restricted_to(self, indices) -> "Demonstration":
        """Sub-demonstration keeping only the given timestep indices.

        Indices are re-based so the first kept step sits at 0; the original
        gaps between steps are preserved.
        """
        keep = sorted(set(indices))
        if not keep:
            raise ValueError("cannot restrict to an empty index set")
        base = keep[0]
        by_index = {s.index: s for s in self.steps}
        steps = []
        for i in keep:
            s = by_index[i]
            steps.append(
                DemoStep(s.index - base, s.left, s.left_open, s.right,
                         s.right_open, s.object_poses, s.speed_left,
                         s.speed_right)
            )
        return Demonstration(tuple(steps))


@dataclass(frozen=True)
class KeyposeSet:
    indices: tuple
    actions: np.ndarray  # (n, 16)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("keypose indices must be strictly increasing")
        acts = np.asarray(self.actions, dtype=np.float64)
        if acts.shape != (len(idx), ACTION_DIM):
            raise ValueError("one 16-dim action required per keypose index")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "actions", acts)

    def __len__(self) -> int:
        return len(self.indices)


def extract_keyposes(demo: Demonstration, speed_eps: float = DEFAULT_SPEED_EPS,
                     min_gap: int = DEFAULT_MIN_GAP) -> KeyposeSet:
    """Pick trajectory turning points: gripper open/close events plus local
    minima of the summed joint-speed profile where both arms are nearly still.

    Nearby candidates (closer than ``min_gap`` timesteps) merge keeping the
    earlier one; the final step is always included.
    """
    if speed_eps <= 0:
        raise ValueError("speed_eps must be positive")
    if min_gap < 1:
        raise ValueError("min_gap must be >= 1")
    steps = demo.steps
    n = len(steps)
    candidates = set()

    for p in range(1, n):
        for side in ("left_open", "right_open"):
            was_open = getattr(steps[p - 1], side) >= GRIP_THRESHOLD
            is_open = getattr(steps[p], side) >= GRIP_THRESHOLD
            if was_open != is_open:
                candidates.add(p)

    summed = [s.speed_left + s.speed_right for s in steps]
    p = 0
    while p < n:
        # Maximal run of equal summed speed starting at p.
        end = p
        while end + 1 < n and summed[end + 1] == summed[p]:
            end += 1
        falls_in = p == 0 or summed[p - 1] > summed[p]
        rises_out = end == n - 1 or summed[end + 1] > summed[p]
        if falls_in and rises_out:
            if steps[p].speed_left < speed_eps and steps[p].speed_right < speed_eps:
                candidates.add(p)
        p = end + 1

    kept = []
    for p in sorted(candidates):
        if not kept or steps[p].index - steps[kept[-1]].index >= min_gap:
            kept.append(p)
    if not kept or kept[-1] != n - 1:
        kept.append(n - 1)

    indices = tuple(steps[p].index for p in kept)
    actions = np.stack([steps[p].action() for p in kept])
    return KeyposeSet(indices, actions)


# -- object geometry and surface sampling -------------------------------


@dataclass(frozen=True)
class Box:
    extents: tuple  # full side lengths (x, y, z)

    def surface_area(self) -> float:
        ex, ey, ez = self.extents
        return 2.0 * (ex * ey + ey * ez + ex * ez)


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float  # axis along z

    def surface_area(self) -> float:
        return 2.0 * math.pi * self.radius * (self.height + self.radius)


@dataclass(frozen=True)
class Composite:
    parts: tuple  # of (shape, Pose offset)

    def surface_area(self) -> float:
        return sum(shape.surface_area() for shape, _ in self.parts)


def _sample_box(shape: Box, k: int, rng) -> np.ndarray:
    ex, ey, ez = shape.extents
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    faces = rng.choice(6, size=k, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(k, 2))
    pts = np.empty((k, 3))
    half = np.array([ex, ey, ez]) / 2.0
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = u[m, 0] * shape.extents[others[0]]
        pts[m, others[1]] = u[m, 1] * shape.extents[others[1]]
    return pts


def _sample_cylinder(shape: Cylinder, k: int, rng) -> np.ndarray:
    r, h = shape.radius, shape.height
    lateral = 2.0 * math.pi * r * h
    cap = math.pi * r * r
    areas = np.array([lateral, cap, cap])
    part = rng.choice(3, size=k, p=areas / areas.sum())
    theta = rng.uniform(0.0, 2.0 * math.pi, size=k)
    u = rng.uniform(0.0, 1.0, size=k)
    pts = np.empty((k, 3))
    side = part == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = (u[side] - 0.5) * h
    for p, z in ((1, h / 2.0), (2, -h / 2.0)):
        m = part == p
        rad = r * np.sqrt(u[m])
        pts[m, 0] = rad * np.cos(theta[m])
        pts[m, 1] = rad * np.sin(theta[m])
        pts[m, 2] = z
    return pts


def _sample_shape(shape, k: int, rng) -> np.ndarray:
    if isinstance(shape, Box):
        return _sample_box(shape, k, rng)
    if isinstance(shape, Cylinder):
        return _sample_cylinder(shape, k, rng)
    if isinstance(shape, Composite):
        areas = np.array([s.surface_area() for s, _ in shape.parts])
        choice = rng.choice(len(shape.parts), size=k, p=areas / areas.sum())
        pts = np.empty((k, 3))
        for i, (sub, offset) in enumerate(shape.parts):
            m = choice == i
            if m.any():
                local = _sample_shape(sub, int(m.sum()), rng)
                pts[m] = local @ offset.orientation.as_matrix().T + offset.position
        return pts
    raise TypeError(f"unsupported geometry {type(shape).__name__}")


def sample_surface_points(shape, n: int, seed: int,
                          pose: Pose | None = None) -> np.ndarray:
    """Sample n points uniformly on the object surface, in the world frame.

    Deterministic for a fixed seed; the cloud is drawn once per episode and
    reused for pointflow supervision.
    """
    if n < 1:
        raise ValueError("need at least one sample point")
    if shape.surface_area() <= 0.0:
        raise ValueError("degenerate geometry with zero surface area")
    rng = np.random.default_rng(seed)
    pts = _sample_shape(shape, n, rng)
    if pose is not None:
        pts = pts @ pose.orientation.as_matrix().T + pose.position
    return pts


# -- pointflow -----------------------------------------------------------


@dataclass(frozen=True)
class Pointflow:
    """Initial object points and their positions at future keyposes."""

    initial: np.ndarray  # (N, 3)
    targets: np.ndarray  # (h_k, N, 3)

    def __post_init__(self):
        init = np.asarray(self.initial, dtype=np.float64)
        tgt = np.asarray(self.targets, dtype=np.float64)
        if init.ndim != 2 or init.shape[1] != 3 or init.shape[0] < 1:
            raise ValueError("initial points must be a nonempty (N, 3) array")
        if tgt.ndim != 3 or tgt.shape[1:] != init.shape:
            raise ValueError("targets must be (h_k, N, 3) matching the initial cloud")
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "targets", tgt)


def rigid_transform_points(points: np.ndarray, from_pose: Pose,
                           to_pose: Pose) -> np.ndarray:
    """Apply the rigid motion carrying from_pose onto to_pose to world points.

    When the orientations are bit-identical the rotation is skipped, so a
    pure translation (or no motion at all) is applied exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    qa, qb = from_pose.orientation, to_pose.orientation
    if (qa.x, qa.y, qa.z, qa.w) == (qb.x, qb.y, qb.z, qb.w):
        return points + (to_pose.position - from_pose.position)
    rel = qb.multiply(qa.conjugate())
    return (points - from_pose.position) @ rel.as_matrix().T + to_pose.position


def compute_pointflow(f0: np.ndarray, object_pose_t0: Pose,
                      object_poses_at_keyposes) -> Pointflow:
    """Transport the initial cloud through the object's rigid motion at each
    future keypose."""
    f0 = np.asarray(f0, dtype=np.float64)
    if f0.size == 0:
        raise ValueError("initial point cloud must be nonempty")
    targets = np.stack(
        [rigid_transform_points(f0, object_pose_t0, p) for p in object_poses_at_keyposes]
    ) if len(object_poses_at_keyposes) else np.zeros((0,) + f0.shape)
    return Pointflow(f0, targets)


# -- triad sequences -------------------------------------------------------


@dataclass(frozen=True)
class TriadSequence:
    """Ground-truth triad per step plus the per-step deltas that rebuild it."""

    values: np.ndarray  # (T, 21)
    deltas: np.ndarray  # (T-1, 21); deltas[j] carries step j to j+1

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        dels = np.asarray(self.deltas, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != 21 or vals.shape[0] < 1:
            raise ValueError("values must be (T, 21)")
        if dels.shape != (vals.shape[0] - 1, 21):
            raise ValueError("deltas must be (T-1, 21)")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "deltas", dels)

    @property
    def initial(self) -> TriadVector:
        return TriadVector(self.values[0])

    def triad_at(self, position: int) -> TriadVector:
        return TriadVector(self.values[position])


def _step_triad(step: DemoStep, object_index) -> TriadVector:
    if object_index == "all":
        triads = [
            triad_from_poses(step.left, step.right, obj) for obj in step.object_poses
        ]
        return aggregate_triads(triads)
    return triad_from_poses(step.left, step.right, step.object_poses[object_index])


def compute_triad_sequence(demo: Demonstration,
                           object_index="all") -> TriadSequence:
    """Per-step triad vectors and their componentwise differences."""
    values = np.stack([_step_triad(s, object_index).values for s in demo.steps])
    deltas = values[1:] - values[:-1]
    return TriadSequence(values, deltas)


_QUAT_RENORM_SKIP = 1e-12
_DEGENERATE_NORM = 1e-6


def _renorm_step(values: np.ndarray, delta: np.ndarray, degenerate: str) -> np.ndarray:
    out = values + delta
    for k in range(3):
        q = out[7 * k + 3 : 7 * k + 7]
        norm = math.sqrt(float(q @ q))
        if norm < _DEGENERATE_NORM:
            if degenerate == "raise":
                raise ValueError("degenerate rotation accumulation")
            out[7 * k + 3 : 7 * k + 7] = values[7 * k + 3 : 7 * k + 7]
            continue
        if abs(norm - 1.0) > _QUAT_RENORM_SKIP:
            q = q / norm
        quat = Quaternion(q[0], q[1], q[2], q[3])
        out[7 * k + 3 : 7 * k + 7] = quat.as_array()
    return out


def accumulate_window(seed_values, deltas, degenerate: str = "raise") -> np.ndarray:
    """Accumulate a (L, 21) delta sequence onto a 21-entry seed.

    Returns the (L+1, 21) sequence including the seed. ``degenerate`` selects
    whether a collapsing quaternion raises or holds the previous rotation
    (the hold variant guards conditioning paths against wild predictions).
    """
    seed_values = np.asarray(seed_values, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 21)
    out = np.empty((len(deltas) + 1, 21))
    out[0] = seed_values
    for j, d in enumerate(deltas):
        out[j + 1] = _renorm_step(out[j], d, degenerate)
    return out


def accumulate_triad(r_prev: TriadVector, delta) -> TriadVector:
    """Componentwise addition of a 21-entry delta, then renormalize and
    canonicalize each embedded quaternion."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (21,):
        raise ValueError("delta must have 21 entries")
    return TriadVector(_renorm_step(r_prev.values, delta, "raise"))


# -- guidance bundles ------------------------------------------------------


@dataclass(frozen=True)
class GuidanceBundle:
    """Everything the policy is supervised with at one decision timestep."""

    t: int                        # decision timestep (record position)
    obs: DemoStep                 # observation snapshot at t
    episode_triad: np.ndarray     # (21,) triad at episode start
    seed_triad: np.ndarray        # (21,) triad at t, seeds the delta window
    keypose_indices: np.ndarray   # (h_k,) absolute step indices, padded
    keypose_actions: np.ndarray   # (h_k, 16)
    pointflow: Pointflow          # initial cloud + targets at the h_k keyposes
    delta_window: np.ndarray      # (L, 21) deltas covering t .. last keypose
    segment_lens: np.ndarray      # (h_k,) steps per keypose segment, sums to L
    segment_seeds: np.ndarray     # (h_k, 21) ground-truth triad at segment starts
    continuous: np.ndarray        # (h_c, 16) next actions, terminal-padded


def build_guidance_bundles(demo: Demonstration, keyposes: KeyposeSet,
                           f0: np.ndarray, triad_seq: TriadSequence,
                           h_c: int = DEFAULT_H_CONTINUOUS,
                           h_k: int = DEFAULT_H_KEYPOSE,
                           flow_object: int = 0) -> list[GuidanceBundle]:
    """One bundle per decision timestep: t=0 plus every keypose.

    Keypose targets are the next h_k keyposes (repeat-last padded), the
    continuous window the next h_c step actions (terminal padded), and the
    triad delta window runs from t to the h_k-th next keypose, split into
    per-keypose segments.
    """
    if h_c < 1 or h_k < 1:
        raise ValueError("horizons must be >= 1")
    if demo.indices != list(range(len(demo))):
        raise ValueError("bundles require consecutive timestep indices")
    n = len(demo)
    kp_positions = [demo.position_of(i) for i in keyposes.indices]
    decision_points = sorted({0, *kp_positions})

    pf_poses = [demo.steps[p].object_poses[flow_object] for p in kp_positions]
    episode_pf = compute_pointflow(
        f0, demo.steps[0].object_poses[flow_object], pf_poses
    )

    bundles = []
    for t in decision_points:
        future = [j for j, p in enumerate(kp_positions) if p > t]
        if not future:
            future = [len(kp_positions) - 1]
        while len(future) < h_k:
            future.append(future[-1])
        future = future[:h_k]

        kp_idx = np.array([kp_positions[j] for j in future])
        kp_actions = keyposes.actions[future]
        pf_targets = episode_pf.targets[future]

        cont = np.empty((h_c, ACTION_DIM))
        for j in range(h_c):
            cont[j] = demo.steps[min(t + 1 + j, n - 1)].action()

        seg_lens = np.empty(h_k, dtype=int)
        seg_seeds = np.empty((h_k, 21))
        start = t
        for j, end in enumerate(kp_idx):
            end = int(end)
            seg_lens[j] = max(end - start, 0)
            seg_seeds[j] = triad_seq.values[start]
            start = max(end, start)
        window_end = int(kp_idx[-1])
        delta_window = triad_seq.deltas[t:window_end]

        bundles.append(
            GuidanceBundle(
                t=t,
                obs=demo.steps[t],
                episode_triad=triad_seq.values[0].copy(),
                seed_triad=triad_seq.values[t].copy(),
                keypose_indices=kp_idx,
                keypose_actions=np.array(kp_actions),
                pointflow=Pointflow(episode_pf.initial, pf_targets),
                delta_window=np.array(delta_window),
                segment_lens=seg_lens,
                segment_seeds=seg_seeds,
                continuous=cont,
            )
        )
    return bundles
