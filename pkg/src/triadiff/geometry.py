"""SE(3) pose algebra and the 21-dim triadic arm-arm-object relation vector.

Quaternions use (x, y, z, w) component order and the Hamilton product.
Every type is an immutable value; every operation is a pure function, so
all of this is safe to call from concurrent rollout workers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Quaternion",
    "Pose",
    "TriadVector",
    "compose",
    "inverse",
    "relative_pose",
    "triad_from_poses",
    "aggregate_triads",
    "slerp",
]

_ZERO_NORM_EPS = 1e-12
_DEGENERATE_MEAN_EPS = 1e-8


def _canonicalize(x: float, y: float, z: float, w: float):
    # w >= 0 picks one sheet of the double cover; at w == 0 the first nonzero
    # vector component decides, so q and -q always map to the same bits.
    if w < 0.0:
        return -x, -y, -z, -w
    if w == 0.0:
        for c in (x, y, z):
            if c != 0.0:
                if c < 0.0:
                    return -x, -y, -z, -w
                break
    return x, y, z, w


@dataclass(frozen=True)
class Quaternion:
    """Unit rotation quaternion; normalized and sign-canonicalized on construction."""

    x: float
    y: float
    z: float
    w: float

    def __post_init__(self):
        x, y, z, w = float(self.x), float(self.y), float(self.z), float(self.w)
        norm = math.sqrt(x * x + y * y + z * z + w * w)
        if norm < _ZERO_NORM_EPS:
            raise ValueError("cannot normalize a near-zero quaternion")
        if abs(norm - 1.0) > 1e-12:
            # Skip the division for already-unit inputs so construction is
            # bit-idempotent (serialization round trips are stable).
            x, y, z, w = x / norm, y / norm, z / norm, w / norm
        x, y, z, w = _canonicalize(x, y, z, w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "w", w)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        ax = np.asarray(axis, dtype=np.float64)
        n = math.sqrt(float(ax @ ax))
        if n < _ZERO_NORM_EPS:
            raise ValueError("rotation axis must be nonzero")
        s = math.sin(angle / 2.0) / n
        return cls(ax[0] * s, ax[1] * s, ax[2] * s, math.cos(angle / 2.0))

    def conjugate(self) -> "Quaternion":
        return Quaternion(-self.x, -self.y, -self.z, self.w)

    def multiply(self, other: "Quaternion") -> "Quaternion":
        x1, y1, z1, w1 = self.x, self.y, self.z, self.w
        x0, y0, z0, w0 = other.x, other.y, other.z, other.w
        return Quaternion(
            w1 * x0 + x1 * w0 + y1 * z0 - z1 * y0,
            w1 * y0 - x1 * z0 + y1 * w0 + z1 * x0,
            w1 * z0 + x1 * y0 - y1 * x0 + z1 * w0,
            w1 * w0 - x1 * x0 - y1 * y0 - z1 * z0,
        )

    def rotate(self, v) -> np.ndarray:
        """Rotate a 3-vector. Exact (bit-wise) for the identity quaternion."""
        vx, vy, vz = float(v[0]), float(v[1]), float(v[2])
        qx, qy, qz, qw = self.x, self.y, self.z, self.w
        tx = 2.0 * (qy * vz - qz * vy)
        ty = 2.0 * (qz * vx - qx * vz)
        tz = 2.0 * (qx * vy - qy * vx)
        return np.array(
            [
                vx + qw * tx + (qy * tz - qz * ty),
                vy + qw * ty + (qz * tx - qx * tz),
                vz + qw * tz + (qx * ty - qy * tx),
            ]
        )

    def as_matrix(self) -> np.ndarray:
        """Equivalent 3x3 rotation matrix."""
        x, y, z, w = self.x, self.y, self.z, self.w
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def angle_to(self, other: "Quaternion") -> float:
        """Geodesic angle in radians between the two rotations."""
        # atan2 on the relative quaternion stays well-conditioned near zero,
        # where acos(|dot|) would amplify float noise to ~1e-8.
        r = self.conjugate().multiply(other)
        return 2.0 * math.atan2(math.sqrt(r.x * r.x + r.y * r.y + r.z * r.z), abs(r.w))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w])


def _as_position(p) -> np.ndarray:
    arr = np.array(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"position must be a 3-vector, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3D position in meters plus a unit quaternion."""

    position: np.ndarray
    orientation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        object.__setattr__(self, "position", _as_position(self.position))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), Quaternion.identity())

    @classmethod
    def from_array(cls, arr) -> "Pose":
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != (7,):
            raise ValueError(f"pose array must have 7 entries, got shape {a.shape}")
        return cls(a[:3], Quaternion(a[3], a[4], a[5], a[6]))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation.as_array()])


def compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses: result maps x through b, then a."""
    return Pose(
        a.position + a.orientation.rotate(b.position),
        a.orientation.multiply(b.orientation),
    )


def inverse(p: Pose) -> Pose:
    """Pose such that compose(p, inverse(p)) is the identity."""
    qi = p.orientation.conjugate()
    return Pose(-qi.rotate(p.position), qi)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Express b in a's frame: inverse(a) composed with b."""
    return compose(inverse(a), b)


def slerp(q0: Quaternion, q1: Quaternion, u: float) -> Quaternion:
    """Spherical interpolation from q0 (u=0) to q1 (u=1) along the short arc."""
    dot = q0.x * q1.x + q0.y * q1.y + q0.z * q1.z + q0.w * q1.w
    sign = 1.0
    if dot < 0.0:
        dot, sign = -dot, -1.0
    if dot > 1.0 - 1e-12:
        # Nearly parallel: linear blend, constructor renormalizes.
        return Quaternion(
            q0.x + u * (sign * q1.x - q0.x),
            q0.y + u * (sign * q1.y - q0.y),
            q0.z + u * (sign * q1.z - q0.z),
            q0.w + u * (sign * q1.w - q0.w),
        )
    theta = math.acos(dot)
    s = math.sin(theta)
    c0 = math.sin((1.0 - u) * theta) / s
    c1 = sign * math.sin(u * theta) / s
    return Quaternion(
        c0 * q0.x + c1 * q1.x,
        c0 * q0.y + c1 * q1.y,
        c0 * q0.z + c1 * q1.z,
        c0 * q0.w + c1 * q1.w,
    )


# Layout of one 7-entry relation block inside the 21-vector.
_POS = slice(0, 3)
_QUAT = slice(3, 7)
RELATION_NAMES = ("left_to_right", "left_to_obj", "right_to_obj")


@dataclass(frozen=True)
class TriadVector:
    """Flat 21-vector of the three pairwise relations between the two arms
    and the object: [left->right, left->obj, right->obj], each 7 entries
    (position + quaternion, canonical sign)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.shape != (21,):
            raise ValueError(f"triad vector must have 21 entries, got {arr.shape}")
        for k in range(3):
            q = arr[7 * k + 3 : 7 * k + 7]
            if abs(float(q @ q) - 1.0) > 2e-6:
                raise ValueError(f"embedded quaternion {k} is not unit norm")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def left_to_right(self) -> np.ndarray:
        return self.values[0:7]

    @property
    def left_to_obj(self) -> np.ndarray:
        return self.values[7:14]

    @property
    def right_to_obj(self) -> np.ndarray:
        return self.values[14:21]

    def relation(self, k: int) -> Pose:
        """The k-th relation block (0 left->right, 1 left->obj, 2 right->obj)."""
        return Pose.from_array(self.values[7 * k : 7 * k + 7])


def triad_from_poses(left: Pose, right: Pose, obj: Pose) -> TriadVector:
    """Build the triad vector from world-frame poses of both arms and the object."""
    blocks = [
        relative_pose(left, right).as_array(),
        relative_pose(left, obj).as_array(),
        relative_pose(right, obj).as_array(),
    ]
    return TriadVector(np.concatenate(blocks))


def aggregate_triads(triads: list) -> TriadVector:
    """Pool a set of per-object triads into one fixed 21-vector.

    Positions are averaged arithmetically and rotations by a normalized
    componentwise quaternion mean; sums use math.fsum so the output is
    bit-identical under any permutation of the inputs. A singleton list is
    returned unchanged.
    """
    if not triads:
        raise ValueError("no objects in scene")
    if len(triads) == 1:
        return triads[0]
    n = len(triads)
    cols = [[float(t.values[c]) for t in triads] for c in range(21)]
    # Per-relation sign alignment: canonicalize each quaternion before averaging.
    quats = []
    for k in range(3):
        qs = []
        for t in triads:
            q = t.values[7 * k + 3 : 7 * k + 7]
            qs.append(_canonicalize(float(q[0]), float(q[1]), float(q[2]), float(q[3])))
        qs_cols = list(zip(*qs))
        mean = [math.fsum(col) / n for col in qs_cols]
        if math.sqrt(math.fsum(m * m for m in mean)) < _DEGENERATE_MEAN_EPS:
            # Antipodal cancellation: fall back to the lexicographically first
            # input so the tie-break stays permutation-invariant.
            first = min(tuple(t.values.tolist()) for t in triads)
            mean = list(first[7 * k + 3 : 7 * k + 7])
        quats.append(Quaternion(*mean))
    out = np.empty(21)
    for k in range(3):
        for j in range(3):
            out[7 * k + j] = math.fsum(cols[7 * k + j]) / n
        out[7 * k + 3 : 7 * k + 7] = quats[k].as_array()
    return TriadVector(out)
