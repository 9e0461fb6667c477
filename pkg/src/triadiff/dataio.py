"""Line-delimited text serialization for demonstrations, guidance bundles,
and rollout traces.

Every line is one self-describing JSON record with a fixed field order and a
``kind`` tag; files open with a header record carrying the schema version and
the generating config hash. Floats are written with shortest round-trip
precision, so regenerating with the same seed produces byte-identical files.
The record layouts are documented in the README.
"""

import csv
import json

import numpy as np

from .geometry import Pose
from .signals import DemoStep, Demonstration, GuidanceBundle, Pointflow

__all__ = [
    "SCHEMA_VERSION",
    "DataFormatError",
    "dump_demos",
    "load_demos",
    "dump_bundles",
    "load_bundles",
    "trace_to_csv",
    "demo_to_csv",
]

SCHEMA_VERSION = 1


class DataFormatError(ValueError):
    """Raised with the offending line number on malformed record files."""


def _floats(arr) -> list:
    return [float(x) for x in np.asarray(arr, dtype=np.float64).reshape(-1)]


def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def _encode_step(step: DemoStep) -> dict:
    return {
        "kind": "step",
        "t": int(step.index),
        "left": _floats(step.left.as_array()) + [float(step.left_open)],
        "right": _floats(step.right.as_array()) + [float(step.right_open)],
        "objects": [_floats(p.as_array()) for p in step.object_poses],
        "speeds": [float(step.speed_left), float(step.speed_right)],
    }


def _decode_step(rec: dict) -> DemoStep:
    left = rec["left"]
    right = rec["right"]
    return DemoStep(
        index=int(rec["t"]),
        left=Pose.from_array(left[:7]),
        left_open=float(left[7]),
        right=Pose.from_array(right[:7]),
        right_open=float(right[7]),
        object_poses=tuple(Pose.from_array(o) for o in rec["objects"]),
        speed_left=float(rec["speeds"][0]),
        speed_right=float(rec["speeds"][1]),
    )


def _read_records(path, expected_kind: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
            if lineno == 1:
                if rec.get("kind") != expected_kind:
                    raise DataFormatError(
                        f"{path}: line 1: expected a {expected_kind!r} header, "
                        f"got kind={rec.get('kind')!r}"
                    )
                if rec.get("schema") != SCHEMA_VERSION:
                    raise DataFormatError(
                        f"{path}: line 1: unsupported schema {rec.get('schema')!r}"
                    )
            yield lineno, rec


# -- demonstrations ---------------------------------------------------------


def dump_demos(path, task_id: str, config_hash: str, items) -> None:
    """Write demonstrations; items is a sequence of (episode_seed, Demonstration)."""
    items = list(items)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "kind": "demo_set",
            "schema": SCHEMA_VERSION,
            "task": task_id,
            "config_hash": config_hash,
            "n_demos": len(items),
        }) + "\n")
        for demo_id, (episode_seed, demo) in enumerate(items):
            fh.write(_dumps({
                "kind": "demo",
                "demo_id": demo_id,
                "episode_seed": int(episode_seed),
                "n_steps": len(demo),
                "n_objects": demo.n_objects,
            }) + "\n")
            for step in demo.steps:
                fh.write(_dumps(_encode_step(step)) + "\n")


def load_demos(path) -> tuple:
    """Read back (meta, [(episode_seed, Demonstration), ...])."""
    meta = None
    items = []
    pending_steps: list = []
    pending_meta = None

    def flush(lineno):
        nonlocal pending_meta
        if pending_meta is None:
            return
        if len(pending_steps) != pending_meta["n_steps"]:
            raise DataFormatError(
                f"{path}: line {lineno}: demo {pending_meta['demo_id']} has "
                f"{len(pending_steps)} steps, header says {pending_meta['n_steps']}"
            )
        items.append(
            (pending_meta["episode_seed"], Demonstration(tuple(pending_steps)))
        )
        pending_steps.clear()
        pending_meta = None

    lineno = 0
    for lineno, rec in _read_records(path, "demo_set"):
        kind = rec["kind"]
        if kind == "demo_set":
            meta = rec
        elif kind == "demo":
            flush(lineno)
            pending_meta = rec
        elif kind == "step":
            try:
                pending_steps.append(_decode_step(rec))
            except (KeyError, IndexError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
        else:
            raise DataFormatError(f"{path}: line {lineno}: unknown kind {kind!r}")
    flush(lineno)
    if meta is None:
        raise DataFormatError(f"{path}: empty demonstration file")
    if len(items) != meta["n_demos"]:
        raise DataFormatError(
            f"{path}: header promises {meta['n_demos']} demos, found {len(items)}"
        )
    return meta, items


# -- guidance bundles --------------------------------------------------------


def dump_bundles(path, task_id: str, config_hash: str, horizon_meta: dict,
                 groups) -> None:
    """Write bundles grouped per demo.

    groups is a sequence of (demo_id, episode_seed, f0, episode_triad,
    [GuidanceBundle, ...]).
    """
    groups = list(groups)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "bundle_set",
            "schema": SCHEMA_VERSION,
            "task": task_id,
            "config_hash": config_hash,
            "n_demos": len(groups),
        }
        header.update(horizon_meta)
        fh.write(_dumps(header) + "\n")
        for demo_id, episode_seed, f0, episode_triad, bundles in groups:
            fh.write(_dumps({
                "kind": "bundle_demo",
                "demo_id": int(demo_id),
                "episode_seed": int(episode_seed),
                "n_bundles": len(bundles),
                "f0": _floats(f0),
                "episode_triad": _floats(episode_triad),
            }) + "\n")
            for b in bundles:
                fh.write(_dumps({
                    "kind": "bundle",
                    "demo_id": int(demo_id),
                    "t": int(b.t),
                    "obs": _encode_step(b.obs),
                    "seed_triad": _floats(b.seed_triad),
                    "keypose_indices": [int(i) for i in b.keypose_indices],
                    "keypose_actions": _floats(b.keypose_actions),
                    "pointflow_targets": _floats(b.pointflow.targets),
                    "delta_window": _floats(b.delta_window),
                    "segment_lens": [int(x) for x in b.segment_lens],
                    "segment_seeds": _floats(b.segment_seeds),
                    "continuous": _floats(b.continuous),
                }) + "\n")


def load_bundles(path) -> tuple:
    """Read back (meta, [GuidanceBundle, ...]) with per-demo clouds restored."""
    meta = None
    bundles = []
    group = {}
    for lineno, rec in _read_records(path, "bundle_set"):
        kind = rec["kind"]
        try:
            if kind == "bundle_set":
                meta = rec
            elif kind == "bundle_demo":
                n_points = meta["n_points"]
                group[rec["demo_id"]] = {
                    "f0": np.array(rec["f0"]).reshape(n_points, 3),
                    "episode_triad": np.array(rec["episode_triad"]),
                }
            elif kind == "bundle":
                g = group[rec["demo_id"]]
                h_k = meta["h_k"]
                h_c = meta["h_c"]
                n_points = meta["n_points"]
                seg_lens = np.array(rec["segment_lens"], dtype=int)
                window_len = int(seg_lens.sum())
                bundles.append(GuidanceBundle(
                    t=int(rec["t"]),
                    obs=_decode_step(rec["obs"]),
                    episode_triad=g["episode_triad"].copy(),
                    seed_triad=np.array(rec["seed_triad"]),
                    keypose_indices=np.array(rec["keypose_indices"], dtype=int),
                    keypose_actions=np.array(rec["keypose_actions"]).reshape(h_k, 16),
                    pointflow=Pointflow(
                        g["f0"].copy(),
                        np.array(rec["pointflow_targets"]).reshape(h_k, n_points, 3),
                    ),
                    delta_window=np.array(rec["delta_window"]).reshape(window_len, 21),
                    segment_lens=seg_lens,
                    segment_seeds=np.array(rec["segment_seeds"]).reshape(h_k, 21),
                    continuous=np.array(rec["continuous"]).reshape(h_c, 16),
                ))
            else:
                raise DataFormatError(
                    f"{path}: line {lineno}: unknown kind {kind!r}"
                )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, DataFormatError):
                raise
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    if meta is None:
        raise DataFormatError(f"{path}: empty bundle file")
    return meta, bundles


# -- CSV exports --------------------------------------------------------------


def trace_to_csv(trace, path) -> None:
    """Per-step world-state table: arm poses, openness, object poses, flags."""
    trace = list(trace)
    n_objects = len(trace[0].object_poses)
    header = ["step"]
    for arm in ("left", "right"):
        header += [f"{arm}_{c}" for c in ("x", "y", "z", "qx", "qy", "qz", "qw")]
        header.append(f"{arm}_open")
    for i in range(n_objects):
        header += [f"obj{i}_{c}" for c in ("x", "y", "z", "qx", "qy", "qz", "qw")]
        header.append(f"obj{i}_attached")
    header += ["collision", "drop"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for state in trace:
            row = [state.step_count]
            row += [repr(v) for v in state.left.as_array()] + [repr(state.left_open)]
            row += [repr(v) for v in state.right.as_array()] + [repr(state.right_open)]
            for i, pose in enumerate(state.object_poses):
                row += [repr(v) for v in pose.as_array()]
                row.append("+".join(state.attached_arms(i)) or "none")
            row += [int(state.collision_event), int(state.drop_event)]
            writer.writerow(row)


def demo_to_csv(demo: Demonstration, path) -> None:
    """Per-step demonstration table: poses, openness, speeds."""
    n_objects = demo.n_objects
    header = ["t"]
    for arm in ("left", "right"):
        header += [f"{arm}_{c}" for c in ("x", "y", "z", "qx", "qy", "qz", "qw")]
        header.append(f"{arm}_open")
    for i in range(n_objects):
        header += [f"obj{i}_{c}" for c in ("x", "y", "z", "qx", "qy", "qz", "qw")]
    header += ["speed_left", "speed_right"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in demo.steps:
            row = [s.index]
            row += [repr(v) for v in s.left.as_array()] + [repr(s.left_open)]
            row += [repr(v) for v in s.right.as_array()] + [repr(s.right_open)]
            for pose in s.object_poses:
                row += [repr(v) for v in pose.as_array()]
            row += [repr(s.speed_left), repr(s.speed_right)]
            writer.writerow(row)
