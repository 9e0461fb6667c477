"""Conditional network with FiLM modulation realizing the hierarchical
prediction order: object pointflow first, then the autoregressive triad
segment chain, then keypose denoising, then continuous-action denoising.

One forward implementation serves training, inference, and every ablation
variant; variants only mask or sparsify conditioning inputs. Proprioception
and the diffusion step reach the network exclusively through FiLM, so
identity-FiLM leaves the trunk blind to both. Dynamic guidance signals
(predicted pointflow and triad states) condition the action heads as
detached values; each head carries its own loss term.
"""

import json
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .diffusion import LossWeights, NoiseSchedule, recover_clean
from .geometry import TriadVector
from .signals import ACTION_DIM, GuidanceBundle, accumulate_window
from .nn import Tensor, concat, film, linear, tanh

__all__ = [
    "DenoiserConfig",
    "TrainConfig",
    "AblationMask",
    "ablation_mask",
    "init_params",
    "param_names",
    "count_params",
    "Conditioning",
    "conditioning_from_bundle",
    "forward",
    "predict_pointflow",
    "predict_triad_segment",
    "predict_keypose_noise",
    "predict_continuous_noise",
    "train",
    "TrainResult",
    "generate_actions",
    "GeneratedPlan",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture and signal-layout hyperparameters."""

    width: int = 256
    depth: int = 4
    head_hidden: int = 256
    triad_hidden: int = 128
    point_hidden: int = 32
    point_ctx: int = 16
    temb_dim: int = 64
    task_emb_dim: int = 8
    n_tasks: int = 4
    n_objects: int = 1
    n_points: int = 200
    h_c: int = 50
    h_k: int = 4
    h_max: int = 48   # per-segment delta cap
    n_taps: int = 16  # triad-segment resampling fed to the continuous head

    @property
    def proprio_dim(self) -> int:
        return ACTION_DIM

    @property
    def scene_dim(self) -> int:
        return self.n_objects * 7 + 6  # object poses + cloud mean/extent

    @property
    def film_dim(self) -> int:
        return self.proprio_dim + self.temb_dim

    @property
    def trunk_in_dim(self) -> int:
        return self.scene_dim + 21 + 21 + self.task_emb_dim

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DenoiserConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class AblationMask:
    """Which conditioning inputs the action heads get to see."""

    triad_taps: bool = True        # continuous head sees the triad segment
    triad_at_keypose: bool = True  # keypose head sees triad states at keyposes
    keypose_cond: bool = True      # continuous head sees the denoised keyposes
    sparse_stride: int = 0         # >0: hold triad values every k steps

ABLATION_MODES = ("full", "keypose-only", "continuous-only", "sparse-5", "sparse-10")


def ablation_mask(mode: str) -> AblationMask:
    if mode == "full":
        return AblationMask()
    if mode == "keypose-only":
        return AblationMask(triad_taps=False)
    if mode == "continuous-only":
        return AblationMask(triad_at_keypose=False, keypose_cond=False)
    if mode in ("sparse-5", "sparse-10"):
        return AblationMask(sparse_stride=int(mode.split("-")[1]))
    raise ValueError(f"unknown ablation mode {mode!r}")


# -- parameters ---------------------------------------------------------------


def _shapes(cfg: DenoiserConfig) -> dict:
    shapes = {
        "task_emb": (cfg.n_tasks, cfg.task_emb_dim),
        "trunk_in_w": (cfg.trunk_in_dim, cfg.width),
        "trunk_in_b": (cfg.width,),
    }
    for i in range(cfg.depth):
        shapes[f"blk{i}_w1"] = (cfg.width, cfg.width)
        shapes[f"blk{i}_b1"] = (cfg.width,)
        shapes[f"blk{i}_w2"] = (cfg.width, cfg.width)
        shapes[f"blk{i}_b2"] = (cfg.width,)
        shapes[f"film_blk{i}_w"] = (cfg.film_dim, 2 * cfg.width)
        shapes[f"film_blk{i}_b"] = (2 * cfg.width,)
    shapes.update({
        "pf_ctx_w": (cfg.width, cfg.point_ctx),
        "pf_ctx_b": (cfg.point_ctx,),
        "pf_h_w": (3 + cfg.point_ctx, cfg.point_hidden),
        "pf_h_b": (cfg.point_hidden,),
        "film_pf_w": (cfg.film_dim, 2 * cfg.point_hidden),
        "film_pf_b": (2 * cfg.point_hidden,),
        "pf_out_w": (cfg.point_hidden, 3 * cfg.h_k),
        "pf_out_b": (3 * cfg.h_k,),
        "tri_h_w": (cfg.width + 21, cfg.triad_hidden),
        "tri_h_b": (cfg.triad_hidden,),
        "film_tri_w": (cfg.film_dim, 2 * cfg.triad_hidden),
        "film_tri_b": (2 * cfg.triad_hidden,),
        "tri_out_w": (cfg.triad_hidden, cfg.h_max * 21),
        "tri_out_b": (cfg.h_max * 21,),
    })
    kin = cfg.width + cfg.h_k * ACTION_DIM + cfg.h_k * 3 + cfg.h_k * 21
    shapes.update({
        "kp_h_w": (kin, cfg.head_hidden),
        "kp_h_b": (cfg.head_hidden,),
        "film_kp_w": (cfg.film_dim, 2 * cfg.head_hidden),
        "film_kp_b": (2 * cfg.head_hidden,),
        "kp_out_w": (cfg.head_hidden, cfg.h_k * ACTION_DIM),
        "kp_out_b": (cfg.h_k * ACTION_DIM,),
    })
    cin = (cfg.width + cfg.h_c * ACTION_DIM + cfg.h_k * 3
           + cfg.n_taps * 21 + cfg.h_k * ACTION_DIM)
    shapes.update({
        "ct_h_w": (cin, cfg.head_hidden),
        "ct_h_b": (cfg.head_hidden,),
        "film_ct_w": (cfg.film_dim, 2 * cfg.head_hidden),
        "film_ct_b": (2 * cfg.head_hidden,),
        "ct_out_w": (cfg.head_hidden, cfg.h_c * ACTION_DIM),
        "ct_out_b": (cfg.h_c * ACTION_DIM,),
    })
    return shapes

# Output layers of the four heads and every FiLM generator start at zero, so
# an untrained network predicts zero noise, zero deltas, and an identity FiLM.
_ZERO_INIT_PREFIXES = ("film_", "pf_out", "tri_out", "kp_out", "ct_out")


def param_names(cfg: DenoiserConfig) -> list:
    return sorted(_shapes(cfg))


def init_params(cfg: DenoiserConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name in param_names(cfg):
        shape = _shapes(cfg)[name]
        if name.startswith(_ZERO_INIT_PREFIXES) or name.endswith("_b"):
            data = np.zeros(shape)
        else:
            data = nn.trunc_normal(rng, shape, std=0.02)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(params: dict) -> int:
    return sum(p.data.size for p in params.values())


# -- conditioning -------------------------------------------------------------


@dataclass(frozen=True)
class Conditioning:
    """Fixed-layout observation inputs for one decision point.

    Field order matches the documented conditioning layout: proprioception
    (left pose+openness, right pose+openness), scene features (object poses
    then cloud mean and extent), episode-initial triad, current triad, task
    id, and the initial object cloud.
    """

    proprio: np.ndarray       # (16,)
    scene: np.ndarray         # (n_objects*7 + 6,)
    episode_triad: np.ndarray  # (21,)
    seed_triad: np.ndarray    # (21,)
    task_id: int
    f0: np.ndarray            # (N, 3)


def scene_features(object_poses, f0: np.ndarray) -> np.ndarray:
    parts = [p.as_array() for p in object_poses]
    parts.append(f0.mean(axis=0))
    parts.append(f0.max(axis=0) - f0.min(axis=0))
    return np.concatenate(parts)


def conditioning_from_bundle(bundle: GuidanceBundle, task_id: int) -> Conditioning:
    obs = bundle.obs
    f0 = bundle.pointflow.initial
    return Conditioning(
        proprio=obs.action(),
        scene=scene_features(obs.object_poses, f0),
        episode_triad=bundle.episode_triad,
        seed_triad=bundle.seed_triad,
        task_id=task_id,
        f0=f0,
    )


# -- forward pass -------------------------------------------------------------


def _film_slot(params: dict, name: str, cond: Tensor, dim: int):
    out = linear(cond, params[f"film_{name}_w"], params[f"film_{name}_b"])
    return out[:, :dim], out[:, dim:]


def _trunk(params: dict, cfg: DenoiserConfig, trunk_in: Tensor,
           film_cond: Tensor) -> Tensor:
    h = tanh(linear(trunk_in, params["trunk_in_w"], params["trunk_in_b"]))
    for i in range(cfg.depth):
        u = tanh(linear(h, params[f"blk{i}_w1"], params[f"blk{i}_b1"]))
        s, b = _film_slot(params, f"blk{i}", film_cond, cfg.width)
        u = film(u, s, b)
        h = h + tanh(linear(u, params[f"blk{i}_w2"], params[f"blk{i}_b2"]))
    return h


def _resample_taps(seq: np.ndarray, n_taps: int, stride: int) -> np.ndarray:
    """Fixed-size taps of a per-step (L+1, 21) triad sequence.

    stride > 0 first sparsifies the sequence by holding the value observed
    every ``stride`` steps, which is what the sparse guidance variants see.
    """
    if stride > 0:
        held = seq[(np.arange(len(seq)) // stride) * stride]
    else:
        held = seq
    positions = np.linspace(0, len(held) - 1, n_taps).round().astype(int)
    return held[positions]


@dataclass
class ForwardOut:
    pf_pred: Tensor           # (B, N, h_k, 3) residual-added point targets
    delta_pred: Tensor        # (B, h_k, h_max, 21)
    eps_keypose: Tensor       # (B, h_k*16)
    eps_continuous: Tensor    # (B, h_c*16)
    pf_summary: np.ndarray    # (B, h_k*3) detached per-keypose centroids
    triad_at_keypose: np.ndarray  # (B, h_k, 21) detached chain states
    triad_sequences: list     # per sample: (L+1, 21) predicted window
    x0_keypose: np.ndarray    # (B, h_k*16) detached denoised keypose estimate


def forward(params: dict, cfg: DenoiserConfig, sched: NoiseSchedule,
            conds: list, steps: np.ndarray, noisy_keypose: np.ndarray,
            noisy_continuous: np.ndarray, segment_lens: np.ndarray,
            segment_seeds: np.ndarray | None = None,
            mask: AblationMask = AblationMask()) -> ForwardOut:
    """Single forward pass shared by training, inference, and ablations.

    ``segment_seeds`` (B, h_k, 21) teacher-forces the triad chain; when None
    the chain seeds itself from each condition's current triad and feeds each
    segment's final state into the next (inference mode).
    """
    b = len(conds)
    chained = segment_seeds is None
    proprio = np.stack([c.proprio for c in conds])
    temb = nn.timestep_embedding(np.asarray(steps, dtype=np.float64), cfg.temb_dim)
    film_cond = Tensor(np.concatenate([proprio, temb], axis=1))

    task_onehot = np.zeros((b, cfg.n_tasks))
    task_onehot[np.arange(b), [c.task_id for c in conds]] = 1.0
    task_emb = Tensor(task_onehot) @ params["task_emb"]
    trunk_in = concat(
        [
            Tensor(np.stack([c.scene for c in conds])),
            Tensor(np.stack([c.episode_triad for c in conds])),
            Tensor(np.stack([c.seed_triad for c in conds])),
            task_emb,
        ],
        axis=1,
    )
    trunk = _trunk(params, cfg, trunk_in, film_cond)

    # 1) One-shot pointflow: per-point residual displacements on F0.
    f0 = np.stack([c.f0 for c in conds])  # (B, N, 3)
    n = cfg.n_points
    ctx = tanh(linear(trunk, params["pf_ctx_w"], params["pf_ctx_b"]))
    point_in = concat(
        [Tensor(f0.reshape(b * n, 3)), ctx.repeat_rows(n)], axis=1
    )
    ph = tanh(linear(point_in, params["pf_h_w"], params["pf_h_b"]))
    ps, pb = _film_slot(params, "pf", film_cond.repeat_rows(n), cfg.point_hidden)
    ph = film(ph, ps, pb)
    pf_resid = linear(ph, params["pf_out_w"], params["pf_out_b"])
    pf_pred = pf_resid.reshape(b, n, cfg.h_k, 3) + Tensor(f0[:, :, None, :])
    pf_summary = pf_pred.data.mean(axis=1).reshape(b, cfg.h_k * 3)  # detached

    # 2) Autoregressive triad segments, one head call per keypose segment.
    if chained:
        seeds = np.zeros((b, cfg.h_k, 21))
        seeds[:, 0, :] = np.stack([c.seed_triad for c in conds])
    else:
        seeds = np.asarray(segment_seeds, dtype=np.float64)
    delta_blocks = []
    triad_at_kp = np.zeros((b, cfg.h_k, 21))
    triad_seqs = [None] * b
    for j in range(cfg.h_k):
        seed_t = Tensor(seeds[:, j, :])
        th = tanh(linear(concat([trunk, seed_t], axis=1),
                         params["tri_h_w"], params["tri_h_b"]))
        ts_, tb_ = _film_slot(params, "tri", film_cond, cfg.triad_hidden)
        th = film(th, ts_, tb_)
        block = linear(th, params["tri_out_w"], params["tri_out_b"])
        delta_blocks.append(block.reshape(b, 1, cfg.h_max, 21))
        # Detached chain reconstruction per sample.
        for s in range(b):
            length = int(segment_lens[s, j])
            deltas = block.data[s].reshape(cfg.h_max, 21)[:length]
            seq = accumulate_window(seeds[s, j], deltas, degenerate="hold")
            triad_at_kp[s, j] = seq[-1]
            triad_seqs[s] = (
                seq if triad_seqs[s] is None
                else np.concatenate([triad_seqs[s], seq[1:]], axis=0)
            )
            if chained and j + 1 < cfg.h_k:
                seeds[s, j + 1] = seq[-1]
    delta_pred = concat(delta_blocks, axis=1)

    # 3) Keypose denoising, conditioned on pointflow and the triad chain
    #    states at the keypose timesteps.
    kp_triad = triad_at_kp if mask.triad_at_keypose else np.zeros_like(triad_at_kp)
    kin = concat(
        [
            trunk,
            Tensor(noisy_keypose),
            Tensor(pf_summary),
            Tensor(kp_triad.reshape(b, cfg.h_k * 21)),
        ],
        axis=1,
    )
    kh = tanh(linear(kin, params["kp_h_w"], params["kp_h_b"]))
    ks, kb = _film_slot(params, "kp", film_cond, cfg.head_hidden)
    kh = film(kh, ks, kb)
    eps_keypose = linear(kh, params["kp_out_w"], params["kp_out_b"])

    # Current-step denoised keypose estimate (detached) conditions the
    # continuous head.
    abar = sched.alpha_bars[np.asarray(steps, dtype=int)][:, None]
    x0_keypose = (noisy_keypose - np.sqrt(1.0 - abar) * eps_keypose.data) / np.sqrt(abar)
    ct_keypose = x0_keypose if mask.keypose_cond else np.zeros_like(x0_keypose)

    # 4) Continuous denoising, conditioned on everything above plus the full
    #    (optionally sparsified) triad segment.
    taps = np.zeros((b, cfg.n_taps * 21))
    if mask.triad_taps:
        for s in range(b):
            taps[s] = _resample_taps(
                triad_seqs[s], cfg.n_taps, mask.sparse_stride
            ).reshape(-1)
    cin = concat(
        [
            trunk,
            Tensor(noisy_continuous),
            Tensor(pf_summary),
            Tensor(taps),
            Tensor(ct_keypose),
        ],
        axis=1,
    )
    ch = tanh(linear(cin, params["ct_h_w"], params["ct_h_b"]))
    cs, cb = _film_slot(params, "ct", film_cond, cfg.head_hidden)
    ch = film(ch, cs, cb)
    eps_continuous = linear(ch, params["ct_out_w"], params["ct_out_b"])

    return ForwardOut(
        pf_pred=pf_pred,
        delta_pred=delta_pred,
        eps_keypose=eps_keypose,
        eps_continuous=eps_continuous,
        pf_summary=pf_summary,
        triad_at_keypose=triad_at_kp,
        triad_sequences=triad_seqs,
        x0_keypose=x0_keypose,
    )


# -- spec-level prediction surfaces -------------------------------------------


def _single(params, cfg, sched, cond, step, noisy_k=None, noisy_c=None,
            segment_lens=None, segment_seeds=None, mask=AblationMask()):
    nk = np.zeros((1, cfg.h_k * ACTION_DIM)) if noisy_k is None else noisy_k[None]
    nc = np.zeros((1, cfg.h_c * ACTION_DIM)) if noisy_c is None else noisy_c[None]
    lens = (np.full((1, cfg.h_k), cfg.h_max, dtype=int)
            if segment_lens is None else np.asarray(segment_lens, dtype=int)[None])
    seeds = None if segment_seeds is None else np.asarray(segment_seeds)[None]
    return forward(params, cfg, sched, [cond], np.array([step]), nk, nc,
                   lens, seeds, mask)


def predict_pointflow(params: dict, cfg: DenoiserConfig, sched: NoiseSchedule,
                      cond: Conditioning, step: int = 0) -> np.ndarray:
    """Deterministic (h_k, N, 3) pointflow prediction for one condition."""
    out = _single(params, cfg, sched, cond, step)
    return out.pf_pred.data[0].transpose(1, 0, 2)


def predict_triad_segment(params: dict, cfg: DenoiserConfig,
                          sched: NoiseSchedule, cond: Conditioning,
                          r_prev: TriadVector, segment_len: int,
                          step: int = 0) -> list:
    """Emit per-step triad states for one segment seeded at r_prev.

    The returned list holds ``segment_len`` reconstructed TriadVector states;
    the last one seeds the next segment when chaining.
    """
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    if segment_len > cfg.h_max:
        raise ValueError(f"segment_len exceeds the configured cap {cfg.h_max}")
    seeded = replace(cond, seed_triad=r_prev.values)
    lens = np.zeros(cfg.h_k, dtype=int)
    lens[0] = segment_len
    out = _single(params, cfg, sched, seeded, step, segment_lens=lens)
    seq = out.triad_sequences[0]
    return [TriadVector(seq[j]) for j in range(1, segment_len + 1)]


def predict_keypose_noise(params: dict, cfg: DenoiserConfig,
                          sched: NoiseSchedule, cond: Conditioning,
                          noisy_keyposes: np.ndarray, step: int,
                          mask: AblationMask = AblationMask()) -> np.ndarray:
    out = _single(params, cfg, sched, cond, step,
                  noisy_k=np.asarray(noisy_keyposes).reshape(-1), mask=mask)
    return out.eps_keypose.data[0].reshape(cfg.h_k, ACTION_DIM)


def predict_continuous_noise(params: dict, cfg: DenoiserConfig,
                             sched: NoiseSchedule, cond: Conditioning,
                             noisy_actions: np.ndarray, step: int,
                             mask: AblationMask = AblationMask()) -> np.ndarray:
    out = _single(params, cfg, sched, cond, step,
                  noisy_c=np.asarray(noisy_actions).reshape(-1), mask=mask)
    return out.eps_continuous.data[0].reshape(cfg.h_c, ACTION_DIM)


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    val_interval: int = 250
    log_interval: int = 50


@dataclass
class CompiledDataset:
    """Bundles flattened into indexable arrays for fast minibatching."""

    conds: list
    keypose_clean: np.ndarray    # (n, h_k*16)
    continuous_clean: np.ndarray  # (n, h_c*16)
    pf_targets: np.ndarray       # (n, N, h_k, 3)
    delta_targets: np.ndarray    # (n, h_k, h_max, 21)
    delta_mask: np.ndarray       # (n, h_k, h_max, 1)
    segment_lens: np.ndarray     # (n, h_k)
    segment_seeds: np.ndarray    # (n, h_k, 21)

    def __len__(self):
        return len(self.conds)


def compile_dataset(bundles: list, cfg: DenoiserConfig,
                    task_id: int = 0) -> CompiledDataset:
    n = len(bundles)
    conds = [conditioning_from_bundle(b, task_id) for b in bundles]
    kp = np.stack([b.keypose_actions.reshape(-1) for b in bundles])
    ct = np.stack([b.continuous.reshape(-1) for b in bundles])
    pf = np.stack([b.pointflow.targets.transpose(1, 0, 2) for b in bundles])
    deltas = np.zeros((n, cfg.h_k, cfg.h_max, 21))
    mask = np.zeros((n, cfg.h_k, cfg.h_max, 1))
    lens = np.zeros((n, cfg.h_k), dtype=int)
    seeds = np.zeros((n, cfg.h_k, 21))
    for s, b in enumerate(bundles):
        seeds[s] = b.segment_seeds
        start = 0
        for j, seg_len in enumerate(b.segment_lens):
            seg_len = int(min(seg_len, cfg.h_max))
            lens[s, j] = seg_len
            if seg_len > 0:
                deltas[s, j, :seg_len] = b.delta_window[start:start + seg_len]
                mask[s, j, :seg_len, 0] = 1.0
            start += int(b.segment_lens[j])
    return CompiledDataset(conds, kp, ct, pf, deltas, mask, lens, seeds)


def _batch_loss(params, cfg, sched, data: CompiledDataset, idx, steps, eps_k,
                eps_c, weights: LossWeights, mask: AblationMask):
    conds = [data.conds[i] for i in idx]
    abar = sched.alpha_bars[steps][:, None]
    noisy_k = np.sqrt(abar) * data.keypose_clean[idx] + np.sqrt(1 - abar) * eps_k
    noisy_c = np.sqrt(abar) * data.continuous_clean[idx] + np.sqrt(1 - abar) * eps_c
    out = forward(params, cfg, sched, conds, steps, noisy_k, noisy_c,
                  data.segment_lens[idx], data.segment_seeds[idx], mask)

    loss_c = (out.eps_continuous - Tensor(eps_c)).abs().mean()
    loss_k = (out.eps_keypose - Tensor(eps_k)).abs().mean()
    loss_pf = (out.pf_pred - Tensor(data.pf_targets[idx])).abs().mean()
    dmask = data.delta_mask[idx]
    count = dmask.sum() * 21
    if count > 0:
        diff = (out.delta_pred - Tensor(data.delta_targets[idx])).abs()
        loss_tri = (diff * Tensor(dmask)).sum() * (1.0 / count)
    else:
        loss_tri = Tensor(np.zeros(())) * 0.0
    total = (weights.w_c * loss_c + weights.w_k * loss_k
             + weights.w_pf * loss_pf + weights.w_triad * loss_tri)
    terms = {
        "continuous": float(loss_c.data),
        "keypose": float(loss_k.data),
        "pointflow": float(loss_pf.data),
        "triad": float(loss_tri.data),
    }
    return total, terms


def _eval_loss(params, cfg, sched, data: CompiledDataset, idx, weights, mask,
               seed: int) -> float:
    """Deterministic validation loss over fixed noise draws."""
    if len(idx) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    total_sum = 0.0
    for lo in range(0, len(idx), 64):
        chunk = idx[lo:lo + 64]
        steps = rng.integers(0, sched.num_steps, size=len(chunk))
        eps_k = rng.standard_normal((len(chunk), cfg.h_k * ACTION_DIM))
        eps_c = rng.standard_normal((len(chunk), cfg.h_c * ACTION_DIM))
        total, _ = _batch_loss(params, cfg, sched, data, chunk, steps, eps_k,
                               eps_c, weights, mask)
        total_sum += float(total.data) * len(chunk)
    return total_sum / len(idx)


@dataclass
class TrainResult:
    params: dict            # final parameters (resume state)
    best_params: dict       # lowest-validation-loss snapshot
    best_val: float
    best_step: int
    curve: list             # rows: (step, L_c, L_k, L_pf, L_tri, total, lr, val)
    optimizer_state: dict
    rng_state: dict
    steps_done: int


def train(params: dict, bundles_or_data, cfg: DenoiserConfig,
          sched: NoiseSchedule, weights: LossWeights, tc: TrainConfig,
          mask: AblationMask = AblationMask(),
          resume: dict | None = None) -> TrainResult:
    """Minibatch diffusion training over guidance bundles.

    Per step: sample bundles, one diffusion step each, gaussian noise for the
    two action targets; all four loss terms are backpropagated jointly under
    AdamW with cosine-decayed learning rate. Deterministic given the seed.
    ``resume`` restores optimizer/rng state to continue a checkpointed run.
    """
    data = (bundles_or_data if isinstance(bundles_or_data, CompiledDataset)
            else compile_dataset(bundles_or_data, cfg))
    if len(data) == 0:
        raise ValueError("empty dataset")
    split_rng = np.random.default_rng(tc.seed + 7919)
    order = split_rng.permutation(len(data))
    n_val = int(len(data) * tc.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order

    opt = nn.AdamW(params, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    start_step = 0
    best_params = {k: p.data.copy() for k, p in params.items()}
    best_val, best_step = float("inf"), 0
    curve = []
    if resume is not None:
        opt.load_state(resume["optimizer_state"])
        rng.bit_generator.state = resume["rng_state"]
        start_step = resume["steps_done"]
        best_params = {k: v.copy() for k, v in resume["best_params"].items()}
        best_val = resume["best_val"]
        best_step = resume["best_step"]

    last_total = None
    for step in range(start_step, tc.steps):
        idx = rng.integers(0, len(train_idx), size=tc.batch_size)
        batch = train_idx[idx]
        dsteps = rng.integers(0, sched.num_steps, size=tc.batch_size)
        eps_k = rng.standard_normal((tc.batch_size, cfg.h_k * ACTION_DIM))
        eps_c = rng.standard_normal((tc.batch_size, cfg.h_c * ACTION_DIM))
        opt.zero_grad()
        total, terms = _batch_loss(params, cfg, sched, data, batch, dsteps,
                                   eps_k, eps_c, weights, mask)
        if not np.isfinite(total.data):
            raise FloatingPointError(
                f"non-finite training loss at step {step}: {terms}"
            )
        total.backward()
        lr = nn.cosine_lr(tc.lr, step, tc.steps)
        opt.step(lr)
        last_total = float(total.data)

        is_val_step = (step + 1) % tc.val_interval == 0 or step + 1 == tc.steps
        val = None
        if is_val_step and len(val_idx) > 0:
            val = _eval_loss(params, cfg, sched, data, val_idx, weights,
                             mask, seed=tc.seed + 104729)
            if val < best_val:
                best_val = val
                best_step = step + 1
                best_params = {k: p.data.copy() for k, p in params.items()}
        if step % tc.log_interval == 0 or step + 1 == tc.steps or val is not None:
            curve.append((step, terms["continuous"], terms["keypose"],
                          terms["pointflow"], terms["triad"],
                          last_total, lr, val))

    if best_val == float("inf"):
        # No validation split: the final parameters are the selection.
        best_params = {k: p.data.copy() for k, p in params.items()}
        best_val = last_total if last_total is not None else float("nan")
        best_step = tc.steps
    return TrainResult(
        params=params,
        best_params=best_params,
        best_val=best_val,
        best_step=best_step,
        curve=curve,
        optimizer_state=opt.state(),
        rng_state=rng.bit_generator.state,
        steps_done=tc.steps,
    )


# -- inference -----------------------------------------------------------------


@dataclass
class GeneratedPlan:
    actions: np.ndarray        # (h_c, 16) clean continuous actions
    keyposes: np.ndarray       # (h_k, 16)
    pointflow: np.ndarray      # (h_k, N, 3)
    triad_sequence: np.ndarray  # (L+1, 21) predicted triad window


def _sanitize_actions(arr: np.ndarray) -> np.ndarray:
    """Renormalize quaternion components and clamp openness in-place."""
    out = arr.copy()
    for row in out:
        for base in (3, 11):
            q = row[base:base + 4]
            norm = np.linalg.norm(q)
            if norm < 1e-8:
                row[base:base + 4] = (0.0, 0.0, 0.0, 1.0)
            else:
                q /= norm
                if q[3] < 0:
                    q *= -1.0
        row[7] = np.clip(row[7], 0.0, 1.0)
        row[15] = np.clip(row[15], 0.0, 1.0)
    return out


def generate_actions(params: dict, cfg: DenoiserConfig, sched: NoiseSchedule,
                     cond: Conditioning, rng: np.random.Generator,
                     sampler: str = "ddim", sampler_steps: int = 20,
                     eta: float = 0.0, segment_len: int = 30,
                     mask: AblationMask = AblationMask()) -> GeneratedPlan:
    """Hierarchical conditional sampling at one decision point.

    Every denoising step re-predicts pointflow and the chained triad segment
    as dynamic guidance, then denoises the keypose tokens one step, then the
    continuous tokens one step. Deterministic given the rng (and bitwise so
    for DDIM with eta=0).
    """
    from .diffusion import ddim_step, ddim_stride, ddpm_step

    x_k = rng.standard_normal(cfg.h_k * ACTION_DIM)
    x_c = rng.standard_normal(cfg.h_c * ACTION_DIM)
    seg_len = int(min(segment_len, cfg.h_max))
    lens = np.full((1, cfg.h_k), seg_len, dtype=int)

    if sampler == "ddpm":
        schedule_steps = list(range(sched.num_steps - 1, -1, -1))
    elif sampler == "ddim":
        schedule_steps = [int(i) for i in ddim_stride(sched.num_steps, sampler_steps)]
    else:
        raise ValueError(f"unknown sampler {sampler!r}")

    out = None
    for pos, i in enumerate(schedule_steps):
        out = forward(params, cfg, sched, [cond], np.array([i]), x_k[None],
                      x_c[None], lens, segment_seeds=None, mask=mask)
        ek = out.eps_keypose.data[0]
        ec = out.eps_continuous.data[0]
        if sampler == "ddpm":
            x_k = ddpm_step(x_k, ek, i, sched, rng)
            x_c = ddpm_step(x_c, ec, i, sched, rng)
        else:
            i_prev = schedule_steps[pos + 1] if pos + 1 < len(schedule_steps) else -1
            x_k = ddim_step(x_k, ek, i, i_prev, sched, eta, rng)
            x_c = ddim_step(x_c, ec, i, i_prev, sched, eta, rng)

    actions = _sanitize_actions(x_c.reshape(cfg.h_c, ACTION_DIM))
    keyposes = _sanitize_actions(x_k.reshape(cfg.h_k, ACTION_DIM))
    return GeneratedPlan(
        actions=actions,
        keyposes=keyposes,
        pointflow=out.pf_pred.data[0].transpose(1, 0, 2),
        triad_sequence=out.triad_sequences[0],
    )


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(path, params: dict, cfg: DenoiserConfig,
                    result: TrainResult, config_hash: str,
                    data_hash: str) -> None:
    """Versioned container: metadata, parameter tensors in documented
    (sorted-name) order, best-validation snapshot, and optimizer state."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "data_hash": data_hash,
        "denoiser_config": cfg.to_json(),
        "param_names": sorted(params),
        "steps_done": result.steps_done,
        "best_val": result.best_val,
        "best_step": result.best_step,
        "rng_state": json.dumps(result.rng_state),
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, p in params.items():
        arrays[f"param/{name}"] = p.data
        arrays[f"best/{name}"] = result.best_params[name]
        arrays[f"m/{name}"] = result.optimizer_state["m"][name]
        arrays[f"v/{name}"] = result.optimizer_state["v"][name]
    arrays["opt_step_count"] = np.array(result.optimizer_state["step_count"])
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    """Returns dict with params, best_params (Tensor dicts), cfg, meta, and a
    resume payload for train()."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        names = meta["param_names"]
        params = {k: Tensor(z[f"param/{k}"].copy(), requires_grad=True) for k in names}
        best = {k: Tensor(z[f"best/{k}"].copy(), requires_grad=True) for k in names}
        resume = {
            "optimizer_state": {
                "step_count": int(z["opt_step_count"]),
                "m": {k: z[f"m/{k}"].copy() for k in names},
                "v": {k: z[f"v/{k}"].copy() for k in names},
            },
            "rng_state": json.loads(meta["rng_state"]),
            "steps_done": meta["steps_done"],
            "best_params": {k: z[f"best/{k}"].copy() for k in names},
            "best_val": meta["best_val"],
            "best_step": meta["best_step"],
        }
    return {
        "params": params,
        "best_params": best,
        "cfg": DenoiserConfig.from_json(meta["denoiser_config"]),
        "meta": meta,
        "resume": resume,
    }
