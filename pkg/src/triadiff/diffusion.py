"""Noise schedules, forward noising, DDPM/DDIM samplers, and the weighted
four-term L1 training objective.

Samplers take the denoiser as a callable ``eps_fn(x, i, condition)`` that
returns the predicted noise for a flat array ``x`` at integer step ``i``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "LossWeights",
    "make_schedule",
    "add_noise",
    "recover_clean",
    "ddpm_step",
    "ddpm_sample",
    "ddim_stride",
    "ddim_step",
    "ddim_sample",
    "l1_loss",
    "total_loss",
    "schedule_to_csv",
]

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
_COSINE_OFFSET = 8e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with cached per-step quantities."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a nonempty 1-D array")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)


def make_schedule(kind: str, num_steps: int,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a linear or cosine schedule with ``num_steps`` training steps."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, num_steps)
    elif kind == "cosine":
        s = _COSINE_OFFSET
        t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        f = np.cos((t + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas)


def add_noise(x0: np.ndarray, step: int, eps: np.ndarray,
              sched: NoiseSchedule) -> np.ndarray:
    """Forward process: sqrt(abar_i) * x0 + sqrt(1 - abar_i) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    if not 0 <= step < sched.num_steps:
        raise ValueError(f"step {step} outside schedule of {sched.num_steps}")
    abar = sched.alpha_bars[step]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def recover_clean(x_i: np.ndarray, step: int, eps: np.ndarray,
                  sched: NoiseSchedule) -> np.ndarray:
    """Invert add_noise given the same noise draw."""
    abar = sched.alpha_bars[step]
    return (x_i - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def ddpm_step(x: np.ndarray, eps_hat: np.ndarray, step: int,
              sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One ancestral reverse step from x_i to x_{i-1}."""
    beta = sched.betas[step]
    abar = sched.alpha_bars[step]
    mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(sched.alphas[step])
    if step == 0:
        return mean
    abar_prev = sched.alpha_bars[step - 1]
    var = (1.0 - abar_prev) / (1.0 - abar) * beta
    return mean + np.sqrt(var) * rng.standard_normal(x.shape)


def ddpm_sample(eps_fn, condition, shape, sched: NoiseSchedule,
                rng: np.random.Generator) -> np.ndarray:
    """Full ancestral chain over every schedule step, noise to sample."""
    x = rng.standard_normal(shape)
    for i in range(sched.num_steps - 1, -1, -1):
        x = ddpm_step(x, np.asarray(eps_fn(x, i, condition)), i, sched, rng)
    return x


def ddim_stride(num_train_steps: int, n_steps: int) -> np.ndarray:
    """Evenly strided descending sub-sequence of schedule steps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > num_train_steps:
        raise ValueError("n_steps cannot exceed the training schedule length")
    taus = np.unique(np.linspace(0, num_train_steps - 1, n_steps).round().astype(int))
    return taus[::-1]


def ddim_step(x: np.ndarray, eps_hat: np.ndarray, step: int, step_prev: int,
              sched: NoiseSchedule, eta: float,
              rng: np.random.Generator) -> np.ndarray:
    """One strided reverse step from schedule index step to step_prev (-1 ends)."""
    abar = sched.alpha_bars[step]
    abar_prev = sched.alpha_bars[step_prev] if step_prev >= 0 else 1.0
    x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(
        1.0 - abar / abar_prev
    )
    dir_coeff = np.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
    x_prev = np.sqrt(abar_prev) * x0_hat + dir_coeff * eps_hat
    if sigma > 0.0:
        x_prev = x_prev + sigma * rng.standard_normal(x.shape)
    return x_prev


def ddim_sample(eps_fn, condition, shape, sched: NoiseSchedule, n_steps: int,
                eta: float = 0.0, rng: np.random.Generator | None = None,
                x_init: np.ndarray | None = None) -> np.ndarray:
    """Strided reverse process; eta=0 is deterministic given x_init."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    taus = ddim_stride(sched.num_steps, n_steps)
    for k, i in enumerate(taus):
        i_prev = int(taus[k + 1]) if k + 1 < len(taus) else -1
        x = ddim_step(x, np.asarray(eps_fn(x, int(i), condition)), int(i), i_prev,
                      sched, eta, rng)
    return x


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss terms (continuous, keypose, pointflow, triad)."""

    w_c: float = 0.05
    w_k: float = 0.05
    w_pf: float = 1.0
    w_triad: float = 1.0

    def __post_init__(self):
        for name in ("w_c", "w_k", "w_pf", "w_triad"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred - target)))


def total_loss(preds: dict, targets: dict, weights: LossWeights) -> tuple[float, dict]:
    """Weighted sum of mean-absolute-error terms.

    ``preds`` and ``targets`` map the keys continuous/keypose/pointflow/triad
    to same-shaped arrays. Returns (total, per-term breakdown).
    """
    keys = ("continuous", "keypose", "pointflow", "triad")
    missing = [k for k in keys if k not in preds or k not in targets]
    if missing:
        raise ValueError(f"missing loss terms: {missing}")
    terms = {k: l1_loss(preds[k], targets[k]) for k in keys}
    w = (weights.w_c, weights.w_k, weights.w_pf, weights.w_triad)
    total = float(sum(wi * terms[k] for wi, k in zip(w, keys)))
    return total, terms


def schedule_to_csv(sched: NoiseSchedule, path) -> None:
    """Dump per-step schedule quantities for inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "beta", "alpha", "alpha_bar"])
        for i in range(sched.num_steps):
            writer.writerow(
                [i, repr(sched.betas[i]), repr(sched.alphas[i]), repr(sched.alpha_bars[i])]
            )
