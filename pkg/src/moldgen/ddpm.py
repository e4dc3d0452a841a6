"""Denoising diffusion over 3-channel depth samples.

Forward process:  x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, with
alpha_t = 1 - beta_t per step and abar_t their running product.

Reverse step:     x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat)
                            / sqrt(alpha_t) + sigma_t * z,
z drawn for t > 1 and suppressed at the final step.

The denoiser interface is a single shape-preserving predict_noise(x_t, t).
Two implementations ship: a small fully-connected network with a sinusoidal
time embedding (gradients by hand-written reverse-mode accumulation, checked
against finite differences) and a closed-form oracle for Gaussian data used
to verify the reverse dynamics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .depth_core import DepthSample, GridSpec, Norm
from .errors import (
    BadMagic,
    BadRange,
    EmptyDataset,
    IoFailure,
    NonFiniteLoss,
    ShapeMismatch,
    StepOutOfRange,
    TruncatedPayload,
    UnsupportedVersion,
)


class VarianceRule(Enum):
    BETA = "beta"            # sigma_t^2 = beta_t
    POSTERIOR = "posterior"  # sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray       # (T,) per-step variances, index t-1 holds step t
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    variance_rule: VarianceRule

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise StepOutOfRange(f"t={t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  variance_rule: VarianceRule = VarianceRule.BETA) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, cumulative alpha-bar, and sigma."""
    if T < 1:
        raise BadRange(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # factors in (0,1): product is monotone, no cancellation
    if variance_rule is VarianceRule.BETA:
        sigma = np.sqrt(beta)
    else:
        abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - alpha_bar))
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma, variance_rule)


def forward_diffuse(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw eps ~ N(0, I) and return (x_t, eps)."""
    t = schedule.check_step(t)
    x0 = np.asarray(x0)
    eps = rng.standard_normal(x0.shape)
    abar = schedule.alpha_bar[t - 1]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return x_t, eps


def reverse_step(x_t: np.ndarray, t: int, denoiser, schedule: NoiseSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    """One denoising step from x_t to x_{t-1}; the noise term is dropped at t=1."""
    t = schedule.check_step(t)
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(denoiser.predict_noise(x_t, t))
    if eps_hat.shape != x_t.shape:
        raise ShapeMismatch(
            f"denoiser returned shape {eps_hat.shape}, expected {x_t.shape}"
        )
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        return mean + schedule.sigma[t - 1] * rng.standard_normal(x_t.shape)
    return mean


def oracle_predict_noise(x_t: np.ndarray, t: int, schedule: NoiseSchedule,
                         mu, sigma0: float) -> np.ndarray:
    """Bayes-optimal noise estimate when x0 ~ N(mu, sigma0^2 I).

    With abar = abar_t the posterior mean of x0 given x_t is
    mu + sqrt(abar) sigma0^2 (x_t - sqrt(abar) mu) / (abar sigma0^2 + 1 - abar);
    substituting into eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar) collapses to
    sqrt(1 - abar) (x_t - sqrt(abar) mu) / (abar sigma0^2 + 1 - abar).
    """
    t = schedule.check_step(t)
    abar = schedule.alpha_bar[t - 1]
    x_t = np.asarray(x_t)
    return (np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * mu)
            / (abar * sigma0 ** 2 + 1.0 - abar))


@dataclass
class GaussianOracleDenoiser:
    """Closed-form denoiser for Gaussian data; a verification instrument."""

    schedule: NoiseSchedule
    mu: float | np.ndarray = 0.0
    sigma0: float = 1.0

    def predict_noise(self, x_t, t):
        return oracle_predict_noise(x_t, t, self.schedule, self.mu, self.sigma0)


# ---------------------------------------------------------------------------
# MLP denoiser with hand-written reverse-mode gradients
# ---------------------------------------------------------------------------


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of the integer step index; shape (..., dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class MlpDenoiser:
    """Fully connected eps-predictor on flattened samples plus a time embedding.

    Hidden layers use tanh (smooth, so finite-difference gradient checks are
    meaningful); the output layer is linear.  All parameters live in plain
    numpy arrays and gradients are accumulated by the explicit backward pass
    in `loss_and_grads`.
    """

    def __init__(self, sample_shape: tuple[int, int, int], hidden=(128,),
                 time_dim: int = 16, seed: int = 0, dtype=np.float32):
        self.sample_shape = tuple(sample_shape)
        self.time_dim = int(time_dim)
        self.dtype = np.dtype(dtype)
        self.hidden = tuple(int(h) for h in hidden)
        d = int(np.prod(self.sample_shape))
        dims = [d + self.time_dim, *self.hidden, d]
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        # keep the initial prediction near zero so training starts at loss ~ E|eps|^2
        self.weights[-1] *= 0.01

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0], *(w.shape[1] for w in self.weights)]

    @property
    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def _inputs(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        batched = x.ndim == 4
        flat = x.reshape(-1 if batched else 1, int(np.prod(self.sample_shape)))
        emb = time_embedding(np.broadcast_to(np.asarray(t), (flat.shape[0],)),
                             self.time_dim).astype(self.dtype)
        return np.concatenate([flat, emb], axis=1)

    def _forward(self, inputs: np.ndarray):
        acts = [inputs]
        h = inputs
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k != last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def predict_noise(self, x, t):
        """eps estimate with the same shape as x; x may carry a batch axis."""
        x = np.asarray(x)
        out, _ = self._forward(self._inputs(x, t))
        shape = x.shape if x.ndim == 4 else self.sample_shape
        return out.reshape(shape).astype(x.dtype, copy=False)

    def loss_and_grads(self, x_t, t, eps):
        """Mean squared error against eps and its parameter gradients."""
        inputs = self._inputs(x_t, t)
        target = np.asarray(eps, dtype=self.dtype).reshape(inputs.shape[0], -1)
        out, acts = self._forward(inputs)
        diff = out - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))

        grad_w = [np.empty_like(w) for w in self.weights]
        grad_b = [np.empty_like(b) for b in self.biases]
        delta = (2.0 / diff.size) * diff
        for k in range(len(self.weights) - 1, -1, -1):
            grad_w[k] = acts[k].T @ delta
            grad_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * (1.0 - acts[k] ** 2)
        return loss, grad_w, grad_b

    # -- flat parameter vector helpers (checkpoints, gradient checks) ------

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases)
                               for a in pair]).astype(np.float64)

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        pos = 0
        for k in range(len(self.weights)):
            for arr in (self.weights[k], self.biases[k]):
                n = arr.size
                arr[...] = flat[pos:pos + n].reshape(arr.shape).astype(self.dtype)
                pos += n
        if pos != flat.size:
            raise ShapeMismatch(f"parameter vector has {flat.size} entries, need {pos}")

    def flat_grads(self, grad_w, grad_b) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(grad_w, grad_b)
                               for a in pair]).astype(np.float64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.05
    seed: int = 0
    momentum: float = 0.9


@dataclass
class TrainReport:
    epoch_losses: list[float]
    optimizer: str
    lr: float
    seed: int

    @property
    def first_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]

    def write_csv(self, path) -> None:
        lines = ["epoch,loss"]
        lines += [f"{k},{v:.10g}" for k, v in enumerate(self.epoch_losses)]
        Path(path).write_text("\n".join(lines) + "\n")


def train(dataset, denoiser: MlpDenoiser, schedule: NoiseSchedule,
          opts: TrainOptions = TrainOptions()) -> TrainReport:
    """SGD-with-momentum training of the eps-prediction objective.

    Per step: draw t uniform in [1, T] per sample, apply the forward process,
    and descend the mean squared error between the injected and predicted
    noise.  Everything is driven by one seeded generator, so a fixed seed
    reproduces the loss curve bit for bit.
    """
    dataset = list(dataset)
    for s in dataset:
        if isinstance(s, DepthSample) and s.norm is not Norm.SYMMETRIC:
            raise ShapeMismatch("training samples must be in symmetric norm")
    samples = [s.data if isinstance(s, DepthSample) else np.asarray(s) for s in dataset]
    if not samples:
        raise EmptyDataset("training needs at least one sample")
    shapes = {s.shape for s in samples}
    if len(shapes) > 1 or samples[0].shape != denoiser.sample_shape:
        raise ShapeMismatch(
            f"sample shapes {sorted(shapes)}, denoiser expects {denoiser.sample_shape}"
        )

    x0 = np.stack(samples)
    n = x0.shape[0]
    rng = np.random.default_rng(opts.seed)
    vel_w = [np.zeros_like(w) for w in denoiser.weights]
    vel_b = [np.zeros_like(b) for b in denoiser.biases]
    losses: list[float] = []
    for _ in range(opts.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            batch = x0[idx]
            t = rng.integers(1, schedule.T + 1, size=idx.shape[0])
            abar = schedule.alpha_bar[t - 1][:, None, None, None]
            eps = rng.standard_normal(batch.shape)
            x_t = np.sqrt(abar) * batch + np.sqrt(1.0 - abar) * eps
            loss, grad_w, grad_b = denoiser.loss_and_grads(x_t, t, eps)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged to {loss!r}")
            for k in range(len(vel_w)):
                vel_w[k] = opts.momentum * vel_w[k] + grad_w[k]
                vel_b[k] = opts.momentum * vel_b[k] + grad_b[k]
                denoiser.weights[k] -= (opts.lr * vel_w[k]).astype(denoiser.dtype)
                denoiser.biases[k] -= (opts.lr * vel_b[k]).astype(denoiser.dtype)
            epoch_loss += loss
            batches += 1
        losses.append(epoch_loss / batches)
    kind = "sgd+momentum" if opts.momentum else "sgd"
    return TrainReport(losses, kind, opts.lr, opts.seed)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Generator for one sampling chain: SeedSequence(seed) spawned at (chain,)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain,)))


def sample(denoiser, schedule: NoiseSchedule, shape: tuple[int, int, int],
           seed: int, count: int = 1, spec: GridSpec | None = None) -> list[DepthSample]:
    """Run `count` reverse chains from pure noise; outputs are Symmetric samples."""
    out = []
    for chain in range(count):
        rng = chain_rng(seed, chain)
        x = rng.standard_normal(shape)
        for t in range(schedule.T, 0, -1):
            x = reverse_step(x, t, denoiser, schedule, rng)
        out.append(DepthSample(np.asarray(x, dtype=np.float64), Norm.SYMMETRIC, spec=spec))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DDPM"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII dd I 3I II")
# magic, version, T, beta_start, beta_end, variance_rule, (C,H,W), time_dim, n_hidden


def save_checkpoint(path, denoiser: MlpDenoiser, schedule: NoiseSchedule,
                    spec: GridSpec | None = None) -> None:
    rule = 0 if schedule.variance_rule is VarianceRule.BETA else 1
    c, h, w = denoiser.sample_shape
    head = _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, schedule.T,
                           float(schedule.beta[0]), float(schedule.beta[-1]),
                           rule, c, h, w, denoiser.time_dim, len(denoiser.hidden))
    dims = struct.pack(f"<{len(denoiser.hidden)}I", *denoiser.hidden) if denoiser.hidden else b""
    blob = denoiser.get_flat_params().astype("<f4").tobytes()
    path = Path(path)
    try:
        path.write_bytes(head + dims + blob)
        if spec is not None:
            path.with_name(path.name + ".json").write_text(
                json.dumps({"grid": spec.to_dict()}, indent=1)
            )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns (denoiser, schedule, spec-or-None)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"expected DDPM magic, got {buf[:4]!r}")
    if len(buf) < _CKPT_HEAD.size:
        raise TruncatedPayload("checkpoint shorter than its header")
    (_, version, T, beta_start, beta_end, rule, c, h, w,
     time_dim, n_hidden) = _CKPT_HEAD.unpack_from(buf)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} not supported")
    off = _CKPT_HEAD.size
    if len(buf) < off + 4 * n_hidden:
        raise TruncatedPayload("checkpoint truncated in the layer table")
    hidden = struct.unpack_from(f"<{n_hidden}I", buf, off) if n_hidden else ()
    off += 4 * n_hidden
    denoiser = MlpDenoiser((c, h, w), hidden=hidden, time_dim=time_dim)
    expected = denoiser.parameter_count * 4
    if len(buf) - off < expected:
        raise TruncatedPayload(
            f"parameter blob has {len(buf) - off} bytes, need {expected}"
        )
    flat = np.frombuffer(buf, dtype="<f4", count=denoiser.parameter_count, offset=off)
    denoiser.set_flat_params(flat.astype(np.float64))
    rule_e = VarianceRule.BETA if rule == 0 else VarianceRule.POSTERIOR
    schedule = make_schedule(T, beta_start, beta_end, rule_e)
    spec = None
    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if "grid" in meta:
            spec = GridSpec.from_dict(meta["grid"])
    return denoiser, schedule, spec
