"""Sliding-window training: summed per-frame MSE, Adam, stepped LR decay,
flip/polarity augmentation, checkpoint + resume."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .events import PolarFrame
from .model import (
    ModelConfig,
    ModelState,
    forward_sequence_tensors,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

OPT_MAGIC = b"BMCO"


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, lr, loss):
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (lr={lr})")
        self.iteration = iteration
        self.lr = lr
        self.loss = loss


@dataclass
class TrainConfig:
    batch_size: int = 2
    lr0: float = 0.001
    decay: float = 0.95
    decay_every: int = 4000
    max_iters: int = 1000
    window: int = 9  # T
    augment: bool = True
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0  # 0 = only final

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.batch_size < 1 or self.window < 1 or self.max_iters < 0:
            raise ValueError("batch_size/window must be >= 1 and max_iters >= 0")


@dataclass
class Sample:
    """One training window: T low-res frames and their S-times targets."""

    lr_frames: list[PolarFrame]
    hr_frames: list[PolarFrame]

    def __post_init__(self):
        if len(self.lr_frames) != len(self.hr_frames) or not self.lr_frames:
            raise ValueError("lr/hr frame lists must be equal-length and non-empty")
        lw, lh = self.lr_frames[0].width, self.lr_frames[0].height
        hw, hh = self.hr_frames[0].width, self.hr_frames[0].height
        if hw % lw or hh % lh or hw // lw != hh // lh:
            raise ValueError(f"hr {hw}x{hh} is not an integer multiple of lr {lw}x{lh}")
        for f in self.lr_frames:
            if (f.width, f.height) != (lw, lh):
                raise ValueError("inconsistent lr frame sizes")
        for f in self.hr_frames:
            if (f.width, f.height) != (hw, hh):
                raise ValueError("inconsistent hr frame sizes")


def _as_frame_tensor(f, dtype) -> Tensor:
    if isinstance(f, Tensor):
        return f
    if isinstance(f, PolarFrame):
        return Tensor(np.stack([f.pos, f.neg])[None], dtype=dtype)
    arr = np.asarray(f, dtype=dtype)
    return Tensor(arr if arr.ndim == 4 else arr[None], dtype=dtype)


def loss_window(sr_frames, hr_frames) -> Tensor:
    """Sum over the window of per-frame MSE (mean over the 2*H*W elements)."""
    if len(sr_frames) != len(hr_frames):
        raise ValueError("sequence length mismatch")
    if not sr_frames:
        raise ValueError("empty window")
    dtype = next(
        (f.dtype for f in sr_frames if isinstance(f, Tensor)), np.dtype(np.float64)
    )
    total = None
    for sr, hr in zip(sr_frames, hr_frames):
        st = _as_frame_tensor(sr, dtype)
        ht = _as_frame_tensor(hr, dtype)
        d = ad.sub(st, ht)
        mse = ad.mean_all(ad.mul(d, d))
        total = mse if total is None else ad.add(total, mse)
    return total


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


def flip_frames(frames: list[PolarFrame], horizontal: bool, vertical: bool,
                polarity: bool) -> list[PolarFrame]:
    """Apply the chosen flips identically to every frame in the list."""
    out = []
    for f in frames:
        pos, neg = f.pos, f.neg
        if horizontal:
            pos, neg = pos[:, ::-1], neg[:, ::-1]
        if vertical:
            pos, neg = pos[::-1], neg[::-1]
        if polarity:
            pos, neg = neg, pos
        out.append(PolarFrame(f.width, f.height, pos.copy(), neg.copy(), f.t_start, f.t_end))
    return out


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Independent 50% horizontal flip, vertical flip and polarity swap,
    the same draw applied to LR and HR alike."""
    do_h = rng.random() < 0.5
    do_v = rng.random() < 0.5
    do_p = rng.random() < 0.5
    return Sample(
        flip_frames(sample.lr_frames, do_h, do_v, do_p),
        flip_frames(sample.hr_frames, do_h, do_v, do_p),
    )


class Adam:
    """Adam with bias correction; step() consumes and zeroes the gradients."""

    def __init__(self, params: list[Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0


def optimizer_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
        log.info("gradient norm %.3g clipped to %.3g", norm, max_norm)
    return norm


def _shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch])).permutation(n)


def _augment_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 104729, iteration, index]))


def save_optimizer(opt: Adam, path) -> None:
    with open(path, "wb") as fh:
        fh.write(OPT_MAGIC)
        fh.write(struct.pack("<II", opt.t, len(opt.params)))
        for m, v in zip(opt.m, opt.v):
            ad.write_tensor(fh, m)
            ad.write_tensor(fh, v)


def load_optimizer(path, params: list[Parameter]) -> Adam:
    opt = Adam(params)
    with open(path, "rb") as fh:
        if fh.read(4) != OPT_MAGIC:
            raise ValueError("not an optimizer state file")
        opt.t, count = struct.unpack("<II", fh.read(8))
        if count != len(params):
            raise ValueError("optimizer state does not match parameter count")
        dtype = params[0].data.dtype if params else np.dtype(np.float32)
        opt.m, opt.v = [], []
        for _ in range(count):
            opt.m.append(ad.read_tensor(fh, dtype))
            opt.v.append(ad.read_tensor(fh, dtype))
    return opt


def train(dataset: list[Sample], model_cfg: ModelConfig, train_cfg: TrainConfig,
          ckpt_path=None, resume_from=None, dtype=np.float32,
          on_iteration=None) -> tuple[ModelState, list[tuple[int, float, float]]]:
    """Optimize the model on the dataset; returns (state, loss trace).

    The trace holds one (iteration, lr, mean batch loss) row per step.
    Shuffling and augmentation draws are derived from (seed, iteration),
    so a resumed run replays exactly what the uninterrupted run would do.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        opt = load_optimizer(str(resume_from) + ".opt", state.parameters())
    else:
        state = init_model(model_cfg, dtype)
        opt = Adam(state.parameters())
    n = len(dataset)
    batches_per_epoch = max(1, math.ceil(n / train_cfg.batch_size))
    trace = []
    for k in range(state.iteration, train_cfg.max_iters):
        lr = lr_at(k, train_cfg)
        epoch, slot = divmod(k, batches_per_epoch)
        order = _shuffle_order(train_cfg.seed, epoch, n)
        picked = order[slot * train_cfg.batch_size:(slot + 1) * train_cfg.batch_size]
        if len(picked) == 0:
            picked = order[:train_cfg.batch_size]
        losses = []
        for idx in picked:
            sample = dataset[int(idx)]
            if train_cfg.augment:
                sample = augment(sample, _augment_rng(train_cfg.seed, k, int(idx)))
            srs = forward_sequence_tensors(state, sample.lr_frames)
            loss = loss_window(srs, sample.hr_frames)
            ad.backward(ad.scale(loss, 1.0 / len(picked)))
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(k, lr, mean_loss)
        clip_global_norm(state.parameters(), train_cfg.clip_norm)
        opt.step(lr)
        state.iteration = k + 1
        trace.append((k, lr, mean_loss))
        if on_iteration is not None:
            on_iteration(k, lr, mean_loss)
        if (
            ckpt_path is not None
            and train_cfg.checkpoint_every
            and state.iteration % train_cfg.checkpoint_every == 0
        ):
            save_checkpoint(state, ckpt_path)
            save_optimizer(opt, str(ckpt_path) + ".opt")
    if ckpt_path is not None:
        save_checkpoint(state, ckpt_path)
        save_optimizer(opt, str(ckpt_path) + ".opt")
    return state, trace


def make_samples(lr_stream, hr_stream, window_us: int, window: int,
                 stride: int | None = None) -> list[Sample]:
    """Cut aligned LR/HR count-image windows from one stream pair.

    Both streams are framed on the same time grid, anchored at the
    earlier first event. Yields one Sample per window of `window`
    frames, stepping by `stride` (default: disjoint windows).
    """
    from .events import count_image

    if window_us < 1 or window < 1:
        raise ValueError("window_us and window must be >= 1")
    stride = window if stride is None else stride
    starts = [int(s.t[0]) for s in (lr_stream, hr_stream) if len(s)]
    ends = [int(s.t[-1]) for s in (lr_stream, hr_stream) if len(s)]
    t0 = min(starts) if starts else 0
    t_end = max(ends) + 1 if ends else t0 + window_us
    n_frames = max(window, math.ceil((t_end - t0) / window_us))
    lr_frames = [count_image(lr_stream, t0 + k * window_us, t0 + (k + 1) * window_us)
                 for k in range(n_frames)]
    hr_frames = [count_image(hr_stream, t0 + k * window_us, t0 + (k + 1) * window_us)
                 for k in range(n_frames)]
    return [
        Sample(lr_frames[i:i + window], hr_frames[i:i + window])
        for i in range(0, n_frames - window + 1, stride)
    ]


def write_loss_trace(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,lr,loss\n")
        for it, lr, loss in trace:
            fh.write(f"{it},{lr:.10g},{loss:.10g}\n")
