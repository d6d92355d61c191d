"""RMSE scoring against a bicubic baseline, count-image rendering and
report output (CSV plus matplotlib figures)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .events import PolarFrame  # noqa: E402
from .model import ModelState, count_params, estimate_flops, forward_sequence  # noqa: E402
from .simulate import bicubic_resize_array  # noqa: E402
from .training import Sample  # noqa: E402


def rmse(sr_frames: list[PolarFrame], hr_frames: list[PolarFrame]) -> float:
    """Root of the mean squared difference over all frames, channels, pixels."""
    if len(sr_frames) != len(hr_frames) or not sr_frames:
        raise ValueError("frame lists must be equal-length and non-empty")
    total = 0.0
    count = 0
    for sr, hr in zip(sr_frames, hr_frames):
        if (sr.width, sr.height) != (hr.width, hr.height):
            raise ValueError(f"frame shape mismatch: {sr.width}x{sr.height} vs {hr.width}x{hr.height}")
        d_pos = sr.pos - hr.pos
        d_neg = sr.neg - hr.neg
        total += float((d_pos * d_pos).sum() + (d_neg * d_neg).sum())
        count += 2 * sr.width * sr.height
    return float(np.sqrt(total / count))


def bicubic_upsample_frame(frame: PolarFrame, scale: int) -> PolarFrame:
    """Channel-wise cubic upscaling of a count image; negatives clamped to 0."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if scale == 1:
        return PolarFrame(frame.width, frame.height, frame.pos.copy(), frame.neg.copy(),
                          frame.t_start, frame.t_end)
    w, h = frame.width * scale, frame.height * scale
    pos = np.maximum(bicubic_resize_array(frame.pos, w, h), 0.0)
    neg = np.maximum(bicubic_resize_array(frame.neg, w, h), 0.0)
    return PolarFrame(w, h, pos, neg, frame.t_start, frame.t_end)


@dataclass
class EvalReport:
    scale: int
    model_rmse: float
    bicubic_rmse: float
    params: int
    flops: int
    per_sequence: list[tuple[float, float]] = field(default_factory=list)  # (model, bicubic)

    def rows(self):
        return [
            ("model", self.model_rmse, self.params, self.flops),
            ("bicubic", self.bicubic_rmse, 0, 0),
        ]

    def to_csv(self) -> str:
        lines = ["method,rmse,params,flops"]
        for method, value, params, flops in self.rows():
            lines.append(f"{method},{value:.6g},{params},{flops}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        lines = [f"{'method':<10}{'rmse':>12}{'params':>12}{'flops':>16}"]
        for method, value, params, flops in self.rows():
            lines.append(f"{method:<10}{value:>12.5f}{params:>12}{flops:>16}")
        return "\n".join(lines)


def evaluate(state: ModelState, dataset: list[Sample], threads: int = 1) -> EvalReport:
    """Score the model and the bicubic baseline on the same sequences.

    Per-sequence RMSEs are averaged; sequences may be scored on worker
    threads, results merged back by index.
    """
    if not dataset:
        raise ValueError("empty dataset")
    s = state.config.scale

    def score(sample: Sample) -> tuple[float, float]:
        sr = forward_sequence(state, sample.lr_frames)
        base = [bicubic_upsample_frame(f, s) for f in sample.lr_frames]
        return rmse(sr, sample.hr_frames), rmse(base, sample.hr_frames)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_seq = list(pool.map(score, dataset))
    else:
        per_seq = [score(sample) for sample in dataset]
    model_mean = float(np.mean([m for m, _ in per_seq]))
    bic_mean = float(np.mean([b for _, b in per_seq]))
    h, w = dataset[0].lr_frames[0].height, dataset[0].lr_frames[0].width
    return EvalReport(
        scale=s,
        model_rmse=model_mean,
        bicubic_rmse=bic_mean,
        params=count_params(state),
        flops=estimate_flops(state.config, h, w),
        per_sequence=per_seq,
    )


def render_frame(frame: PolarFrame, path) -> None:
    """Write a binary PPM: white background, blue for positive counts, red
    for negative, magenta where the channels tie; shade scales with
    count / frame max."""
    maxc = max(float(frame.pos.max()), float(frame.neg.max()))
    h, w = frame.height, frame.width
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    if maxc > 0:
        pos, neg = frame.pos, frame.neg
        shade = (255.0 * np.minimum(1.0, np.maximum(pos, neg) / maxc)).round().astype(np.int32)
        blue = pos > neg
        red = neg > pos
        tie = (pos == neg) & (pos > 0)
        img[..., 0][blue] = 255 - shade[blue]
        img[..., 1][blue] = 255 - shade[blue]
        img[..., 1][red] = 255 - shade[red]
        img[..., 2][red] = 255 - shade[red]
        img[..., 1][tie] = 255 - shade[tie]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# report figures (saved next to the CSV output)


def _frame_rgb(frame: PolarFrame) -> np.ndarray:
    maxc = max(float(frame.pos.max()), float(frame.neg.max()), 1e-12)
    r = 1.0 - np.minimum(1.0, frame.pos / maxc)
    b = 1.0 - np.minimum(1.0, frame.neg / maxc)
    g = np.minimum(r, b)
    return np.stack([r, g, b], axis=-1)  # positives blue, negatives red


def save_rmse_figure(report: EvalReport, path) -> None:
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    labels = ["model", "bicubic"]
    values = [report.model_rmse, report.bicubic_rmse]
    ax.bar(labels, values, color=["tab:blue", "tab:gray"])
    ax.set_ylabel("RMSE")
    ax.set_title(f"{report.scale}x super-resolution")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sequence_figure(state: ModelState, sample: Sample, path) -> None:
    """Side-by-side count images: LR input, bicubic, model output, target."""
    s = state.config.scale
    sr = forward_sequence(state, sample.lr_frames)
    t = len(sample.lr_frames) // 2
    panels = [
        ("LR input", sample.lr_frames[t]),
        ("bicubic", bicubic_upsample_frame(sample.lr_frames[t], s)),
        ("model", sr[t]),
        ("target", sample.hr_frames[t]),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.2))
    for ax, (title, frame) in zip(axes, panels):
        ax.imshow(_frame_rgb(frame), interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_figure(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    iters = [row[0] for row in trace]
    losses = [row[2] for row in trace]
    ax.plot(iters, losses, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
