"""Synthetic scenes and a contrast-threshold event simulator.

Analytic scenes (moving bar, moving disk, translating checkerboard) are
rendered to linear intensity frames; events fire whenever the per-pixel
log intensity drifts a full threshold away from its reference level,
with linear interpolation between frames. Pairing a scene with its
bicubic-downsized version yields aligned LR-HR event streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventStream

SCENE_KINDS = ("moving_bar", "moving_disk", "checker_translate")


@dataclass
class SceneSpec:
    kind: str
    width: int
    height: int
    velocity_x: float = 1.0
    velocity_y: float = 0.0
    n_frames: int = 10
    frame_dt_us: int = 1000
    foreground: float = 200.0
    background: float = 50.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.frame_dt_us < 1:
            raise ValueError("frame_dt_us must be >= 1")
        if not (0 < self.foreground <= 255 and 0 < self.background <= 255):
            raise ValueError("intensities must lie in (0, 255]")


@dataclass
class IntensityFrame:
    width: int
    height: int
    values: np.ndarray  # H x W, strictly positive linear intensity

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width):
            raise ValueError("values shape mismatch")
        if (self.values <= 0).any():
            raise ValueError("intensity must be strictly positive")


@dataclass
class SimParams:
    theta: float = 0.2  # log-intensity contrast threshold
    eps: float = 1e-3  # offset before the log

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be > 0")


def render_scene(spec: SceneSpec, frame_index: int) -> IntensityFrame:
    """Render one analytic frame of the scene, deterministically."""
    if not (0 <= frame_index < spec.n_frames):
        raise ValueError(f"frame_index {frame_index} out of range [0, {spec.n_frames})")
    w, h = spec.width, spec.height
    img = np.full((h, w), spec.background, dtype=np.float64)
    if spec.kind == "moving_bar":
        bar_w = max(1, w // 8)
        off = int(round(frame_index * spec.velocity_x)) % w
        cols = (off + np.arange(bar_w)) % w
        img[:, cols] = spec.foreground
    elif spec.kind == "moving_disk":
        radius = max(1.0, min(w, h) / 4.0)
        cx = (w / 2.0 + frame_index * spec.velocity_x) % w
        cy = (h / 2.0 + frame_index * spec.velocity_y) % h
        yy, xx = np.mgrid[0:h, 0:w]
        # wrap-around distance so the disk re-enters smoothly
        dx = np.minimum(np.abs(xx - cx), w - np.abs(xx - cx))
        dy = np.minimum(np.abs(yy - cy), h - np.abs(yy - cy))
        img[dx * dx + dy * dy <= radius * radius] = spec.foreground
    else:  # checker_translate
        cell = max(2, min(w, h) // 4)
        ox = int(round(frame_index * spec.velocity_x))
        oy = int(round(frame_index * spec.velocity_y))
        yy, xx = np.mgrid[0:h, 0:w]
        parity = ((xx + ox) // cell + (yy + oy) // cell) % 2
        img[parity == 1] = spec.foreground
    return IntensityFrame(w, h, img)


def simulate_events(frames: list[IntensityFrame], dt_us: int, params: SimParams | None = None) -> EventStream:
    """Threshold-model event generation from an intensity frame sequence.

    Per pixel: the reference level starts at ln(I0 + eps); between
    consecutive frames the log intensity moves linearly, and every time
    it reaches reference +- theta an event fires at the interpolated
    crossing time (floored to integer microseconds) and the reference
    steps by theta toward the signal.
    """
    if params is None:
        params = SimParams()
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    w, h = frames[0].width, frames[0].height
    for f in frames:
        if (f.width, f.height) != (w, h):
            raise ValueError("all frames must share one resolution")
    if dt_us < 1:
        raise ValueError("dt_us must be >= 1")

    theta = params.theta
    logs = [np.log(f.values + params.eps) for f in frames]
    ref = logs[0].copy()
    xs, ys, ts, ps = [], [], [], []
    for k in range(len(frames) - 1):
        l0, l1 = logs[k], logs[k + 1]
        t0 = k * dt_us
        # only pixels whose end level is a full threshold from the reference
        active_y, active_x = np.nonzero(np.abs(l1 - ref) >= theta)
        for y, x in zip(active_y.tolist(), active_x.tolist()):
            a, b, r = l0[y, x], l1[y, x], ref[y, x]
            sign = 1 if b > r else -1
            while sign * (b - r) >= theta:
                r += sign * theta
                frac = (r - a) / (b - a)
                xs.append(x)
                ys.append(y)
                ts.append(t0 + int(math.floor(frac * dt_us)))
                ps.append(sign)
            ref[y, x] = r
    return EventStream(
        w,
        h,
        x=np.array(xs, dtype=np.int64),
        y=np.array(ys, dtype=np.int64),
        t=np.array(ts, dtype=np.int64),
        p=np.array(ps, dtype=np.int64),
    )


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic convolution kernel (Catmull-Rom family, a = -0.5)."""
    at = np.abs(t)
    w = np.zeros_like(at)
    near = at <= 1
    far = (at > 1) & (at < 2)
    w[near] = (a + 2) * at[near] ** 3 - (a + 3) * at[near] ** 2 + 1
    w[far] = a * at[far] ** 3 - 5 * a * at[far] ** 2 + 8 * a * at[far] - 4 * a
    return w


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) dense matrix of 4-tap cubic weights, edge-clamped."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for j in range(n_out):
        src = (j + 0.5) * scale - 0.5
        base = math.floor(src)
        taps = np.arange(base - 1, base + 3)
        w = _cubic_kernel(src - taps)
        np.add.at(mat[j], np.clip(taps, 0, n_in - 1), w)
    return mat


def bicubic_resize_array(values: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Separable cubic-convolution resize of a 2D array (center-aligned)."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dims must be >= 1")
    h, w = values.shape
    wy = _axis_weights(h, out_h)
    wx = _axis_weights(w, out_w)
    return wy @ values @ wx.T


def bicubic_resize(frame: IntensityFrame, out_w: int, out_h: int, floor: float = 1e-3) -> IntensityFrame:
    """Resize an intensity frame; output clamped to stay strictly positive."""
    out = bicubic_resize_array(frame.values, out_w, out_h)
    return IntensityFrame(out_w, out_h, np.maximum(out, floor))


def make_pair(spec: SceneSpec, scale: int, params: SimParams | None = None) -> tuple[EventStream, EventStream]:
    """Simulate aligned LR and HR event streams from one scene.

    HR events come from the rendered frames; LR events from the same
    frames bicubically resized to (w/scale, h/scale). Both share the
    time axis [0, (n_frames - 1) * frame_dt_us].
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if spec.width % scale or spec.height % scale:
        raise ValueError(f"scene dims {spec.width}x{spec.height} not divisible by scale {scale}")
    hr_frames = [render_scene(spec, i) for i in range(spec.n_frames)]
    hr = simulate_events(hr_frames, spec.frame_dt_us, params)
    if scale == 1:
        lr_frames = hr_frames
    else:
        lr_frames = [bicubic_resize(f, spec.width // scale, spec.height // scale) for f in hr_frames]
    lr = simulate_events(lr_frames, spec.frame_dt_us, params)
    return lr, hr


def parse_scene_config(text: str) -> tuple[SceneSpec, SimParams, int]:
    """Read a key=value scene config; returns (spec, sim params, scale).

    Recognized keys: kind, width, height, velocity_x, velocity_y,
    n_frames, frame_dt_us, theta, scale, foreground, background.
    """
    kv = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"scene config line {line_no}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()

    def take(key, conv, default):
        return conv(kv.pop(key)) if key in kv else default

    spec = SceneSpec(
        kind=take("kind", str, "moving_bar"),
        width=take("width", int, 16),
        height=take("height", int, 16),
        velocity_x=take("velocity_x", float, 1.0),
        velocity_y=take("velocity_y", float, 0.0),
        n_frames=take("n_frames", int, 10),
        frame_dt_us=take("frame_dt_us", int, 1000),
        foreground=take("foreground", float, 200.0),
        background=take("background", float, 50.0),
    )
    params = SimParams(theta=take("theta", float, 0.2))
    scale = take("scale", int, 2)
    if kv:
        raise ValueError(f"unknown scene config keys: {sorted(kv)}")
    return spec, params, scale
