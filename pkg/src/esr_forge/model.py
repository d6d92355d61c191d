"""Two-stream recurrent super-resolution network over polarity count images.

Each polarity gets its own stream; inside a stream a spatial and a
temporal sub-stream run side by side. Residual blocks do the local work,
exchange blocks move global structure between sub-streams (inner) and
between polarities (inter), and carry maps thread context across layers
and time steps. Sub-pixel shuffling of the head features produces the
upscaled count image.

Variants: ``full`` (everything), ``plain`` (no temporal sub-streams, no
inner exchange) and ``mixed`` (single stream over both polarities, no
exchange at all; kept only as an ablation baseline).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad
from .events import PolarFrame
from .exchange import (
    SCALE_MODES,
    ExchangeParams,
    ExchangeSide,
    conv_param,
    exchange_forward,
    init_exchange_params,
)

VARIANTS = ("mixed", "plain", "full")
CHECKPOINT_MAGIC = b"BMC1"


@dataclass
class ModelConfig:
    channels: int = 128  # C, feature width
    layers: int = 5  # N, basic blocks per stream
    slots: int = 128  # M, attention slots in the exchange blocks
    scale: int = 2  # S, upscaling factor
    window: int = 9  # T, training window length
    variant: str = "full"
    carry_state: bool = True  # False severs the cross-step recurrence
    scale_mode: str = "rsqrt_hw"
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "layers", "slots", "scale", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.scale & (self.scale - 1):
            raise ValueError("scale must be a power of two")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")


@dataclass
class CirSet:
    """Carry maps threaded across layers and steps; inner ones exist only
    in the full variant."""

    inter: Tensor
    inner_p: Tensor | None = None
    inner_n: Tensor | None = None

    def tensors(self):
        return [t for t in (self.inter, self.inner_p, self.inner_n) if t is not None]


class ModelState:
    """Owns the parameter registry (insertion order = checkpoint order)."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.iteration = 0
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(config.seed))

    # -- construction -----------------------------------------------------

    def _reg(self, name: str, p: Parameter) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = p
        return p

    def _conv(self, name: str, rng, cout, cin, k) -> tuple[Parameter, Parameter]:
        kp, bp = conv_param(rng, cout, cin, k, self.dtype)
        return self._reg(f"{name}.k", kp), self._reg(f"{name}.b", bp)

    def _exchange(self, name: str, rng) -> ExchangeParams:
        xp = init_exchange_params(self.config.channels, self.config.slots, rng, self.dtype)
        for side_name, side in (("a", xp.side_a), ("b", xp.side_b)):
            for f in ExchangeSide.__dataclass_fields__:
                self._reg(f"{name}.{side_name}.{f}", getattr(side, f))
        self._reg(f"{name}.carry_k", xp.carry_k)
        self._reg(f"{name}.carry_b", xp.carry_b)
        return xp

    def _build(self, rng):
        cfg = self.config
        c, s2 = cfg.channels, cfg.scale * cfg.scale
        if cfg.variant == "mixed":
            self.embed_mixed = self._conv("embed", rng, c, 2, 3)
            self.res_mixed = [
                (self._conv(f"layer{l}.res.c1", rng, c, c, 3), self._conv(f"layer{l}.res.c2", rng, c, c, 3))
                for l in range(cfg.layers)
            ]
            self.advance = {"inter": self._conv("advance.inter", rng, c, c, 1)}
            self.head_mixed = self._conv("head", rng, 2 * s2, c, 3)
            return

        self.embed_spatial = {side: self._conv(f"embed.spatial.{side}", rng, c, 1, 3) for side in "pn"}
        if cfg.variant == "full":
            self.embed_temporal = {side: self._conv(f"embed.temporal.{side}", rng, c, 2, 3) for side in "pn"}
        self.res_spatial = {side: [] for side in "pn"}
        self.res_temporal = {side: [] for side in "pn"}
        self.inner_x = {side: [] for side in "pn"}
        self.inter_x = []
        for l in range(cfg.layers):
            for side in "pn":
                self.res_spatial[side].append(
                    (self._conv(f"layer{l}.res.spatial.{side}.c1", rng, c, c, 3),
                     self._conv(f"layer{l}.res.spatial.{side}.c2", rng, c, c, 3))
                )
                if cfg.variant == "full":
                    self.res_temporal[side].append(
                        (self._conv(f"layer{l}.res.temporal.{side}.c1", rng, c, c, 3),
                         self._conv(f"layer{l}.res.temporal.{side}.c2", rng, c, c, 3))
                    )
                    self.inner_x[side].append(self._exchange(f"layer{l}.inner.{side}", rng))
            self.inter_x.append(self._exchange(f"layer{l}.inter", rng))
        self.advance = {"inter": self._conv("advance.inter", rng, c, c, 1)}
        if cfg.variant == "full":
            self.advance["inner_p"] = self._conv("advance.inner_p", rng, c, c, 1)
            self.advance["inner_n"] = self._conv("advance.inner_n", rng, c, c, 1)
        self.heads = {side: self._conv(f"head.{side}", rng, s2, c, 3) for side in "pn"}

    # -- convenience -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def init_model(config: ModelConfig, dtype=np.float32) -> ModelState:
    """Fresh model; bit-reproducible from config.seed."""
    return ModelState(config, dtype)


def _residual_block(x: Tensor, block) -> Tensor:
    (k1, b1), (k2, b2) = block
    return ad.add(x, ad.conv2d(ad.relu(ad.conv2d(x, k1, b1)), k2, b2))


def zeros_cir(state: ModelState, height: int, width: int) -> CirSet:
    c = state.config.channels
    shape = (1, c, height, width)

    def z():
        return Tensor(np.zeros(shape), dtype=state.dtype)

    if state.config.variant == "full":
        return CirSet(z(), z(), z())
    return CirSet(z())


def forward_step_tensors(state: ModelState, pos: Tensor, neg: Tensor,
                         prev_pos: Tensor, prev_neg: Tensor, cir: CirSet) -> tuple[Tensor, CirSet]:
    """One time step on (1,1,H,W) count tensors; returns ((1,2,SH,SW), carries)."""
    cfg = state.config
    s = cfg.scale
    if cfg.variant == "mixed":
        x = ad.conv2d(ad.concat_channels([pos, neg]), *state.embed_mixed)
        x = ad.add(x, cir.inter)
        for block in state.res_mixed:
            x = _residual_block(x, block)
        out = ad.relu(ad.pixel_shuffle(ad.conv2d(x, *state.head_mixed), s))
        return out, CirSet(x)

    cur = {"p": pos, "n": neg}
    prev = {"p": prev_pos, "n": prev_neg}
    spatial = {side: ad.conv2d(cur[side], *state.embed_spatial[side]) for side in "pn"}
    if cfg.variant == "full":
        temporal = {
            side: ad.conv2d(ad.concat_channels([cur[side], prev[side]]), *state.embed_temporal[side])
            for side in "pn"
        }
    inner = {"p": cir.inner_p, "n": cir.inner_n}
    inter = cir.inter
    for l in range(cfg.layers):
        for side in "pn":
            spatial[side] = _residual_block(spatial[side], state.res_spatial[side][l])
            if cfg.variant == "full":
                temporal[side] = _residual_block(temporal[side], state.res_temporal[side][l])
        if cfg.variant == "full":
            for side in "pn":
                spatial[side], temporal[side], inner[side] = exchange_forward(
                    spatial[side], temporal[side], inner[side],
                    state.inner_x[side][l], cfg.scale_mode,
                )
        spatial["p"], spatial["n"], inter = exchange_forward(
            spatial["p"], spatial["n"], inter, state.inter_x[l], cfg.scale_mode
        )
    heads = {
        side: ad.relu(ad.pixel_shuffle(ad.conv2d(spatial[side], *state.heads[side]), s))
        for side in "pn"
    }
    sr = ad.concat_channels([heads["p"], heads["n"]])
    if cfg.variant == "full":
        return sr, CirSet(inter, inner["p"], inner["n"])
    return sr, CirSet(inter)


def advance_cir(state: ModelState, cir: CirSet) -> CirSet:
    """Carry maps crossing a step boundary: 1x1 conv + ReLU each, or zeros
    when the recurrence is disabled."""
    if not state.config.carry_state:
        zero = Tensor(np.zeros(cir.inter.shape), dtype=state.dtype)
        if cir.inner_p is not None:
            return CirSet(zero, Tensor(np.zeros(cir.inter.shape), dtype=state.dtype),
                          Tensor(np.zeros(cir.inter.shape), dtype=state.dtype))
        return CirSet(zero)

    def step(name, t):
        return ad.relu(ad.conv2d(t, *state.advance[name]))

    if cir.inner_p is not None:
        return CirSet(step("inter", cir.inter), step("inner_p", cir.inner_p), step("inner_n", cir.inner_n))
    return CirSet(step("inter", cir.inter))


def _frame_tensor(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr[None, None, :, :], dtype=dtype)


def forward_sequence_tensors(state: ModelState, frames: list[PolarFrame]) -> list[Tensor]:
    """Run the recurrence over a window; gradients flow through every step."""
    if not frames:
        raise ValueError("empty frame sequence")
    h, w = frames[0].height, frames[0].width
    cir = zeros_cir(state, h, w)
    zero = np.zeros((h, w))
    prev_pos, prev_neg = _frame_tensor(zero, state.dtype), _frame_tensor(zero, state.dtype)
    outputs = []
    for f in frames:
        if (f.height, f.width) != (h, w):
            raise ValueError("frame resolution changed mid-sequence")
        pos, neg = _frame_tensor(f.pos, state.dtype), _frame_tensor(f.neg, state.dtype)
        sr, cir_last = forward_step_tensors(state, pos, neg, prev_pos, prev_neg, cir)
        outputs.append(sr)
        cir = advance_cir(state, cir_last)
        prev_pos, prev_neg = pos, neg
    return outputs


def _sr_to_frame(sr: Tensor, template: PolarFrame, s: int) -> PolarFrame:
    data = sr.data[0]
    return PolarFrame(template.width * s, template.height * s, data[0], data[1],
                      template.t_start, template.t_end)


def forward_step(state: ModelState, frame_t: PolarFrame, frame_prev: PolarFrame | None,
                 cir: CirSet | None = None) -> tuple[PolarFrame, CirSet]:
    """Inference wrapper over one step; frame_prev None means a zero frame."""
    h, w = frame_t.height, frame_t.width
    if cir is None:
        cir = zeros_cir(state, h, w)
    if cir.inter.shape != (1, state.config.channels, h, w):
        raise ValueError(f"carry shape {cir.inter.shape} does not match frame {h}x{w}")
    prev_pos = frame_prev.pos if frame_prev is not None else np.zeros((h, w))
    prev_neg = frame_prev.neg if frame_prev is not None else np.zeros((h, w))
    if frame_prev is not None and (frame_prev.height, frame_prev.width) != (h, w):
        raise ValueError("frame_prev resolution mismatch")
    with no_grad():
        sr, cir_out = forward_step_tensors(
            state,
            _frame_tensor(frame_t.pos, state.dtype),
            _frame_tensor(frame_t.neg, state.dtype),
            _frame_tensor(prev_pos, state.dtype),
            _frame_tensor(prev_neg, state.dtype),
            cir,
        )
    return _sr_to_frame(sr, frame_t, state.config.scale), cir_out


def forward_sequence(state: ModelState, frames: list[PolarFrame]) -> list[PolarFrame]:
    """Inference over a window of frames; carries reset at the start."""
    with no_grad():
        outs = forward_sequence_tensors(state, frames)
    s = state.config.scale
    return [_sr_to_frame(sr, f, s) for sr, f in zip(outs, frames)]


def count_params(state: ModelState) -> int:
    return sum(p.data.size for p in state.params.values())


def estimate_flops(config: ModelConfig, height: int, width: int) -> int:
    """Multiply-add count for one forward step at the given LR resolution.

    Convention: 2 FLOPs per conv output element per kernel tap, plus
    2*M^2*HW per attention product (two products per exchange direction).
    """
    hw = height * width
    c, m, s2 = config.channels, config.slots, config.scale * config.scale

    def conv(cout, cin, k):
        return 2 * cout * cin * k * k * hw

    exchange = (
        2 * conv(c, c, 3)  # residual branches
        + 2 * conv(c, 2 * c, 3)  # fuse convs
        + 2 * conv(m, c, 1)  # queries
        + 2 * conv(m, c, 1)  # values
        + 2 * conv(c, m, 1)  # message projections
        + 4 * conv(c, c, 1)  # gates
        + conv(c, 2 * m, 3)  # carry update
        + 4 * 2 * m * m * hw  # Q.K and A.V per direction
    )
    res_block = 2 * conv(c, c, 3)
    if config.variant == "mixed":
        total = conv(c, 2, 3) + config.layers * res_block + conv(2 * s2, c, 3) + conv(c, c, 1)
    elif config.variant == "plain":
        total = (
            2 * conv(c, 1, 3)
            + config.layers * (2 * res_block + exchange)
            + 2 * conv(s2, c, 3)
            + conv(c, c, 1)
        )
    else:
        total = (
            2 * conv(c, 1, 3)
            + 2 * conv(c, 2, 3)
            + config.layers * (4 * res_block + 3 * exchange)
            + 2 * conv(s2, c, 3)
            + 3 * conv(c, c, 1)
        )
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic, length-prefixed key=value config block, then the
# named parameter tensors in declaration order.


def _config_block(state: ModelState) -> bytes:
    cfg = state.config
    lines = [
        f"channels={cfg.channels}",
        f"layers={cfg.layers}",
        f"slots={cfg.slots}",
        f"scale={cfg.scale}",
        f"window={cfg.window}",
        f"variant={cfg.variant}",
        f"carry_state={int(cfg.carry_state)}",
        f"scale_mode={cfg.scale_mode}",
        f"seed={cfg.seed}",
        f"dtype={'f64' if state.dtype == np.float64 else 'f32'}",
        f"iteration={state.iteration}",
    ]
    return ("\n".join(lines) + "\n").encode()


def save_checkpoint(state: ModelState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        block = _config_block(state)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name, p in state.params.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            ad.write_tensor(fh, p.data)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (block_len,) = struct.unpack("<I", fh.read(4))
        kv = {}
        for line in fh.read(block_len).decode().splitlines():
            if line.strip():
                key, val = line.split("=", 1)
                kv[key] = val
        config = ModelConfig(
            channels=int(kv["channels"]),
            layers=int(kv["layers"]),
            slots=int(kv["slots"]),
            scale=int(kv["scale"]),
            window=int(kv["window"]),
            variant=kv["variant"],
            carry_state=bool(int(kv["carry_state"])),
            scale_mode=kv["scale_mode"],
            seed=int(kv["seed"]),
        )
        dtype = np.float64 if kv.get("dtype") == "f64" else np.float32
        state = ModelState(config, dtype)
        state.iteration = int(kv.get("iteration", 0))
        for name, p in state.params.items():
            (name_len,) = struct.unpack("<I", fh.read(4))
            stored = fh.read(name_len).decode()
            if stored != name:
                raise ValueError(f"checkpoint order mismatch: expected {name}, found {stored}")
            arr = ad.read_tensor(fh, dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = arr
    return state


__all__ = [
    "CHECKPOINT_MAGIC",
    "CirSet",
    "ModelConfig",
    "ModelState",
    "VARIANTS",
    "advance_cir",
    "count_params",
    "estimate_flops",
    "forward_sequence",
    "forward_sequence_tensors",
    "forward_step",
    "forward_step_tensors",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "zeros_cir",
]
