"""Event-stream super-resolution toolkit.

A self-contained pipeline: synthesize aligned LR/HR event-stream pairs,
train a two-stream recurrent attention network on polarity count images,
super-resolve event streams, and verify the numerics with gradient and
invariant suites.
"""

from .events import (
    Event,
    EventFileError,
    EventStream,
    PolarFrame,
    count_image,
    decouple,
    downsample_events,
    frame_sequence,
    merge,
    parse_event_file,
    resample,
    write_event_file,
)
from .simulate import (
    IntensityFrame,
    SceneSpec,
    SimParams,
    bicubic_resize,
    make_pair,
    parse_scene_config,
    render_scene,
    simulate_events,
)
from .autodiff import Parameter, ShapeError, Tensor, backward, grad_check, no_grad
from .exchange import ExchangeParams, attention_scale, exchange_forward, swap_symmetry_check
from .model import (
    CirSet,
    ModelConfig,
    ModelState,
    advance_cir,
    count_params,
    estimate_flops,
    forward_sequence,
    forward_step,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    Adam,
    Sample,
    TrainConfig,
    TrainingDiverged,
    augment,
    loss_window,
    lr_at,
    make_samples,
    train,
)
from .evaluation import EvalReport, bicubic_upsample_frame, evaluate, render_frame, rmse

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CirSet",
    "EvalReport",
    "Event",
    "EventFileError",
    "EventStream",
    "ExchangeParams",
    "IntensityFrame",
    "ModelConfig",
    "ModelState",
    "Parameter",
    "PolarFrame",
    "Sample",
    "SceneSpec",
    "ShapeError",
    "SimParams",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "advance_cir",
    "attention_scale",
    "augment",
    "backward",
    "bicubic_resize",
    "bicubic_upsample_frame",
    "count_image",
    "count_params",
    "decouple",
    "downsample_events",
    "estimate_flops",
    "evaluate",
    "exchange_forward",
    "forward_sequence",
    "forward_step",
    "frame_sequence",
    "grad_check",
    "init_model",
    "load_checkpoint",
    "loss_window",
    "lr_at",
    "make_pair",
    "make_samples",
    "merge",
    "no_grad",
    "parse_event_file",
    "parse_scene_config",
    "render_frame",
    "render_scene",
    "resample",
    "rmse",
    "save_checkpoint",
    "simulate_events",
    "swap_symmetry_check",
    "train",
    "write_event_file",
]
