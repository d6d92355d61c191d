"""Event-stream data model.

Events are per-pixel brightness-change firings (x, y, t, p) with integer
microsecond timestamps and polarity +1/-1. Streams are kept in columnar
numpy arrays sorted by timestamp. Two-channel count images (one channel
per polarity) are the bridge between streams and the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np


class EventFileError(ValueError):
    """Malformed event text file; carries the 1-based offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Time-sorted event recording at a fixed sensor resolution.

    Columns x, y, t, p are int64 arrays of equal length. Construction
    validates bounds and polarity and stably sorts by t.
    """

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid resolution {self.width}x{self.height}")
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("column length mismatch")
        if n:
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("event x out of bounds")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event y out of bounds")
            if self.t.min() < 0:
                raise ValueError("negative timestamp")
            if not np.isin(self.p, (-1, 1)).all():
                raise ValueError("polarity must be +1 or -1")
            if np.any(np.diff(self.t) < 0):
                order = np.argsort(self.t, kind="stable")
                self.x = self.x[order]
                self.y = self.y[order]
                self.t = self.t[order]
                self.p = self.p[order]

    @classmethod
    def from_events(cls, width, height, events: Iterable[Event]) -> "EventStream":
        ev = list(events)
        return cls(
            width,
            height,
            x=np.array([e.x for e in ev], dtype=np.int64),
            y=np.array([e.y for e in ev], dtype=np.int64),
            t=np.array([e.t for e in ev], dtype=np.int64),
            p=np.array([e.p for e in ev], dtype=np.int64),
        )

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class PolarFrame:
    """Two-channel event count image over a half-open time window.

    ``pos[y, x]`` / ``neg[y, x]`` hold per-pixel counts of +1 / -1 events
    with t in [t_start, t_end). Entries are non-negative; frames built
    from integer events hold integers (stored as float64 for uniformity
    with network outputs).
    """

    width: int
    height: int
    pos: np.ndarray
    neg: np.ndarray
    t_start: int
    t_end: int

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.neg = np.asarray(self.neg, dtype=np.float64)
        if self.pos.shape != (self.height, self.width):
            raise ValueError(f"pos shape {self.pos.shape} != {(self.height, self.width)}")
        if self.neg.shape != (self.height, self.width):
            raise ValueError(f"neg shape {self.neg.shape} != {(self.height, self.width)}")
        if self.t_start >= self.t_end:
            raise ValueError("window must satisfy t_start < t_end")
        if (self.pos < 0).any() or (self.neg < 0).any():
            raise ValueError("count maps must be non-negative")

    @classmethod
    def zeros(cls, width, height, t_start=0, t_end=1) -> "PolarFrame":
        z = np.zeros((height, width), dtype=np.float64)
        return cls(width, height, z, z.copy(), t_start, t_end)

    def total(self) -> float:
        return float(self.pos.sum() + self.neg.sum())


def parse_event_file(text: str) -> EventStream:
    """Parse the plain-text event format.

    Lines starting with '#' are comments. The first data line is the
    header ``width height``; every following line is ``t x y p``.
    Events may arrive unsorted; the stream sorts them stably by t.
    """
    width = height = None
    xs, ys, ts, ps = [], [], [], []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if width is None:
            if len(parts) != 2:
                raise EventFileError("header must be 'width height'", line_no)
            try:
                width, height = int(parts[0]), int(parts[1])
            except ValueError:
                raise EventFileError("non-integer header field", line_no) from None
            if width < 1 or height < 1:
                raise EventFileError(f"invalid resolution {width}x{height}", line_no)
            continue
        if len(parts) != 4:
            raise EventFileError("event record must be 't x y p'", line_no)
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFileError("non-integer event field", line_no) from None
        if not (0 <= x < width):
            raise EventFileError(f"x={x} out of bounds for width {width}", line_no)
        if not (0 <= y < height):
            raise EventFileError(f"y={y} out of bounds for height {height}", line_no)
        if t < 0:
            raise EventFileError(f"negative timestamp {t}", line_no)
        if p not in (1, -1):
            raise EventFileError(f"polarity {p} not in {{1,-1}}", line_no)
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    if width is None:
        raise EventFileError("missing 'width height' header")
    return EventStream(
        width,
        height,
        x=np.array(xs, dtype=np.int64),
        y=np.array(ys, dtype=np.int64),
        t=np.array(ts, dtype=np.int64),
        p=np.array(ps, dtype=np.int64),
    )


def write_event_file(stream: EventStream) -> str:
    """Serialize a stream so that parse_event_file inverts it exactly."""
    lines = [f"{stream.width} {stream.height}"]
    for i in range(len(stream)):
        lines.append(f"{stream.t[i]} {stream.x[i]} {stream.y[i]} {stream.p[i]}")
    return "\n".join(lines) + "\n"


def decouple(stream: EventStream) -> tuple[EventStream, EventStream]:
    """Split a stream into its positive and negative sub-streams (order kept)."""
    pos_mask = stream.p == 1
    neg_mask = ~pos_mask

    def pick(mask):
        return EventStream(
            stream.width,
            stream.height,
            x=stream.x[mask],
            y=stream.y[mask],
            t=stream.t[mask],
            p=stream.p[mask],
        )

    return pick(pos_mask), pick(neg_mask)


def merge(a: EventStream, b: EventStream) -> EventStream:
    """Concatenate two same-resolution streams and re-sort by t (stable)."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError("resolution mismatch in merge")
    return EventStream(
        a.width,
        a.height,
        x=np.concatenate([a.x, b.x]),
        y=np.concatenate([a.y, b.y]),
        t=np.concatenate([a.t, b.t]),
        p=np.concatenate([a.p, b.p]),
    )


def count_image(stream: EventStream, t_start: int, t_end: int) -> PolarFrame:
    """Count events per pixel and polarity within [t_start, t_end)."""
    if t_start >= t_end:
        raise ValueError("window must satisfy t_start < t_end")
    in_win = (stream.t >= t_start) & (stream.t < t_end)
    pos = np.zeros((stream.height, stream.width), dtype=np.float64)
    neg = np.zeros_like(pos)
    sel_pos = in_win & (stream.p == 1)
    sel_neg = in_win & (stream.p == -1)
    np.add.at(pos, (stream.y[sel_pos], stream.x[sel_pos]), 1.0)
    np.add.at(neg, (stream.y[sel_neg], stream.x[sel_neg]), 1.0)
    return PolarFrame(stream.width, stream.height, pos, neg, t_start, t_end)


def frame_sequence(stream: EventStream, window_len_us: int, count: int) -> list[PolarFrame]:
    """Cut `count` consecutive count images of length window_len_us.

    Windows start at the first event timestamp (0 for an empty stream);
    windows past the end of the recording come out all-zero.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if window_len_us < 1:
        raise ValueError("window_len_us must be >= 1")
    t0 = int(stream.t[0]) if len(stream) else 0
    return [
        count_image(stream, t0 + k * window_len_us, t0 + (k + 1) * window_len_us)
        for k in range(count)
    ]


def resample(frame: PolarFrame) -> EventStream:
    """Turn a count image back into events, spread uniformly over the window.

    Real-valued counts are rounded half-up to the nearest non-negative
    integer first. A pixel with count k emits k events at
    t_start + floor((i + 0.5) * window / k), i = 0..k-1.
    """
    window = frame.t_end - frame.t_start
    xs_all, ys_all, ts_all, ps_all = [], [], [], []
    for counts, polarity in ((frame.pos, 1), (frame.neg, -1)):
        k = np.floor(counts + 0.5).astype(np.int64)
        ys, xs = np.nonzero(k)
        if len(xs) == 0:
            continue
        reps = k[ys, xs]
        total = int(reps.sum())
        x_rep = np.repeat(xs, reps)
        y_rep = np.repeat(ys, reps)
        k_rep = np.repeat(reps, reps)
        # i = 0..k-1 within each pixel's run
        starts = np.concatenate([[0], np.cumsum(reps)[:-1]])
        i_rep = np.arange(total, dtype=np.int64) - np.repeat(starts, reps)
        t_rep = frame.t_start + ((2 * i_rep + 1) * window) // (2 * k_rep)
        xs_all.append(x_rep)
        ys_all.append(y_rep)
        ts_all.append(t_rep)
        ps_all.append(np.full(total, polarity, dtype=np.int64))
    if not xs_all:
        return EventStream(frame.width, frame.height)
    return EventStream(
        frame.width,
        frame.height,
        x=np.concatenate(xs_all),
        y=np.concatenate(ys_all),
        t=np.concatenate(ts_all),
        p=np.concatenate(ps_all),
    )


def downsample_events(stream: EventStream, scale: int) -> EventStream:
    """Map each event (x, y) -> (x // scale, y // scale).

    Dimensions not divisible by `scale` are truncated and events outside
    the truncated area dropped. Timestamps and polarities are unchanged.
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if scale == 1:
        return EventStream(stream.width, stream.height, stream.x.copy(), stream.y.copy(), stream.t.copy(), stream.p.copy())
    new_w = stream.width // scale
    new_h = stream.height // scale
    if new_w < 1 or new_h < 1:
        raise ValueError(f"scale {scale} exceeds stream resolution")
    keep = (stream.x < new_w * scale) & (stream.y < new_h * scale)
    return EventStream(
        new_w,
        new_h,
        x=stream.x[keep] // scale,
        y=stream.y[keep] // scale,
        t=stream.t[keep],
        p=stream.p[keep],
    )
