import numpy as np
import pytest

from esr_forge.events import (
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


def random_stream(seed=0, width=10, height=8, n=500, t_max=10000):
    rng = np.random.default_rng(seed)
    return EventStream(
        width, height,
        x=rng.integers(0, width, n),
        y=rng.integers(0, height, n),
        t=rng.integers(0, t_max, n),
        p=rng.choice([-1, 1], n),
    )


class TestParse:
    def test_single_event(self):
        s = parse_event_file("4 4\n10 1 2 1\n")
        assert (s.width, s.height) == (4, 4)
        assert list(s) == [Event(1, 2, 10, 1)]

    def test_empty_body(self):
        s = parse_event_file("4 4\n")
        assert len(s) == 0

    def test_sorts_by_time(self):
        s = parse_event_file("4 4\n30 0 0 1\n10 1 1 -1\n")
        assert list(s.t) == [10, 30]
        assert list(s.p) == [-1, 1]

    def test_comments_ignored(self):
        s = parse_event_file("# header comment\n4 4\n# another\n10 1 2 1\n")
        assert len(s) == 1

    def test_malformed_line_reports_number(self):
        with pytest.raises(EventFileError, match="line 3"):
            parse_event_file("4 4\n10 1 2 1\n10 1\n")

    def test_out_of_bounds(self):
        with pytest.raises(EventFileError, match="out of bounds"):
            parse_event_file("4 4\n10 4 0 1\n")

    def test_bad_polarity(self):
        with pytest.raises(EventFileError, match="polarity"):
            parse_event_file("4 4\n10 1 1 0\n")

    def test_missing_header(self):
        with pytest.raises(EventFileError):
            parse_event_file("# nothing\n")


class TestWrite:
    def test_one_event_two_lines(self):
        s = EventStream.from_events(4, 4, [Event(1, 2, 10, 1)])
        assert write_event_file(s) == "4 4\n10 1 2 1\n"

    def test_empty_stream_header_only(self):
        assert write_event_file(EventStream(3, 2)) == "3 2\n"

    def test_round_trip_random(self):
        s = random_stream(seed=7, n=1000)
        assert parse_event_file(write_event_file(s)) == s


class TestDecouple:
    def test_partition_counts(self):
        s = EventStream.from_events(2, 2, [Event(0, 0, 10, 1), Event(1, 0, 20, -1), Event(0, 1, 30, 1)])
        pos, neg = decouple(s)
        assert len(pos) == 2 and len(neg) == 1

    def test_all_positive(self):
        s = EventStream.from_events(2, 2, [Event(0, 0, 10, 1), Event(1, 1, 20, 1)])
        pos, neg = decouple(s)
        assert len(neg) == 0 and len(pos) == 2

    def test_partition_size_property(self):
        for seed in range(5):
            s = random_stream(seed)
            pos, neg = decouple(s)
            assert len(pos) + len(neg) == len(s)

    def test_merge_round_trip_unique_times(self):
        # distinct timestamps make the interleaving unambiguous
        rng = np.random.default_rng(1)
        t = rng.permutation(400)
        s = EventStream(5, 5, x=rng.integers(0, 5, 400), y=rng.integers(0, 5, 400),
                        t=t, p=rng.choice([-1, 1], 400))
        assert merge(*decouple(s)) == s


class TestCountImage:
    def test_triple_count(self):
        s = EventStream.from_events(3, 3, [Event(0, 0, 1, 1), Event(0, 0, 2, 1), Event(0, 0, 3, 1)])
        f = count_image(s, 0, 10)
        assert f.pos[0, 0] == 3
        assert f.pos.sum() == 3 and f.neg.sum() == 0

    def test_half_open_window(self):
        s = EventStream.from_events(3, 3, [Event(1, 1, 100, 1)])
        assert count_image(s, 0, 100).total() == 0
        assert count_image(s, 100, 101).total() == 1

    def test_conservation_vs_iteration(self):
        s = random_stream(seed=3)
        t0, t1 = 2000, 7000
        f = count_image(s, t0, t1)
        assert f.total() == sum(1 for e in s if t0 <= e.t < t1)

    def test_inverted_window_rejected(self):
        with pytest.raises(ValueError):
            count_image(random_stream(), 10, 10)


class TestFrameSequence:
    def test_conserves_total(self):
        s = random_stream(seed=5, t_max=90000)
        frames = frame_sequence(s, 10000, 9)
        assert sum(f.total() for f in frames) == len(s)

    def test_empty_stream_zero_frames(self):
        frames = frame_sequence(EventStream(4, 4), 1000, 3)
        assert len(frames) == 3
        assert all(f.total() == 0 for f in frames)

    def test_single_window_equals_count_image(self):
        s = random_stream(seed=6, t_max=500)
        t0 = int(s.t[0])
        f = frame_sequence(s, 1000, 1)[0]
        g = count_image(s, t0, t0 + 1000)
        assert np.array_equal(f.pos, g.pos) and np.array_equal(f.neg, g.neg)


class TestResample:
    def test_mid_bin_spacing(self):
        # count 2 over [0, 100) lands at floor((i + 0.5) * 100 / 2)
        pos = np.zeros((1, 1))
        pos[0, 0] = 2
        f = PolarFrame(1, 1, pos, np.zeros((1, 1)), 0, 100)
        s = resample(f)
        assert list(s.t) == [25, 75]
        assert (s.p == 1).all()

    def test_all_zero_frame(self):
        f = PolarFrame.zeros(4, 4, 0, 100)
        assert len(resample(f)) == 0

    def test_round_trip_integer_frames(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pos = rng.integers(0, 6, (5, 7)).astype(float)
            neg = rng.integers(0, 6, (5, 7)).astype(float)
            f = PolarFrame(7, 5, pos, neg, 3000, 3700)
            g = count_image(resample(f), 3000, 3700)
            assert np.array_equal(g.pos, pos) and np.array_equal(g.neg, neg)

    def test_rounding_half_up(self):
        pos = np.array([[1.5]])
        f = PolarFrame(1, 1, pos, np.zeros((1, 1)), 0, 10)
        assert len(resample(f)) == 2
        f2 = PolarFrame(1, 1, np.array([[0.49]]), np.zeros((1, 1)), 0, 10)
        assert len(resample(f2)) == 0


class TestDownsample:
    def test_floor_mapping(self):
        s = EventStream.from_events(4, 4, [Event(3, 3, 5, 1)])
        d = downsample_events(s, 2)
        assert list(d) == [Event(1, 1, 5, 1)]
        assert (d.width, d.height) == (2, 2)

    def test_identity_at_one(self):
        s = random_stream(seed=8)
        assert downsample_events(s, 1) == s

    def test_count_preserved_when_divisible(self):
        s = random_stream(seed=9, width=12, height=8)
        assert len(downsample_events(s, 4)) == len(s)

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            downsample_events(random_stream(), 0)

    def test_truncation_drops_outside(self):
        s = EventStream.from_events(5, 5, [Event(4, 4, 1, 1), Event(0, 0, 2, -1)])
        d = downsample_events(s, 2)
        assert len(d) == 1 and (d.width, d.height) == (2, 2)


class TestValidation:
    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            PolarFrame(2, 2, np.full((2, 2), -1.0), np.zeros((2, 2)), 0, 1)

    def test_stream_bounds_checked(self):
        with pytest.raises(ValueError):
            EventStream(2, 2, x=np.array([2]), y=np.array([0]), t=np.array([0]), p=np.array([1]))
