"""Invariant and gradient suites, shared by the CLI (selftest, gradcheck)
and the acceptance tests.

Each family returns a CheckResult; suites collect them so callers can
print one pass/fail line per family.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import events as ev
from . import exchange as ex
from . import model as md
from . import simulate as sim
from . import training as tr


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


def _run(name: str, fn: Callable[[], str]) -> CheckResult:
    try:
        return CheckResult(name, True, fn())
    except AssertionError as e:
        return CheckResult(name, False, str(e) or "assertion failed")


def _random_stream(rng, width=12, height=9, n=300) -> ev.EventStream:
    return ev.EventStream(
        width,
        height,
        x=rng.integers(0, width, n),
        y=rng.integers(0, height, n),
        t=rng.integers(0, 5000, n),
        p=rng.choice([-1, 1], n),
    )


# ---------------------------------------------------------------------------
# invariant families (acceptance criterion: exact or <= 1e-6 as stated)


def _canonical(stream: ev.EventStream) -> np.ndarray:
    rows = np.ascontiguousarray(np.stack([stream.t, stream.y, stream.x, stream.p], axis=1))
    order = np.lexsort((stream.p, stream.x, stream.y, stream.t))
    return rows[order]


def check_decouple_partition(rng) -> str:
    for _ in range(10):
        s = _random_stream(rng)
        pos, neg = ev.decouple(s)
        assert len(pos) + len(neg) == len(s), "partition sizes do not add up"
        assert (pos.p == 1).all() and (neg.p == -1).all(), "wrong polarity in partition"
        back = ev.merge(pos, neg)
        assert np.all(np.diff(back.t) >= 0), "merge result not time-sorted"
        # ties between polarities have no canonical interleaving; compare as sets
        assert np.array_equal(_canonical(back), _canonical(s)), "merge round trip failed"
    return "10 random streams"


def check_count_conservation(rng) -> str:
    for _ in range(10):
        s = _random_stream(rng)
        t0, t1 = 500, 4200
        frame = ev.count_image(s, t0, t1)
        brute = sum(1 for e in s if t0 <= e.t < t1)
        assert frame.total() == brute, f"count {frame.total()} != brute force {brute}"
    return "vs brute-force iteration"


def check_window_half_open(rng) -> str:
    s = ev.EventStream.from_events(4, 4, [ev.Event(1, 1, 100, 1), ev.Event(2, 2, 200, 1)])
    frame = ev.count_image(s, 0, 200)
    assert frame.total() == 1, "event at t_end leaked into the window"
    return "boundary event excluded"


def check_resample_round_trip(rng) -> str:
    for _ in range(10):
        pos = rng.integers(0, 5, (7, 6)).astype(float)
        neg = rng.integers(0, 5, (7, 6)).astype(float)
        f = ev.PolarFrame(6, 7, pos, neg, 1000, 1550)
        back = ev.count_image(ev.resample(f), 1000, 1550)
        assert np.array_equal(back.pos, pos) and np.array_equal(back.neg, neg), "round trip mismatch"
    return "integer frames, exact"


def check_file_round_trip(rng) -> str:
    s = _random_stream(rng, n=1000)
    assert ev.parse_event_file(ev.write_event_file(s)) == s, "event file round trip failed"
    empty = ev.EventStream(3, 3)
    assert ev.parse_event_file(ev.write_event_file(empty)) == empty, "empty round trip failed"
    return "1000-event and empty streams"


def check_tensor_dump_round_trip(rng) -> str:
    import io

    for dtype in (np.float32, np.float64):
        arr = rng.normal(size=(3, 2, 4)).astype(dtype)
        buf = io.BytesIO()
        ad.write_tensor(buf, arr)
        buf.seek(0)
        back = ad.read_tensor(buf, dtype)
        assert np.array_equal(back, arr), f"tensor dump mismatch for {dtype}"
    return "f32 and f64 payloads"


def check_pixel_shuffle_bijection(rng) -> str:
    for r in (1, 2, 3):
        x = ad.Tensor(rng.normal(size=(2, 4 * r * r, 3, 5)), dtype=np.float64)
        with ad.no_grad():
            y = ad.pixel_shuffle(x, r)
            back = ad.pixel_unshuffle(y, r)
        assert np.array_equal(back.data, x.data), f"r={r} inverse mismatch"
        # fsum is exactly rounded, hence permutation-invariant
        assert math.fsum(y.data.ravel()) == math.fsum(x.data.ravel()), "element sum changed"
        assert np.array_equal(np.sort(y.data.ravel()), np.sort(x.data.ravel())), "value multiset changed"
    return "r in {1,2,3}"


def check_softmax_rows(rng) -> str:
    x = ad.Tensor(rng.normal(size=(4, 5, 7)) * 10, dtype=np.float64)
    with ad.no_grad():
        y = ad.softmax_lastdim(x).data
    assert np.abs(y.sum(axis=-1) - 1).max() <= 1e-6, "rows do not sum to 1"
    assert y.min() >= 0 and y.max() <= 1, "entries outside [0,1]"
    return "random 4x5x7, 1e-6"


def check_attention_bounds(rng) -> str:
    for _ in range(20):
        q = rng.normal(size=(1, 2, 2))
        v = rng.normal(size=(1, 2, 2))
        with ad.no_grad():
            attn = ad.softmax_lastdim(ad.Tensor(q @ v.swapaxes(1, 2), dtype=np.float64)).data
            out = attn @ v
        # brute-force oracle for the product
        brute = np.zeros_like(out)
        for i in range(2):
            for kk in range(2):
                brute[0, i, kk] = sum(attn[0, i, j] * v[0, j, kk] for j in range(2))
        assert np.abs(out - brute).max() <= 1e-12, "matmul disagrees with brute force"
        lo = v[0].min(axis=0) - 1e-12
        hi = v[0].max(axis=0) + 1e-12
        assert (out[0] >= lo).all() and (out[0] <= hi).all(), "row left convex hull"
    return "20 random 2x2 instances"


def _toy_exchange(rng, c=4, m=4, h=3, w=3):
    params = ex.init_exchange_params(c, m, rng, np.float64)
    t = lambda: ad.Tensor(rng.normal(size=(1, c, h, w)), dtype=np.float64)
    return t(), t(), t(), params


def check_gate_betweenness(rng) -> str:
    for _ in range(5):
        h_a, h_b, carry, params = _toy_exchange(rng)
        with ad.no_grad():
            trace = ex._exchange_trace(h_a, h_b, carry, params, "rsqrt_hw")
        for local, msg, out in ((trace.local_a, trace.msg_a, trace.out_a),
                                (trace.local_b, trace.msg_b, trace.out_b)):
            lo = np.minimum(local.data, msg.data) - 1e-12
            hi = np.maximum(local.data, msg.data) + 1e-12
            assert ((out.data >= lo) & (out.data <= hi)).all(), "gated output outside [local, message]"
    return "5 random blocks"


def check_gate_half_mix(rng) -> str:
    h_a, h_b, carry, params = _toy_exchange(rng)
    for side in (params.side_a, params.side_b):
        for p in (side.gate_self_k, side.gate_self_b, side.gate_cross_k, side.gate_cross_b):
            p.data[...] = 0
    with ad.no_grad():
        trace = ex._exchange_trace(h_a, h_b, carry, params, "rsqrt_hw")
    want = 0.5 * trace.local_a.data + 0.5 * trace.msg_a.data
    assert np.abs(trace.out_a.data - want).max() <= 1e-12, "zeroed gate is not a half mix"
    return "sigmoid(0) = 0.5 mixing"


def check_swap_symmetry(rng) -> str:
    for _ in range(5):
        h_a, h_b, carry, params = _toy_exchange(rng)
        assert ex.swap_symmetry_check(h_a, h_b, carry, params), "swap symmetry violated"
    # negative control: breaking one side's weights must break the symmetry
    h_a, h_b, carry, params = _toy_exchange(rng)
    with ad.no_grad():
        base_a, base_b, _ = ex.exchange_forward(h_a, h_b, carry, params)
        params.side_b.residual_k.data[0, 0, 0, 0] += 0.5
        pert_a, pert_b, _ = ex.exchange_forward(h_a, h_b, carry, params)
    assert not (np.array_equal(base_a.data, pert_a.data) and np.array_equal(base_b.data, pert_b.data)), \
        "side perturbation went unnoticed (weight sharing?)"
    return "5 random instances + negative control"


def check_carry_residual(rng) -> str:
    h_a, h_b, carry, params = _toy_exchange(rng)
    params.carry_k.data[...] = 0
    params.carry_b.data[...] = 0
    with ad.no_grad():
        _, _, carry_out = ex.exchange_forward(h_a, h_b, carry, params)
    assert np.array_equal(carry_out.data, carry.data), "zeroed carry conv must pass carry through"
    return "additive carry skip"


def check_cir_zero_init_independence(rng) -> str:
    cfg = md.ModelConfig(channels=4, layers=1, slots=4, scale=2, window=2, variant="full", seed=11)
    state = md.init_model(cfg)
    mk = lambda: ev.PolarFrame(5, 5, rng.poisson(1.0, (5, 5)).astype(float),
                               rng.poisson(1.0, (5, 5)).astype(float), 0, 100)
    first = mk()
    out_a = md.forward_sequence(state, [first, mk()])
    out_b = md.forward_sequence(state, [first, mk()])
    assert np.array_equal(out_a[0].pos, out_b[0].pos) and np.array_equal(out_a[0].neg, out_b[0].neg), \
        "step-0 output depends on later frames or stale carry"
    return "step 0 identical across sequences"


def check_carry_off_factorization(rng) -> str:
    for variant in ("plain", "full"):
        cfg = md.ModelConfig(channels=4, layers=1, slots=4, scale=2, window=3,
                             variant=variant, carry_state=False, seed=13)
        state = md.init_model(cfg)
        mk = lambda k: ev.PolarFrame(5, 5, rng.poisson(1.0, (5, 5)).astype(float),
                                     rng.poisson(1.0, (5, 5)).astype(float), k * 100, (k + 1) * 100)
        frames = [mk(k) for k in range(3)]
        seq = md.forward_sequence(state, frames)
        for t, f in enumerate(frames):
            prev = frames[t - 1] if t else None
            solo, _ = md.forward_step(state, f, prev)
            assert np.array_equal(solo.pos, seq[t].pos) and np.array_equal(solo.neg, seq[t].neg), \
                f"{variant}: step {t} differs from the independent run"
    return "plain and full variants, T=3"


def check_sim_ramp_counts(rng) -> str:
    theta = 0.2
    for total in (0.65, 0.43, 1.17):
        for sign in (1, -1):
            n_frames = 6
            base = math.log(100.0)
            levels = [base + sign * total * k / (n_frames - 1) for k in range(n_frames)]
            frames = [sim.IntensityFrame(2, 2, np.full((2, 2), math.exp(lv) - 1e-3)) for lv in levels]
            stream = sim.simulate_events(frames, 1000, sim.SimParams(theta=theta))
            want_per_pixel = math.floor(total / theta + 1e-12)
            assert len(stream) == 4 * want_per_pixel, \
                f"ramp dL={sign * total}: {len(stream)} events != {4 * want_per_pixel}"
            assert (stream.p == sign).all(), "event sign does not match ramp direction"
    return "floor(|dL|/theta) exact on monotone ramps"


def check_sim_polarity_sign(rng) -> str:
    spec = sim.SceneSpec("moving_bar", 8, 8, velocity_x=1.0, n_frames=6)
    frames = [sim.render_scene(spec, i) for i in range(6)]
    stream = sim.simulate_events(frames, 1000, sim.SimParams())
    # brute-force per-pixel reference walk
    logs = [np.log(f.values + 1e-3) for f in frames]
    count = 0
    for y in range(8):
        for x in range(8):
            ref = logs[0][y, x]
            for k in range(5):
                b = logs[k + 1][y, x]
                while abs(b - ref) >= 0.2:
                    ref += 0.2 if b > ref else -0.2
                    count += 1
    assert len(stream) == count, f"simulator emitted {len(stream)}, oracle {count}"
    assert np.all(stream.t[:-1] <= stream.t[1:]), "stream not sorted"
    return "brute-force reference walk agrees"


def check_augment_involutions(rng) -> str:
    mk = lambda: ev.PolarFrame(4, 3, rng.poisson(1.0, (3, 4)).astype(float),
                               rng.poisson(1.0, (3, 4)).astype(float), 0, 100)
    sample = tr.Sample([mk() for _ in range(2)], [
        ev.PolarFrame(8, 6, rng.poisson(1.0, (6, 8)).astype(float),
                      rng.poisson(1.0, (6, 8)).astype(float), 0, 100) for _ in range(2)])
    for flags in ((True, False, False), (False, True, False), (False, False, True), (True, True, True)):
        once = tr.flip_frames(sample.lr_frames, *flags)
        twice = tr.flip_frames(once, *flags)
        for f0, f1 in zip(sample.lr_frames, twice):
            assert np.array_equal(f0.pos, f1.pos) and np.array_equal(f0.neg, f1.neg), \
                f"flip {flags} is not an involution"
    return "h/v/polarity flips, double application = identity"


def invariant_suite(seed: int = 0) -> list[CheckResult]:
    """All module invariant families; every one must pass."""
    rng = np.random.default_rng(seed)
    families = [
        ("decouple-partition", check_decouple_partition),
        ("count-conservation", check_count_conservation),
        ("window-half-open", check_window_half_open),
        ("resample-round-trip", check_resample_round_trip),
        ("event-file-round-trip", check_file_round_trip),
        ("tensor-dump-round-trip", check_tensor_dump_round_trip),
        ("pixel-shuffle-bijection", check_pixel_shuffle_bijection),
        ("softmax-rows", check_softmax_rows),
        ("attention-convex-bounds", check_attention_bounds),
        ("gate-betweenness", check_gate_betweenness),
        ("gate-half-mix", check_gate_half_mix),
        ("exchange-swap-symmetry", check_swap_symmetry),
        ("carry-additive-residual", check_carry_residual),
        ("carry-zero-init-independence", check_cir_zero_init_independence),
        ("carry-off-factorization", check_carry_off_factorization),
        ("simulator-ramp-counts", check_sim_ramp_counts),
        ("simulator-oracle-walk", check_sim_polarity_sign),
        ("augment-involutions", check_augment_involutions),
    ]
    return [_run(name, lambda fn=fn: fn(rng)) for name, fn in families]


# ---------------------------------------------------------------------------
# gradient suite (64-bit, central differences)

GRAD_TOL = 1e-4


def _proj(rng, shape):
    return ad.Tensor(rng.normal(size=shape), dtype=np.float64)


def _op_cases(rng):
    """(name, f, params) triples covering every differentiable op."""
    p = lambda shape: ad.Parameter(rng.normal(size=shape), dtype=np.float64)
    cases = []

    x, y = p((2, 3, 4, 4)), p((2, 3, 4, 4))
    c = _proj(rng, (2, 3, 4, 4))
    cases.append(("add/sub/mul/scale",
                  lambda: ad.tensor_sum(ad.mul(ad.add(x, ad.scale(y, 0.7)), ad.mul(ad.sub(x, y), c))),
                  [x, y]))

    xr = ad.Parameter(rng.uniform(0.2, 1.0, (2, 3, 4, 4)) * rng.choice([-1, 1], (2, 3, 4, 4)),
                      dtype=np.float64)
    cr = _proj(rng, (2, 3, 4, 4))
    cases.append(("relu", lambda: ad.tensor_sum(ad.mul(ad.relu(xr), cr)), [xr]))

    xs = p((3, 8))
    cs = _proj(rng, (3, 8))
    cases.append(("sigmoid", lambda: ad.tensor_sum(ad.mul(ad.sigmoid(xs), cs)), [xs]))

    xm = p((2, 3, 5))
    cm = _proj(rng, (2, 3, 5))
    cases.append(("softmax_lastdim", lambda: ad.tensor_sum(ad.mul(ad.softmax_lastdim(xm), cm)), [xm]))

    xl, gl, bl = p((2, 4, 3, 3)), ad.Parameter(rng.uniform(0.5, 1.5, 4), dtype=np.float64), p((4,))
    cl = _proj(rng, (2, 4, 3, 3))
    cases.append(("layer_norm_channels",
                  lambda: ad.tensor_sum(ad.mul(ad.layer_norm_channels(xl, gl, bl), cl)), [xl, gl, bl]))

    xc, kc, bc = p((1, 3, 5, 5)), p((4, 3, 3, 3)), p((4,))
    cc = _proj(rng, (1, 4, 5, 5))
    cases.append(("conv2d_3x3", lambda: ad.tensor_sum(ad.mul(ad.conv2d(xc, kc, bc), cc)), [xc, kc, bc]))

    k1, b1 = p((2, 3, 1, 1)), p((2,))
    c1 = _proj(rng, (1, 2, 5, 5))
    cases.append(("conv2d_1x1", lambda: ad.tensor_sum(ad.mul(ad.conv2d(xc, k1, b1), c1)), [xc, k1, b1]))

    ma, mb = p((2, 3, 4)), p((2, 3, 4))
    cmm = _proj(rng, (2, 3, 3))
    cases.append(("matmul+transpose",
                  lambda: ad.tensor_sum(ad.mul(ad.matmul_batched(ma, ad.transpose_last2(mb)), cmm)),
                  [ma, mb]))

    g1, g2 = p((2, 2, 3, 3)), p((2, 3, 3, 3))
    cg = _proj(rng, (2, 5, 3, 3))
    cases.append(("concat_channels",
                  lambda: ad.tensor_sum(ad.mul(ad.concat_channels([g1, g2]), cg)), [g1, g2]))

    xp = p((1, 8, 3, 3))
    cp = _proj(rng, (1, 2, 6, 6))
    cases.append(("pixel_shuffle",
                  lambda: ad.tensor_sum(ad.mul(ad.pixel_shuffle(xp, 2), cp)), [xp]))
    cu = _proj(rng, (1, 72, 1, 1))
    cases.append(("pixel_unshuffle",
                  lambda: ad.tensor_sum(ad.mul(ad.pixel_unshuffle(xp, 3), cu)), [xp]))

    xz = p((2, 3, 4))
    cases.append(("reshape+mean", lambda: ad.mean_all(ad.mul(ad.reshape(xz, (2, 12)),
                                                             ad.reshape(xz, (2, 12)))), [xz]))
    return cases


def gradient_op_checks(seeds=range(5)) -> list[CheckResult]:
    out = []
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for name, f, params in _op_cases(rng):
            err = ad.grad_check(f, params)
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        out.append(CheckResult(f"grad[{name}]", err <= GRAD_TOL, f"max rel err {err:.3g}"))
    return out


def gradient_exchange_check(seeds=range(5)) -> CheckResult:
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(2000 + seed)
        params = ex.init_exchange_params(4, 4, rng, np.float64)
        h_a = ad.Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
        h_b = ad.Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)
        carry = ad.Parameter(rng.normal(size=(1, 4, 4, 4)), dtype=np.float64)

        def f():
            a, b, c = ex.exchange_forward(h_a, h_b, carry, params)
            sq = lambda t: ad.tensor_sum(ad.mul(t, t))
            return ad.add(ad.add(sq(a), sq(b)), sq(c))

        err = ad.grad_check(f, params.parameters() + [h_a, h_b, carry])
        worst = max(worst, err)
    return CheckResult("grad[exchange-block]", worst <= GRAD_TOL, f"max rel err {worst:.3g}")


def gradient_sequence_check(seeds=range(5)) -> CheckResult:
    """loss_window over the recurrent forward on the toy configuration."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(3000 + seed)
        cfg = md.ModelConfig(channels=4, layers=1, slots=4, scale=2, window=2,
                             variant="full", seed=seed)
        state = md.init_model(cfg, np.float64)
        # modest magnitudes keep the loss O(1) so finite differences stay
        # resolvable on near-zero-gradient coordinates
        frames = [ev.PolarFrame(5, 5, rng.uniform(0, 0.4, (5, 5)), rng.uniform(0, 0.4, (5, 5)),
                                k * 100, (k + 1) * 100) for k in range(2)]
        targets = [ev.PolarFrame(10, 10, rng.uniform(0, 0.4, (10, 10)), rng.uniform(0, 0.4, (10, 10)),
                                 k * 100, (k + 1) * 100) for k in range(2)]

        def f():
            return tr.loss_window(md.forward_sequence_tensors(state, frames), targets)

        err = ad.grad_check(f, state.parameters())
        worst = max(worst, err)
    return CheckResult("grad[loss+forward_sequence]", worst <= GRAD_TOL, f"max rel err {worst:.3g}")


def gradient_suite(seeds=range(5)) -> list[CheckResult]:
    results = gradient_op_checks(seeds)
    results.append(gradient_exchange_check(seeds))
    results.append(gradient_sequence_check(seeds))
    return results
