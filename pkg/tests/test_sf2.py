import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsfcn import ops
from wsfcn.core import ParamStore, ShapeError, Tape
from wsfcn.gradcheck import finite_diff_check
from wsfcn.sf2 import (Sf2Config, aligned_upsample, check_stride, init_sf2_params, predict_offset,
                       sf2_forward, sf2_fuse, sf2_output)
from wsfcn.suites import run_gradcheck

from helpers import identity_bn, sample_oracle, t64, zero_params


def build(d=3, seed=0, fusion="sf2"):
    cfg = Sf2Config(channels=d, stride=2, fusion=fusion)
    params, stats = ParamStore(), {}
    init_sf2_params(cfg, params, stats, np.random.default_rng(seed), dtype=np.float64)
    return cfg, params, stats


def feats(seed=0, n=2, d=3, h=3, w=4, s=2):
    rng = np.random.default_rng(seed)
    return t64(rng.standard_normal((n, d, h, w)), True), t64(rng.standard_normal((n, d, h * s, w * s)), True)


def test_param_names():
    _, params, _ = build()
    prefixes = {n.split("/")[0] for n in params.names()}
    assert prefixes == {"sf2.offset", "sf2.embed_h", "sf2.embed_l", "sf2.fuse_h", "sf2.fuse_l", "sf2.out"}
    assert params["sf2.offset/weight"].shape == (2, 6, 3, 3)


def test_offset_zero_weights_and_shape():
    _, params, _ = build()
    f_h, f_l = feats()
    off = predict_offset(f_h, f_l, params)
    assert off.shape == (2, 2, 6, 8) and not off.data.any()


def test_offset_shapes_random():
    _, params, _ = build()
    rng = np.random.default_rng(1)
    params["sf2.offset/weight"].data[...] = rng.standard_normal((2, 6, 3, 3))
    for _ in range(10):
        n, h, w, s = (int(v) for v in rng.integers(1, 5, size=4))
        f_h, f_l = feats(int(rng.integers(100)), n, 3, h, w, s)
        assert predict_offset(f_h, f_l, params).shape == (n, 2, h * s, w * s)


def test_non_integer_stride_rejected():
    _, params, _ = build()
    f_h = t64(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        predict_offset(f_h, t64(np.zeros((1, 3, 5, 6))), params)
    with pytest.raises(ShapeError):
        check_stride(f_h, t64(np.zeros((1, 3, 6, 9))))


def test_offset_gradcheck_both_inputs():
    _, params, _ = build()
    rng = np.random.default_rng(2)
    params["sf2.offset/weight"].data[...] = rng.standard_normal((2, 6, 3, 3))
    f_h, f_l = feats(3)
    probe = rng.standard_normal((2, 2, 6, 8))
    f = lambda p: ops.weighted_sum(predict_offset(p[0], p[1], params), probe)
    assert finite_diff_check(f, [f_h, f_l]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4),
       st.integers(0, 2**31 - 1))
def test_zero_offset_bit_identical(n, c, h, w, s, seed):
    x = t64(np.random.default_rng(seed).standard_normal((n, c, h, w)))
    a = aligned_upsample(x, t64(np.zeros((n, 2, h * s, w * s))), s).data
    b = ops.bilinear_upsample(x, h * s, w * s).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_constant_preserved_under_offsets(v, seed):
    off = t64(np.random.default_rng(seed).uniform(-10, 10, (1, 2, 8, 6)))
    out = aligned_upsample(t64(np.full((1, 2, 4, 3), v)), off, 2)
    assert np.all(out.data == v)


def test_uniform_row_offset_shifts_one_low_res_row():
    s = 2
    x = np.random.default_rng(4).standard_normal((1, 2, 5, 4))
    off = np.zeros((1, 2, 10, 8))
    off[:, 0] = s
    shifted = aligned_upsample(t64(x), t64(off), s).data
    base = aligned_upsample(t64(x), t64(np.zeros_like(off)), s).data
    assert np.array_equal(shifted[:, :, :-s], base[:, :, s:])
    for c in range(2):
        for p in range(10):
            for q in range(8):
                y, z = (p + s + 0.5) / s - 0.5, (q + 0.5) / s - 0.5
                assert shifted[0, c, p, q] == pytest.approx(sample_oracle(x[0, c], y, z), abs=1e-14)


def test_offsets_reach_gradients():
    _, params, stats = build()
    rng = np.random.default_rng(5)
    params["sf2.offset/weight"].data[...] = rng.standard_normal((2, 6, 3, 3)) * 0.3
    f_h, f_l = feats(6)
    probe = rng.standard_normal((2, 3, 6, 8))
    params.zero_grad()
    with Tape() as tape:
        loss = ops.weighted_sum(sf2_forward(f_h, f_l, Sf2Config(3), params, stats), probe)
    tape.backward(loss)
    assert np.abs(params["sf2.offset/weight"].grad).max() > 1e-6
    assert np.abs(params["sf2.offset/bias"].grad).max() > 1e-6


def test_fuse_zero_embeddings():
    _, params, stats = build()
    identity_bn(stats)
    for name in ("embed_h", "embed_l", "fuse_h", "fuse_l"):
        zero_params(params, f"sf2.{name}")
    a, b = sf2_fuse(*feats(7), params, stats)
    assert not a.data.any() and not b.data.any()


def test_fuse_identity_surrogate_loop_oracle():
    _, params, stats = build()
    rng = np.random.default_rng(8)
    params["sf2.offset/weight"].data[...] = rng.standard_normal((2, 6, 3, 3)) * 0.5
    f_h, f_l = feats(9)
    fh2, fl2 = sf2_fuse(f_h, f_l, params, stats, embed_fn=lambda name, x: x)
    off = predict_offset(f_h, f_l, params).data
    n, d, h2, w2 = f_l.shape
    for i in range(n):
        for c in range(d):
            for p in range(h2):
                for q in range(w2):
                    g = sample_oracle(f_h.data[i, c], (p + off[i, 0, p, q] + 0.5) / 2 - 0.5,
                                      (q + off[i, 1, p, q] + 0.5) / 2 - 0.5)
                    lo = f_l.data[i, c, p, q]
                    assert fh2.data[i, c, p, q] == pytest.approx(g + g * lo, abs=1e-12)
                    assert fl2.data[i, c, p, q] == pytest.approx(lo + g * lo, abs=1e-12)


def test_fuse_shares_inner_embeddings():
    _, params, stats = build()
    calls = []

    def spy(name, x):
        calls.append(name)
        return x
    sf2_fuse(*feats(10), params, stats, embed_fn=spy)
    assert sorted(calls) == ["embed_h", "embed_l", "fuse_h", "fuse_l"]


def test_fuse_shapes_and_determinism():
    _, params, stats = build()
    f_h, f_l = feats(11)
    a1, b1 = sf2_fuse(f_h, f_l, params, stats)
    a2, b2 = sf2_fuse(f_h, f_l, params, stats)
    assert a1.shape == b1.shape == (2, 3, 6, 8)
    assert a1.data.tobytes() == a2.data.tobytes() and b1.data.tobytes() == b2.data.tobytes()


def test_output_cases():
    _, params, stats = build()
    identity_bn(stats)
    z = t64(np.zeros((1, 3, 4, 4)))
    assert not sf2_output(z, z, params, stats).data.any()
    x = t64(np.random.default_rng(12).standard_normal((1, 3, 4, 4)))
    from wsfcn.layers import embed
    assert np.array_equal(sf2_output(x, z, params, stats).data, embed(x, params, stats, "sf2.out", False).data)
    with pytest.raises(ShapeError):
        sf2_output(x, t64(np.zeros((1, 3, 4, 2))), params, stats)


@pytest.mark.parametrize("fusion", ["sum", "concat", "mul"])
def test_comparison_fusions(fusion):
    cfg, params, stats = build(fusion=fusion)
    assert {n.split("/")[0] for n in params.names()} == {"sf2.out"}
    out = sf2_forward(*feats(13), cfg, params, stats)
    assert out.shape == (2, 3, 6, 8)


def test_sf2_gradcheck_suite():
    ok, results, _ = run_gradcheck("sf2", seeds=range(10))
    assert ok, max(results, key=lambda r: r.error)
