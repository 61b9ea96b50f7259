import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charparse.autodiff import Parameter, Tape, Tensor, backward, grad_check, ops, precision
from charparse.encoder import (
    AggregationSpec,
    EncoderConfig,
    EncoderOutput,
    MlmHead,
    ScalarMix,
    SequenceTooLong,
    TransformerEncoder,
    aggregate,
    mlm_loss,
    mlm_mask,
    parse_layers,
)
from helpers import jitter


def tiny(n_layers=2, d=16, dropout=0.0, seed=0):
    cfg = EncoderConfig(n_layers=n_layers, n_heads=2, d_model=d, d_ff=32, max_seq_len=12, dropout=dropout)
    return TransformerEncoder(cfg, np.random.default_rng(seed))


def random_output(rng, n_layers=4, shape=(5, 6)):
    return EncoderOutput([Tensor(rng.normal(size=shape)) for _ in range(n_layers)], np.ones(shape[:1], bool))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(n_layers=0)
    with pytest.raises(ValueError):
        EncoderConfig(source="bytes")


def test_output_shapes():
    enc = tiny(n_layers=3)
    out = enc(Tensor(np.random.default_rng(0).normal(size=(2, 7, 16)).astype(np.float32)))
    assert out.n_layers == 3
    assert all(h.shape == (2, 7, 16) for h in out.hidden)
    assert all(np.isfinite(h.data).all() for h in out.hidden)


def test_too_long_sequence():
    with pytest.raises(SequenceTooLong):
        tiny()(Tensor(np.zeros((13, 16), dtype=np.float32)))


def test_padding_gets_no_attention():
    enc = tiny()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 6, 16)).astype(np.float32)
    mask = np.array([[True, True, True, True, False, False]])
    out = enc(Tensor(x), mask)
    for block in enc.blocks:
        w = block.attn.last_weights
        np.testing.assert_allclose(w[0, :, :4, 4:], 0.0, atol=1e-12)
        np.testing.assert_allclose(w[0, :, :4, :4].sum(-1), 1.0, rtol=1e-5)
    # changing the padding rows leaves the real rows untouched
    x2 = x.copy()
    x2[0, 4:] = 99.0
    out2 = enc(Tensor(x2), mask)
    np.testing.assert_allclose(out2.hidden[-1].data[0, :4], out.hidden[-1].data[0, :4], atol=1e-5)


def test_dropout_off_in_eval_and_seeded_in_train():
    enc = tiny(dropout=0.3)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 16)).astype(np.float32))
    enc.eval()
    a = enc(x, rng=np.random.default_rng(0)).hidden[-1].data
    b = enc(x, rng=np.random.default_rng(1)).hidden[-1].data
    np.testing.assert_array_equal(a, b)
    enc.train()
    c = enc(x, rng=np.random.default_rng(5)).hidden[-1].data
    d = enc(x, rng=np.random.default_rng(5)).hidden[-1].data
    np.testing.assert_array_equal(c, d)
    assert not np.array_equal(a, c)


def test_block_grad_check():
    with precision("f64"):
        rng = np.random.default_rng(3)
        enc = jitter(tiny(n_layers=2), rng)
        x = Parameter(rng.normal(size=(1, 5, 16)), "x")
        mask = np.array([[True, True, True, True, False]])
        c = rng.normal(size=(1, 5, 16))
        err = grad_check(lambda: ops.sum(enc(x, mask).hidden[-1] * c), [x] + enc.parameters(), max_coords=8)
        assert err < 1e-5


def test_permutation_equivariance_without_positions():
    enc = tiny(n_layers=1)
    enc.pos.data[:] = 0.0
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 16)).astype(np.float32)
    perm = rng.permutation(6)
    a = enc(Tensor(x)).hidden[0].data
    b = enc(Tensor(x[perm])).hidden[0].data
    np.testing.assert_allclose(b, a[perm], atol=1e-5)


# ---------------------------------------------------------------- aggregation


def test_parse_layers():
    assert parse_layers("11", 12) == (11,)
    assert parse_layers("4-7", 12) == (4, 5, 6, 7)
    assert parse_layers("all", 4) == (0, 1, 2, 3)
    for bad in ("99", "3-9", "x", "5-3"):
        with pytest.raises(ValueError):
            parse_layers(bad, 4)


def test_spec_resolution():
    assert AggregationSpec(mode="last_layer").resolve(4) == (3,)
    assert AggregationSpec(mode="mean").resolve(3) == (0, 1, 2)
    with pytest.raises(ValueError):
        AggregationSpec(layers=(1,), mode="last_layer").resolve(4)
    with pytest.raises(ValueError):
        AggregationSpec(layers=(4,), mode="mean").resolve(4)
    with pytest.raises(ValueError):
        AggregationSpec(mode="max")
    assert AggregationSpec(mode="scalar_mix", trainable=False).label == "scalar-mix-fz"


def test_last_layer_identities_are_exact():
    out = random_output(np.random.default_rng(0))
    last = aggregate(out, AggregationSpec(mode="last_layer")).data
    mean = aggregate(out, AggregationSpec(layers=(3,), mode="mean")).data
    mix = aggregate(out, AggregationSpec(layers=(3,), mode="scalar_mix"), ScalarMix(1)).data
    np.testing.assert_array_equal(last, out.hidden[3].data)
    np.testing.assert_array_equal(mean, last)
    np.testing.assert_array_equal(mix, last)


def test_mean_of_equal_layers():
    h = np.random.default_rng(1).normal(size=(3, 4))
    out = EncoderOutput([Tensor(h.copy()) for _ in range(4)], np.ones(3, bool))
    np.testing.assert_allclose(aggregate(out, AggregationSpec(mode="mean")).data, h, rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.integers(1, 4))
def test_scalar_mix_with_equal_weights_is_mean(seed, s, n):
    out = random_output(np.random.default_rng(seed))
    layers = tuple(range(n))
    with precision("f64"):
        mix = ScalarMix(n)
    mix.s.data[:] = s
    got = aggregate(out, AggregationSpec(layers=layers, mode="scalar_mix"), mix).data
    want = aggregate(out, AggregationSpec(layers=layers, mode="mean")).data
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert abs(mix.weights().sum() - 1.0) < 1e-6


def test_scalar_mix_needs_module_and_matching_size():
    out = random_output(np.random.default_rng(0))
    with pytest.raises(ValueError):
        aggregate(out, AggregationSpec(mode="scalar_mix"))
    with pytest.raises(ValueError):
        aggregate(out, AggregationSpec(mode="scalar_mix"), ScalarMix(2))


def test_scalar_mix_grad_check():
    with precision("f64"):
        rng = np.random.default_rng(6)
        hs = [Parameter(rng.normal(size=(3, 4)), f"h{j}") for j in range(3)]
        mix = ScalarMix(3)
        mix.s.data[:] = rng.normal(size=3)
        mix.gamma.data[:] = 1.3
        c = rng.normal(size=(3, 4))
        assert grad_check(lambda: ops.sum(mix(hs) * c), hs + mix.parameters(), max_coords=None) < 1e-6


@pytest.mark.parametrize("mode", ["last_layer", "mean", "scalar_mix"])
def test_frozen_aggregation_blocks_encoder_gradient(mode):
    enc = tiny(n_layers=2)
    mix = ScalarMix(2) if mode == "scalar_mix" else None
    layers = () if mode == "last_layer" else (0, 1)
    x = Tensor(np.random.default_rng(7).normal(size=(4, 16)).astype(np.float32))
    probe = Parameter(np.ones(16, dtype=np.float32), "probe")
    with Tape() as tape:
        r = aggregate(enc(x), AggregationSpec(layers=layers, mode=mode, trainable=False), mix)
        loss = ops.sum(r * r * probe)
    backward(tape, loss)
    assert all(not p.grad.any() for p in enc.parameters())
    if mix is not None:
        assert mix.gamma.grad.any()


# ---------------------------------------------------------------- masked LM


def head(words=("a", "b", "c"), **kw):
    return MlmHead(list(words), 8, np.random.default_rng(0), **kw)


def test_head_vocabulary():
    h = head(["a", "[UNK]", "b"])
    assert h.vocab == ["a", "b", "[UNK]"]
    assert h.target_id("b") == 1
    assert h.target_id("zzz") == -1
    with pytest.raises(ValueError):
        MlmHead([], 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        head(split=(0.5, 0.5, 0.5))


def test_mask_rate_zero_is_identity():
    toks = ["[CLS]", "a", "b", "[SEP]"]
    m = mlm_mask(toks, head(mask_rate=0.0), np.random.default_rng(0))
    assert m.tokens == toks and m.loss_positions == [] and m.selected == []


def test_mask_deterministic_and_specials_untouched():
    toks = ["[CLS]"] + list("abcabcabcabc") + ["[SEP]"]
    a = mlm_mask(toks, head(mask_rate=0.5), np.random.default_rng(3))
    b = mlm_mask(toks, head(mask_rate=0.5), np.random.default_rng(3))
    assert a.tokens == b.tokens and a.selected == b.selected
    assert a.tokens[0] == "[CLS]" and a.tokens[-1] == "[SEP]"
    assert 0 not in a.selected and len(toks) - 1 not in a.selected


def test_oov_targets_are_dropped():
    toks = ["a", "zzz"] * 10
    m = mlm_mask(toks, head(mask_rate=1.0), np.random.default_rng(0))
    assert len(m.selected) == 20
    assert m.loss_positions == list(range(0, 20, 2))


def test_selection_rate_and_split():
    h = head([f"w{i}" for i in range(20)])
    toks = [f"w{i}" for i in range(20)]
    rng = np.random.default_rng(11)
    selected = masked = 0
    for _ in range(10_000):
        m = mlm_mask(toks, h, rng)
        selected += len(m.selected)
        masked += sum(m.tokens[i] == "[MASK]" for i in m.selected)
    assert abs(selected / 200_000 - 0.15) < 0.01
    assert abs(masked / selected - 0.8) < 0.01


def test_uniform_logits_loss():
    h = MlmHead([f"w{i}" for i in range(99)], 4, np.random.default_rng(0))
    h.proj.W.data[:] = 0.0
    h.proj.b.data[:] = 0.0
    out = EncoderOutput([Tensor(np.ones((3, 4)))], np.ones(3, bool))
    res = mlm_loss(out, np.array([5, -1, 98]), h)
    assert res.count == 2
    assert float(res.loss.data) == pytest.approx(math.log(100), abs=1e-6)
    assert res.log_likelihood == pytest.approx(-math.log(100), abs=1e-6)


def test_peaked_logits_loss_vanishes():
    h = head()
    h.proj.W.data[:] = 0.0
    h.proj.b.data[:] = 0.0
    h.proj.b.data[1] = 80.0
    out = EncoderOutput([Tensor(np.ones((2, 8)))], np.ones(2, bool))
    assert float(mlm_loss(out, np.array([1, 1]), h).loss.data) < 1e-12


def test_loss_without_positions_and_out_of_range():
    h = head()
    out = EncoderOutput([Tensor(np.ones((2, 8)))], np.ones(2, bool))
    res = mlm_loss(out, np.array([-1, -1]), h)
    assert res.count == 0 and float(res.loss.data) == 0.0
    with pytest.raises(IndexError):
        mlm_loss(out, np.array([0, 9]), h)


def test_head_grad_check():
    with precision("f64"):
        h = head([f"w{i}" for i in range(7)])
        rng = np.random.default_rng(8)
        x = Parameter(rng.normal(size=(5, 8)), "h")
        targets = np.array([0, -1, 3, 7, 2])
        err = grad_check(lambda: mlm_loss(EncoderOutput([x], np.ones(5, bool)), targets, h).loss,
                         [x] + h.parameters(), max_coords=None)
        assert err < 1e-6
