import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hutformer import numerics as F
from hutformer.checks import dependency_oracle, sample_batch, tiny_config, tiny_dataset
from hutformer.config import ModelConfig
from hutformer.dataset import fit_norm, make_batch
from hutformer.decoder import CrossScaleAttention, CrossScaleTransformerLayer, HierarchicalDecoder
from hutformer.embedding import STPositionalEncoding, SegmentEmbedding, segment, segment_starts
from hutformer.encoder import (HierarchicalEncoder, ScalePyramid, TokenSequence, WindowAttention,
                               WindowTransformerLayer, masked_mae, segment_merge)
from hutformer.errors import ConfigError, NumericError
from hutformer.model import HUTFormer, variant
from hutformer.numerics import Tensor, backward, no_grad


def t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def zero_module(m):
    for _, p in m.named_parameters():
        p.data = np.zeros_like(p.data)


# ---------------------------------------------------------------- embedding


@pytest.mark.parametrize("T, L, P", [(288, 12, 24), (12, 12, 1), (288, 1, 288)])
def test_segment_count(T, L, P):
    assert segment(t(np.zeros((T, 1))), L).shape == (P, L)


def test_segment_not_divisible():
    with pytest.raises(ConfigError):
        segment(t(np.zeros((10, 1))), 3)


def test_identity_segment_embedding(rng):
    se = SegmentEmbedding(2, 1, 2, rng)
    se.proj.weight.data = np.eye(2)
    se.proj.bias.data = np.zeros(2)
    assert se(t([[1.0], [2.0], [3.0], [4.0]])).data.tolist() == [[1, 2], [3, 4]]


def test_stpe_default_widths(rng):
    pe = STPositionalEncoding(32, 5, 288, 32, 8, 32, rng)
    assert pe.fuse.weight.shape == (32, 104)
    out = pe(t(rng.normal(size=(24, 32))), 3, np.arange(24), np.zeros(24, dtype=int))
    assert out.shape == (24, 32)


def test_stpe_zero_tables_identity(rng):
    pe = STPositionalEncoding(4, 3, 12, 2, 2, 2, rng)
    for table in (pe.spatial, pe.tid, pe.diw):
        table.data = np.zeros_like(table.data)
    w = np.zeros((4, 10))
    w[:, :4] = np.eye(4)
    pe.fuse.weight.data, pe.fuse.bias.data = w, np.zeros(4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(pe(t(x), 1, [0, 5, 11], [0, 3, 6]).data, x)


def test_stpe_distinguishes_sensors(rng):
    pe = STPositionalEncoding(4, 3, 12, 2, 2, 2, rng)
    x = t(rng.normal(size=(3, 4)))
    a = pe(x, 0, [0, 1, 2], [0, 0, 0]).data
    b = pe(x, 1, [0, 1, 2], [0, 0, 0]).data
    assert not np.array_equal(a, b)


def test_stpe_index_errors(rng):
    pe = STPositionalEncoding(4, 3, 12, 2, 2, 2, rng)
    with pytest.raises(IndexError):
        pe(t(np.zeros((2, 4))), 3, [0, 1], [0, 0])
    with pytest.raises(IndexError):
        pe(t(np.zeros((2, 4))), 0, [0, 12], [0, 0])
    with pytest.raises(IndexError):
        pe(t(np.zeros((2, 4))), 0, [0, 1], [0, 7])


def test_segment_starts_uses_first_step():
    tid = np.array([[286, 287, 0, 1, 2, 3]])
    np.testing.assert_array_equal(segment_starts(tid, 2), [[286, 0, 2]])


def test_sensor_order_invariance():
    cfg = tiny_config()
    ds = tiny_dataset(cfg)
    b = sample_batch(ds, cfg, 5)
    model = HUTFormer(cfg)
    perm = np.array([3, 0, 4, 1, 2])
    pb = dataclasses.replace(b, **{f.name: getattr(b, f.name)[perm] for f in dataclasses.fields(b)})
    with no_grad():
        a = model.embedding(t(b.history), b.sensor, b.tid_hist, b.diw_hist).data
        p = model.embedding(t(pb.history), pb.sensor, pb.tid_hist, pb.diw_hist).data
    np.testing.assert_array_equal(a[perm], p)


def test_segment_token_depends_only_on_its_slice():
    cfg = ModelConfig(num_sensors=2)
    model = HUTFormer(cfg)
    rng = np.random.default_rng(0)
    h = rng.normal(size=(1, 288, 1))
    tid, diw = np.arange(288)[None], np.zeros((1, 288), dtype=int)
    with no_grad():
        base = model.embedding(t(h), [1], tid, diw).data
        h2 = h.copy()
        h2[0, 12 * 5 : 12 * 6] += 1.0
        pert = model.embedding(t(h2), [1], tid, diw).data
    changed = np.any(base != pert, axis=-1)[0]
    assert changed.tolist() == [j == 5 for j in range(24)]


def test_embedding_gradient_rows():
    cfg = tiny_config()
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(cfg), cfg, 2, seed=3)
    out = model.embedding(t(b.history), b.sensor, b.tid_hist, b.diw_hist)
    backward(F.sum_all(F.mul(out, np.random.default_rng(0).normal(size=out.shape))))
    pos = model.embedding.position
    used_s = set(b.sensor.tolist())
    used_t = set(segment_starts(b.tid_hist, cfg.segment_len).ravel().tolist())
    used_d = set(segment_starts(b.diw_hist, cfg.segment_len).ravel().tolist())
    for table, used in ((pos.spatial, used_s), (pos.tid, used_t), (pos.diw, used_d)):
        nonzero = {i for i in range(table.shape[0]) if np.any(table.grad[i] != 0)}
        assert nonzero == used


# ---------------------------------------------------------------- encoder


def test_window_count(rng):
    wa = WindowAttention(32, 4, 3, rng)
    with no_grad():
        wa(t(rng.normal(size=(2, 24, 32))))
    assert wa.last_weights.shape == (2, 8, 4, 3, 3)


def test_identical_tokens_uniform_attention(rng):
    wa = WindowAttention(8, 2, 3, rng)
    x = np.tile(rng.normal(size=8), (6, 1))
    with no_grad():
        out = wa(t(x)).data
        expected = wa.out(wa.v(t(x[:1]))).data
    np.testing.assert_allclose(wa.last_weights, 1 / 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out, np.tile(expected, (6, 1)), rtol=0, atol=1e-12)


def _scalar_identity_attention(rng):
    wa = WindowAttention(1, 1, 2, rng)
    for lin in (wa.q, wa.k, wa.v, wa.out):
        lin.weight.data, lin.bias.data = np.ones((1, 1)), np.zeros(1)
    return wa


def test_scalar_attention_oracle(rng):
    # q = k = v = identity: token 1's scores are [x1*x0, x1*x1] = [0, (ln 2)^2].
    # (The spec lists [1/3, 2/3], which needs scores [0, ln 2]; that is reproduced
    # below by scaling token 1's query by 1/ln 2.  See the decisions ledger.)
    wa = _scalar_identity_attention(rng)
    x = t([[0.0], [math.log(2)]])
    with no_grad():
        wa(x)
    s = math.log(2) ** 2
    np.testing.assert_allclose(wa.last_weights[0, 0, 1], [1 / (1 + math.exp(s)), math.exp(s) / (1 + math.exp(s))],
                               rtol=0, atol=1e-15)
    wa.q.weight.data = np.full((1, 1), 1 / math.log(2))
    with no_grad():
        wa(x)
    np.testing.assert_allclose(wa.last_weights[0, 0, 1], [1 / 3, 2 / 3], rtol=0, atol=1e-15)


def test_zeroed_layer_is_identity(rng):
    layer = WindowTransformerLayer(8, 2, 3, 4.0, rng)
    zero_module(layer.attn.out)
    zero_module(layer.mlp.fc2)
    x = rng.normal(size=(2, 6, 8))
    np.testing.assert_array_equal(layer(t(x)).data, x)


def test_segment_merge_laws(rng):
    h = rng.normal(size=(24, 32))
    out = segment_merge(t(h)).data
    assert out.shape == (12, 64)
    np.testing.assert_array_equal(out[:, :32], h[0::2])
    np.testing.assert_array_equal(out[:, 32:], h[1::2])
    a, b = [1.0, 2.0], [3.0, 4.0]
    assert segment_merge(t([a, b])).data.tolist() == [a + b]
    with pytest.raises(ConfigError):
        segment_merge(t(np.zeros((3, 2))))


def test_single_block_encoder():
    cfg = ModelConfig(num_blocks=1, num_sensors=2)
    assert cfg.scale_shapes() == [(24, 32)] and cfg.head_in_dim == 24 * 32


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.sampled_from([4, 8, 16]), st.sampled_from([1, 2, 3]))
def test_scale_chain_law(blocks, d, window):
    p = window * 2 ** (blocks - 1) * 2
    cfg = ModelConfig(history_len=p * 2, segment_len=2, horizon=4, d_model=d, num_blocks=blocks,
                      window_size=window, num_heads=2, num_sensors=1)
    cfg.validate()
    shapes = cfg.scale_shapes()
    for (p0, d0), (p1, d1) in zip(shapes, shapes[1:]):
        assert p1 * 2 == p0 and d1 == 2 * d0
    enc = HierarchicalEncoder(cfg, np.random.default_rng(0))
    with no_grad():
        pyr = enc(t(np.random.default_rng(1).normal(size=(1, p, d))))
    assert pyr.shapes() == shapes
    assert [s.segment_span_steps for s in pyr.scales] == [2 * 2 ** l for l in range(blocks)]


def test_last_segment_locality():
    cfg = ModelConfig(num_sensors=2)
    model = HUTFormer(cfg, seed=4)
    rng = np.random.default_rng(2)
    h = rng.normal(size=(1, 288, 1))
    tid, diw = np.arange(288)[None], np.zeros((1, 288), dtype=int)

    def block1(x):
        with no_grad():
            return model.encoder(model.embedding(t(x), [0], tid, diw)).scales[0].tokens.data

    base = block1(h)
    h2 = h.copy()
    h2[0, 276:288] = rng.normal(size=(12, 1))
    pert = block1(h2)
    np.testing.assert_array_equal(base[0, :21], pert[0, :21])
    assert not np.array_equal(base[0, 21:], pert[0, 21:])


def test_dependency_oracle_counts():
    deps = dependency_oracle(ModelConfig())
    assert [len(d) for d in deps] == [24, 12, 6, 3]
    assert deps[0][4] == {3, 4, 5}
    assert deps[1][0] == set(range(6)) and deps[3][0] == set(range(24))


def test_zero_branches_make_pyramid_pure_rearrangement(rng):
    cfg = ModelConfig(num_sensors=2)
    enc = HierarchicalEncoder(cfg, rng)
    for block in enc.blocks:
        zero_module(block.attn.out)
        zero_module(block.mlp.fc2)
    u = rng.normal(size=(24, 32))
    with no_grad():
        pyr = enc(t(u))
    for l, seq in enumerate(pyr.scales):
        np.testing.assert_array_equal(seq.tokens.data, u.reshape(24 >> l, 32 << l))


@pytest.mark.parametrize("pred, truth, expected", [
    ([1.0, 2.0], [1.0, 2.0], 0.0),
    ([2.0, 3.0], [1.0, 2.0], 1.0),
    ([1.0, 2.0], [0.0, 4.0], 1.5),
])
def test_masked_mae_examples(pred, truth, expected):
    assert masked_mae(t(pred), np.array(truth)).item() == expected


def test_masked_mae_gradient_and_errors():
    p = t([1.0, 5.0, 2.0, 0.0], grad=True)
    backward(masked_mae(p, np.array([2.0, 1.0, 2.0, 9.0]), np.array([True, True, True, False])))
    np.testing.assert_array_equal(p.grad, [-1 / 3, 1 / 3, 0.0, 0.0])
    with pytest.raises(NumericError):
        masked_mae(p, np.zeros(4), np.zeros(4, dtype=bool))
    with pytest.raises(ConfigError):
        masked_mae(p, np.zeros(3))


def test_batch_permutation_consistency():
    cfg = tiny_config()
    model = HUTFormer(cfg, seed=1)
    b = sample_batch(tiny_dataset(cfg), cfg, 6, seed=2)
    perm = np.array([5, 2, 0, 1, 4, 3])
    pb = dataclasses.replace(b, **{f.name: getattr(b, f.name)[perm] for f in dataclasses.fields(b)})
    with no_grad():
        a = model(b)[1].data
        p = model(pb)[1].data
    np.testing.assert_allclose(a[perm], p, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- decoder


def test_query_count():
    cfg = ModelConfig(num_sensors=2)
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(dataclasses.replace(cfg, steps_per_day=288), days=3), cfg, 1)
    with no_grad():
        pyr = model.encode(b)
        q = model.decoder.queries(pyr.intermediate, b.sensor, b.tid_fut, b.diw_fut, model.embedding.spatial)
    assert q.shape == (1, 24, 32)


def test_zero_queries():
    cfg = tiny_config()
    model = HUTFormer(cfg)
    zero_module(model.decoder.queries)
    spatial = t(np.zeros((3, 2)))
    q = model.decoder.queries(t(np.zeros((8, 1))), 1, np.arange(8), np.zeros(8, dtype=int), spatial)
    assert np.all(q.data == 0)


def test_future_tid_shift():
    cfg = tiny_config(steps_per_day=288, history_len=8, horizon=8)
    ds = tiny_dataset(cfg, days=3)
    stats = fit_norm(ds, range(0, 500))
    a = make_batch(ds, np.array([100]), np.array([0]), 8, 8, stats)
    b = make_batch(ds, np.array([100 + 190]), np.array([0]), 8, 8, stats)
    np.testing.assert_array_equal(b.tid_fut, (a.tid_fut + 190) % 288)


def test_cross_attention_shapes_and_special_cases(rng):
    ca = CrossScaleAttention(256, 32, 4, rng)
    with no_grad():
        out = ca(t(rng.normal(size=(3, 256))), t(rng.normal(size=(24, 32))))
    assert out.shape == (24, 32) and ca.last_weights.shape == (4, 24, 3)
    one = rng.normal(size=(1, 256))
    with no_grad():
        out = ca(t(one), t(rng.normal(size=(24, 32)))).data
        proj = ca.out(ca.v(ca.enc_proj(t(one)))).data
    assert np.all(ca.last_weights == 1.0)
    np.testing.assert_allclose(out, np.tile(proj, (24, 1)), rtol=0, atol=1e-12)
    with no_grad():
        ca(t(np.tile(one, (6, 1))), t(rng.normal(size=(24, 32))))
    np.testing.assert_allclose(ca.last_weights, 1 / 6, rtol=0, atol=1e-15)


def test_zeroed_cross_layer_is_identity(rng):
    layer = CrossScaleTransformerLayer(64, 32, 4, 4.0, rng)
    zero_module(layer.attn.out)
    zero_module(layer.mlp.fc2)
    h = rng.normal(size=(24, 32))
    np.testing.assert_array_equal(layer(t(rng.normal(size=(12, 64))), t(h)).data, h)


def test_decoder_attends_coarse_to_fine():
    cfg = ModelConfig(num_sensors=2)
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(dataclasses.replace(cfg, steps_per_day=288), days=3), cfg, 1)
    with no_grad():
        model(b)
    assert [w.shape[-1] for w in model.decoder.attention_weights()] == [3, 6, 12, 24]
    assert HierarchicalDecoder.scale_order(dataclasses.replace(cfg, scale_order="fine_to_coarse")) == [0, 1, 2, 3]


def test_single_scale_decoder():
    cfg = tiny_config(num_blocks=1, window_size=4)
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(cfg), cfg, 2)
    with no_grad():
        _, out = model(b)
    assert out.shape == (2, 8, 1) and len(model.decoder.blocks) == 1


def test_scale_count_mismatch():
    cfg = tiny_config()
    model = HUTFormer(cfg)
    pyr = ScalePyramid([TokenSequence(t(np.zeros((1, 4, 4))), 0, 2)], t(np.zeros((1, 8, 1))))
    with pytest.raises(ConfigError):
        model.decoder(pyr, [0], np.zeros((1, 8), dtype=int), np.zeros((1, 8), dtype=int),
                      model.embedding.spatial)


def test_shared_head_permutes_with_segments(rng):
    cfg = tiny_config()
    dec = HierarchicalDecoder(cfg, rng)
    h = rng.normal(size=(4, 4))
    perm = [2, 0, 3, 1]
    with no_grad():
        a = dec.head(t(h)).data
        b = dec.head(t(h[perm])).data
    np.testing.assert_array_equal(a[perm], b)


def test_output_length_invariant_to_encoder_lengths(rng):
    ca = CrossScaleAttention(16, 8, 2, rng)
    for p_enc in (1, 2, 5, 9):
        with no_grad():
            assert ca(t(rng.normal(size=(p_enc, 16))), t(rng.normal(size=(6, 8)))).shape == (6, 8)


def test_residual_refine():
    cfg = tiny_config(residual_refine=True)
    model = HUTFormer(cfg)
    zero_module(model.decoder.head)
    b = sample_batch(tiny_dataset(cfg), cfg, 2)
    with no_grad():
        pyr, out = model(b)
    np.testing.assert_array_equal(out.data, pyr.intermediate.data)


# ---------------------------------------------------------------- variants


def test_variant_presets():
    base = ModelConfig(num_sensors=3)
    assert variant("no_hierarchy", base)[0].scale_shapes() == [(24, 32)] * 4
    assert variant("no_se", base)[0].num_segments == 288
    assert variant("end2end", base)[1].training_mode == "end2end"
    assert variant("no_fix", base)[1].training_mode == "no_fix"
    with pytest.raises(ConfigError):
        variant("gcn", base)


def test_no_decoder_output_is_intermediate():
    cfg, _ = variant("no_decoder", tiny_config())
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(cfg), cfg, 2)
    with no_grad():
        pyr, out = model(b)
    assert out is pyr.intermediate


def test_concat_and_learned_positional_variants():
    cfg, _ = variant("concat", tiny_config())
    model = HUTFormer(cfg)
    b = sample_batch(tiny_dataset(cfg), cfg, 2)
    with no_grad():
        assert model(b)[1].shape == (2, 8, 1)
    assert model.decoder.head.weight.shape == (8, 4 * (4 + 8))
    cfg, _ = variant("no_stpe", tiny_config())
    model = HUTFormer(cfg)
    assert model.embedding.position.table.shape == (4, 4)
    with no_grad():
        assert model(b)[1].shape == (2, 8, 1)
