import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_loops, finite_difference_errors
from stockdiff import tensor as T
from stockdiff.denoiser import (
    AttDiCEm,
    DenoiserConfig,
    DenoiserNet,
    EncoderLayer,
    MaskedRelationalTransformer,
    masked_attention,
    noise_embedding,
)
from stockdiff.diffusion import Batch
from stockdiff.noise import build_schedule, stack_schedules
from stockdiff.relations import HeadMaskSet, RelationTensor, group_relations
from stockdiff.tensor import Tensor


def mini_cfg(**kw):
    base = dict(n_indicators=2, seq_len=5, d_model=8, n_masked_heads=2, n_unmasked_heads=1,
                n_encoder_layers=1, head_dim=2, ff_hidden=4, dilations=(1, 2), emb_dim=4)
    base.update(kw)
    return DenoiserConfig(**base)


def inputs(cfg, b=2, n=3, seed=0):
    rng = np.random.default_rng(seed)
    s = cfg.seq_len
    x = rng.normal(size=(b, n, cfg.n_indicators, s))
    mask = np.zeros(s)
    mask[-1] = 1.0
    cond = rng.normal(size=x.shape) * (1 - mask)
    ab = rng.uniform(0.2, 0.9, size=(b, s))
    k = rng.integers(1, 10, size=b)
    return x, cond, mask, k, ab


def test_embedding_at_zero():
    e = noise_embedding(0, 8)
    np.testing.assert_array_equal(e[0::2], 1.0)
    np.testing.assert_array_equal(e[1::2], 0.0)


def test_embeddings_are_distinct_and_bounded():
    e = noise_embedding(np.arange(1, 101), 64)
    assert np.all(np.abs(e) <= 1.0)
    diff = np.abs(e[:, None, :] - e[None, :, :]).max(axis=-1)
    assert diff[np.triu_indices(100, 1)].min() > 1e-6


def test_embedding_needs_even_dim():
    with pytest.raises(ValueError):
        noise_embedding(3, 5)


def test_config_validation():
    with pytest.raises(ValueError, match="dilations"):
        mini_cfg(dilations=(1, 3))
    with pytest.raises(ValueError, match="n_masked_heads"):
        mini_cfg(n_masked_heads=13)
    assert mini_cfg().in_channels == 6


def block(seed=0, c_in=3, d=4):
    return AttDiCEm(c_in, d, 4, (1, 2, 4), 2, T.Rng(seed, "blk"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 7), st.integers(0, 1000))
def test_temporal_block_is_causal(t, seed):
    blk = block()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 8, 3))
    emb = Tensor(rng.normal(size=(1, 4)))
    base = blk(Tensor(x), emb).data
    x2 = x.copy()
    x2[:, :, t:, :] += rng.normal(size=x2[:, :, t:, :].shape)
    out = blk(Tensor(x2), emb).data
    np.testing.assert_array_equal(out[:, :, :t], base[:, :, :t])


def test_temporal_block_zero_input_is_shared_across_stocks():
    blk = block()
    out = blk(Tensor(np.zeros((1, 4, 6, 3))), Tensor(np.zeros((1, 4)))).data
    assert out.shape == (1, 4, 6, 4)
    for i in range(1, 4):
        np.testing.assert_array_equal(out[:, i], out[:, 0])


def test_attention_identity_mask_returns_values():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
    np.testing.assert_array_equal(masked_attention(q, k, v, np.eye(5)).data, v)


def test_attention_all_ones_mask_is_unmasked():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))
    np.testing.assert_array_equal(masked_attention(q, k, v, np.ones((6, 6))).data,
                                  masked_attention(q, k, v).data)


def test_attention_forbidden_pair_matches_loops():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    mask = np.ones((3, 3))
    mask[0, 2] = 0
    out = masked_attention(q, k, v, mask).data
    np.testing.assert_allclose(out, attention_loops(q, k, v, mask), rtol=1e-12)
    w = T.softmax(Tensor(q @ k.T / np.sqrt(3)), mask=mask).data
    assert w[0, 2] == 0.0


def test_single_token_attends_to_itself():
    layer = EncoderLayer(6, 2, 3, 5, T.Rng(0, "enc"))
    x = np.random.default_rng(3).normal(size=(1, 1, 6))
    # with one token the attention output is its own value projection
    v = layer.wv(Tensor(x)).data
    out = layer(Tensor(x), np.ones((2, 1, 1))).data
    x1 = layer.ln1(Tensor(x + layer.wo(Tensor(v)).data))
    expect = layer.ln2(x1 + layer.ff2(T.relu(layer.ff1(x1)))).data
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-14)


def test_identity_masks_and_zero_feedforward_isolate_value_path():
    layer = EncoderLayer(6, 2, 3, 5, T.Rng(1, "enc"))
    for p in layer.ff1.parameters() + layer.ff2.parameters():
        p.data[...] = 0.0
    x = np.random.default_rng(4).normal(size=(2, 4, 6))
    out = layer(Tensor(x), np.stack([np.eye(4)] * 2)).data
    expect = layer.ln2(layer.ln1(Tensor(x) + layer.wo(layer.wv(Tensor(x))))).data
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-14)


def test_transformer_is_stock_permutation_equivariant():
    cfg = mini_cfg()
    mrt = MaskedRelationalTransformer(cfg, T.Rng(2, "mrt"))
    rng = np.random.default_rng(5)
    n = 4
    x = rng.normal(size=(2, n, cfg.seq_len, cfg.d_model))
    masks = (rng.uniform(size=(3, n, n)) < 0.5).astype(float)
    masks = np.maximum(masks, np.eye(n))
    perm = rng.permutation(n)
    out = mrt(Tensor(x), masks).data
    out_p = mrt(Tensor(x[:, perm]), masks[:, perm][:, :, perm]).data
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10, atol=1e-12)


def test_output_shape_matches_target():
    cfg = mini_cfg()
    net = DenoiserNet(cfg, T.Rng(0, "net"))
    x, cond, mask, k, ab = inputs(cfg)
    out = net(x, cond, mask, k, ab, net.mask_stack(None, 3))
    assert out.shape == x.shape


def test_every_parameter_group_gets_gradient():
    cfg = mini_cfg(n_encoder_layers=2)
    net = DenoiserNet(cfg, T.Rng(3, "net"))
    x, cond, mask, k, ab = inputs(cfg, n=4)
    masks = np.maximum((np.random.default_rng(0).uniform(size=(3, 4, 4)) < 0.5).astype(float), np.eye(4))
    T.backward(net(x, cond, mask, k, ab, masks).mean())
    for name, p in net.named_parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_unrelated_stock_is_invisible_without_unmasked_heads():
    cfg = mini_cfg(n_unmasked_heads=0, n_masked_heads=1)
    net = DenoiserNet(cfg, T.Rng(4, "net"))
    bits = np.zeros((3, 3, 1))
    bits[0, 1, 0] = bits[1, 0, 0] = 1  # stock 2 has no relation path to 0 or 1
    heads = group_relations(RelationTensor(["r"], bits), max_heads=1, unmasked_heads=0)
    masks = net.mask_stack(heads, 3)
    x, cond, mask, k, ab = inputs(cfg)
    base = net(x, cond, mask, k, ab, masks).data
    x2, cond2 = x.copy(), cond.copy()
    x2[:, 2] += 5.0
    cond2[:, 2] -= 3.0
    out = net(x2, cond2, mask, k, ab, masks).data
    np.testing.assert_allclose(out[:, :2], base[:, :2], rtol=0, atol=1e-10)
    assert not np.allclose(out[:, 2], base[:, 2])


def test_mask_stack_layout():
    net = DenoiserNet(mini_cfg(n_masked_heads=3, n_unmasked_heads=2), T.Rng(0, "net"))
    a, b = np.eye(3), np.eye(3)
    a[0, 1] = a[1, 0] = 1
    b[1, 2] = b[2, 1] = 1
    stack = net.mask_stack(HeadMaskSet([a, b], {0: 0, 1: 1}), 3)
    assert stack.shape == (5, 3, 3)
    np.testing.assert_array_equal(stack[2], np.maximum(a, b))
    np.testing.assert_array_equal(stack[3:], 1.0)
    with pytest.raises(ValueError, match="diagonal"):
        net.mask_stack(HeadMaskSet([np.zeros((3, 3))], {0: 0}), 3)
    with pytest.raises(ValueError, match="exceed"):
        net.mask_stack(HeadMaskSet([a] * 4, {}), 3)


def test_state_dict_roundtrip_via_checkpoint(tmp_path):
    cfg = mini_cfg()
    a, b = DenoiserNet(cfg, T.Rng(0, "a")), DenoiserNet(cfg, T.Rng(1, "b"))
    T.save_checkpoint(tmp_path / "m.ckpt", a.state_dict())
    b.load_state_dict(T.load_checkpoint(tmp_path / "m.ckpt"))
    x, cond, mask, k, ab = inputs(cfg)
    m = a.mask_stack(None, 3)
    np.testing.assert_array_equal(a(x, cond, mask, k, ab, m).data, b(x, cond, mask, k, ab, m).data)
    with pytest.raises(KeyError):
        DenoiserNet(mini_cfg(use_relations=False), T.Rng(0, "c")).load_state_dict(a.state_dict())


def test_describe_counts_sum():
    net = DenoiserNet(mini_cfg(), T.Rng(0, "net"))
    d = net.describe()
    assert d["total"] == net.num_parameters() == sum(v for k, v in d.items() if k != "total")
    assert set(d) == {"stage1", "mrt", "stage2", "head", "skip", "total"}


def test_gradient_on_two_stock_toy_net():
    cfg = mini_cfg(n_indicators=1, seq_len=3, d_model=2, dilations=(1,), n_masked_heads=1,
                   n_unmasked_heads=1, head_dim=2, ff_hidden=2, emb_dim=2)
    net = DenoiserNet(cfg, T.Rng(5, "toy"))
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(2, 2, 1, 3))
    mask = np.array([0.0, 0.0, 1.0])
    sch = stack_schedules([build_schedule(rng.uniform(size=3), 10, 0.3) for _ in range(2)])
    batch = Batch(x0, x0 * (1 - mask), mask, sch)
    errors = finite_difference_errors(net, batch, net.mask_stack(None, 2), np.array([3, 8]))
    assert max(errors.values()) <= 1e-4, errors
