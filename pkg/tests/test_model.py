import numpy as np
import pytest

from minidetr import tensor as T
from minidetr.matching import batch_set_loss, match_batch
from minidetr.model import (ConfigError, MiniDETR, ModelConfig, checkpoint_bytes, extract_decoder_cross_attention,
                            extract_encoder_attention, load_checkpoint, multi_head_attention, positional_encoding,
                            save_checkpoint, upsample_heatmap, windowed_cross_attention_mask)
from minidetr.tensor import Tensor

from oracles import central_difference, rel_err


def small_config(**kw) -> ModelConfig:
    base = dict(d_model=16, num_heads=2, enc_layers=1, dec_layers=2, num_queries=4, num_classes=3,
                backbone_channels=(4, 8), ffn_dim=16, image_size=32, seed=0)
    base.update(kw)
    return ModelConfig(**base).validate()


def image(seed=0, size=32):
    return np.random.default_rng(seed).random((size, size, 3))


def attn_params(d, seed):
    rng = np.random.default_rng(seed)
    p = {k: Tensor(rng.normal(scale=0.5, size=(d, d))) for k in ("wq", "wk", "wv", "wo")}
    p.update({k: Tensor(rng.normal(scale=0.1, size=d)) for k in ("bq", "bk", "bv", "bo")})
    return p


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("kw", [dict(d_model=10, num_heads=4), dict(d_model=6, num_heads=2), dict(num_queries=0),
                                dict(image_size=30), dict(cross_attention_window=0), dict(activation="tanh")])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ConfigError):
        small_config(**kw)


def test_config_dict_round_trip():
    c = small_config(cross_attention_window=2)
    assert ModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
def test_single_token_attention_weight_is_one():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 8)))
    _, w = multi_head_attention(x, x, x, attn_params(8, 1), 2, return_weights=True)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))


def test_attention_hand_case_matches_direct_formula():
    rng = np.random.default_rng(2)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    p = attn_params(4, 3)
    out = multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), p, 1).data
    pd = {k: v.data for k, v in p.items()}
    logits = (q @ pd["wq"] + pd["bq"]) @ (kv @ pd["wk"] + pd["bk"]).T / 2.0
    a = np.exp(logits - logits.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    want = a @ (kv @ pd["wv"] + pd["bv"]) @ pd["wo"] + pd["bo"]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_attention_gradient_fd():
    rng = np.random.default_rng(4)
    q, kv = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
    p = attn_params(8, 5)
    w = rng.normal(size=(3, 8))
    t = Tensor(q, requires_grad=True)
    (multi_head_attention(t, Tensor(kv), Tensor(kv), p, 2) * Tensor(w)).sum().backward()
    fd = central_difference(lambda x: float((multi_head_attention(Tensor(x), Tensor(kv), Tensor(kv), p, 2).data * w).sum()), q)
    assert rel_err(t.grad, fd) < 1e-6


def test_attention_rows_sum_to_one_in_every_stage():
    m = MiniDETR(small_config())
    out = m.forward(image(), record_attention=True)
    stages = {r.stage for r in out.attention}
    assert stages == {"encoder-self", "decoder-self", "decoder-cross"}
    for r in out.attention:
        assert np.all(r.weights >= 0)
        assert np.max(np.abs(r.weights.sum(-1) - 1.0)) <= 1e-9


# ---------------------------------------------------------------------------
# positional encoding and window mask
# ---------------------------------------------------------------------------
def test_positional_encoding_rows_distinct():
    pe = positional_encoding(4, 5, 16).data
    assert pe.shape == (20, 16)
    assert len({tuple(r) for r in np.round(pe, 12)}) == 20


def test_reference_points_start_on_a_grid_and_can_be_disabled():
    m = MiniDETR(small_config())
    ref = 1.0 / (1.0 + np.exp(-m.params["query_ref"].data))
    np.testing.assert_allclose(ref, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]], atol=1e-15)
    plain = MiniDETR(small_config(reference_points=False))
    assert "query_ref" not in plain.params
    assert plain.forward(image()).boxes.shape == (4, 4)


def test_window_mask_counts():
    m = windowed_cross_attention_mask((0.5, 0.5), 1, (8, 8))
    assert m.sum() == 9
    corner = windowed_cross_attention_mask((0.0, 0.0), 1, (8, 8))
    assert corner.sum() == 4
    assert windowed_cross_attention_mask((0.3, 0.7), 8, (8, 8)).all()


def test_windowed_model_puts_zero_mass_outside_window():
    m = MiniDETR(small_config(cross_attention_window=1, dec_layers=3))
    out = m.forward(image(1), record_attention=True)
    cross = [r for r in out.attention if r.stage == "decoder-cross"]
    # with anchors every decoder layer is windowed: support fits a 3x3 block
    for r in cross:
        for row in r.weights:
            support = np.flatnonzero(row)
            rr, cc = np.divmod(support, out.feature_shape[1])
            assert rr.max() - rr.min() <= 2 and cc.max() - cc.min() <= 2
            assert abs(row.sum() - 1.0) <= 1e-9


def test_window_at_least_map_size_is_bitwise_unwindowed():
    cfg = small_config()
    plain = MiniDETR(cfg).forward(image(2))
    wide = MiniDETR(small_config(cross_attention_window=cfg.feature_extent)).forward(image(2))
    np.testing.assert_array_equal(plain.class_logits.data, wide.class_logits.data)
    np.testing.assert_array_equal(plain.boxes.data, wide.boxes.data)


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------
def test_output_shapes_and_box_range():
    cfg = small_config()
    out = MiniDETR(cfg).forward(image())
    assert out.class_logits.shape == (4, 4) and out.boxes.shape == (4, 4)
    assert out.feature_shape == (8, 8) and out.stride == 4
    assert np.all((out.boxes.data > 0) & (out.boxes.data < 1))
    np.testing.assert_allclose(out.probs().sum(-1), 1.0, atol=1e-12)


def test_same_seed_same_output():
    a = MiniDETR(small_config()).forward(image())
    b = MiniDETR(small_config()).forward(image())
    np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)
    c = MiniDETR(small_config(seed=1)).forward(image())
    assert not np.array_equal(a.class_logits.data, c.class_logits.data)


def test_batch_forward_equals_single():
    m = MiniDETR(small_config())
    imgs = np.stack([image(0), image(1)])
    logits, boxes, _ = m.forward_batch(imgs)
    one = m.forward(imgs[1])
    np.testing.assert_allclose(logits.data[1], one.class_logits.data, atol=1e-12)
    np.testing.assert_allclose(boxes.data[1], one.boxes.data, atol=1e-12)


def test_attention_extraction_and_upsampling():
    m = MiniDETR(small_config())
    out = m.forward(image(), record_attention=True)
    enc = extract_encoder_attention(out, (5, 9), layer=0, head=None)
    dec = extract_decoder_cross_attention(out, 2, layer=1, head=0)
    assert enc.shape == dec.shape == (8, 8)
    assert abs(enc.sum() - 1.0) < 1e-9 and abs(dec.sum() - 1.0) < 1e-9
    up = upsample_heatmap(dec, 4)
    assert up.shape == (32, 32) and abs(up.sum() - 1.0) < 1e-9
    with pytest.raises(IndexError):
        extract_decoder_cross_attention(out, 4, layer=0)
    with pytest.raises(ValueError):
        extract_encoder_attention(m.forward(image()), (0, 0), layer=0)


def test_encoder_head_predicts_one_box_per_token():
    m = MiniDETR(small_config())
    m.params["enc_box_head.1.w"].data[:] = 0.0
    m.params["enc_box_head.1.b"].data[:] = 0.0
    enc: list = []
    m.forward_batch(np.stack([image(0), image(1)]), enc_out=enc)
    logits, boxes = enc[0]
    assert logits.shape == (2, 64, 4) and boxes.shape == (2, 64, 4)
    # zero offsets put every centre on its own cell centre, rows of 8 cells
    np.testing.assert_allclose(boxes.data[0, 9, :2], [1.5 / 8, 1.5 / 8])
    np.testing.assert_allclose(boxes.data[1, 10, :2], [2.5 / 8, 1.5 / 8])
    assert "enc_class_head.w" not in MiniDETR(small_config(encoder_aux_head=False)).params


def test_backbone_depth_adds_stride_one_layers():
    m = MiniDETR(small_config(backbone_depth=3))
    assert m.params["backbone.1.2.w"].shape == (8, 8, 3, 3)
    assert m.forward(image()).feature_shape == (8, 8)
    with pytest.raises(ConfigError):
        small_config(backbone_depth=0)


def test_end_to_end_gradient_two_query_toy():
    """2 queries, d_model=8: analytic gradient of the set loss w.r.t. the query
    embeddings, anchors and a spread of weights agrees with central differences."""
    cfg = ModelConfig(d_model=8, num_heads=2, enc_layers=1, dec_layers=1, num_queries=2, num_classes=2,
                      backbone_channels=(4, 4), ffn_dim=8, image_size=16, seed=3).validate()
    m = MiniDETR(cfg)
    x = image(5, 16)[None]
    targets = [(np.array([1]), np.array([[0.4, 0.6, 0.3, 0.2]]))]
    logits, boxes, _ = m.forward_batch(x)
    asg = match_batch(logits.data, boxes.data, targets)

    def loss():
        lg, bx, _ = m.forward_batch(x)
        return batch_set_loss(lg, bx, targets, asg)

    m.zero_grad()
    loss().backward()
    for name in ("query_embed", "query_ref", "input_proj.w", "decoder.0.cross_attn.wq", "box_head.2.w",
                 "class_head.b"):
        p = m.params[name]
        analytic = p.grad.copy()

        def f(v, p=p):
            old = p.data
            p.data = v
            with T.no_grad():
                out = loss().item()
            p.data = old
            return out
        assert rel_err(analytic, central_difference(f, p.data.copy())) < 1e-3, name


def test_checkpoint_round_trip(tmp_path):
    m = MiniDETR(small_config(cross_attention_window=2))
    path = tmp_path / "m.mdetr"
    save_checkpoint(m, path, {"epochs": 3})
    m2, extra = load_checkpoint(path)
    assert extra == {"epochs": 3} and m2.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, m2.params[k].data)
    assert checkpoint_bytes(m2, {"epochs": 3}) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
    bad = tmp_path / "bad"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
