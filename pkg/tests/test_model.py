import numpy as np
import numpy.testing as npt
import pytest

from dcvit.errors import NumericError
from dcvit.model import (
    Model,
    ModelConfig,
    build_model,
    count_parameters,
    ds_block_toggle,
    embed_stage_shapes,
    forward,
    parameter_spec,
    tiny_config,
    token_grid,
)
from dcvit.tensor import Tensor
from oracles import conv_output_len_by_walk, rel_err


def spec_count(cfg):
    return sum(int(np.prod(s)) for s, _, tr in parameter_spec(cfg).values() if tr)


# ---------------------------------------------------------------- geometry

def test_default_token_grid_16x14():
    cfg = ModelConfig()
    shapes = embed_stage_shapes(cfg)
    assert shapes["temporal"] == (256, 129, 14)
    assert token_grid(cfg) == (16, 14)
    # against the walk oracle
    assert conv_output_len_by_walk(500, 36, 36, 2) == 14
    assert conv_output_len_by_walk(129, 8, 8, 1) == 16
    assert conv_output_len_by_walk(14, 1, 1, 0) == 14


def test_token_grid_matches_walk_oracle_across_configs():
    rng = np.random.default_rng(0)
    for _ in range(25):
        c = int(rng.integers(6, 40))
        t = int(rng.integers(20, 120))
        tk = int(rng.integers(2, 12))
        ck = int(rng.integers(2, min(c, 9)))
        try:
            cfg = tiny_config(
                channels=c, timesteps=t,
                temporal_kernel=(1, tk), temporal_stride=(1, tk),
                temporal_pad=(0, int(rng.integers(0, 3))),
                channel_depthwise_kernel=(ck, 1),
                channel_depthwise_stride=(ck, 1),
                channel_depthwise_pad=(int(rng.integers(0, 2)), 0),
            )
        except ValueError:
            continue
        rows, cols = token_grid(cfg)
        assert rows == conv_output_len_by_walk(
            c, ck, ck, cfg.channel_depthwise_pad[0])
        assert cols == conv_output_len_by_walk(
            conv_output_len_by_walk(t, tk, tk, cfg.temporal_pad[1]), 1, 1, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(head_mode="classification", n_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=770)  # not divisible by 12 heads
    with pytest.raises(ValueError):
        ModelConfig(ds_depthwise_kernel=(2, 2))
    with pytest.raises(ValueError):
        tiny_config(timesteps=10)  # temporal kernel no longer fits


# ---------------------------------------------------------------- building

def test_tiny_builds_and_forward_shape():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    x = np.zeros((2, 1, cfg.channels, cfg.timesteps), dtype=np.float32)
    out = forward(model, Tensor(x))
    assert out.shape == (2, 2)
    assert np.isfinite(out.data).all()


def test_same_seed_bit_identical_params():
    cfg = tiny_config()
    a = build_model(cfg, seed=7)
    b = build_model(cfg, seed=7)
    assert list(a.params) == list(b.params)
    for name in a.params:
        npt.assert_array_equal(a.params[name].data, b.params[name].data)
    c = build_model(cfg, seed=8)
    assert any((a.params[n].data != c.params[n].data).any() for n in a.params)


def test_zero_input_batch_identical_rows():
    cfg = tiny_config()
    model = build_model(cfg, seed=3)
    x = np.zeros((4, 1, cfg.channels, cfg.timesteps), dtype=np.float32)
    out = forward(model, Tensor(x)).data
    assert np.isfinite(out).all()
    for row in out[1:]:
        npt.assert_array_equal(row, out[0])


def test_batch_permutation_no_leakage():
    cfg = tiny_config()
    model = build_model(cfg, seed=5)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 1, cfg.channels, cfg.timesteps)).astype(np.float32)
    out = forward(model, Tensor(x)).data
    perm = [2, 0, 1]
    out_p = forward(model, Tensor(x[perm])).data
    npt.assert_array_equal(out_p, out[perm])


def test_classification_head_softmax_rows():
    cfg = tiny_config(head_mode="classification", n_classes=25)
    model = build_model(cfg, seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 1, cfg.channels, cfg.timesteps)).astype(np.float32)
    logits = forward(model, Tensor(x))
    assert logits.shape == (3, 25)
    from dcvit.tensor import softmax
    probs = softmax(logits, axis=-1).data
    npt.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_eval_forward_pure_function():
    cfg = tiny_config()
    model = build_model(cfg, seed=9)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 1, cfg.channels, cfg.timesteps)).astype(np.float32)
    a = forward(model, Tensor(x), training=False, seed=1).data
    b = forward(model, Tensor(x), training=False, seed=999).data
    npt.assert_array_equal(a, b)


def test_forward_rejects_bad_batch_and_nonfinite():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    with pytest.raises(ValueError):
        forward(model, Tensor(np.zeros((2, 1, cfg.channels + 1, cfg.timesteps))))
    model.params["temporal.weight"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="temporal"):
        forward(model, Tensor(np.zeros((1, 1, cfg.channels, cfg.timesteps),
                                       dtype=np.float32)))


# ---------------------------------------------------------------- counting

def test_count_single_linear():
    cfg = tiny_config()
    model = Model(config=cfg, params={
        "w": Tensor(np.zeros((5, 10)), requires_grad=True),
        "b": Tensor(np.zeros(5), requires_grad=True),
    })
    assert count_parameters(model) == 55


def test_count_matches_spec_and_invariant_across_calls():
    cfg = tiny_config()
    model = build_model(cfg, seed=0, dtype=np.float64)
    n0 = count_parameters(model)
    assert n0 == spec_count(cfg)
    x = Tensor(np.random.default_rng(0).normal(
        size=(2, 1, cfg.channels, cfg.timesteps)))
    forward(model, x, training=True, seed=0).sum().backward()
    assert count_parameters(model) == n0


def test_default_count_near_paper_and_ds_delta():
    total = spec_count(ModelConfig())
    assert abs(total - 86.2e6) / 86.2e6 < 0.03
    off = spec_count(ds_block_toggle(ModelConfig()))
    delta = total - off
    assert 0.10e6 <= delta <= 0.30e6


def test_ds_toggle_involution_and_additivity():
    cfg = tiny_config()
    assert ds_block_toggle(ds_block_toggle(cfg)) == cfg
    on = build_model(cfg, seed=0)
    off = build_model(ds_block_toggle(cfg), seed=0)
    delta = count_parameters(on) - count_parameters(off)
    ds_names = [n for n in on.params if n.startswith(("ds.", "ds_bn."))]
    assert delta == sum(on.params[n].size for n in ds_names)
    assert delta > 0


# ---------------------------------------------------------------- gradients

def _ultra_config():
    return tiny_config(
        channels=6, timesteps=16, temporal_filters=4, ds_pointwise_out=8,
        token_dim=8, hidden_dim=16, heads=2, mlp_dim=24, encoder_depth=1,
        dropout_p=0.0,
        temporal_kernel=(1, 4), temporal_stride=(1, 4), temporal_pad=(0, 2),
        channel_depthwise_kernel=(4, 1), channel_depthwise_stride=(4, 1),
        channel_depthwise_pad=(1, 0),
    )


def test_end_to_end_gradient_check():
    cfg = _ultra_config()
    model = build_model(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 1, cfg.channels, cfg.timesteps))

    def loss_value():
        return forward(model, Tensor(x), training=True, seed=0).sum().item()

    model.zero_grad()
    forward(model, Tensor(x), training=True, seed=0).sum().backward()

    h = 1e-5
    worst = 0.0
    for name, param in model.params.items():
        flat = param.data.reshape(-1)
        gflat = param.grad.reshape(-1)
        n_probe = min(4, flat.size)
        idxs = rng.choice(flat.size, size=n_probe, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            est = (fp - fm) / (2 * h)
            err = rel_err(np.array([gflat[i]]), np.array([est]))
            worst = max(worst, err)
            assert err < 1e-3, f"{name}[{i}]: analytic {gflat[i]}, fd {est}"
    assert worst < 1e-3
