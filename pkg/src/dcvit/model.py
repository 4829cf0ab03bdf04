"""EEG-DCViT assembly: conv patch embedding, transformer encoder, heads.

The embedding is a quad-step conv stack: a wide temporal conv (band-pass
style filters along time), an optional depthwise-separable block
(depthwise 3x3 + pointwise 1x1), and a channel-depthwise conv that
collapses electrode rows into the token grid. Tokens are projected to the
encoder width, a class token is prepended, learned positional embeddings
added, and the class token read out through a two-linear head with
dropout in between.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericError
from .tensor import (
    Conv2dSpec,
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    conv2d_output_hw,
    dropout,
    gelu,
    layer_norm,
    linear,
    softmax,
)

__all__ = [
    "ModelConfig",
    "Model",
    "build_model",
    "forward",
    "count_parameters",
    "ds_block_toggle",
    "token_grid",
    "embed_stage_shapes",
    "parameter_spec",
    "tiny_config",
]

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 129
    timesteps: int = 500
    temporal_filters: int = 256
    temporal_kernel: tuple = (1, 36)
    temporal_stride: tuple = (1, 36)
    temporal_pad: tuple = (0, 2)
    ds_block: bool = True
    ds_depthwise_kernel: tuple = (3, 3)  # stride 1, same padding
    ds_pointwise_out: int = 512
    channel_depthwise_kernel: tuple = (8, 1)
    channel_depthwise_stride: tuple = (8, 1)
    channel_depthwise_pad: tuple = (1, 0)
    token_dim: int = 512
    hidden_dim: int = 768
    encoder_depth: int = 12
    heads: int = 12
    mlp_dim: int = 3072
    dropout_p: float = 0.1
    head_mode: str = REGRESSION
    n_classes: int = 25
    # fixed output multiplier for the regression head: stored weights stay
    # O(1) while predictions span pixel coordinates
    head_scale: float = 512.0

    def __post_init__(self):
        for name in ("temporal_kernel", "temporal_stride", "temporal_pad",
                     "ds_depthwise_kernel", "channel_depthwise_kernel",
                     "channel_depthwise_stride", "channel_depthwise_pad"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.head_mode not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.head_mode == CLASSIFICATION and self.n_classes < 2:
            raise ValueError("classification head requires n_classes >= 2")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if any(k % 2 == 0 for k in self.ds_depthwise_kernel):
            raise ValueError("ds_depthwise_kernel must be odd for same padding")
        ch_in = self.ds_pointwise_out if self.ds_block else self.temporal_filters
        if self.token_dim % ch_in:
            raise ValueError(
                f"token_dim {self.token_dim} must be divisible by the "
                f"channel-depthwise group count {ch_in}")
        token_grid(self)  # raises on degenerate conv geometry

    @property
    def outputs(self) -> int:
        return 2 if self.head_mode == REGRESSION else self.n_classes


def ds_block_toggle(config: ModelConfig) -> ModelConfig:
    """Flip the depthwise-separable block on/off (ablation baseline)."""
    return dataclasses.replace(config, ds_block=not config.ds_block)


def tiny_config(**overrides) -> ModelConfig:
    """A desk-scale config for tests and quick CLI runs."""
    base = dict(
        channels=8, timesteps=40, temporal_filters=8, ds_pointwise_out=16,
        token_dim=16, hidden_dim=32, encoder_depth=2, heads=2, mlp_dim=64,
        dropout_p=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _conv_specs(config: ModelConfig) -> dict:
    specs = {
        "temporal": Conv2dSpec(
            1, config.temporal_filters, kernel=config.temporal_kernel,
            stride=config.temporal_stride, padding=config.temporal_pad),
    }
    ch_in = config.temporal_filters
    if config.ds_block:
        kh, kw = config.ds_depthwise_kernel
        specs["ds_depthwise"] = Conv2dSpec(
            ch_in, ch_in, kernel=(kh, kw), stride=(1, 1),
            padding=(kh // 2, kw // 2), groups=ch_in)
        specs["ds_pointwise"] = Conv2dSpec(
            ch_in, config.ds_pointwise_out, kernel=(1, 1))
        ch_in = config.ds_pointwise_out
    specs["channel"] = Conv2dSpec(
        ch_in, config.token_dim, kernel=config.channel_depthwise_kernel,
        stride=config.channel_depthwise_stride,
        padding=config.channel_depthwise_pad, groups=ch_in)
    return specs


def embed_stage_shapes(config: ModelConfig) -> dict:
    """Closed-form [C, H, W] after each conv stage of the patch embedding."""
    specs = _conv_specs(config)
    h, w = config.channels, config.timesteps
    shapes = {}
    h, w = specs["temporal"].output_hw(h, w)
    shapes["temporal"] = (config.temporal_filters, h, w)
    if config.ds_block:
        h, w = specs["ds_depthwise"].output_hw(h, w)
        shapes["ds"] = (config.ds_pointwise_out, h, w)
    h, w = specs["channel"].output_hw(h, w)
    shapes["channel"] = (config.token_dim, h, w)
    return shapes


def token_grid(config: ModelConfig) -> tuple:
    """(rows, cols) of the token grid produced by the channel-depthwise stage."""
    _, h, w = embed_stage_shapes(config)["channel"]
    return (h, w)


def parameter_spec(config: ModelConfig) -> dict:
    """Ordered name -> (shape, init_kind, trainable) map; the single source
    of truth for model construction and checkpoint shape validation.

    init kinds: trunc (truncated normal, std 0.02), fan_in (conv scaling),
    zeros, ones.
    """
    specs = _conv_specs(config)
    d = config.hidden_dim
    rows, cols = token_grid(config)
    n_tokens = rows * cols
    out: dict = {}

    def conv_entry(prefix, cs: Conv2dSpec):
        out[f"{prefix}.weight"] = (
            (cs.out_channels, cs.in_channels // cs.groups, *cs.kernel),
            "fan_in", True)
        out[f"{prefix}.bias"] = ((cs.out_channels,), "zeros", True)

    def bn_entry(prefix, c):
        out[f"{prefix}.gamma"] = ((c,), "ones", True)
        out[f"{prefix}.beta"] = ((c,), "zeros", True)
        out[f"{prefix}.running_mean"] = ((c,), "zeros", False)
        out[f"{prefix}.running_var"] = ((c,), "ones", False)

    def linear_entry(prefix, dout, din, init="trunc"):
        out[f"{prefix}.weight"] = ((dout, din), init, True)
        out[f"{prefix}.bias"] = ((dout,), "zeros", True)

    conv_entry("temporal", specs["temporal"])
    bn_entry("temporal_bn", config.temporal_filters)
    if config.ds_block:
        conv_entry("ds.depthwise", specs["ds_depthwise"])
        conv_entry("ds.pointwise", specs["ds_pointwise"])
        bn_entry("ds_bn", config.ds_pointwise_out)
    conv_entry("channel", specs["channel"])
    bn_entry("channel_bn", config.token_dim)

    linear_entry("embed", d, config.token_dim)
    out["cls_token"] = ((1, 1, d), "trunc", True)
    out["pos_embed"] = ((1, n_tokens + 1, d), "trunc", True)

    for i in range(config.encoder_depth):
        p = f"blocks.{i}"
        out[f"{p}.ln1.gain"] = ((d,), "ones", True)
        out[f"{p}.ln1.offset"] = ((d,), "zeros", True)
        for proj in ("q", "k", "v", "o"):
            linear_entry(f"{p}.attn.{proj}", d, d)
        out[f"{p}.ln2.gain"] = ((d,), "ones", True)
        out[f"{p}.ln2.offset"] = ((d,), "zeros", True)
        linear_entry(f"{p}.mlp.fc1", config.mlp_dim, d)
        linear_entry(f"{p}.mlp.fc2", d, config.mlp_dim)

    out["final_ln.gain"] = ((d,), "ones", True)
    out["final_ln.offset"] = ((d,), "zeros", True)
    linear_entry("head.fc1", d, d)
    linear_entry("head.fc2", config.outputs, d)
    return out


@dataclass
class Model:
    """Named parameter collection plus the config that shaped it."""

    config: ModelConfig
    params: dict = field(default_factory=dict)    # trainable tensors
    buffers: dict = field(default_factory=dict)   # batch-norm running stats

    def named_tensors(self):
        yield from self.params.items()
        yield from self.buffers.items()

    def state_copy(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state(self, state: dict) -> None:
        for name, t in self.named_tensors():
            t.data = state[name].copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def build_model(config: ModelConfig, seed: int = 0,
                dtype=np.float32) -> Model:
    """Deterministically initialize all parameters for ``config``.

    Projections and embeddings draw from a truncated normal (std 0.02),
    conv kernels from a fan-in-scaled normal. Same seed, same bits.
    """
    rng = np.random.default_rng(seed)
    model = Model(config=config)
    for name, (shape, kind, trainable) in parameter_spec(config).items():
        if kind == "trunc":
            data = _trunc_normal(rng, shape, 0.02)
        elif kind == "fan_in":
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) / np.sqrt(fan_in)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:  # pragma: no cover
            raise AssertionError(kind)
        t = Tensor(data.astype(dtype), requires_grad=trainable)
        (model.params if trainable else model.buffers)[name] = t
    return model


def count_parameters(model: Model) -> int:
    """Total trainable parameter count (buffers excluded)."""
    return sum(t.size for t in model.params.values())


def _check_finite(x: Tensor, stage: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values after stage {stage!r}")
    return x


def _batch_norm(x: Tensor, model: Model, prefix: str, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    gamma = model.params[f"{prefix}.gamma"].reshape(1, -1, 1, 1)
    beta = model.params[f"{prefix}.beta"].reshape(1, -1, 1, 1)
    run_mean = model.buffers[f"{prefix}.running_mean"]
    run_var = model.buffers[f"{prefix}.running_var"]
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        # running estimates track the biased batch statistics so that eval
        # converges to the train-mode normalization exactly
        run_mean.data = ((1 - momentum) * run_mean.data
                         + momentum * mu.data.reshape(-1).astype(run_mean.dtype))
        run_var.data = ((1 - momentum) * run_var.data
                        + momentum * var.data.reshape(-1).astype(run_var.dtype))
        xhat = (x - mu) / ((var + eps) ** 0.5)
    else:
        rm = run_mean.reshape(1, -1, 1, 1)
        rv = run_var.reshape(1, -1, 1, 1)
        xhat = (x - rm) / ((rv + eps) ** 0.5)
    return xhat * gamma + beta


def _attention(z: Tensor, model: Model, prefix: str, heads: int) -> Tensor:
    b, n, d = z.shape
    dh = d // heads
    p = model.params

    def split(name):
        proj = linear(z, p[f"{prefix}.{name}.weight"], p[f"{prefix}.{name}.bias"])
        return proj.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split("q"), split("k"), split("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(mixed, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])


def forward(model: Model, batch: Tensor, training: bool = False,
            seed: int = 0) -> Tensor:
    """Run the network on a [B, 1, C, T] batch.

    Returns [B, 2] pixel coordinates in regression mode, [B, k] logits in
    classification mode. Eval mode is a pure function of inputs+weights;
    training mode consumes ``seed`` for dropout and updates batch-norm
    running statistics.
    """
    cfg = model.config
    if isinstance(batch, Tensor):
        x = batch
    else:
        x = Tensor(batch)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.channels, cfg.timesteps):
        raise ValueError(
            f"batch shape {x.shape} does not match [B, 1, {cfg.channels}, "
            f"{cfg.timesteps}]")
    rng = np.random.default_rng(seed)
    p = model.params
    specs = _conv_specs(cfg)

    x = conv2d(x, p["temporal.weight"], p["temporal.bias"], specs["temporal"])
    x = gelu(_batch_norm(x, model, "temporal_bn", training))
    _check_finite(x, "temporal")

    if cfg.ds_block:
        x = conv2d(x, p["ds.depthwise.weight"], p["ds.depthwise.bias"],
                   specs["ds_depthwise"])
        x = conv2d(x, p["ds.pointwise.weight"], p["ds.pointwise.bias"],
                   specs["ds_pointwise"])
        x = gelu(_batch_norm(x, model, "ds_bn", training))
        _check_finite(x, "ds_block")

    x = conv2d(x, p["channel.weight"], p["channel.bias"], specs["channel"])
    x = _batch_norm(x, model, "channel_bn", training)
    _check_finite(x, "channel")

    b = x.shape[0]
    n_tokens = x.shape[2] * x.shape[3]
    tokens = x.reshape(b, cfg.token_dim, n_tokens).transpose(0, 2, 1)
    tokens = linear(tokens, p["embed.weight"], p["embed.bias"])
    cls = broadcast_to(p["cls_token"], (b, 1, cfg.hidden_dim))
    z = concat([cls, tokens], axis=1) + p["pos_embed"]
    _check_finite(z, "embedding")

    for i in range(cfg.encoder_depth):
        blk = f"blocks.{i}"
        normed = layer_norm(z, p[f"{blk}.ln1.gain"], p[f"{blk}.ln1.offset"])
        z = z + _attention(normed, model, f"{blk}.attn", cfg.heads)
        normed = layer_norm(z, p[f"{blk}.ln2.gain"], p[f"{blk}.ln2.offset"])
        h = linear(normed, p[f"{blk}.mlp.fc1.weight"], p[f"{blk}.mlp.fc1.bias"])
        z = z + linear(gelu(h), p[f"{blk}.mlp.fc2.weight"], p[f"{blk}.mlp.fc2.bias"])
        _check_finite(z, blk)

    z = layer_norm(z, p["final_ln.gain"], p["final_ln.offset"])
    head = z[:, 0, :]
    head = linear(head, p["head.fc1.weight"], p["head.fc1.bias"])
    head = dropout(head, cfg.dropout_p, training, rng)
    out = linear(head, p["head.fc2.weight"], p["head.fc2.bias"])
    if cfg.head_mode == REGRESSION and cfg.head_scale != 1.0:
        out = out * cfg.head_scale
    return _check_finite(out, "head")
