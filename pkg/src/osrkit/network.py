"""Network assembly: encoder, mirrored decoder, and linear heads.

The encoder maps padded grayscale images to a 6-dimensional representation
through two conv/pool stages and two fully connected stages; the decoder
mirrors it back to pixel space through upsample/conv stages ending in a
sigmoid. Heads are bare affine maps on the representation (softmax lives
in the losses).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    ReLU,
    Reshape,
    Sigmoid,
    Upsample2x,
)


@dataclass
class EncoderConfig:
    """Architecture of the shared encoder.

    `dropout_keep` is the probability a unit survives; set it to 0.8 to get
    the drop-rate-0.2 reading instead of the literal keep-probability-0.2
    default.
    """

    input_size: int = 32
    in_channels: int = 1
    conv_channels: tuple[int, int] = (32, 64)
    conv_kernel: int = 3
    dense_units: tuple[int, int] = (256, 128)
    repr_dim: int = 6
    dropout_keep: float = 0.2
    use_batchnorm: bool = True

    def __post_init__(self):
        if self.input_size % 4 != 0:
            raise ValueError("input_size must be divisible by 4 (two stride-2 pools)")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")

    @property
    def pooled_size(self) -> int:
        return self.input_size // 4

    @property
    def flat_dim(self) -> int:
        return self.pooled_size * self.pooled_size * self.conv_channels[1]


@dataclass
class DecoderConfig:
    """Mirror of an EncoderConfig: dense stages reversed, pools inverted by
    nearest-neighbour upsampling, sigmoid pixel output."""

    dense_units: tuple[int, int]
    conv_channels: tuple[int, int, int]
    conv_kernel: int
    output_size: int
    out_channels: int
    use_batchnorm: bool

    @classmethod
    def from_encoder(cls, enc: EncoderConfig) -> "DecoderConfig":
        return cls(
            dense_units=(enc.dense_units[1], enc.dense_units[0]),
            conv_channels=(enc.conv_channels[1], enc.conv_channels[0], enc.in_channels),
            conv_kernel=enc.conv_kernel,
            output_size=enc.input_size,
            out_channels=enc.in_channels,
            use_batchnorm=enc.use_batchnorm,
        )


@dataclass
class HeadConfig:
    """Affine classification head on the representation layer."""

    input_dim: int = 6
    output_dim: int = 4

    def __post_init__(self):
        if self.output_dim < 2:
            raise ValueError("head needs at least 2 outputs")


class Sequential:
    """Ordered list of named layers with a shared backward pass."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers:
            for pname, p in layer.params.items():
                out.append((f"{name}.{pname}", p))
        return out

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers:
            for pname, g in layer.grads.items():
                out.append((f"{name}.{pname}", g))
        return out

    def param_count(self) -> int:
        return sum(int(p.size) for _, p in self.named_params())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters plus batch-norm running stats."""
        out = dict(self.named_params())
        for name, layer in self.layers:
            if isinstance(layer, BatchNorm):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        # state_arrays() returns the live parameter and running-stat arrays,
        # so copying into them in place restores the whole network
        for key, target in self.state_arrays().items():
            if key not in arrays:
                raise KeyError(f"checkpoint missing tensor {key!r}")
            src = arrays[key]
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {key!r}: {src.shape} vs {target.shape}")
            target[...] = src


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator,
                  dropout_rng: np.random.Generator | None = None,
                  dtype=np.float32) -> Sequential:
    """Encoder per config: conv-BN-ReLU-pool x2, dense-BN-ReLU-dropout x2,
    then a bare affine map to the representation."""
    c1, c2 = cfg.conv_channels
    d1, d2 = cfg.dense_units
    drop_rng = dropout_rng if dropout_rng is not None else rng
    layers: list[tuple[str, Layer]] = []
    layers.append(("conv1", Conv2D(cfg.in_channels, c1, rng, cfg.conv_kernel, dtype,
                                   input_layer=True)))
    if cfg.use_batchnorm:
        layers.append(("bn1", BatchNorm(c1, dtype=dtype)))
    layers.append(("relu1", ReLU()))
    layers.append(("pool1", MaxPool2D()))
    layers.append(("conv2", Conv2D(c1, c2, rng, cfg.conv_kernel, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bn2", BatchNorm(c2, dtype=dtype)))
    layers.append(("relu2", ReLU()))
    layers.append(("pool2", MaxPool2D()))
    layers.append(("flat", Flatten()))
    layers.append(("fc1", Dense(cfg.flat_dim, d1, rng, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bnf1", BatchNorm(d1, dtype=dtype)))
    layers.append(("reluf1", ReLU()))
    layers.append(("dropf1", Dropout(cfg.dropout_keep, drop_rng)))
    layers.append(("fc2", Dense(d1, d2, rng, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bnf2", BatchNorm(d2, dtype=dtype)))
    layers.append(("reluf2", ReLU()))
    layers.append(("dropf2", Dropout(cfg.dropout_keep, drop_rng)))
    layers.append(("repr", Dense(d2, cfg.repr_dim, rng, dtype)))
    return Sequential(layers)


def build_decoder(enc_cfg: EncoderConfig, rng: np.random.Generator,
                  dtype=np.float32) -> Sequential:
    cfg = DecoderConfig.from_encoder(enc_cfg)
    s = enc_cfg.pooled_size
    cc0, cc1, cc2 = cfg.conv_channels
    d1, d2 = cfg.dense_units
    flat = s * s * cc0
    layers: list[tuple[str, Layer]] = []
    layers.append(("fc1", Dense(enc_cfg.repr_dim, d1, rng, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bnf1", BatchNorm(d1, dtype=dtype)))
    layers.append(("reluf1", ReLU()))
    layers.append(("fc2", Dense(d1, d2, rng, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bnf2", BatchNorm(d2, dtype=dtype)))
    layers.append(("reluf2", ReLU()))
    layers.append(("fc3", Dense(d2, flat, rng, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bnf3", BatchNorm(flat, dtype=dtype)))
    layers.append(("reluf3", ReLU()))
    layers.append(("unflat", Reshape((s, s, cc0))))
    layers.append(("up1", Upsample2x()))
    layers.append(("conv1", Conv2D(cc0, cc1, rng, cfg.conv_kernel, dtype)))
    if cfg.use_batchnorm:
        layers.append(("bn1", BatchNorm(cc1, dtype=dtype)))
    layers.append(("relu1", ReLU()))
    layers.append(("up2", Upsample2x()))
    layers.append(("conv2", Conv2D(cc1, cc2, rng, cfg.conv_kernel, dtype)))
    layers.append(("out", Sigmoid()))
    return Sequential(layers)


def build_head(cfg: HeadConfig, rng: np.random.Generator, dtype=np.float32) -> Sequential:
    return Sequential([("fc", Dense(cfg.input_dim, cfg.output_dim, rng, dtype))])


def encode(encoder: Sequential, pixels: np.ndarray, training: bool = False) -> np.ndarray:
    """Representation vectors for a padded image batch."""
    return encoder.forward(pixels, training=training)


def decode(decoder: Sequential, reprs: np.ndarray, training: bool = False) -> np.ndarray:
    """Pixel reconstructions in (0,1) from representation vectors."""
    return decoder.forward(reprs, training=training)


def head_forward(head: Sequential, reprs: np.ndarray, training: bool = False) -> np.ndarray:
    """Raw logits; the losses apply their own softmax."""
    return head.forward(reprs, training=training)


def config_fingerprint(config: dict) -> str:
    """Stable short hash identifying a configuration."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
