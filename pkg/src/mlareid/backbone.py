"""A small residual encoder whose last block is the attention block.

Three stride-2 stages shrink the input by 8x in each spatial dimension;
the final residual block of the last stage is swapped for the MLA block,
and an embedding head (global average pool, linear projection, L2 norm)
produces unit-norm feature vectors for clustering and retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import MODES, MlaBlockParams, init_mla_block, mla_block_forward
from .autodiff import (
    Parameter,
    Tensor,
    add,
    conv2d,
    global_avg_pool,
    l2_normalize,
    matmul,
    relu,
)
from .errors import ConfigError, DataFormatError, DimensionError
from .layers import BnParams, init_bn, kaiming_conv, kaiming_linear


@dataclass
class BackboneConfig:
    input_hw: tuple[int, int] = (64, 32)
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    embed_dim: int = 64
    attention_mode: str = "all"
    heads: int = 4

    @property
    def final_hw(self) -> tuple[int, int]:
        h, w = self.input_hw
        scale = 2 ** len(self.stage_channels)
        return h // scale, w // scale

    @property
    def c_mid(self) -> int:
        return self.stage_channels[-1] // 2

    @property
    def c_k(self) -> int:
        return self.c_mid // 2

    def validate(self) -> None:
        if len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError(
                f"stage_channels ({len(self.stage_channels)}) and blocks_per_stage "
                f"({len(self.blocks_per_stage)}) lengths differ"
            )
        if not self.stage_channels:
            raise ConfigError("at least one stage is required")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("every stage needs at least one block")
        h, w = self.input_hw
        scale = 2 ** len(self.stage_channels)
        if h % scale or w % scale:
            raise ConfigError(f"input {h}x{w} is not divisible by the total stride {scale}")
        fh, fw = self.final_hw
        if fh < 2 or fw < 2:
            raise ConfigError(
                f"final feature map {fh}x{fw} is below 2x2; attention needs multiple positions"
            )
        if self.attention_mode not in MODES:
            raise ConfigError(
                f"unknown attention mode {self.attention_mode!r}, expected one of {MODES}"
            )
        if self.c_mid < 1 or self.c_k < 1:
            raise ConfigError(f"last stage width {self.stage_channels[-1]} is too narrow")


@dataclass
class BasicBlockParams:
    """Plain two-conv residual block, stride on the first conv."""

    conv1: Parameter
    bn1: BnParams
    conv2: Parameter
    bn2: BnParams
    shortcut: Parameter | None
    bn_sc: BnParams | None
    stride: int

    def parameters(self) -> list[Parameter]:
        out = [self.conv1, self.conv2] + self.bn1.parameters() + self.bn2.parameters()
        if self.shortcut is not None:
            out.append(self.shortcut)
            out += self.bn_sc.parameters()
        return out

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {**self.bn1.state_entries(), **self.bn2.state_entries()}
        if self.bn_sc is not None:
            out.update(self.bn_sc.state_entries())
        return out


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    stem: Parameter
    stem_bn: BnParams
    blocks: list[BasicBlockParams] = field(default_factory=list)
    mla: MlaBlockParams | None = None
    embed_w: Parameter | None = None
    embed_b: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        out = [self.stem] + self.stem_bn.parameters()
        for block in self.blocks:
            out += block.parameters()
        out += self.mla.parameters()
        out += [self.embed_w, self.embed_b]
        return out

    def state_entries(self) -> dict[str, np.ndarray]:
        out = self.stem_bn.state_entries()
        for block in self.blocks:
            out.update(block.state_entries())
        out.update(self.mla.state_entries())
        return out


def _init_basic_block(
    rng: np.random.Generator, c_in: int, c_out: int, stride: int, name: str
) -> BasicBlockParams:
    shortcut = bn_sc = None
    if stride != 1 or c_in != c_out:
        shortcut = Parameter(f"{name}.shortcut", kaiming_conv(rng, (1, 1, c_in, c_out)))
        bn_sc = init_bn(c_out, f"{name}.bn_sc")
    return BasicBlockParams(
        conv1=Parameter(f"{name}.conv1", kaiming_conv(rng, (3, 3, c_in, c_out))),
        bn1=init_bn(c_out, f"{name}.bn1"),
        conv2=Parameter(f"{name}.conv2", kaiming_conv(rng, (3, 3, c_out, c_out))),
        bn2=init_bn(c_out, f"{name}.bn2"),
        shortcut=shortcut,
        bn_sc=bn_sc,
        stride=stride,
    )


def build_backbone(cfg: BackboneConfig, seed: int) -> BackboneParams:
    """Deterministically initialize all parameters from one seed.

    The trunk, the attention block and the embedding head draw from
    separate child streams, so changing attention_mode leaves every other
    parameter bit-identical.
    """
    cfg.validate()
    trunk_ss, mla_ss, embed_ss = np.random.SeedSequence(seed).spawn(3)
    trunk_rng = np.random.default_rng(trunk_ss)

    params = BackboneParams(
        cfg=cfg,
        stem=Parameter("backbone.stem", kaiming_conv(trunk_rng, (3, 3, 3, cfg.stage_channels[0]))),
        stem_bn=init_bn(cfg.stage_channels[0], "backbone.stem_bn"),
    )
    c_prev = cfg.stage_channels[0]
    for s, (c_out, n_blocks) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
        for b in range(n_blocks):
            stride = 2 if b == 0 else 1
            is_last = s == len(cfg.stage_channels) - 1 and b == n_blocks - 1
            if is_last:
                fh, fw = cfg.final_hw
                params.mla = init_mla_block(
                    np.random.default_rng(mla_ss),
                    c_prev,
                    cfg.c_mid,
                    c_out,
                    cfg.attention_mode,
                    cfg.heads,
                    cfg.c_k,
                    fh,
                    fw,
                    "mla",
                    stride=stride,
                )
            else:
                params.blocks.append(
                    _init_basic_block(trunk_rng, c_prev, c_out, stride, f"backbone.s{s}b{b}")
                )
            c_prev = c_out

    embed_rng = np.random.default_rng(embed_ss)
    params.embed_w = Parameter(
        "backbone.embed.weight", kaiming_linear(embed_rng, (cfg.stage_channels[-1], cfg.embed_dim))
    )
    params.embed_b = Parameter("backbone.embed.bias", np.zeros(cfg.embed_dim))
    return params


def _basic_forward(x: Tensor, p: BasicBlockParams, training: bool) -> Tensor:
    y = relu(p.bn1.apply(conv2d(x, p.conv1, stride=p.stride, zero_pad=1), training))
    y = p.bn2.apply(conv2d(y, p.conv2, zero_pad=1), training)
    if p.shortcut is None:
        s = x
    else:
        s = p.bn_sc.apply(conv2d(x, p.shortcut, stride=p.stride), training)
    return relu(add(y, s))


def forward_to_featuremap(images: Tensor, params: BackboneParams, training: bool) -> Tensor:
    """Run the trunk and the attention block, returning the pre-pool map."""
    cfg = params.cfg
    if images.ndim != 4 or images.shape[1:] != (*cfg.input_hw, 3):
        raise DimensionError(
            f"backbone expects input [n,{cfg.input_hw[0]},{cfg.input_hw[1]},3], got {images.shape}"
        )
    x = relu(params.stem_bn.apply(conv2d(images, params.stem, zero_pad=1), training))
    for block in params.blocks:
        x = _basic_forward(x, block, training)
    return mla_block_forward(x, params.mla, cfg.attention_mode, training)


def embed_from_featuremap(fmap: Tensor, params: BackboneParams) -> Tensor:
    """Pool, project and L2-normalize a feature map into embedding rows."""
    pooled = global_avg_pool(fmap)
    projected = add(matmul(pooled, params.embed_w), params.embed_b)
    return l2_normalize(projected, axis=-1)


def extract_features(images: Tensor, params: BackboneParams, training: bool) -> Tensor:
    """Unit-norm embedding rows for a batch of images."""
    return embed_from_featuremap(forward_to_featuremap(images, params, training), params)


def named_entries(params: BackboneParams) -> dict[str, np.ndarray]:
    """All learnable tensors plus batch-norm running stats, keyed by name."""
    out = {p.name: p.data for p in params.parameters()}
    out.update(params.state_entries())
    return out


def load_named_entries(params: BackboneParams, entries: dict[str, np.ndarray]) -> None:
    """Restore parameters and running stats in place from checkpoint entries."""
    for p in params.parameters():
        if p.name not in entries:
            raise DataFormatError(f"checkpoint is missing entry {p.name!r}")
        value = entries[p.name]
        if value.shape != p.data.shape:
            raise DataFormatError(
                f"checkpoint entry {p.name!r} has shape {value.shape}, expected {p.data.shape}"
            )
        p.data = np.ascontiguousarray(value)
        p.grad = None
    for name, target in params.state_entries().items():
        if name not in entries:
            raise DataFormatError(f"checkpoint is missing entry {name!r}")
        value = entries[name]
        if value.shape != target.shape:
            raise DataFormatError(
                f"checkpoint entry {name!r} has shape {value.shape}, expected {target.shape}"
            )
        target[...] = value
