"""End-to-end interpolation network: extract, interpolate, refine, reconstruct."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    ConfigError,
    ConvParams,
    ParamBuilder,
    ParamStore,
    ShapeError,
    Tensor4,
    add,
    concat_channels,
    conv2d,
    leaky_relu,
)
from .refine import DrbParams, build_drb_params, stacked_drb
from .tsa import SLOPE, TsaParams, build_tsa_params, tsa_forward


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    k1: int = 2
    k2: int = 4
    rsab_count: int = 3
    drb_count: int = 3
    pyramid_levels: int = 2
    image_channels: int = 1

    def __post_init__(self):
        for name in ("k1", "k2", "rsab_count", "drb_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("channels", "pyramid_levels", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(channels=64, k1=5, k2=40, rsab_count=3, drb_count=3, pyramid_levels=3)

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(channels=16, k1=2, k2=4, rsab_count=3, drb_count=3, pyramid_levels=2)

    def as_vector(self) -> np.ndarray:
        return np.array(list(asdict(self).values()), dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "ModelConfig":
        names = list(cls.__dataclass_fields__)
        if len(v) != len(names):
            raise ConfigError(f"config vector has {len(v)} entries, expected {len(names)}")
        return cls(**{k: int(round(x)) for k, x in zip(names, v)})

    @property
    def divisor(self) -> int:
        return 2 ** (self.pyramid_levels - 1)


ResBlock = tuple[ConvParams, ConvParams]


@dataclass
class TsainParams:
    config: ModelConfig
    store: ParamStore
    head: ConvParams
    extract_blocks: list[ResBlock]
    tsa: TsaParams
    drbs: list[DrbParams]
    merge: ConvParams
    recon_blocks: list[ResBlock]
    tail: ConvParams
    seed: int = 0
    epoch: int = 0


def _res_block(pb: ParamBuilder, name: str, channels: int) -> ResBlock:
    return (pb.conv(f"{name}.conv1", channels, channels, 3),
            pb.conv(f"{name}.conv2", channels, channels, 3, zero=True))


def init_params(config: ModelConfig, seed: int = 0) -> TsainParams:
    """Fresh parameters; every tensor is registered in one store under a dotted name."""
    store = ParamStore()
    pb = ParamBuilder(store, seed)
    c = config.channels
    head = pb.conv("extract.head", config.image_channels, c, 3)
    extract_blocks = [_res_block(pb, f"extract.rb{i + 1}", c) for i in range(config.k1)]
    tsa = build_tsa_params(pb, "tsa", c, config.pyramid_levels, config.rsab_count)
    drbs = [build_drb_params(pb, f"refine.drb{i + 1}", c) for i in range(config.drb_count)]
    merge = pb.conv("recon.merge", 3 * c, c, 1)
    recon_blocks = [_res_block(pb, f"recon.rb{i + 1}", c) for i in range(config.k2)]
    tail = pb.conv("recon.tail", c, config.image_channels, 3)
    return TsainParams(config, store, head, extract_blocks, tsa, drbs, merge,
                       recon_blocks, tail, seed)


def residual_block(x: Tensor4, params: ResBlock) -> Tensor4:
    conv1, conv2 = params
    if conv1.c_in != conv1.c_out or conv2.c_in != conv2.c_out or conv1.c_in != x.shape[1]:
        raise ShapeError("residual block convs must preserve the input channel count")
    return add(x, conv2d(leaky_relu(conv2d(x, conv1), SLOPE), conv2))


def extract_features(frame: Tensor4, params: TsainParams) -> Tensor4:
    if frame.shape[1] != params.config.image_channels:
        raise ShapeError(
            f"frame has {frame.shape[1]} channels, model expects {params.config.image_channels}"
        )
    f = conv2d(frame, params.head)
    for block in params.extract_blocks:
        f = residual_block(f, block)
    return f


def reconstruct(f0a: Tensor4, f1: Tensor4, f2a: Tensor4, params: TsainParams) -> Tensor4:
    """Raw (unclamped) image from the refined feature triple."""
    if not f0a.shape == f1.shape == f2a.shape:
        raise ShapeError(f"reconstruct inputs differ: {f0a.shape}, {f1.shape}, {f2a.shape}")
    f = conv2d(concat_channels(f0a, f1, f2a), params.merge)
    for block in params.recon_blocks:
        f = residual_block(f, block)
    return conv2d(f, params.tail)


def check_image_pair(i0: Tensor4, i2: Tensor4, config: ModelConfig) -> None:
    if i0.shape != i2.shape:
        raise ShapeError(f"input frames differ in shape: {i0.shape} vs {i2.shape}")
    _, _, h, w = i0.shape
    d = config.divisor
    if h % d or w % d:
        raise ConfigError(
            f"frame extents {h}x{w} must be divisible by {d} for pyramid_levels L={config.pyramid_levels}"
        )


def tsain_forward(i0: Tensor4, i2: Tensor4, params: TsainParams,
                  trace: dict | None = None) -> Tensor4:
    """Predict the middle frame from its two neighbours.

    Pass a dict as ``trace`` to collect, per deformable block, the tuple
    ``(input, kernel, offsets, mask)``; keys are ``tsa0``, ``tsa2``,
    ``rsab<i>``, ``drb<i>.0`` and ``drb<i>.2``.
    """
    cfg = params.config
    check_image_pair(i0, i2, cfg)
    f0 = extract_features(i0, params)
    f2 = extract_features(i2, params)
    f1 = tsa_forward(f0, f2, params.tsa, cfg.rsab_count, trace)
    f0a, f1, f2a = stacked_drb(f0, f1, f2, params.drbs, cfg.drb_count, trace)
    return reconstruct(f0a, f1, f2a, params)


def count_parameters(params: TsainParams) -> int:
    return params.store.num_values()
