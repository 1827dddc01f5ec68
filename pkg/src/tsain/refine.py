"""Stacked deformable refinement blocks (DRBs).

A block re-aligns each input-frame feature against the current middle
feature with a modulated deformable conv, then refreshes the middle
feature with a residual 1x1 fusion of the aligned triple. A zeroed
refresh conv turns the block into a pass-through for the middle feature.
"""

from __future__ import annotations

from dataclasses import dataclass

from .deformconv import OffsetPredictorParams, deform_conv2d, predict_offsets
from .numerics import (
    ConfigError,
    ConvParams,
    ParamBuilder,
    ShapeError,
    Tensor4,
    add,
    concat_channels,
    conv2d,
)
from .tsa import SLOPE, build_offset_predictor


@dataclass
class DrbParams:
    pred0: OffsetPredictorParams
    pred2: OffsetPredictorParams
    dconv0: ConvParams
    dconv2: ConvParams
    refresh: ConvParams

    def __post_init__(self):
        if self.refresh.c_in != 3 * self.dconv0.c_out:
            raise ShapeError("DRB refresh conv must take exactly 3C input channels")


def build_drb_params(pb: ParamBuilder, name: str, channels: int) -> DrbParams:
    pred0 = build_offset_predictor(pb, f"{name}.side0.pred", 2 * channels, channels)
    dconv0 = pb.conv(f"{name}.side0.dconv", channels, channels, 3)
    pred2 = build_offset_predictor(pb, f"{name}.side2.pred", 2 * channels, channels)
    dconv2 = pb.conv(f"{name}.side2.dconv", channels, channels, 3)
    refresh = pb.conv(f"{name}.refresh", 3 * channels, channels, 1, zero=True)
    return DrbParams(pred0, pred2, dconv0, dconv2, refresh)


def drb_forward(f0: Tensor4, f1: Tensor4, f2: Tensor4, params: DrbParams,
                trace: dict | None = None, tag: str = "drb"
                ) -> tuple[Tensor4, Tensor4, Tensor4]:
    if not f0.shape == f1.shape == f2.shape:
        raise ShapeError(f"DRB inputs differ in shape: {f0.shape}, {f1.shape}, {f2.shape}")
    off0, m0 = predict_offsets(concat_channels(f0, f1), params.pred0, SLOPE)
    f0a = deform_conv2d(f0, params.dconv0, off0, m0)
    off2, m2 = predict_offsets(concat_channels(f2, f1), params.pred2, SLOPE)
    f2a = deform_conv2d(f2, params.dconv2, off2, m2)
    if trace is not None:
        trace[f"{tag}.0"] = (f0, params.dconv0, off0, m0)
        trace[f"{tag}.2"] = (f2, params.dconv2, off2, m2)
    f1n = add(f1, conv2d(concat_channels(f0a, f1, f2a), params.refresh))
    return f0a, f1n, f2a


def stacked_drb(f0: Tensor4, f1: Tensor4, f2: Tensor4, blocks: list[DrbParams],
                n: int | None = None, trace: dict | None = None
                ) -> tuple[Tensor4, Tensor4, Tensor4]:
    """Apply the first ``n`` blocks in sequence; ``n=0`` returns the inputs."""
    n = len(blocks) if n is None else n
    if not 0 <= n <= len(blocks):
        raise ConfigError(f"requested {n} DRBs but only {len(blocks)} parameter sets exist")
    for i in range(n):
        f0, f1, f2 = drb_forward(f0, f1, f2, blocks[i], trace, f"drb{i + 1}")
    return f0, f1, f2
