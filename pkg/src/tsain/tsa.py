"""Temporal spatial-adaptive feature interpolation.

Two deformable sampling branches pull the middle-frame feature out of
each input feature map, a 1x1 conv fuses them, and a cascade of residual
spatial-adaptive blocks (RSABs) resamples the fused feature against
itself. Offsets for the temporal branches come from a coarse-to-fine
feature pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

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
    leaky_relu,
    resize_double,
    resize_half,
    scale,
)

SLOPE = 0.1


def build_offset_predictor(pb: ParamBuilder, name: str, c_in: int, hidden: int,
                           k: int = 3) -> OffsetPredictorParams:
    """Offset/mask head with its final layer zeroed (zero offsets, mask 0.5)."""
    taps = k * k
    conv1 = pb.conv(f"{name}.conv1", c_in, hidden, 3)
    conv2 = pb.conv(f"{name}.conv2", hidden, 3 * taps, 3, zero=True)
    return OffsetPredictorParams(conv1, conv2, taps)


@dataclass
class PyramidLevel:
    predictor: OffsetPredictorParams
    # None at the coarsest level, which sees no upsampled offsets
    merge: ConvParams | None = None


@dataclass
class TemporalBranchParams:
    forward_levels: list[PyramidLevel]
    backward_levels: list[PyramidLevel]
    forward_kernel: ConvParams
    backward_kernel: ConvParams

    @property
    def levels(self) -> int:
        return len(self.forward_levels)


@dataclass
class RsabParams:
    predictor: OffsetPredictorParams
    dconv: ConvParams
    post: ConvParams


@dataclass
class TsaParams:
    temporal: TemporalBranchParams
    fusion: ConvParams
    rsabs: list[RsabParams] = field(default_factory=list)


def _build_levels(pb: ParamBuilder, name: str, channels: int, levels: int,
                  k: int = 3) -> list[PyramidLevel]:
    taps = k * k
    out = []
    for lvl in range(levels):
        merge = None
        if lvl < levels - 1:
            merge = pb.conv(f"{name}.level{lvl}.merge", 2 * channels + 2 * taps, channels, 3)
        pred_in = 2 * channels if merge is None else channels
        pred = build_offset_predictor(pb, f"{name}.level{lvl}.pred", pred_in, channels, k)
        out.append(PyramidLevel(pred, merge))
    return out


def build_temporal_params(pb: ParamBuilder, name: str, channels: int,
                          levels: int) -> TemporalBranchParams:
    if levels < 1:
        raise ConfigError(f"pyramid needs at least one level, got {levels}")
    fwd = _build_levels(pb, f"{name}.fwd", channels, levels)
    fwd_kernel = pb.conv(f"{name}.fwd.dconv", channels, channels, 3)
    bwd = _build_levels(pb, f"{name}.bwd", channels, levels)
    bwd_kernel = pb.conv(f"{name}.bwd.dconv", channels, channels, 3)
    return TemporalBranchParams(fwd, bwd, fwd_kernel, bwd_kernel)


def build_rsab_params(pb: ParamBuilder, name: str, channels: int) -> RsabParams:
    pred = build_offset_predictor(pb, f"{name}.pred", channels, channels)
    dconv = pb.conv(f"{name}.dconv", channels, channels, 3)
    post = pb.conv(f"{name}.post", channels, channels, 3, zero=True)
    return RsabParams(pred, dconv, post)


def build_tsa_params(pb: ParamBuilder, name: str, channels: int, levels: int,
                     rsab_count: int) -> TsaParams:
    temporal = build_temporal_params(pb, f"{name}.temporal", channels, levels)
    fusion = pb.conv(f"{name}.fusion", 2 * channels, channels, 1)
    rsabs = [build_rsab_params(pb, f"{name}.rsab{i + 1}", channels) for i in range(rsab_count)]
    return TsaParams(temporal, fusion, rsabs)


def pcd_predict_offsets(fa: Tensor4, fb: Tensor4, levels: list[PyramidLevel]
                        ) -> tuple[Tensor4, Tensor4]:
    """Coarse-to-fine offsets and mask for sampling ``fa`` towards the middle frame.

    Level 0 is full resolution. Each finer level concatenates its features
    with the x2-upsampled, value-doubled offsets of the level below, merges
    them with a 3x3 conv + leaky ReLU, then predicts its own offsets.
    """
    if fa.shape != fb.shape:
        raise ShapeError(f"pyramid inputs differ: {fa.shape} vs {fb.shape}")
    n_levels = len(levels)
    div = 2 ** (n_levels - 1)
    _, _, h, w = fa.shape
    if h % div or w % div:
        raise ConfigError(
            f"extents {h}x{w} are not divisible by {div} as required by {n_levels} pyramid levels"
        )
    feats = [concat_channels(fa, fb)]
    for _ in range(1, n_levels):
        feats.append(resize_half(feats[-1]))
    off, mask = predict_offsets(feats[-1], levels[-1].predictor, SLOPE)
    for lvl in range(n_levels - 2, -1, -1):
        up = scale(resize_double(off), 2.0)
        merged = leaky_relu(conv2d(concat_channels(feats[lvl], up), levels[lvl].merge), SLOPE)
        off, mask = predict_offsets(merged, levels[lvl].predictor, SLOPE)
    return off, mask


def temporal_interpolate(f0: Tensor4, f2: Tensor4, params: TemporalBranchParams,
                         trace: dict | None = None) -> tuple[Tensor4, Tensor4]:
    if f0.shape != f2.shape:
        raise ShapeError(f"temporal_interpolate: {f0.shape} vs {f2.shape}")
    off0, m0 = pcd_predict_offsets(f0, f2, params.forward_levels)
    f01 = deform_conv2d(f0, params.forward_kernel, off0, m0)
    off2, m2 = pcd_predict_offsets(f2, f0, params.backward_levels)
    f21 = deform_conv2d(f2, params.backward_kernel, off2, m2)
    if trace is not None:
        trace["tsa0"] = (f0, params.forward_kernel, off0, m0)
        trace["tsa2"] = (f2, params.backward_kernel, off2, m2)
    return f01, f21


def fuse(f01: Tensor4, f21: Tensor4, params: ConvParams) -> Tensor4:
    if f01.shape != f21.shape:
        raise ShapeError(f"fuse: {f01.shape} vs {f21.shape}")
    if params.kernel != (1, 1):
        raise ConfigError(f"fusion conv must be 1x1, got {params.kernel}")
    return conv2d(concat_channels(f01, f21), params)


def rsab_forward(ft: Tensor4, params: RsabParams, trace: dict | None = None,
                 tag: str = "rsab") -> Tensor4:
    if ft.shape[1] != params.dconv.c_in:
        raise ShapeError(f"RSAB expects {params.dconv.c_in} channels, got {ft.shape[1]}")
    off, mask = predict_offsets(ft, params.predictor, SLOPE)
    if trace is not None:
        trace[tag] = (ft, params.dconv, off, mask)
    y = deform_conv2d(ft, params.dconv, off, mask)
    return add(conv2d(leaky_relu(y, SLOPE), params.post), ft)


def tsa_forward(f0: Tensor4, f2: Tensor4, params: TsaParams, rsab_count: int | None = None,
                trace: dict | None = None) -> Tensor4:
    """Fused temporal feature refined by the first ``rsab_count`` RSABs (default: all)."""
    n = len(params.rsabs) if rsab_count is None else rsab_count
    if not 0 <= n <= len(params.rsabs):
        raise ConfigError(f"rsab_count {n} exceeds the {len(params.rsabs)} available blocks")
    f01, f21 = temporal_interpolate(f0, f2, params.temporal, trace)
    ft = fuse(f01, f21, params.fusion)
    for i in range(n):
        ft = rsab_forward(ft, params.rsabs[i], trace, f"rsab{i + 1}")
    return ft
