"""Training objective: pixel MSE, perceptual L1 and Gram-matrix style loss.

The perceptual and style terms run over a frozen :class:`FeatureExtractor`.
The default is a seeded surrogate whose stage resolutions mirror
relu1_2 ... relu4_3 of VGG-16; real weights can be loaded from a file in
the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointError, read_tensors
from .numerics import (
    DTYPE,
    ConvParams,
    ShapeError,
    Tensor4,
    absolute,
    conv2d,
    gram,
    leaky_relu,
    resize_half,
    scale,
    square,
    sub,
    sum_all,
)

Stage = Callable[[Tensor4], Tensor4]


class FeatureExtractor:
    """Frozen sequence of stages; stage ``r`` consumes stage ``r - 1``'s output."""

    def __init__(self, stages: Sequence[Stage]):
        if not stages:
            raise ValueError("a feature extractor needs at least one stage")
        self.stages = list(stages)

    def __len__(self) -> int:
        return len(self.stages)

    def features(self, x: Tensor4) -> list[Tensor4]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def identity_extractor() -> FeatureExtractor:
    return FeatureExtractor([lambda x: x])


class _ConvStage:
    def __init__(self, conv: ConvParams, downsample: bool, slope: float):
        self.conv = conv
        self.downsample = downsample
        self.slope = slope

    def __call__(self, x: Tensor4) -> Tensor4:
        if self.downsample:
            x = resize_half(x)
        return leaky_relu(conv2d(x, self.conv), self.slope)


def make_surrogate_extractor(seed: int = 0, channels: Sequence[int] = (8, 16, 16, 32),
                             strides: Sequence[int] = (1, 2, 2, 2), image_channels: int = 1,
                             weights_path=None, slope: float = 0.1) -> FeatureExtractor:
    """Conv + leaky-ReLU stages; a stride of 2 halves resolution before the conv.

    With ``weights_path`` the stage tensors ``stage<r>.weight`` and
    ``stage<r>.bias`` are read from a checkpoint-format file instead of
    being drawn from the seeded generator.
    """
    if len(channels) != len(strides):
        raise ValueError("channels and strides must have equal length")
    if any(s not in (1, 2) for s in strides):
        raise ValueError(f"stage strides must be 1 or 2, got {tuple(strides)}")
    loaded = None
    if weights_path is not None:
        loaded = read_tensors(weights_path)
    rng = np.random.default_rng(seed)
    stages = []
    c_in = image_channels
    for r, (c_out, s) in enumerate(zip(channels, strides)):
        shape = (c_out, c_in, 3, 3)
        if loaded is None:
            bound = np.sqrt(6.0 / (c_in * 9))
            w = rng.uniform(-bound, bound, size=shape)
            b = np.zeros((1, c_out, 1, 1), dtype=DTYPE)
        else:
            try:
                w = loaded[f"stage{r}.weight"]
                b = loaded[f"stage{r}.bias"].reshape(1, -1, 1, 1)
            except KeyError as exc:
                raise CheckpointError(f"extractor weight file lacks {exc.args[0]}") from None
            if w.shape != shape or b.shape[1] != c_out:
                raise CheckpointError(
                    f"extractor stage {r}: weight {w.shape} / bias {b.shape} do not match {shape}"
                )
        # requires_grad stays False: the extractor never accumulates gradients
        conv = ConvParams(Tensor4(w), Tensor4(b), stride=1, padding=1)
        stages.append(_ConvStage(conv, s == 2, slope))
        c_in = c_out
    return FeatureExtractor(stages)


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 1.0
    perc: float = 1.0
    style: float = 1e6

    def __post_init__(self):
        for k in ("pixel", "perc", "style"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


def _check(pred: Tensor4, gt: Tensor4) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")


def pixel_loss(pred: Tensor4, gt: Tensor4) -> Tensor4:
    """Squared error summed over channels, averaged over pixels and batch."""
    _check(pred, gt)
    n, _, h, w = pred.shape
    return scale(sum_all(square(sub(pred, gt))), 1.0 / (n * h * w))


def _perceptual(fp: list[Tensor4], fg: list[Tensor4]) -> Tensor4:
    total = None
    for a, b in zip(fp, fg):
        term = scale(sum_all(absolute(sub(a, b))), 1.0 / a.size)
        total = term if total is None else total + term
    return total


def _style(fp: list[Tensor4], fg: list[Tensor4]) -> Tensor4:
    total = None
    for a, b in zip(fp, fg):
        n, c, h, w = a.shape
        diff = sum_all(absolute(sub(gram(a), gram(b))))
        term = scale(diff, 1.0 / (c * c) / (c * h * w) / n)
        total = term if total is None else total + term
    return total


def perceptual_loss(pred: Tensor4, gt: Tensor4, fx: FeatureExtractor) -> Tensor4:
    _check(pred, gt)
    return _perceptual(fx.features(pred), fx.features(gt))


def style_loss(pred: Tensor4, gt: Tensor4, fx: FeatureExtractor) -> Tensor4:
    _check(pred, gt)
    return _style(fx.features(pred), fx.features(gt))


def loss_terms(pred: Tensor4, gt: Tensor4, fx: FeatureExtractor | None,
               w: LossWeights = LossWeights()) -> dict[str, Tensor4]:
    """All three terms and their weighted total; zero-weighted terms are skipped.

    Skipped terms are reported as ``None``.
    """
    _check(pred, gt)
    terms: dict[str, Tensor4 | None] = {"pixel": None, "perc": None, "style": None}
    if w.pixel:
        terms["pixel"] = pixel_loss(pred, gt)
    if w.perc or w.style:
        if fx is None:
            raise ValueError("perceptual/style weights are non-zero but no extractor was given")
        fp, fg = fx.features(pred), fx.features(gt)
        if w.perc:
            terms["perc"] = _perceptual(fp, fg)
        if w.style:
            terms["style"] = _style(fp, fg)
    total = None
    for key, weight in (("pixel", w.pixel), ("perc", w.perc), ("style", w.style)):
        if terms[key] is not None:
            part = terms[key] if weight == 1.0 else scale(terms[key], weight)
            total = part if total is None else total + part
    if total is None:
        total = scale(sum_all(sub(pred, pred)), 0.0)
    terms["total"] = total
    return terms


def total_loss(pred: Tensor4, gt: Tensor4, fx: FeatureExtractor | None,
               w: LossWeights = LossWeights()) -> Tensor4:
    return loss_terms(pred, gt, fx, w)["total"]
