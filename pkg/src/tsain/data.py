"""Triplet datasets: ingestion, alignment, tiling, histogram specification,
augmentation, synthetic triplets and the training batch stream."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import laplace, map_coordinates

from .deformconv import bilinear_sample_grid
from .numerics import Tensor4

log = logging.getLogger(__name__)

FRAME_NAMES = ("im0.png", "im1.png", "im2.png")
MANIFEST_NAME = "manifest.txt"


class TripletWarning(UserWarning):
    """A sample directory did not form a valid triplet and was skipped."""


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    frames: tuple[np.ndarray, np.ndarray, np.ndarray]
    id: str
    source: str = "ingested"

    def __post_init__(self):
        if len(self.frames) != 3:
            raise DataError(f"triplet {self.id!r} needs exactly three frames")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise DataError(f"triplet {self.id!r} frames differ in size: {sorted(shapes)}")
        if self.source not in ("ingested", "synthetic"):
            raise DataError(f"unknown triplet source {self.source!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


# ---------------------------------------------------------------------------
# PNG I/O


def read_gray_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read PNG {path}: {exc}") from exc


def write_gray_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise DataError("PNG writer expects a 2-D uint8 array")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_manifest(path) -> list[str]:
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids


def write_manifest(path, ids: Sequence[str], header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines.extend(ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_triplet_dir(root) -> list[Triplet]:
    """Read ``<root>/<id>/im{0,1,2}.png`` samples in directory-name order.

    Directories missing a frame or with mismatched frame sizes are skipped
    with a :class:`TripletWarning`. A ``manifest.txt`` in ``root``, when
    present, restricts loading to the listed ids.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    wanted = None
    if (root / MANIFEST_NAME).is_file():
        wanted = set(read_manifest(root / MANIFEST_NAME))
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if wanted is not None and d.name not in wanted:
            continue
        paths = [d / n for n in FRAME_NAMES]
        missing = [p.name for p in paths if not p.is_file()]
        if missing:
            warnings.warn(f"skipping {d.name}: missing {', '.join(missing)}", TripletWarning)
            continue
        frames = tuple(read_gray_png(p) for p in paths)
        if len({f.shape for f in frames}) != 1:
            sizes = ", ".join(f"{f.shape[0]}x{f.shape[1]}" for f in frames)
            warnings.warn(f"skipping {d.name}: frame sizes differ ({sizes})", TripletWarning)
            continue
        out.append(Triplet(frames, d.name, "ingested"))
    return out


def save_triplet(t: Triplet, root) -> Path:
    d = Path(root) / t.id
    d.mkdir(parents=True, exist_ok=True)
    for name, frame in zip(FRAME_NAMES, t.frames):
        write_gray_png(d / name, frame)
    return d


# ---------------------------------------------------------------------------
# alignment


def zncc(a: np.ndarray, b: np.ndarray) -> float | None:
    """Zero-normalised cross-correlation; ``None`` when either side is flat."""
    a = a.astype(np.float64) - a.mean()
    b = b.astype(np.float64) - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0.0:
        return None
    return float(np.sum(a * b) / den)


class Alignment(NamedTuple):
    dy: int
    dx: int
    score: float
    confident: bool


def template_match_align(fixed: np.ndarray, moving: np.ndarray, max_shift: int) -> Alignment:
    """Best integer displacement with ``moving[y + dy, x + dx] ~ fixed[y, x]``.

    Every shift in ``[-max_shift, max_shift]^2`` is scored by ZNCC over the
    overlap. Ties go to the smaller ``|dy| + |dx|``, then smaller ``dy``,
    then smaller ``dx``. If no shift has a non-flat overlap the result is
    ``(0, 0, 0.0, confident=False)``.
    """
    if fixed.shape != moving.shape:
        raise DataError(f"alignment needs equal shapes, got {fixed.shape} and {moving.shape}")
    h, w = fixed.shape
    if h <= 2 * max_shift or w <= 2 * max_shift:
        raise DataError(f"images {h}x{w} too small for max_shift {max_shift}")
    f = fixed.astype(np.float64)
    m = moving.astype(np.float64)
    shifts = [(dy, dx) for dy in range(-max_shift, max_shift + 1)
              for dx in range(-max_shift, max_shift + 1)]
    shifts.sort(key=lambda s: (abs(s[0]) + abs(s[1]), s[0], s[1]))
    best = None
    for dy, dx in shifts:
        fy0, fy1 = max(0, -dy), min(h, h - dy)
        fx0, fx1 = max(0, -dx), min(w, w - dx)
        score = zncc(f[fy0:fy1, fx0:fx1], m[fy0 + dy:fy1 + dy, fx0 + dx:fx1 + dx])
        if score is not None and (best is None or score > best[2]):
            best = (dy, dx, score)
    if best is None:
        return Alignment(0, 0, 0.0, False)
    return Alignment(best[0], best[1], best[2], True)


def shift_image(img: np.ndarray, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """``out[y, x] = img[y + dy, x + dx]`` with zero fill; also returns the valid mask."""
    h, w = img.shape
    out = np.zeros_like(img)
    valid = np.zeros((h, w), dtype=bool)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = img[ys + dy:ye + dy, xs + dx:xe + dx]
        valid[ys:ye, xs:xe] = True
    return out, valid


# ---------------------------------------------------------------------------
# tiling and filtering


def tile_origins(h: int, w: int, tile: int, stride: int) -> list[tuple[int, int]]:
    if tile < 1 or stride < 1:
        raise DataError("tile and stride must be positive")
    if tile > h or tile > w:
        return []
    return [(y, x) for y in range(0, h - tile + 1, stride) for x in range(0, w - tile + 1, stride)]


def crop_tiles(t: Triplet, tile: int, stride: int) -> list[Triplet]:
    """Top-left anchored grid of ``tile``-sized crops; partial border tiles dropped."""
    h, w = t.shape
    if tile < 1 or stride < 1:
        raise DataError("tile and stride must be positive")
    out = []
    for y, x in tile_origins(h, w, tile, stride):
        frames = tuple(f[y:y + tile, x:x + tile].copy() for f in t.frames)
        out.append(Triplet(frames, f"{t.id}_y{y:05d}_x{x:05d}", t.source))
    return out


def laplacian_variance(img: np.ndarray) -> float:
    return float(np.var(laplace(img.astype(np.float64))))


@dataclass(frozen=True)
class DefectFilter:
    """Automatic stand-ins for manual defect screening.

    A tile is rejected when either neighbouring frame pair correlates below
    ``min_ncc`` or the sharpest/blurriest Laplacian-variance ratio across
    the three frames exceeds ``max_blur_ratio``.
    """

    min_ncc: float = 0.2
    max_blur_ratio: float = 4.0

    def reason(self, t: Triplet) -> str | None:
        f0, f1, f2 = t.frames
        for a, b in ((f0, f1), (f1, f2)):
            s = zncc(a, b)
            if s is None or s < self.min_ncc:
                return "continuity"
        lv = [laplacian_variance(f) for f in t.frames]
        lo, hi = min(lv), max(lv)
        if lo == 0.0 or hi / lo > self.max_blur_ratio:
            return "blur"
        return None


# ---------------------------------------------------------------------------
# histogram specification


def histogram(img: np.ndarray) -> np.ndarray:
    counts = np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256)
    return counts / counts.sum()


def specification_lut(img: np.ndarray, reference_hist: np.ndarray) -> np.ndarray:
    ref = np.asarray(reference_hist, dtype=np.float64)
    if ref.shape != (256,) or np.any(ref < 0):
        raise DataError("reference histogram must hold 256 non-negative bins")
    if abs(ref.sum() - 1.0) > 1e-9:
        raise DataError(f"reference histogram sums to {ref.sum()!r}, not 1")
    cdf_img = np.cumsum(histogram(img))
    cdf_ref = np.cumsum(ref)
    # smallest u with cdf_ref[u] >= cdf_img[v]; the slack absorbs summation rounding
    lut = np.searchsorted(cdf_ref, cdf_img - 1e-12, side="left")
    return np.minimum(lut, 255).astype(np.uint8)


def histogram_specification(img: np.ndarray, reference_hist: np.ndarray) -> np.ndarray:
    """Remap gray levels so the image CDF follows ``reference_hist``."""
    img = np.asarray(img, dtype=np.uint8)
    return specification_lut(img, reference_hist)[img]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentSpec:
    """Rotate counter-clockwise by ``rotation`` degrees, then optionally mirror."""

    rotation: int = 0
    hflip: bool = False
    time_reverse: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise DataError(f"rotation must be a quarter turn, got {self.rotation}")

    @classmethod
    def random(cls, rng: np.random.Generator, square: bool = True) -> "AugmentSpec":
        choices = (0, 90, 180, 270) if square else (0, 180)
        return cls(int(choices[rng.integers(len(choices))]),
                   bool(rng.integers(2)), bool(rng.integers(2)))

    def inverse(self) -> "AugmentSpec":
        # mirror . rot(k) is its own inverse; rot(k) alone undoes with rot(-k)
        rot = self.rotation if self.hflip else (360 - self.rotation) % 360
        return replace(self, rotation=rot)


def augment_frame(f: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    out = np.rot90(f, spec.rotation // 90)
    if spec.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(t: Triplet, spec: AugmentSpec) -> Triplet:
    h, w = t.shape
    if spec.rotation in (90, 270) and h != w:
        raise DataError(f"{spec.rotation} degree rotation needs square frames, got {h}x{w}")
    frames = [augment_frame(f, spec) for f in t.frames]
    if spec.time_reverse:
        frames.reverse()
    return Triplet(tuple(frames), t.id, t.source)


# ---------------------------------------------------------------------------
# synthetic triplets


def value_noise(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    """Smooth texture: random lattice values every ``scale`` pixels, cubic-interpolated."""
    gh = int(np.ceil(h / scale)) + 4
    gw = int(np.ceil(w / scale)) + 4
    lattice = rng.uniform(0.0, 1.0, size=(gh, gw))
    yy, xx = np.meshgrid(np.arange(h) / scale + 1.5, np.arange(w) / scale + 1.5, indexing="ij")
    tex = map_coordinates(lattice, [yy, xx], order=3, mode="nearest")
    lo, hi = tex.min(), tex.max()
    return 0.1 + 0.8 * (tex - lo) / max(hi - lo, 1e-12)


def synth_triplet(seed: int, size: int | tuple[int, int] = 64,
                  motion: tuple[float, float] = (0.0, 2.0),
                  texture_scale: float = 8.0, margin: int | None = None,
                  ) -> tuple[Triplet, np.ndarray]:
    """Three views of one texture translating by ``motion`` over the triplet.

    Frame ``t`` (t = 0, 0.5, 1) samples the texture canvas at
    ``(y + t*dy, x + t*dx)`` with the deformable-conv bilinear sampler.
    Returns the quantised triplet and the unquantised middle frame in [0, 1].
    With integer half-motion, frame 1 is an exact shift of frame 0.
    """
    h, w = (size, size) if isinstance(size, int) else size
    if margin is None:
        margin = max(4, min(h, w) // 4)
    dy, dx = float(motion[0]), float(motion[1])
    if abs(dy) > margin or abs(dx) > margin:
        raise DataError(f"motion {motion} exceeds the {margin}-pixel canvas margin")
    rng = np.random.default_rng(seed)
    canvas = value_noise(rng, h + 2 * margin + 2, w + 2 * margin + 2, texture_scale)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    exact = []
    for t in (0.0, 0.5, 1.0):
        exact.append(bilinear_sample_grid(canvas, yy + margin + t * dy, xx + margin + t * dx))
    frames = tuple(np.floor(np.clip(e, 0, 1) * 255 + 0.5).astype(np.uint8) for e in exact)
    tag = f"synth{seed:05d}"
    return Triplet(frames, tag, "synthetic"), exact[1]


def synth_dataset(count: int, size: int = 64, seed: int = 0, max_motion: float = 3.0,
                  texture_scale: float = 8.0) -> list[Triplet]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        motion = tuple(rng.uniform(-max_motion, max_motion, size=2))
        t, _ = synth_triplet(seed * 100003 + i, size, motion, texture_scale)
        out.append(replace(t, id=f"synth{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# batching


def to_tensor(frames: Sequence[np.ndarray]) -> Tensor4:
    return Tensor4(np.stack(frames)[:, None].astype(np.float64) / 255.0)


def batch_iter(triplets: Sequence[Triplet], batch_size: int, patch: int, seed: int,
               epoch: int = 0, augment_data: bool = True
               ) -> Iterator[tuple[tuple[Tensor4, Tensor4], Tensor4]]:
    """One pass over a seeded permutation of ``triplets``.

    Yields ``((I0, I2), I1)`` batches of random ``patch``-sized crops in
    [0, 1]; the final batch may be smaller. The stream is a pure function
    of ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise DataError("batch size must be positive")
    for t in triplets:
        if patch > min(t.shape):
            raise DataError(f"patch {patch} exceeds frame size {t.shape} of {t.id!r}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(triplets))
    for start in range(0, len(order), batch_size):
        f0s, f1s, f2s = [], [], []
        for i in order[start:start + batch_size]:
            t = triplets[i]
            h, w = t.shape
            y = int(rng.integers(h - patch + 1))
            x = int(rng.integers(w - patch + 1))
            crop = Triplet(tuple(f[y:y + patch, x:x + patch] for f in t.frames), t.id, t.source)
            if augment_data:
                crop = augment(crop, AugmentSpec.random(rng, square=True))
            f0s.append(crop.frames[0])
            f1s.append(crop.frames[1])
            f2s.append(crop.frames[2])
        yield (to_tensor(f0s), to_tensor(f2s)), to_tensor(f1s)


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PrepareReport:
    triples: int = 0
    tiles: int = 0
    kept: int = 0
    rejected: dict | None = None

    def __post_init__(self):
        if self.rejected is None:
            self.rejected = {"border": 0, "continuity": 0, "blur": 0, "alignment": 0}


def list_series(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"series root {root} is not a readable directory")
    return sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")


def align_triple(frames: Sequence[np.ndarray], max_shift: int, window: int | None = 1024
                 ) -> tuple[list[np.ndarray], np.ndarray, list[Alignment]]:
    """Shift frames 0 and 2 onto frame 1; returns aligned frames and the common valid mask.

    Matching runs on a centred ``window``-sized crop to bound cost on large
    sections; the recovered shift is applied to the full frame.
    """
    f0, f1, f2 = frames
    h, w = f1.shape
    if window is not None and min(h, w) > window:
        y0, x0 = (h - window) // 2, (w - window) // 2
        crop = (slice(y0, y0 + window), slice(x0, x0 + window))
    else:
        crop = (slice(None), slice(None))
    valid = np.ones((h, w), dtype=bool)
    aligned = [None, f1, None]
    results = []
    for i, f in ((0, f0), (2, f2)):
        al = template_match_align(f1[crop], f[crop], max_shift)
        results.append(al)
        aligned[i], v = shift_image(f, al.dy, al.dx)
        valid &= v
    return aligned, valid, results


def prepare_dataset(root, out, tile: int = 512, stride: int = 512, max_shift: int = 8,
                    hist_spec: bool = True, step: int = 3,
                    defect_filter: DefectFilter = DefectFilter(),
                    match_window: int | None = 1024) -> PrepareReport:
    """Turn a directory of section PNGs into aligned, tiled triplet samples.

    Consecutive sections ``(i, i+1, i+2)`` for ``i = 0, step, 2*step, ...``
    form one triple. Tiles touching alignment fill, failing the defect
    filter, or whose alignment was not confident are rejected. With
    ``hist_spec`` every kept frame is matched to the dataset-mean histogram.
    """
    paths = list_series(root)
    report = PrepareReport()
    kept: list[Triplet] = []
    for i in range(0, len(paths) - 2, step):
        frames = [read_gray_png(p) for p in paths[i:i + 3]]
        if len({f.shape for f in frames}) != 1:
            raise DataError(f"sections {paths[i].name}..{paths[i + 2].name} differ in size")
        report.triples += 1
        aligned, valid, results = align_triple(frames, max_shift, match_window)
        confident = all(r.confident for r in results)
        full = Triplet(tuple(aligned), f"{paths[i + 1].stem}", "ingested")
        h, w = full.shape
        for (y, x), t in zip(tile_origins(h, w, tile, stride), crop_tiles(full, tile, stride)):
            report.tiles += 1
            if not confident:
                report.rejected["alignment"] += 1
                continue
            if not valid[y:y + tile, x:x + tile].all():
                report.rejected["border"] += 1
                continue
            why = defect_filter.reason(t)
            if why is not None:
                report.rejected[why] += 1
                continue
            kept.append(t)
    report.kept = len(kept)
    if hist_spec and kept:
        ref = np.mean([histogram(f) for t in kept for f in t.frames], axis=0)
        ref = ref / ref.sum()
        kept = [Triplet(tuple(histogram_specification(f, ref) for f in t.frames), t.id, t.source)
                for t in kept]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for t in kept:
        save_triplet(t, out)
    write_manifest(out / MANIFEST_NAME, [t.id for t in kept],
                   header=f"tile={tile} stride={stride} max_shift={max_shift} hist_spec={hist_spec}")
    return report
