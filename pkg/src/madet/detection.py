"""End-to-end inference on one image: field-of-view mask, green-channel
prefilter, sliding-window probability map, and the connected-region
area/convexity postprocess.

Convexity is solidity over the pixel lattice: region pixel count divided by
the number of lattice points inside or on the convex hull of the region's
pixel centers. Single pixels and straight lines therefore score exactly 1.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import network
from .errors import DataError, MadetError, ShapeMismatchError
from .windowing import extract_window

MAP_MAGIC = b"MAPF1\x00"

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskConfig:
    luminance_threshold: float = 0.06   # fraction of full scale
    median_size: int = 5
    erode_radius: int = 8


@dataclass(frozen=True)
class PrefilterConfig:
    kappa: float = 0.5
    neighborhood: int = 31


@dataclass(frozen=True)
class PostprocessConfig:
    prob_threshold: float = 0.5
    max_area: int = 21
    min_convexity: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.prob_threshold < 1.0:
            raise ValueError("probability threshold must be in (0,1)")
        if self.max_area < 1:
            raise ValueError("max area must be >= 1")
        if not 0.0 < self.min_convexity <= 1.0:
            raise ValueError("min convexity must be in (0,1]")


@dataclass(frozen=True)
class DetectConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    prefilter: PrefilterConfig = field(default_factory=PrefilterConfig)
    post: PostprocessConfig = field(default_factory=PostprocessConfig)
    batch_windows: int = 256
    threads: int = 1


@dataclass
class ProbabilityMap:
    prob: np.ndarray      # (H, W) float64 in [0,1]
    skipped: np.ndarray   # (H, W) bool; skipped pixels carry probability 0

    def __post_init__(self):
        if self.prob.shape != self.skipped.shape:
            raise ShapeMismatchError(
                f"probability raster {self.prob.shape} and skip raster "
                f"{self.skipped.shape} disagree")


@dataclass
class Region:
    pixels: np.ndarray            # (n, 2) int64 rows of (y, x)
    area: int
    hull_area: float
    convexity: float
    mean_prob: float | None = None

    def centroid(self) -> tuple[float, float]:
        return float(self.pixels[:, 1].mean()), float(self.pixels[:, 0].mean())


def _disc(radius: int) -> np.ndarray:
    r = int(radius)
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return ys ** 2 + xs ** 2 <= r ** 2


def compute_mask(image: np.ndarray, cfg: MaskConfig = MaskConfig()) -> np.ndarray:
    """Field-of-view mask: median-smoothed luminance above the threshold,
    then eroded by a disc so windows keep a safety margin off the border."""
    image = np.asarray(image, dtype=np.float64)
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    lum = ndimage.median_filter(lum, size=cfg.median_size, mode="reflect")
    mask = lum > cfg.luminance_threshold
    if cfg.erode_radius > 0 and mask.any():
        mask = ndimage.binary_erosion(mask, structure=_disc(cfg.erode_radius),
                                      border_value=0)
    return mask


def color_prefilter(image: np.ndarray, mask: np.ndarray,
                    cfg: PrefilterConfig = PrefilterConfig()) -> np.ndarray:
    """Candidate pixels: in-mask and darker on the green channel than the
    local in-mask mean by more than kappa local standard deviations."""
    g = np.asarray(image, dtype=np.float64)[1]
    m = mask.astype(np.float64)
    size = cfg.neighborhood
    w_sum = ndimage.uniform_filter(m, size=size, mode="reflect")
    g_sum = ndimage.uniform_filter(g * m, size=size, mode="reflect")
    g2_sum = ndimage.uniform_filter(g * g * m, size=size, mode="reflect")
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = g_sum / w_sum
        var = np.maximum(g2_sum / w_sum - mean * mean, 0.0)
    std = np.sqrt(var)
    cand = mask & ((mean - g) > cfg.kappa * std + 1e-12)
    return cand


def sliding_window_inference(image: np.ndarray, mask: np.ndarray,
                             candidates: np.ndarray,
                             state: network.NetworkState,
                             spec: network.NetworkSpec,
                             batch_windows: int = 256,
                             threads: int = 1) -> ProbabilityMap:
    """Score every candidate pixel with the network; everything else is
    skipped and carries probability 0."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[1:]
    if mask.shape != (h, w) or candidates.shape != (h, w):
        raise ShapeMismatchError("mask/candidate rasters must match the image")
    cand = candidates & mask
    prob = np.zeros((h, w), dtype=np.float64)
    side = spec.input_side
    coords = np.argwhere(cand)  # row-major order, deterministic

    def score_chunk(chunk: np.ndarray) -> np.ndarray:
        out = np.empty(chunk.shape[0], dtype=np.float64)
        for start in range(0, chunk.shape[0], batch_windows):
            rows = chunk[start:start + batch_windows]
            wins = np.stack([
                extract_window(image, int(x), int(y), side).pixels
                for y, x in rows])
            try:
                out[start:start + rows.shape[0]] = \
                    network.predict_proba_batch(state, spec, wins)
            except MadetError as exc:
                y, x = int(rows[0][0]), int(rows[0][1])
                raise type(exc)(
                    f"{exc} (while scoring pixels near x={x}, y={y})") from exc
        return out

    if threads > 1 and coords.shape[0] > batch_windows:
        chunks = np.array_split(coords, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score_chunk, chunks))
        values = np.concatenate(results) if results else np.empty(0)
    else:
        values = score_chunk(coords)
    prob[cand] = values
    return ProbabilityMap(prob, ~cand)


def _hull_lattice_area(points: np.ndarray) -> float:
    """Number of lattice points inside or on the convex hull of integer
    points, via the monotone chain hull and Pick's identity
    (interior + boundary = area + boundary/2 + 1)."""
    pts = np.unique(points, axis=0)
    n = pts.shape[0]
    if n == 1:
        return 1.0
    # lexicographic order for the monotone chain
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b) -> int:
        return int((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))

    def half(iterable):
        out = []
        for p in iterable:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(tuple(p))
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:  # collinear: count lattice points on the segment
        a, b = pts[0], pts[-1]
        return float(math.gcd(int(abs(b[0] - a[0])), int(abs(b[1] - a[1]))) + 1)
    area2 = 0
    boundary = 0
    for i in range(len(hull)):
        a = hull[i]
        b = hull[(i + 1) % len(hull)]
        area2 += a[0] * b[1] - b[0] * a[1]
        boundary += math.gcd(abs(b[0] - a[0]), abs(b[1] - a[1]))
    return (abs(area2) + boundary + 2) / 2.0


def connected_components(binary: np.ndarray) -> list[Region]:
    """8-connected regions with pixel-lattice solidity attributes."""
    binary = np.asarray(binary, dtype=bool)
    labeled, count = ndimage.label(binary, structure=EIGHT_CONNECTED)
    regions = []
    for sl_idx, sl in enumerate(ndimage.find_objects(labeled), start=1):
        local = np.argwhere(labeled[sl] == sl_idx)
        local[:, 0] += sl[0].start
        local[:, 1] += sl[1].start
        hull_area = _hull_lattice_area(local)
        regions.append(Region(local, int(local.shape[0]), hull_area,
                              local.shape[0] / hull_area))
    return regions


def region_filter(regions: list[Region],
                  cfg: PostprocessConfig = PostprocessConfig()) -> list[Region]:
    """Keep compact candidates: area <= max_area and convexity >= min_convexity.
    Elongated or large structures (vessel segments, hemorrhages) drop out."""
    return [r for r in regions
            if r.area <= cfg.max_area and r.convexity >= cfg.min_convexity]


def detect(image: np.ndarray, state: network.NetworkState,
           spec: network.NetworkSpec,
           cfg: DetectConfig = DetectConfig()):
    """Full pipeline; returns (ProbabilityMap, accepted regions)."""
    stage = "mask"
    try:
        mask = compute_mask(image, cfg.mask)
        stage = "prefilter"
        cand = color_prefilter(image, mask, cfg.prefilter)
        stage = "inference"
        pmap = sliding_window_inference(image, mask, cand, state, spec,
                                        cfg.batch_windows, cfg.threads)
        stage = "postprocess"
        fg = (pmap.prob >= cfg.post.prob_threshold) & ~pmap.skipped
        regions = connected_components(fg)
        for r in regions:
            r.mean_prob = float(pmap.prob[r.pixels[:, 0], r.pixels[:, 1]].mean())
        accepted = region_filter(regions, cfg.post)
    except MadetError as exc:
        raise type(exc)(f"detect stage '{stage}' failed: {exc}") from exc
    return pmap, accepted


def write_prob_map(path, pmap: ProbabilityMap, pgm_path=None) -> None:
    """Binary map file: magic, u32 width, u32 height, float32 values
    row-major, all little-endian. Optionally a 16-bit PGM rendering."""
    h, w = pmap.prob.shape
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(pmap.prob.astype("<f4").tobytes())
    if pgm_path is not None:
        from . import imageio
        imageio.write_pgm16(pgm_path, pmap.prob)


def read_prob_map(path) -> ProbabilityMap:
    """Read a map file. The on-disk format carries values only, so the
    returned skip raster is all False."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAP_MAGIC):
        raise DataError(f"{path}: wrong probability map magic")
    if len(blob) < len(MAP_MAGIC) + 8:
        raise DataError(f"{path}: truncated header")
    w, h = struct.unpack_from("<II", blob, len(MAP_MAGIC))
    vals = np.frombuffer(blob, dtype="<f4", offset=len(MAP_MAGIC) + 8)
    if vals.size != w * h:
        raise DataError(f"{path}: expected {w * h} values, found {vals.size}")
    return ProbabilityMap(vals.astype(np.float64).reshape(h, w),
                          np.zeros((h, w), dtype=bool))


def write_regions(path, regions: list[Region], image_path: str) -> None:
    """One `x,y,area,convexity,meanProb` line per accepted region."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# image: {image_path}\n")
        for r in regions:
            x, y = r.centroid()
            mp = r.mean_prob if r.mean_prob is not None else 0.0
            fh.write(f"{x:.2f},{y:.2f},{r.area},{r.convexity:.6f},{mp:.6f}\n")
