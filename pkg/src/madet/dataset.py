"""Annotated fundus corpus handling: loading image/label/mask triples,
building the MA / hard-negative sample catalog, streaming stratified
training batches, and rendering synthetic fundus-like images for
desk-scale experiments.

Labels are binary rasters (255 = MA pixel in files). Hard negatives favor
vessel-like structure: on synthetic images the generator's own vessel and
hemorrhage geometry, on loaded corpora local minima and high-gradient points
of the green channel.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import imageio
from .errors import ConfigError, DataError
from .tensor import seeded_rng
from .windowing import (FoveationConfig, SamplingGrid, Window,
                        default_sampling_grid, extract_window, foveate_stack,
                        nonuniform_sample_stack, rotate_augment)

# green-channel attenuation depths used by the renderer; MA contrast stays
# below vessel contrast so vessels remain the harder distractor
VESSEL_GREEN_DEPTH = 0.65
HEMORRHAGE_GREEN_DEPTH = 0.55
MA_GREEN_DEPTH = (0.40, 0.55)


@dataclass
class AnnotatedImage:
    rgb: np.ndarray                       # (3, H, W) float64 in [0,1]
    fov_mask: np.ndarray                  # (H, W) bool
    labels: np.ndarray                    # (H, W) bool, True = MA pixel
    hard_negatives: np.ndarray | None = None  # generator-provided distractors
    name: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.fov_mask = np.asarray(self.fov_mask, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"image raster must be (3, H, W), got {self.rgb.shape}")
        hw = self.rgb.shape[1:]
        if self.fov_mask.shape != hw or self.labels.shape != hw:
            raise DataError(
                f"raster dimensions disagree: image {hw}, mask "
                f"{self.fov_mask.shape}, labels {self.labels.shape}")
        if (self.labels & ~self.fov_mask).any():
            raise DataError("MA labels must lie inside the field-of-view mask")


@dataclass
class SampleCatalog:
    images: list
    ma_centers: np.ndarray       # (n, 3) int64: image index, x, y
    non_ma_centers: np.ndarray   # (m, 4) int64: image index, x, y, hard flag


@dataclass(frozen=True)
class CatalogConfig:
    nonma_per_ma: float = 16.0
    hard_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.nonma_per_ma <= 0:
            raise ConfigError("nonma_per_ma must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ConfigError("hard fraction must be in [0,1]")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 192
    ma_count: int = 15
    vessel_count: int = 6
    hemorrhage_count: int = 2
    noise_level: float = 0.004
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 48:
            raise ConfigError("synthetic images need image_size >= 48")
        if min(self.ma_count, self.vessel_count, self.hemorrhage_count) < 0:
            raise ConfigError("synthetic object counts must be >= 0")
        if self.noise_level < 0:
            raise ConfigError("noise level must be >= 0")


def load_point_annotations(path) -> dict[str, list[tuple[int, int]]]:
    """Parse `imageRelativePath,x,y` lines into per-image MA center lists."""
    points: dict[str, list[tuple[int, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DataError(f"{path}:{ln}: expected `image,x,y`, got {line!r}")
            try:
                x, y = int(parts[1]), int(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: non-integer coordinates") from exc
            points.setdefault(parts[0], []).append((x, y))
    return points


def rasterize_points(points: list[tuple[int, int]], shape) -> np.ndarray:
    raster = np.zeros(shape, dtype=bool)
    h, w = shape
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"point annotation ({x},{y}) outside image {w}x{h}")
        raster[y, x] = True
    return raster


def load_annotated(image_path, label_path, mask_path=None,
                   image_rel: str | None = None) -> AnnotatedImage:
    """Load an aligned image/label(/mask) triple.

    `label_path` may be a PGM/PNG raster (255 = MA) or a `.txt` point
    annotation file, in which case `image_rel` selects its rows. A missing
    mask is computed from the image.
    """
    rgb = imageio.read_image(image_path)
    hw = rgb.shape[1:]
    if str(label_path).endswith(".txt"):
        key = image_rel if image_rel is not None else os.path.basename(str(image_path))
        pts = load_point_annotations(label_path).get(key, [])
        labels = rasterize_points(pts, hw)
    else:
        raw = imageio.read_raster(label_path)
        if raw.shape != hw:
            raise DataError(
                f"label raster {raw.shape} does not match image {hw}")
        labels = raw >= 128
    if mask_path is not None:
        raw = imageio.read_raster(mask_path)
        if raw.shape != hw:
            raise DataError(f"mask raster {raw.shape} does not match image {hw}")
        mask = raw >= 128
    else:
        from .detection import compute_mask
        mask = compute_mask(rgb)
    labels = labels & mask
    return AnnotatedImage(rgb, mask, labels, name=os.path.basename(str(image_path)))


def write_annotated(img: AnnotatedImage, image_path, label_path, mask_path) -> None:
    imageio.write_ppm(image_path, img.rgb)
    imageio.write_pgm(label_path, img.labels)
    imageio.write_pgm(mask_path, img.fov_mask)


def load_corpus(manifest_path) -> list[AnnotatedImage]:
    """Read a manifest of `image,label[,mask]` relative paths."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = []
    with open(manifest_path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) not in (2, 3):
                raise DataError(
                    f"{manifest_path}:{ln}: expected `image,label[,mask]`")
            paths = [os.path.join(base, p) for p in parts]
            mask = paths[2] if len(parts) == 3 else None
            images.append(load_annotated(paths[0], paths[1], mask,
                                         image_rel=parts[0]))
    return images


def _heuristic_hard_candidates(img: AnnotatedImage) -> np.ndarray:
    """Vessel-like points: strict local minima of the green channel plus
    high-gradient border pixels, inside the mask."""
    g = img.rgb[1]
    ring = np.ones((5, 5), dtype=bool)
    ring[2, 2] = False
    minima = g < ndimage.minimum_filter(g, footprint=ring, mode="nearest")
    grad = (ndimage.maximum_filter(g, size=3, mode="nearest")
            - ndimage.minimum_filter(g, size=3, mode="nearest"))
    in_mask = grad[img.fov_mask]
    cut = np.quantile(in_mask, 0.9) if in_mask.size else np.inf
    return (minima | (grad >= cut)) & img.fov_mask


def _label_exclusion(labels: np.ndarray) -> np.ndarray:
    """Labeled pixels dilated by 2 px; excluded from every non-MA pool so the
    negatives stay clean around lesions."""
    return ndimage.maximum_filter(labels, size=5, mode="constant")


def build_catalog(images: list, cfg: CatalogConfig = CatalogConfig()) -> SampleCatalog:
    """All labeled pixels become MA centers; non-MA centers are drawn with
    hard-negative emphasis at the configured ratio."""
    if not images:
        raise DataError("catalog needs at least one image")
    rng = seeded_rng(cfg.seed)
    ma_rows = []
    hard_rows = []
    easy_rows = []
    for idx, img in enumerate(images):
        ys, xs = np.nonzero(img.labels)
        ma_rows.append(np.column_stack(
            [np.full(xs.size, idx, dtype=np.int64), xs, ys]))
        excl = _label_exclusion(img.labels)
        hard = img.hard_negatives if img.hard_negatives is not None \
            else _heuristic_hard_candidates(img)
        hard = hard & img.fov_mask & ~excl
        ys, xs = np.nonzero(hard)
        hard_rows.append(np.column_stack(
            [np.full(xs.size, idx, dtype=np.int64), xs, ys]))
        easy = img.fov_mask & ~excl & ~hard
        ys, xs = np.nonzero(easy)
        easy_rows.append(np.column_stack(
            [np.full(xs.size, idx, dtype=np.int64), xs, ys]))
    ma = np.concatenate(ma_rows)
    if ma.shape[0] == 0:
        raise DataError("no MA pixels anywhere in the corpus")
    hard_pool = np.concatenate(hard_rows)
    easy_pool = np.concatenate(easy_rows)

    target = round(ma.shape[0] * cfg.nonma_per_ma)
    n_hard = min(round(target * cfg.hard_fraction), hard_pool.shape[0])
    n_easy = target - n_hard

    def draw(pool: np.ndarray, n: int) -> np.ndarray:
        if n <= 0 or pool.shape[0] == 0:
            return pool[:0]
        replace = pool.shape[0] < n
        sel = rng.choice(pool.shape[0], size=n, replace=replace)
        return pool[np.sort(sel)]

    hard_sel = draw(hard_pool, n_hard)
    easy_sel = draw(easy_pool, n_easy)
    non_ma = np.concatenate([
        np.column_stack([hard_sel, np.ones(hard_sel.shape[0], dtype=np.int64)]),
        np.column_stack([easy_sel, np.zeros(easy_sel.shape[0], dtype=np.int64)]),
    ])
    return SampleCatalog(images, ma, non_ma)


def split_by_image(n_images: int, val_fraction: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-image train/validation split (never per pixel, windows overlap)."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("validation fraction must be in [0,1)")
    perm = rng.permutation(n_images)
    n_val = min(int(round(n_images * val_fraction)), n_images - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def batch_sampler(catalog: SampleCatalog, batch_size: int, ma_fraction: float,
                  rng: np.random.Generator, side: int = 129,
                  fov_cfg: FoveationConfig | None = None,
                  grid: SamplingGrid | None = None,
                  augment: bool = True, rotation_max_degrees: float = 0.0):
    """Endless stream of stratified batches (lists of labeled Windows).

    Each batch holds round(batch_size * ma_fraction) MA windows; every window
    passes through the six-fold augmentation with one variant drawn uniformly
    (mirror x {foveation, nonuniform sampling}). Foveation and sampling run
    over the whole batch at once. The stream is a pure function of the rng
    seed.
    """
    if not 0.0 < ma_fraction < 1.0:
        raise ConfigError("ma_fraction must be in (0,1)")
    if catalog.ma_centers.shape[0] == 0 or catalog.non_ma_centers.shape[0] == 0:
        raise DataError("batch sampler needs both MA and non-MA centers")
    if fov_cfg is None:
        fov_cfg = FoveationConfig()
    if grid is None:
        grid = default_sampling_grid(side)
    n_ma = round(batch_size * ma_fraction)
    while True:
        rows_ma = catalog.ma_centers[
            rng.integers(0, catalog.ma_centers.shape[0], n_ma)]
        rows_non = catalog.non_ma_centers[
            rng.integers(0, catalog.non_ma_centers.shape[0], batch_size - n_ma)]
        rows = np.concatenate([rows_ma, rows_non[:, :3]])
        labels = np.concatenate([np.ones(n_ma, dtype=np.int64),
                                 np.zeros(batch_size - n_ma, dtype=np.int64)])
        order = rng.permutation(batch_size)
        rows, labels = rows[order], labels[order]
        variants = rng.integers(0, 6, batch_size) if augment else None
        pixels = np.empty((batch_size, 3, side, side))
        for i, row in enumerate(rows):
            img = catalog.images[int(row[0])]
            win = extract_window(img.rgb, int(row[1]), int(row[2]), side)
            px = win.pixels
            if variants is not None:
                if variants[i] // 2 == 1:
                    px = px[:, :, ::-1]
                elif variants[i] // 2 == 2:
                    px = px[:, ::-1, :]
            pixels[i] = px
        if variants is not None:
            fov_sel = variants % 2 == 0
            if fov_sel.any():
                pixels[fov_sel] = foveate_stack(pixels[fov_sel], fov_cfg)
            if (~fov_sel).any():
                pixels[~fov_sel] = nonuniform_sample_stack(pixels[~fov_sel], grid)
        batch = [Window(np.clip(pixels[i], 0.0, 1.0), int(rows[i][1]),
                        int(rows[i][2]), int(labels[i]))
                 for i in range(batch_size)]
        if rotation_max_degrees > 0:
            angles = rng.uniform(-rotation_max_degrees, rotation_max_degrees,
                                 batch_size)
            batch = [rotate_augment(w, float(a)) for w, a in zip(batch, angles)]
        yield batch


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    """Bilinear upsampling of a coarse noise grid; zero-mean, unit-ish scale."""
    g = rng.standard_normal((cells, cells))
    t = np.linspace(0, cells - 1, size)
    i0 = np.clip(t.astype(np.int64), 0, cells - 2)
    f = t - i0
    rows = g[i0, :] * (1 - f)[:, None] + g[i0 + 1, :] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return out


def _stamp_profile(depth: np.ndarray, cy: float, cx: float, sigma: float,
                   strength: float, radius: int) -> None:
    """Accumulate a Gaussian attenuation bump into `depth` via elementwise max."""
    h, w = depth.shape
    y0, y1 = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
    x0, x1 = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
    if y0 >= y1 or x0 >= x1:
        return
    ys = np.arange(y0, y1)[:, None] - cy
    xs = np.arange(x0, x1)[None, :] - cx
    prof = strength * np.exp(-(ys ** 2 + xs ** 2) / (2.0 * sigma ** 2))
    np.maximum(depth[y0:y1, x0:x1], prof, out=depth[y0:y1, x0:x1])


def _walk_vessel(rng: np.random.Generator, depth: np.ndarray, fov: np.ndarray,
                 start, heading: float, width: float, budget: int) -> None:
    h, w = depth.shape
    y, x = start
    stack = [(y, x, heading, width, budget)]
    while stack:
        y, x, heading, width, budget = stack.pop()
        while budget > 0 and width >= 0.55:
            sigma = width / 1.6
            _stamp_profile(depth, y, x, sigma, 1.0, int(math.ceil(2.5 * sigma)))
            heading += float(rng.normal(0.0, 0.10))
            y += math.sin(heading)
            x += math.cos(heading)
            budget -= 1
            width *= 0.9985
            if not (0 <= int(y) < h and 0 <= int(x) < w) or not fov[int(y), int(x)]:
                break
            if budget % 9 == 0 and rng.random() < 0.16 and width > 0.8:
                split = float(rng.uniform(0.45, 0.75))
                stack.append((y, x, heading + float(rng.uniform(0.5, 1.0)),
                              width * split, budget // 2))
                width *= 1.0 - 0.35 * split


def synth_generate(cfg: SyntheticConfig) -> AnnotatedImage:
    """Render a fundus-like annotated image: circular field of view, smooth
    reddish background, dark curvilinear vessels with bifurcations and
    crossings, Gaussian-profile MA dots with an exact label raster, larger
    irregular hemorrhage distractors, and sensor noise."""
    rng = seeded_rng(cfg.seed)
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.47 * size
    dist = np.hypot(yy - c, xx - c)
    fov = dist <= radius

    u = (xx - c) / radius
    v = (yy - c) / radius
    tilt = rng.uniform(-1.0, 1.0, size=6)
    base_r = 0.62 + 0.03 * (tilt[0] * u + tilt[1] * v) + 0.03 * _smooth_field(rng, size, 4)
    base_g = 0.38 + 0.015 * (tilt[2] * u + tilt[3] * v) + 0.015 * _smooth_field(rng, size, 4)
    base_b = 0.16 + 0.012 * (tilt[4] * u + tilt[5] * v) + 0.012 * _smooth_field(rng, size, 4)
    vignette = 1.0 - 0.06 * np.clip(dist / radius, 0.0, 1.2) ** 2
    rgb = np.stack([base_r, base_g, base_b]) * vignette

    # vessels radiate from an optic-disc-like hub toward the rim
    vessel_depth = np.zeros((size, size))
    hub_a = float(rng.uniform(0, 2 * math.pi))
    hub = (c + 0.55 * radius * math.sin(hub_a), c + 0.55 * radius * math.cos(hub_a))
    for _ in range(cfg.vessel_count):
        jitter_y = float(rng.normal(0.0, 2.5))
        jitter_x = float(rng.normal(0.0, 2.5))
        start = (hub[0] + jitter_y, hub[1] + jitter_x)
        aim = math.atan2(c - start[0], c - start[1])
        heading = aim + float(rng.uniform(-0.9, 0.9))
        _walk_vessel(rng, vessel_depth, fov, start, heading,
                     float(rng.uniform(1.3, 2.1)), int(2.6 * radius))

    hemo_depth = np.zeros((size, size))
    margin = max(10.0, 0.12 * size)
    for _ in range(cfg.hemorrhage_count):
        while True:
            hy = float(rng.uniform(margin, size - margin))
            hx = float(rng.uniform(margin, size - margin))
            if dist[int(hy), int(hx)] <= radius - margin:
                break
        for _ in range(int(rng.integers(4, 8))):
            oy = hy + float(rng.normal(0.0, 3.5))
            ox = hx + float(rng.normal(0.0, 3.5))
            _stamp_profile(hemo_depth, oy, ox, float(rng.uniform(2.0, 4.0)),
                           1.0, 12)

    # MA dots: small, round, off the vessels, and locally salient. Placement
    # checks the would-be green drop of the faintest label pixel against the
    # local mean/std of the already-rendered scene plus a noise guard, so
    # every labeled pixel stays clearly darker than its neighborhood.
    labels = np.zeros((size, size), dtype=bool)
    ma_depth = np.zeros((size, size))
    ma_strength = float(rng.uniform(*MA_GREEN_DEPTH))
    blocked = ndimage.maximum_filter(
        (vessel_depth > 0.25) | (hemo_depth > 0.25), size=9, mode="constant")
    g_pre = rgb[1] * (1.0 - VESSEL_GREEN_DEPTH * vessel_depth) \
        * (1.0 - HEMORRHAGE_GREEN_DEPTH * hemo_depth)
    fov_f = fov.astype(np.float64)
    w_loc = np.maximum(ndimage.uniform_filter(fov_f, 31, mode="reflect"), 1e-12)
    mean_loc = ndimage.uniform_filter(g_pre * fov_f, 31, mode="reflect") / w_loc
    sq_loc = ndimage.uniform_filter(g_pre * g_pre * fov_f, 31, mode="reflect") / w_loc
    std_loc = np.sqrt(np.maximum(sq_loc - mean_loc * mean_loc, 0.0))
    base_max = ndimage.maximum_filter(g_pre, size=5, mode="nearest")
    guard = 0.5 * (std_loc + cfg.noise_level) + 6.0 * cfg.noise_level + 0.01
    salient = mean_loc - base_max * (1.0 - 0.7 * ma_strength) > guard

    placed: list[tuple[float, float]] = []
    attempts = 0
    while len(placed) < cfg.ma_count:
        attempts += 1
        if attempts > 600 * max(cfg.ma_count, 1):
            raise DataError(
                f"could not place {cfg.ma_count} MAs on a {size}px image")
        my = float(rng.uniform(margin, size - margin))
        mx = float(rng.uniform(margin, size - margin))
        iy, ix = int(my), int(mx)
        if dist[iy, ix] > radius - margin or blocked[iy, ix] or not salient[iy, ix]:
            continue
        if any((my - py) ** 2 + (mx - px) ** 2 < 9.0 ** 2 for py, px in placed):
            continue
        placed.append((my, mx))
        sigma = float(rng.uniform(1.0, 1.5))
        _stamp_profile(ma_depth, my, mx, sigma, 1.0, int(math.ceil(3 * sigma)))
        # label = pixels where the dot profile keeps >= 70% of its peak
        lr = sigma * math.sqrt(2.0 * math.log(1.0 / 0.7))
        ly, lx = np.mgrid[iy - 3:iy + 4, ix - 3:ix + 4]
        inside = (ly - my) ** 2 + (lx - mx) ** 2 <= lr ** 2
        labels[ly[inside], lx[inside]] = True
    atten_g = (1.0 - VESSEL_GREEN_DEPTH * vessel_depth) \
        * (1.0 - HEMORRHAGE_GREEN_DEPTH * hemo_depth) \
        * (1.0 - ma_strength * ma_depth)
    atten_r = (1.0 - 0.30 * vessel_depth) * (1.0 - 0.28 * hemo_depth) \
        * (1.0 - 0.38 * ma_strength * ma_depth)
    atten_b = (1.0 - 0.35 * vessel_depth) * (1.0 - 0.32 * hemo_depth) \
        * (1.0 - 0.45 * ma_strength * ma_depth)
    rgb = rgb * np.stack([atten_r, atten_g, atten_b])

    rgb = np.where(fov[None], rgb, 0.012)
    if cfg.noise_level > 0:
        rgb = rgb + rng.normal(0.0, cfg.noise_level, rgb.shape)
    # 8-bit sensor: quantize so in-memory images match their file round-trip
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0

    hard = ((vessel_depth > 0.25) | (hemo_depth > 0.25)) & fov & ~labels
    return AnnotatedImage(rgb, fov, labels & fov, hard_negatives=hard,
                          name=f"synth_{cfg.seed}")
