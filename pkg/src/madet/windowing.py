"""Window extraction and the training-time window transforms.

Windows are odd-sided (3, w, w) RGB patches in [0,1] centered on an image
pixel. Pixels past the image border are filled by mirror reflection about
the nearest border (border pixel not repeated). The six-fold augmentation
is {identity, horizontal mirror, vertical mirror} x {foveation, nonuniform
sampling}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .tensor import gaussian_blur_stack, reflect_index


@dataclass
class Window:
    pixels: np.ndarray          # (3, w, w) float64 in [0,1]
    center_x: int
    center_y: int
    label: int | None = None    # 1 = MA, 0 = non-MA, None = unlabeled

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[1] != self.pixels.shape[2]:
            raise ShapeMismatchError(
                f"window pixels must be (3, w, w), got {self.pixels.shape}")
        if self.pixels.shape[1] % 2 == 0:
            raise ShapeMismatchError(
                f"window side must be odd, got {self.pixels.shape[1]}")
        if self.pixels.min() < -1e-9 or self.pixels.max() > 1.0 + 1e-9:
            raise ValueError("window values must lie in [0,1]")

    @property
    def side(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "Window":
        return Window(np.clip(pixels, 0.0, 1.0), self.center_x, self.center_y,
                      self.label)


@dataclass(frozen=True)
class FoveationConfig:
    foveal_radius: float = 16.0   # pixels kept sharp around the center
    sigma_slope: float = 0.05     # blur stddev gained per pixel past the radius

    def __post_init__(self):
        if self.foveal_radius < 0:
            raise ConfigError(f"foveal radius must be >= 0, got {self.foveal_radius}")
        if self.sigma_slope < 0:
            raise ConfigError(f"sigma slope must be >= 0, got {self.sigma_slope}")


@dataclass(frozen=True)
class SamplingGrid:
    """Per-ring block sizes: (radius_start, radius_end, block_size) triples.

    Rings must be contiguous starting at 0 with an innermost block size of 1;
    the outermost ring is applied to everything past its start, so corner
    pixels beyond radius w/2 use the outermost block size.
    """
    rings: tuple[tuple[float, float, int], ...] = ((0.0, 16.0, 1),
                                                   (16.0, 40.0, 2),
                                                   (40.0, 64.5, 4))

    def __post_init__(self):
        if not self.rings:
            raise ConfigError("sampling grid needs at least one ring")
        if self.rings[0][0] != 0.0:
            raise ConfigError("innermost ring must start at radius 0")
        if self.rings[0][2] != 1:
            raise ConfigError("innermost ring must keep full resolution (block 1)")
        prev_end = 0.0
        for start, end, block in self.rings:
            if start != prev_end:
                raise ConfigError(
                    f"rings must be contiguous: ring starts at {start}, "
                    f"previous ended at {prev_end}")
            if end <= start:
                raise ConfigError(f"empty ring [{start}, {end})")
            if block < 1:
                raise ConfigError(f"block size must be >= 1, got {block}")
            prev_end = end

    def validate_for(self, side: int) -> None:
        if self.rings[-1][1] < side / 2:
            raise ConfigError(
                f"sampling grid covers radii up to {self.rings[-1][1]} "
                f"but window of side {side} needs {side / 2}")


def default_sampling_grid(side: int) -> SamplingGrid:
    """Grid scaled to the window side: full resolution out to ~w/8, block 2
    to ~0.31*w, block 4 beyond."""
    r1 = max(1, round(side / 8))
    r2 = max(r1 + 1, round(0.31 * side))
    end = max(r2 + 1.0, side / 2)
    return SamplingGrid(((0.0, float(r1), 1), (float(r1), float(r2), 2),
                         (float(r2), end, 4)))


def extract_window(image: np.ndarray, center_x: int, center_y: int, side: int,
                   label: int | None = None) -> Window:
    """Copy the side*side neighborhood of (center_x, center_y); out-of-image
    coordinates mirror about the nearest border, per axis."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeMismatchError(f"image must be (3, H, W), got {image.shape}")
    _, h, w = image.shape
    if not (0 <= center_x < w and 0 <= center_y < h):
        raise ValueError(
            f"window center ({center_x}, {center_y}) outside image {w}x{h}")
    if side % 2 == 0:
        raise ValueError(f"window side must be odd, got {side}")
    half = side // 2
    ys = reflect_index(np.arange(center_y - half, center_y + half + 1), h)
    xs = reflect_index(np.arange(center_x - half, center_x + half + 1), w)
    return Window(image[:, ys[:, None], xs[None, :]], center_x, center_y, label)


def mirror_augment(win: Window) -> list[Window]:
    """[original, horizontal mirror (x flipped), vertical mirror (y flipped)]."""
    return [win.with_pixels(win.pixels),
            win.with_pixels(win.pixels[:, :, ::-1]),
            win.with_pixels(win.pixels[:, ::-1, :])]


def _center_distances(side: int) -> np.ndarray:
    c = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    return np.hypot(ys - c, xs - c)


def rotate_augment(win: Window, angle_degrees: float,
                   rng: np.random.Generator | None = None) -> Window:
    """Rotate about the window center with bilinear interpolation; samples
    falling outside the window mirror back in. Exact right angles become
    pure index permutations. The label rides along unchanged."""
    del rng  # kept for samplers that draw the angle themselves
    side = win.side
    a = angle_degrees % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0),
             270.0: (0.0, -1.0)}
    if a in exact:
        cos_a, sin_a = exact[a]
    else:
        cos_a = math.cos(math.radians(a))
        sin_a = math.sin(math.radians(a))
    c = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side]
    dy, dx = ys - c, xs - c
    # sample the source at the grid rotated by -angle
    src_x = c + cos_a * dx + sin_a * dy
    src_y = c - sin_a * dx + cos_a * dy
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    x0r = reflect_index(x0, side)
    x1r = reflect_index(x0 + 1, side)
    y0r = reflect_index(y0, side)
    y1r = reflect_index(y0 + 1, side)
    p = win.pixels
    out = ((1 - fy) * (1 - fx) * p[:, y0r, x0r] + (1 - fy) * fx * p[:, y0r, x1r]
           + fy * (1 - fx) * p[:, y1r, x0r] + fy * fx * p[:, y1r, x1r])
    return win.with_pixels(out)


def foveate_stack(stack: np.ndarray, cfg: FoveationConfig) -> np.ndarray:
    """Foveation over an (..., side, side) stack of planes; one blur per
    unit-width annulus shared by the whole stack."""
    if cfg.sigma_slope == 0.0:
        return np.array(stack, dtype=np.float64)
    side = stack.shape[-1]
    d = _center_distances(side)
    ring = np.floor(d - cfg.foveal_radius).astype(np.int64)
    ring[d <= cfg.foveal_radius] = -1
    out = np.array(stack, dtype=np.float64)
    for i in range(int(ring.max()) + 1 if ring.max() >= 0 else 0):
        sel = ring == i
        if not sel.any():
            continue
        sigma = cfg.sigma_slope * (i + 0.5)
        out[..., sel] = gaussian_blur_stack(stack, sigma)[..., sel]
    return out


def foveate(win: Window, cfg: FoveationConfig) -> Window:
    """Keep the central disc sharp and blur harder with distance: a pixel at
    distance d past the foveal radius takes its value from the window blurred
    with sigma = slope * (d - r0), constant over unit-width annuli."""
    return win.with_pixels(foveate_stack(win.pixels, cfg))


def _block_mean_expand(stack: np.ndarray, block: int) -> np.ndarray:
    """Replace each block*block tile of the last two axes (partial tiles at
    the edge included) by its mean, keeping the shape."""
    n = stack.shape[-1]
    idx = np.arange(0, n, block)
    lens = np.diff(np.append(idx, n))
    sums = np.add.reduceat(np.add.reduceat(stack, idx, axis=-2), idx, axis=-1)
    means = sums / np.outer(lens, lens)
    return np.repeat(np.repeat(means, lens, axis=-2), lens, axis=-1)


def nonuniform_sample_stack(stack: np.ndarray, grid: SamplingGrid) -> np.ndarray:
    """Nonuniform sampling over an (..., side, side) stack of planes."""
    side = stack.shape[-1]
    grid.validate_for(side)
    d = _center_distances(side)
    out = np.array(stack, dtype=np.float64)
    for ri, (start, end, block) in enumerate(grid.rings):
        if block == 1:
            continue
        last = ri == len(grid.rings) - 1
        sel = (d >= start) if last else (d >= start) & (d < end)
        if not sel.any():
            continue
        out[..., sel] = _block_mean_expand(np.asarray(stack, dtype=np.float64),
                                           block)[..., sel]
    return out


def nonuniform_sample(win: Window, grid: SamplingGrid) -> Window:
    """Block-average the periphery: within each ring, every pixel becomes the
    mean of its block (decimation plus nearest-neighbor re-expansion), so the
    window keeps its shape. The innermost ring is untouched."""
    return win.with_pixels(nonuniform_sample_stack(win.pixels, grid))


def augment_six(image: np.ndarray, center_x: int, center_y: int, side: int,
                fov_cfg: FoveationConfig, grid: SamplingGrid,
                label: int | None = None) -> list[Window]:
    """The six training variants of one center: each of the three mirror
    windows yields a foveated and a nonuniformly sampled window."""
    base = extract_window(image, center_x, center_y, side, label)
    out: list[Window] = []
    for m in mirror_augment(base):
        out.append(foveate(m, fov_cfg))
        out.append(nonuniform_sample(m, grid))
    return out
