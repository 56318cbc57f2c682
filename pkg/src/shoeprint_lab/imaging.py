"""Segmentation, superimposition, category subtraction and region analysis.

Images are ``uint8`` grids of shape (height, width). Boxes are inclusive
``(top, left, bottom, right)``; region rectangles are half-open so they can
be used directly as slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SIDES = ("left", "right")
AUGMENT_OPS = ("gaussian_noise", "flip_lr", "rotate", "crop")
MAX_ROTATION = 15.0
MIN_CROP = 0.85
DEFAULT_THRESHOLD = 10


@dataclass
class ShoeprintImage:
    pixels: np.ndarray
    side: str = "left"
    dpi: int = 0

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2:
            raise ValueError(f"shoeprint pixels must be 2-D, got shape {p.shape}")
        if min(p.shape) < 8:
            raise ValueError(f"shoeprint must be at least 8x8, got {p.shape}")
        if p.dtype != np.uint8:
            if p.size and (p.min() < 0 or p.max() > 255):
                raise ValueError("intensities must lie in [0, 255]")
            p = p.astype(np.uint8)
        if self.side not in SIDES:
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        self.pixels = p

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ShoeprintImage) else np.asarray(img)


def _side(img, default: str = "left") -> str:
    return img.side if isinstance(img, ShoeprintImage) else default


# --------------------------------------------------------------------------
# segmentation
# --------------------------------------------------------------------------

def threshold_mask(img, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError(f"threshold must lie in [0, 255], got {threshold}")
    return _pixels(img) > threshold


# clockwise from west, in (row, col) offsets
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _trace(padded: np.ndarray, start: tuple) -> list:
    """Moore-neighbour trace of the outer border starting at ``start``.

    ``start`` must be the first foreground pixel of its component in raster
    order, so its west neighbour is background. Tracing stops when the start
    pixel is re-entered with the same successor (Jacob's criterion).
    """
    chain = [start]
    p, back = start, 0  # backtrack direction: west
    first_step = None
    limit = 4 * padded.size + 8
    for _ in range(limit):
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if padded[q]:
                prev = (back + k - 1) % 8
                b = (p[0] + _MOORE[prev][0], p[1] + _MOORE[prev][1])
                nxt = q
                back = _MOORE_INDEX[(b[0] - q[0], b[1] - q[1])]
                break
        if nxt is None:  # isolated pixel
            return chain
        if p == start:
            if first_step is None:
                first_step = nxt
            elif nxt == first_step:
                chain.pop()  # the start pixel was appended again
                return chain
        p = nxt
        chain.append(p)
    raise RuntimeError("contour tracing did not terminate")


def find_contours(mask) -> list:
    """Outer borders of 8-connected components as ``(K, 2)`` row/col arrays.

    Contours are ordered by their start pixel (the component's first pixel
    in raster order).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    padded = np.pad(mask, 1)
    starts = []
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    # first occurrence of each label in raster order
    _, first = np.unique(flat[nz], return_index=True)
    for pos in nz[first]:
        r, c = divmod(int(pos), mask.shape[1])
        starts.append((r, c))
    starts.sort()
    contours = []
    for r, c in starts:
        chain = _trace(padded, (r + 1, c + 1))
        contours.append(np.asarray(chain, dtype=np.int64) - 1)
    return contours


def union_bounding_box(contours) -> tuple:
    if len(contours) == 0:
        raise ValueError("no foreground: cannot box an empty contour list")
    pts = np.concatenate([np.asarray(c).reshape(-1, 2) for c in contours])
    top, left = pts.min(axis=0)
    bottom, right = pts.max(axis=0)
    return int(top), int(left), int(bottom), int(right)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x < 1, near, np.where(x < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) resampling matrix with half-pixel centers and edge clamping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        w = _cubic(t - k, a)
        np.add.at(M, (rows, np.clip(base + k, 0, n_in - 1)), w)
    return M


def resize_bicubic(grid, target_hw) -> np.ndarray:
    """Real-valued separable Catmull-Rom resample (no clamping)."""
    g = np.asarray(grid, dtype=np.float64)
    th, tw = target_hw
    return bicubic_matrix(g.shape[0], th) @ g @ bicubic_matrix(g.shape[1], tw).T


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def crop_resize_bicubic(img, box, target_hw) -> ShoeprintImage:
    p = _pixels(img)
    top, left, bottom, right = (int(v) for v in box)
    if bottom < top or right < left:
        raise ValueError(f"degenerate box {box}")
    if top < 0 or left < 0 or bottom >= p.shape[0] or right >= p.shape[1]:
        raise ValueError(f"box {box} lies outside the {p.shape} image")
    th, tw = target_hw
    # the result is a ShoeprintImage, so its 8x8 floor applies on top of the 4x4 one
    if th < 8 or tw < 8:
        raise ValueError(f"target extents must be at least 8, got {target_hw}")
    crop = p[top:bottom + 1, left:right + 1]
    return ShoeprintImage(_to_u8(resize_bicubic(crop, (th, tw))), _side(img), getattr(img, "dpi", 0))


def segment(img, target_hw, threshold: int = DEFAULT_THRESHOLD) -> ShoeprintImage:
    """threshold -> contours -> union box -> bicubic crop-resize."""
    contours = find_contours(threshold_mask(img, threshold))
    return crop_resize_bicubic(img, union_bounding_box(contours), target_hw)


# --------------------------------------------------------------------------
# superimposition and subtraction
# --------------------------------------------------------------------------

def superimpose(images) -> np.ndarray:
    """Pixelwise mean. Integer sums are exact, so the result is order-free."""
    grids = [_pixels(im) for im in images]
    if not grids:
        raise ValueError("superimpose needs at least one image")
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape:
            raise ValueError(f"size mismatch: {g.shape} vs {shape}")
    if all(np.issubdtype(g.dtype, np.integer) for g in grids):
        total = np.zeros(shape, dtype=np.int64)
        for g in grids:
            total += g
        return total / len(grids)
    return np.mean(np.stack([g.astype(np.float64) for g in grids]), axis=0)


def subtract_categories(upper_mean, lower_mean) -> np.ndarray:
    u = np.asarray(upper_mean, dtype=np.float64)
    lo = np.asarray(lower_mean, dtype=np.float64)
    if u.shape != lo.shape:
        raise ValueError(f"size mismatch: {u.shape} vs {lo.shape}")
    # rint rounds half to even, which is symmetric under negation
    return np.clip(np.rint(u - lo), -32768, 32767).astype(np.int16)


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    region_id: int
    top: int
    left: int
    bottom: int
    right: int

    @property
    def slices(self) -> tuple:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    @property
    def area(self) -> int:
        return (self.bottom - self.top) * (self.right - self.left)


@dataclass(frozen=True)
class RegionStats:
    region_id: int
    mean_pressure: float
    pixel_count: int


def divide_regions(canvas_hw, side: str = "left", bands: int = 4) -> list:
    """Four toe-to-heel bands by two columns, numbered row-major from the toe.

    Even ids are the medial column. Medial faces the other foot, so it is the
    right-hand column of a left print and the left-hand column of a right
    print. Remainders go to the last band and the last column.
    """
    if side not in SIDES:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    h, w = (int(v) for v in canvas_hw)
    if h < bands or w < 2:
        raise ValueError(f"canvas {canvas_hw} too small for {bands}x2 regions")
    bh, cw = h // bands, w // 2
    cols = [(0, cw), (cw, w)]
    medial, lateral = (cols[1], cols[0]) if side == "left" else (cols[0], cols[1])
    out = []
    for b in range(bands):
        top, bottom = b * bh, (h if b == bands - 1 else (b + 1) * bh)
        for j, (c0, c1) in enumerate((medial, lateral)):
            out.append(Region(2 * b + j, top, c0, bottom, c1))
    return out


def region_stats(grid, side: str = "left", masked: bool = False) -> list:
    g = np.asarray(_pixels(grid), dtype=np.float64)
    stats = []
    for reg in divide_regions(g.shape, side):
        block = g[reg.slices]
        if masked:
            fg = block[block > 0]
            mean = float(fg.mean()) if fg.size else 0.0
            count = int(fg.size)
        else:
            mean, count = float(block.mean()), reg.area
        stats.append(RegionStats(reg.region_id, mean, count))
    return stats


@dataclass(frozen=True)
class CurveRow:
    side: str
    region: int
    category: str
    mean_pressure: float


def region_pressure_curve(category_means: dict, side: str = "left", masked: bool = False) -> list:
    """Rows of (side, region, category, mean), region-major in category order."""
    if not category_means:
        raise ValueError("no category means given")
    shapes = {np.asarray(m).shape for m in category_means.values()}
    if len(shapes) != 1:
        raise ValueError(f"category means differ in size: {sorted(shapes)}")
    per_cat = {lab: region_stats(m, side, masked) for lab, m in category_means.items()}
    rows = []
    for r in range(8):
        for lab, stats in per_cat.items():
            rows.append(CurveRow(side, r, lab, stats[r].mean_pressure))
    return rows


def curve_to_csv(rows) -> str:
    lines = ["side,region,category,mean_pressure"]
    lines += [f"{r.side},R_{r.region},{r.category},{r.mean_pressure:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def signed_map_to_csv(values) -> str:
    v = np.asarray(values)
    return "\n".join(",".join(str(int(x)) for x in row) for row in v) + "\n"


# --------------------------------------------------------------------------
# age categories
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AgeCategory:
    label: str
    lo: int
    hi: int

    def __contains__(self, age) -> bool:
        return self.lo <= age <= self.hi


TYPE_B = (
    AgeCategory("catA", 10, 20),
    AgeCategory("catB", 21, 30),
    AgeCategory("catC", 31, 40),
    AgeCategory("catD", 41, 50),
    AgeCategory("catE", 51, 80),
)
# nested coarse ranges; a subject can fall in several
TYPE_A = (
    AgeCategory("10-80", 10, 80),
    AgeCategory("20-50", 20, 50),
    AgeCategory("25-45", 25, 45),
)
SCHEMES = {"typeA": TYPE_A, "typeB": TYPE_B}


def categories_for(age, scheme: str = "typeB") -> list:
    try:
        cats = SCHEMES[scheme]
    except KeyError:
        raise ValueError(f"unknown grouping {scheme!r}; choose typeA or typeB") from None
    return [c for c in cats if age in c]


def overlapping(cats) -> bool:
    spans = sorted((c.lo, c.hi) for c in cats)
    return any(b[0] <= a[1] for a, b in zip(spans, spans[1:]))


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def augment(img, op: str, seed: int = 0, sigma: float = 5.0, theta: float = 0.0,
            frac: float = 0.9) -> ShoeprintImage:
    """Seeded augmentation; ``flip_lr`` also toggles the side label."""
    if not isinstance(img, ShoeprintImage):
        img = ShoeprintImage(np.asarray(img))
    p = img.pixels
    if op == "gaussian_noise":
        if not 0 <= sigma <= 64:
            raise ValueError(f"noise sigma must lie in [0, 64], got {sigma}")
        noise = np.random.default_rng(seed).normal(0.0, sigma, p.shape)
        out = _to_u8(p + noise)
        side = img.side
    elif op == "flip_lr":
        out = p[:, ::-1].copy()
        side = "right" if img.side == "left" else "left"
    elif op == "rotate":
        if abs(theta) > MAX_ROTATION:
            raise ValueError(f"rotation must lie within +/-{MAX_ROTATION} degrees, got {theta}")
        rot = ndimage.rotate(p.astype(np.float64), theta, reshape=False, order=1,
                             mode="constant", cval=0.0)
        out = _to_u8(rot)
        side = img.side
    elif op == "crop":
        if not MIN_CROP <= frac <= 1.0:
            raise ValueError(f"crop fraction must lie in [{MIN_CROP}, 1], got {frac}")
        h, w = p.shape
        ch, cw = max(1, round(frac * h)), max(1, round(frac * w))
        rng = np.random.default_rng(seed)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        box = (top, left, top + ch - 1, left + cw - 1)
        return crop_resize_bicubic(img, box, (h, w))
    else:
        raise ValueError(f"unknown augmentation {op!r}; choose from {', '.join(AUGMENT_OPS)}")
    return ShoeprintImage(out, side, img.dpi)
