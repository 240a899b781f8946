"""Pixel-space preprocessing: binarization, rescaling, de-slanting, 1D page
flattening, clean-page reconstruction, and augmentation.

Bilevel images are uint8 arrays with background 0 and signal (ink) 1; on
disk they are stored as 0/255 grayscale PNG or PGM (P5).  The model
consumes float tensors in [0, 1]: rescaling bilinearly interpolates the
grayscale lift of the bilevel image and does NOT re-threshold, so thin
strokes survive downscaling as soft values.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .autodiff import Tensor

INTERLINE_GAP = 32  # background pixels between lines in a 1D-flattened page
HYPHEN = "-"


@dataclass
class LineBox:
    x: int
    y: int
    w: int
    h: int
    line_index: int


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------

def read_gray(path):
    """Load any PIL-readable image as 8-bit grayscale."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_bilevel(path, img):
    """Store a 0/1 bilevel image as 0/255 grayscale PNG or PGM (P5)."""
    img = np.asarray(img)
    Image.fromarray((img.astype(np.uint8) * 255)).save(path)


def read_bilevel(path):
    """Load a stored bilevel image back to 0/1 (any nonzero gray is signal)."""
    return (read_gray(path) >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------

def binarize(gray, threshold, auto_polarity=True):
    """Threshold to bilevel: pixel >= threshold becomes signal.

    Scans are commonly dark ink on a bright background, which thresholds to
    majority-signal; since the model convention is black background with
    white ink, ``auto_polarity`` inverts whenever signal would be the
    majority class.
    """
    gray = np.asarray(gray)
    img = (gray >= threshold).astype(np.uint8)
    if auto_polarity and img.sum() * 2 > img.size:
        img = 1 - img
    return img


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

def resize_bilinear(img, out_h, out_w):
    """Bilinear resample with half-pixel-aligned grids (identity at scale 1)."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _pad_width_to_multiple(img, multiple):
    w = img.shape[1]
    target = ((w + multiple - 1) // multiple) * multiple
    if target == w:
        return img
    return np.pad(img, ((0, 0), (0, target - w)))


def resize_page(img, l_factor):
    """Scale a bilevel page to height 64*L preserving aspect ratio.

    Width becomes round(W/H * 64L), then zero-padded right to a multiple
    of 8 (the CNN's cumulative width stride).  Returns a [1, 64L, W2]
    tensor with values in [0, 1].
    """
    if l_factor < 1:
        raise ValueError(f"oversample factor must be >= 1, got {l_factor}")
    img = np.asarray(img)
    h, w = img.shape
    out_h = 64 * l_factor
    out_w = max(1, round(w / h * out_h))
    resized = resize_bilinear(img.astype(np.float64), out_h, out_w)
    resized = _pad_width_to_multiple(np.clip(resized, 0.0, 1.0), 8)
    return Tensor(resized[None, :, :])


def resize_line(img):
    """Line images are the L=1 case of the page rescale."""
    return resize_page(img, 1)


# ---------------------------------------------------------------------------
# de-slanting
# ---------------------------------------------------------------------------

def _shear_rows(img, theta_deg):
    """Integer horizontal row shift proportional to height above baseline."""
    h, w = img.shape
    shift = np.round(np.tan(np.radians(theta_deg)) * (h - 1 - np.arange(h)))
    shift = shift.astype(np.int64)
    if shift.size == 0 or (shift == 0).all():
        return img.copy()
    lo = int(shift.min())
    hi = int(shift.max())
    out = np.zeros((h, w + hi - lo), dtype=img.dtype)
    for y in range(h):
        s = shift[y] - lo
        out[y, s : s + w] = img[y]
    return out


def deslant_angle(img, angle_range=45):
    """Angle in [-range, +range] (1-degree steps) maximizing the
    vertical-stroke score: sum over columns of squared vertical signal run
    lengths, so strokes standing upright dominate.  Ties prefer the smaller
    |angle|, so a blank image selects 0."""
    img = np.asarray(img, dtype=np.uint8)
    angles = sorted(range(-angle_range, angle_range + 1), key=lambda a: (abs(a), a))
    best_angle = 0
    best_score = -1.0
    for angle in angles:
        score = kernels.vertical_run_score(_shear_rows(img, angle))
        if score > best_score:
            best_score = score
            best_angle = angle
    return best_angle


def deslant(img, angle_range=45):
    """Shear by the angle chosen by :func:`deslant_angle`; height preserved."""
    img = np.asarray(img, dtype=np.uint8)
    return _shear_rows(img, deslant_angle(img, angle_range))


# ---------------------------------------------------------------------------
# 1D flattening and clean reconstruction
# ---------------------------------------------------------------------------

def join_transcripts_1d(transcripts):
    """Join line transcripts with spaces; a trailing hyphen merges words."""
    joined = ""
    for text in transcripts:
        if not joined:
            joined = text
        elif joined.endswith(HYPHEN):
            joined = joined[: -len(HYPHEN)] + text
        else:
            joined = joined + " " + text
    return joined


def flatten_page_1d(lines, transcripts, gap=INTERLINE_GAP):
    """Concatenate line images left-to-right into one long line.

    Lines are height-normalized (nearest-neighbor, preserving bilevel) to
    the tallest line, separated by ``gap`` background columns.  Transcripts
    join with single spaces except across hyphenated line breaks, where the
    hyphen is dropped and the words fuse.
    """
    if len(lines) != len(transcripts):
        raise ValueError(f"{len(lines)} images vs {len(transcripts)} transcripts")
    if not lines:
        raise ValueError("flatten_page_1d needs at least one line")
    lines = [np.asarray(img, dtype=np.uint8) for img in lines]
    max_h = max(img.shape[0] for img in lines)
    scaled = []
    for img in lines:
        h, w = img.shape
        if h != max_h:
            new_w = max(1, round(w * max_h / h))
            yy = np.minimum((np.arange(max_h) * h) // max_h, h - 1)
            xx = np.minimum((np.arange(new_w) * w) // new_w, w - 1)
            img = img[yy][:, xx]
        scaled.append(img)
    gap_block = np.zeros((max_h, gap), dtype=np.uint8)
    parts = []
    for i, img in enumerate(scaled):
        if i:
            parts.append(gap_block)
        parts.append(img)
    return np.concatenate(parts, axis=1), join_transcripts_1d(transcripts)


def reconstruct_clean_page(page_h, page_w, boxes, line_images):
    """All-background page with line images pasted inside their boxes.

    Pixels outside every box are 0 by construction; overlapping boxes
    compose by logical OR.
    """
    if len(boxes) != len(line_images):
        raise ValueError(f"{len(boxes)} boxes vs {len(line_images)} images")
    page = np.zeros((page_h, page_w), dtype=np.uint8)
    for box, img in zip(boxes, line_images):
        img = np.asarray(img, dtype=np.uint8)
        if box.x < 0 or box.y < 0 or box.x + box.w > page_w or box.y + box.h > page_h:
            raise ValueError(
                f"box {box} exceeds page bounds {page_h}x{page_w}"
            )
        if img.shape[0] > box.h or img.shape[1] > box.w:
            raise ValueError(
                f"line image {img.shape} larger than its box {box.h}x{box.w}"
            )
        view = page[box.y : box.y + img.shape[0], box.x : box.x + img.shape[1]]
        view |= img
    return page


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    rotate_deg: float = 0.0  # max |rotation| in degrees
    elastic_alpha: float = 0.0  # displacement magnitude in pixels
    elastic_sigma: float = 8.0  # smoothing of the displacement field
    v_masks: int = 0  # SpecAugment-style zeroed vertical bands
    v_mask_frac: float = 0.05  # band width as a fraction of W
    h_masks: int = 0
    h_mask_frac: float = 0.05

    def enabled(self):
        return (
            self.rotate_deg > 0
            or self.elastic_alpha > 0
            or self.v_masks > 0
            or self.h_masks > 0
        )


DEFAULT_AUGMENT = AugmentParams(
    rotate_deg=2.0, elastic_alpha=3.0, elastic_sigma=8.0, v_masks=1, h_masks=1
)


def augment(img, rng, params):
    """Randomly rotate, elastically jitter, and block-mask a [1, H, W] tensor.

    Deterministic for a fixed rng state; with all params off the input is
    returned unchanged.
    """
    if not params.enabled():
        return img
    x = img.data[0].copy() if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64).copy()
    h, w = x.shape
    if params.rotate_deg > 0:
        angle = rng.uniform(-params.rotate_deg, params.rotate_deg)
        x = ndimage.rotate(x, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if params.elastic_alpha > 0:
        dy = ndimage.gaussian_filter(
            rng.uniform(-1, 1, size=x.shape), params.elastic_sigma
        ) * params.elastic_alpha
        dx = ndimage.gaussian_filter(
            rng.uniform(-1, 1, size=x.shape), params.elastic_sigma
        ) * params.elastic_alpha
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        coords = np.stack([yy + dy, xx + dx])
        x = ndimage.map_coordinates(x, coords, order=1, mode="constant", cval=0.0)
    for _ in range(params.v_masks):
        band = max(1, round(params.v_mask_frac * w))
        start = int(rng.integers(0, max(1, w - band + 1)))
        x[:, start : start + band] = 0.0
    for _ in range(params.h_masks):
        band = max(1, round(params.h_mask_frac * h))
        start = int(rng.integers(0, max(1, h - band + 1)))
        x[start : start + band, :] = 0.0
    x = np.clip(x, 0.0, 1.0)
    return Tensor(x[None, :, :]) if isinstance(img, Tensor) else x
