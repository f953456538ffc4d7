"""Input pipeline: aspect-preserving crops, weak/strong views, CutOut, CutMix,
CutOcc and in-plane rotation.

Images are square-pixel grayscale arrays in [0, 1] with a boolean validity
mask; zero padding always carries ``mask == False``. Geometric ops sample with
bilinear interpolation about the pixel-center ``((W - 1) / 2, (H - 1) / 2)``.
Image ``y`` runs downward, object ``y`` upward, which is what makes
``rotate_image(render(R), t) == render(inplane_rotation(t) @ R)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from rotssl import so3

SAMPLERS = ("uniform", "normal1", "normal2")
UNIFORM_MARGIN = 0.10
NORMAL_SIGMA = {"normal1": 0.15, "normal2": 0.30}
FLIP_LABEL = np.diag([-1.0, 1.0, 1.0])


@dataclass
class Image:
    pixels: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.mask is None:
            self.mask = np.ones(self.pixels.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def shape(self):
        return self.pixels.shape

    def copy(self):
        return Image(self.pixels.copy(), self.mask.copy())


@dataclass(frozen=True)
class AugConfig:
    flip_prob: float = 0.5
    blur_prob: float = 0.05
    weak_scale: tuple = (0.8, 1.25)
    strong_scale: tuple = (0.6, 1.5)
    cutout_holes: int = 3
    cutmix_holes: int = 3
    rot_range_deg: tuple = (-30.0, 30.0)
    sampler: str = "normal2"
    hole_frac: tuple = (0.15, 0.35)
    use_rotation: bool = True
    use_cutocc: bool = True
    share_flip: bool = True

    def __post_init__(self):
        for name in ("flip_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("weak_scale", "strong_scale", "hole_frac"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive increasing range")
        if self.cutout_holes < 0 or self.cutmix_holes < 0:
            raise ValueError("hole counts must be non-negative")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        lo, hi = self.rot_range_deg
        if lo > hi:
            raise ValueError("rot_range_deg must be increasing")


@dataclass
class AugRecord:
    flipped: bool = False
    blurred: bool = False
    scale: float = 1.0
    theta: float = 0.0
    holes: list = field(default_factory=list)
    patches: list = field(default_factory=list)
    donors: list = field(default_factory=list)


def _as_image(img):
    return img if isinstance(img, Image) else Image(img)


def _bilinear(pixels, xs, ys):
    """Sample at fractional pixel-center coordinates with edge clamping."""
    h, w = pixels.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    fx, fy = x - x0, y - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _resample(img, xs, ys, valid):
    h, w = img.shape
    inside = valid & (xs >= -0.5) & (xs <= w - 0.5) & (ys >= -0.5) & (ys <= h - 0.5)
    vals = _bilinear(img.pixels, xs, ys)
    mask_vals = _bilinear(img.mask.astype(float), xs, ys)
    mask = inside & (mask_vals >= 0.5)
    return Image(np.where(mask, np.clip(vals, 0.0, 1.0), 0.0), mask)


def crop_aspect_invariant(src, bbox, out_size):
    """Square crop around ``bbox = (x0, y0, w, h)`` with uniform scaling.

    ``bbox`` uses continuous pixel-edge coordinates. The longer side fills the
    output; the rest of the square, and anything falling off the source image,
    is zero with ``mask == False``.
    """
    src = _as_image(src)
    x0, y0, bw, bh = (float(v) for v in bbox)
    H, W = src.shape
    if bw <= 0 or bh <= 0 or x0 >= W or y0 >= H or x0 + bw <= 0 or y0 + bh <= 0:
        raise ValueError("bounding box does not intersect the image")
    side = max(bw, bh)
    step = side / out_size
    cx, cy = x0 + bw / 2.0, y0 + bh / 2.0
    grid = (np.arange(out_size) + 0.5) * step
    ex = cx - side / 2.0 + grid
    ey = cy - side / 2.0 + grid
    EX, EY = np.meshgrid(ex, ey)
    valid = ((EX >= max(x0, 0.0)) & (EX < min(x0 + bw, W))
             & (EY >= max(y0, 0.0)) & (EY < min(y0 + bh, H)))
    return _resample(src, EX - 0.5, EY - 0.5, valid)


def warp_image(img, scale=1.0, theta=0.0):
    """Zoom by ``scale`` and rotate in-plane by ``theta`` degrees about the center.

    A positive ``theta`` matches ``so3.inplane_rotation(theta)`` applied to the
    label (clockwise on screen).
    """
    img = _as_image(img)
    if scale == 1.0 and theta == 0.0:
        return img.copy()
    h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    # Output point in y-up object coordinates, mapped back through M_theta^T.
    xo, yo = (cols - cx) / scale, (cy - rows) / scale
    t = np.deg2rad(theta)
    c, s = np.cos(t), np.sin(t)
    xs = c * xo - s * yo
    ys = s * xo + c * yo
    return _resample(img, cx + xs, cy - ys, np.ones((h, w), dtype=bool))


def rotate_image(img, theta):
    """In-plane bilinear rotation about the image center; uncovered pixels are masked."""
    if abs(theta) >= 180:
        raise ValueError("theta must satisfy |theta| < 180")
    return warp_image(img, 1.0, theta)


def flip_image(img):
    img = _as_image(img)
    return Image(img.pixels[:, ::-1].copy(), img.mask[:, ::-1].copy())


def flip_label(r):
    return FLIP_LABEL @ np.asarray(r, dtype=float) @ FLIP_LABEL


def flip_with_label(img, r):
    """Mirror left-right; the label becomes ``D R D`` with ``D = diag(-1, 1, 1)``."""
    return flip_image(img), flip_label(r)


def blur(img):
    """3x3 box filter; padding stays zero."""
    img = _as_image(img)
    out = ndimage.uniform_filter(img.pixels, size=3, mode="constant")
    return Image(np.where(img.mask, np.clip(out, 0.0, 1.0), 0.0), img.mask.copy())


def sample_patch_center(sampler, rng, width, height):
    """Patch center ``(x, y)`` in continuous pixel coordinates."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    if sampler == "uniform":
        return (rng.uniform(UNIFORM_MARGIN * width, (1 - UNIFORM_MARGIN) * width),
                rng.uniform(UNIFORM_MARGIN * height, (1 - UNIFORM_MARGIN) * height))
    if sampler not in NORMAL_SIGMA:
        raise ValueError(f"unknown sampler {sampler!r}")
    sigma = NORMAL_SIGMA[sampler]
    while True:
        x = rng.normal(width / 2.0, sigma * width)
        y = rng.normal(height / 2.0, sigma * height)
        if 0 <= x < width and 0 <= y < height:
            return x, y


def _draw_rects(n, cfg, rng, width, height):
    rects = []
    lo, hi = cfg.hole_frac
    for _ in range(n):
        rw = rng.uniform(lo, hi) * width
        rh = rng.uniform(lo, hi) * width
        cx, cy = sample_patch_center(cfg.sampler, rng, width, height)
        x0 = int(np.clip(round(cx - rw / 2), 0, width))
        x1 = int(np.clip(round(cx + rw / 2), 0, width))
        y0 = int(np.clip(round(cy - rh / 2), 0, height))
        y1 = int(np.clip(round(cy + rh / 2), 0, height))
        rects.append((x0, y0, x1 - x0, y1 - y0))
    return rects


def _apply_holes(img, rects):
    pix = img.pixels.copy()
    for x0, y0, w, h in rects:
        pix[y0:y0 + h, x0:x0 + w] = 0.0
    return Image(pix, img.mask.copy())


def _apply_patches(img, rects, donor_ids, donors):
    pix, mask = img.pixels.copy(), img.mask.copy()
    for (x0, y0, w, h), d in zip(rects, donor_ids):
        donor = _as_image(donors[d])
        pix[y0:y0 + h, x0:x0 + w] = donor.pixels[y0:y0 + h, x0:x0 + w]
        mask[y0:y0 + h, x0:x0 + w] = donor.mask[y0:y0 + h, x0:x0 + w]
    return Image(pix, mask)


def cutout(img, cfg, rng):
    """Zero ``cfg.cutout_holes`` rectangles; returns ``(image, record)``.

    Hole rectangles are ``(x0, y0, w, h)`` in pixels, already clipped.
    """
    img = _as_image(img)
    h, w = img.shape
    rects = _draw_rects(cfg.cutout_holes, cfg, rng, w, h)
    return _apply_holes(img, rects), AugRecord(holes=rects)


def cutmix(img, donors, cfg, rng):
    """Paste ``cfg.cutmix_holes`` same-position patches from random donors."""
    if len(donors) == 0:
        raise ValueError("cutmix needs at least one donor image")
    img = _as_image(img)
    h, w = img.shape
    rects = _draw_rects(cfg.cutmix_holes, cfg, rng, w, h)
    ids = [int(i) for i in rng.integers(0, len(donors), size=len(rects))]
    return _apply_patches(img, rects, ids, donors), AugRecord(patches=rects, donors=ids)


def cut_occlusion(img, donors, cfg, rng):
    """CutOut then CutMix, each on its own child stream of ``rng``."""
    if len(donors) == 0:
        raise ValueError("cut_occlusion needs at least one donor image")
    r_out, r_mix = rng.spawn(2)
    mid, rec_out = cutout(img, cfg, r_out)
    out, rec_mix = cutmix(mid, donors, cfg, r_mix)
    return out, AugRecord(holes=rec_out.holes, patches=rec_mix.patches, donors=rec_mix.donors)


def _draw_shared(cfg, rng):
    return bool(rng.random() < cfg.flip_prob), bool(rng.random() < cfg.blur_prob)


def apply_record(img, record, donors=()):
    """Rebuild an augmented view from its record (flip, blur, warp, holes, patches)."""
    out = _as_image(img)
    if record.flipped:
        out = flip_image(out)
    if record.blurred:
        out = blur(out)
    out = warp_image(out, record.scale, record.theta)
    if record.holes:
        out = _apply_holes(out, record.holes)
    if record.patches:
        out = _apply_patches(out, record.patches, record.donors, donors)
    return out


def weak_augment(img, cfg, rng, flipped=None, blurred=None):
    """Flip/blur plus a mild rescale. Shared coins may be passed in."""
    if flipped is None or blurred is None:
        f, b = _draw_shared(cfg, rng)
        flipped = f if flipped is None else flipped
        blurred = b if blurred is None else blurred
    rec = AugRecord(flipped=flipped, blurred=blurred, scale=float(rng.uniform(*cfg.weak_scale)))
    return apply_record(img, rec), rec


def strong_augment(img, donors, cfg, rng, flipped=None, blurred=None):
    """Flip/blur, strong rescale, in-plane rotation, then CutOcc."""
    if flipped is None or blurred is None:
        f, b = _draw_shared(cfg, rng)
        flipped = f if flipped is None else flipped
        blurred = b if blurred is None else blurred
    scale = float(rng.uniform(*cfg.strong_scale))
    theta = float(rng.uniform(*cfg.rot_range_deg)) if cfg.use_rotation else 0.0
    rec = AugRecord(flipped=flipped, blurred=blurred, scale=scale, theta=theta)
    out = apply_record(img, rec)
    if cfg.use_cutocc and len(donors) > 0:
        out, occ = cut_occlusion(out, donors, cfg, rng)
        rec = replace(rec, holes=occ.holes, patches=occ.patches, donors=occ.donors)
    elif cfg.use_cutocc and cfg.cutout_holes > 0:
        out, occ = cutout(out, cfg, rng)
        rec = replace(rec, holes=occ.holes)
    return out, rec


def augment_pair(img, donors, cfg, rng):
    """Weak (teacher) and strong (student) views of one unlabeled image.

    With ``cfg.share_flip`` one flip coin and one blur coin serve both views.
    Returns ``(weak_img, weak_rec, strong_img, strong_rec)``.
    """
    flipped, blurred = _draw_shared(cfg, rng)
    if cfg.share_flip:
        w_img, w_rec = weak_augment(img, cfg, rng, flipped, blurred)
        s_img, s_rec = strong_augment(img, donors, cfg, rng, flipped, blurred)
    else:
        w_img, w_rec = weak_augment(img, cfg, rng)
        s_img, s_rec = strong_augment(img, donors, cfg, rng)
    return w_img, w_rec, s_img, s_rec


def transform_label(r, record):
    """Apply a view's geometric record to a rotation label.

    Scale leaves the label alone under orthographic projection.
    """
    r = np.asarray(r, dtype=float)
    if record.flipped:
        r = flip_label(r)
    if record.theta:
        r = so3.inplane_rotation(record.theta) @ r
    return r
