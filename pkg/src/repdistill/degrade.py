"""Image I/O, degradation pipelines and training patch extraction.

Images are 1 x 3 x h x w float arrays in [0, 1], RGB order.
"""
from __future__ import annotations

import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .tensor import DimensionError

KEYS_A = -0.5
BLUR_SIZE = 7
BLUR_SIGMA = 1.6
NOISE_SIGMA = 30.0 / 255.0
DEGRADE_MODES = ("bi", "bd", "dn")
SUPPORTED_SCALES = {Fraction(1), Fraction(2), Fraction(3), Fraction(4),
                    Fraction(1, 2), Fraction(1, 3), Fraction(1, 4)}
IMAGE_SUFFIXES = (".png",)


class DataError(Exception):
    """Unreadable image, wrong size, or inconsistent image pair."""


class UnsupportedScaleError(ValueError):
    pass


# -- I/O ---------------------------------------------------------------------


def load_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1)[None].copy()


def to_uint8(img) -> np.ndarray:
    """h x w x 3 bytes via round(255 * clamp(v, 0, 1))."""
    img = _check_image(img)
    return np.round(255.0 * np.clip(img[0].transpose(1, 2, 0), 0.0, 1.0)).astype(np.uint8)


def save_png(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        PILImage.fromarray(to_uint8(img), "RGB").save(path)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from None


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[:2] != (1, 3):
        raise DimensionError(f"expected a 1 x 3 x h x w image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float32)
    return img


# -- bicubic -----------------------------------------------------------------


def keys_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _parse_scale(scale) -> Fraction:
    try:
        s = Fraction(scale).limit_denominator(16)
    except (TypeError, ValueError):
        raise UnsupportedScaleError(f"unsupported scale {scale!r}") from None
    if s not in SUPPORTED_SCALES:
        raise UnsupportedScaleError(f"unsupported scale {scale}; use one of 2, 3, 4, 1/2, 1/3, 1/4")
    return s


def resize_matrix(in_size: int, out_size: int, scale: float) -> np.ndarray:
    """(out_size, in_size) matrix of 4-tap Keys weights with edge replication."""
    x = np.arange(out_size, dtype=np.float64)
    src = (x + 0.5) / scale - 0.5
    base = np.floor(src).astype(np.int64)
    m = np.zeros((out_size, in_size), np.float64)
    for tap in range(-1, 3):
        idx = base + tap
        wts = keys_kernel(src - idx)
        np.add.at(m, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), wts)
    return m


def bicubic_resize(img, scale) -> np.ndarray:
    img = _check_image(img)
    s = _parse_scale(scale)
    if s == 1:
        return img.copy()
    h, w = img.shape[2:]
    oh, ow = h * s, w * s
    if oh.denominator != 1 or ow.denominator != 1:
        raise DimensionError(f"image {h}x{w} is not divisible by {1 / s}; crop it first")
    mh = resize_matrix(h, int(oh), float(s))
    mw = resize_matrix(w, int(ow), float(s))
    out = mh @ img.astype(np.float64) @ mw.T
    return out.astype(img.dtype)


def crop_to_multiple(img, s: int) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape[2:]
    return img[:, :, : h - h % s, : w - w % s]


# -- degradations -------------------------------------------------------------


def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(img, size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    img = _check_image(img)
    k = gaussian_kernel(size, sigma)
    r = size // 2
    padded = np.pad(img.astype(np.float64), ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    h, w = img.shape[2:]
    out = np.zeros(img.shape, np.float64)
    for i in range(size):
        for j in range(size):
            out += k[i, j] * padded[:, :, i : i + h, j : j + w]
    return out.astype(img.dtype)


def degrade_bi(img, scale: int) -> np.ndarray:
    img = crop_to_multiple(img, scale)
    return np.clip(bicubic_resize(img, Fraction(1, scale)), 0.0, 1.0)


def degrade_bd(img, scale: int = 3) -> np.ndarray:
    img = crop_to_multiple(img, scale)
    return np.clip(bicubic_resize(gaussian_blur(img), Fraction(1, scale)), 0.0, 1.0)


def degrade_dn(img, seed: int, scale: int = 3, sigma: float = NOISE_SIGMA, clip: bool = True) -> np.ndarray:
    img = crop_to_multiple(img, scale)
    lr = bicubic_resize(img, Fraction(1, scale))
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=lr.shape)
    out = (lr + noise).astype(lr.dtype)
    return np.clip(out, 0.0, 1.0) if clip else out


def degrade(img, mode: str, scale: int, seed: int = 0) -> np.ndarray:
    if mode == "bi":
        return degrade_bi(img, scale)
    if mode == "bd":
        return degrade_bd(img, scale)
    if mode == "dn":
        return degrade_dn(img, seed, scale)
    raise ValueError(f"unknown degradation {mode!r}; choose from {DEGRADE_MODES}")


def image_seed(seed: int, rel_path: str) -> np.random.SeedSequence:
    """Per-image seed derived from the base seed and the file's relative path."""
    return np.random.SeedSequence([seed, zlib.crc32(rel_path.encode())])


def list_images(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def degrade_path(src, dst, mode: str, scale: int, seed: int = 0) -> list[Path]:
    """Degrade one PNG or a directory tree of PNGs, mirroring the tree under ``dst``."""
    src, dst = Path(src), Path(dst)
    if src.is_dir():
        pairs = [(p, dst / p.relative_to(src)) for p in list_images(src)]
        if not pairs:
            raise DataError(f"no PNG images under {src}")
    elif src.is_file():
        pairs = [(src, dst)]
    else:
        raise DataError(f"no such file or directory: {src}")
    written = []
    for p, q in pairs:
        rel = p.name if not src.is_dir() else p.relative_to(src).as_posix()
        s = int(image_seed(seed, rel).generate_state(1)[0])
        save_png(q, degrade(load_png(p), mode, scale, s))
        written.append(q)
    return written


# -- patches -----------------------------------------------------------------


def augment_patch(img: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    """Rotate by ``rot`` quarter turns, then optionally flip left-right."""
    out = np.rot90(img, rot, axes=(2, 3))
    if flip:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)


def extract_patches(hr, lr, lr_size: int = 64, count: int = 1, seed: int = 0,
                    augment: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    hr, lr = _check_image(hr), _check_image(lr)
    lh, lw = lr.shape[2:]
    hh, hw = hr.shape[2:]
    if hh % lh or hw % lw or hh // lh != hw // lw:
        raise DataError(f"HR {hh}x{hw} is not an integer multiple of LR {lh}x{lw}")
    s = hh // lh
    if lh < lr_size or lw < lr_size:
        raise DataError(f"LR image {lh}x{lw} smaller than patch size {lr_size}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        y = int(rng.integers(0, lh - lr_size + 1))
        x = int(rng.integers(0, lw - lr_size + 1))
        lp = lr[:, :, y : y + lr_size, x : x + lr_size]
        hp = hr[:, :, y * s : (y + lr_size) * s, x * s : (x + lr_size) * s]
        # always drawn so crop positions do not depend on `augment`
        rot, flip = int(rng.integers(0, 4)), bool(rng.integers(0, 2))
        if augment:
            lp, hp = augment_patch(lp, rot, flip), augment_patch(hp, rot, flip)
        out.append((lp.copy(), hp.copy()))
    return out
