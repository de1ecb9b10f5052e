"""Binary PPM (P6) image I/O and bilinear resizing.

Images move through the package as float32 arrays: HWC in [0, 1] at
the I/O boundary, CHW for the network. PPM is the only on-disk format;
readers tolerate comments and arbitrary whitespace in the header.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["read_ppm", "write_ppm", "bilinear_resize", "to_chw", "from_chw", "load_image_chw"]


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            ch = raw[pos : pos + 1]
            if ch == b"#":  # comment runs to end of line
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        return raw[start:pos]

    if token() != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(token()) for _ in range(3))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after the header
    need = width * height * 3
    data = raw[pos : pos + need]
    if len(data) < need:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) array with half-pixel-center bilinear
    interpolation; returns float32."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got {image.shape}")
    h, w = image.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if (out_h, out_w) == (h, w):
        return image.copy()

    def axis_coords(out_n, in_n):
        src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, (src - lo).astype(np.float32)

    ylo, yhi, wy = axis_coords(out_h, h)
    xlo, xhi, wx = axis_coords(out_w, w)
    top = image[ylo][:, xlo] * (1 - wx)[None, :, None] + image[ylo][:, xhi] * wx[None, :, None]
    bottom = image[yhi][:, xlo] * (1 - wx)[None, :, None] + image[yhi][:, xhi] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]


def to_chw(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) pixels (uint8 or [0, 1] float) -> (3, H, W) float32 in [0, 1]."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype=np.float32)


def from_chw(chw: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, clipped and rounded."""
    hwc = np.transpose(np.asarray(chw), (1, 2, 0))
    return np.clip(np.rint(hwc * 255.0), 0, 255).astype(np.uint8)


def load_image_chw(path, size_hw: tuple = None) -> np.ndarray:
    """Read a PPM and return (3, H, W) float32 in [0, 1], optionally
    bilinearly resized to ``size_hw`` = (height, width) first."""
    image = read_ppm(path).astype(np.float32) / 255.0
    if size_hw is not None and tuple(image.shape[:2]) != tuple(size_hw):
        image = np.clip(bilinear_resize(image, size_hw[0], size_hw[1]), 0.0, 1.0)
    return np.ascontiguousarray(np.transpose(image, (2, 0, 1)), dtype=np.float32)
