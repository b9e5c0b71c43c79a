"""Raster primitives shared by every stage of the pipeline.

Conventions used throughout the package:

* RGB images are ``(H, W, 3)`` ``uint8`` arrays, gray images ``(H, W)`` ``uint8``.
* Semantic masks are ``(H, W)`` ``bool`` arrays (True = cell foreground).
* Instance label maps are ``(H, W)`` ``uint32`` arrays, 0 = background.
* Probability maps are ``(H, W)`` ``float64`` arrays with values in [0, 1].
* Three-class masks are ``(H, W)`` ``uint8`` arrays holding :class:`PixelClass`.

Pixels outside the image are treated as background by the morphology and the
distance transform.
"""

from __future__ import annotations

import enum
import os
from pathlib import Path

import numpy as np
from scipy import ndimage

LABEL_DTYPE = np.uint32
PNG16_MAX_LABEL = 65535


class PixelClass(enum.IntEnum):
    BACKGROUND = 0
    INTERIOR = 1
    CONTOUR = 2


class DimensionError(ValueError):
    """Raised when array shapes or channel counts do not match."""


def check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


# --------------------------------------------------------------------------
# colour


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Convert an 8-bit RGB image to 8-bit H, S, V planes.

    Hue is mapped from [0, 360) degrees onto [0, 255], saturation and value
    from [0, 1] onto [0, 255]; all three use round-half-up.  The computation
    is carried out in integers so the result is exact and reproducible.
    Gray pixels (and black) get H = 0 and S = 0.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) RGB image, got shape {image.shape}")
    rgb = image.astype(np.int64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=2)
    vmin = rgb.min(axis=2)
    delta = vmax - vmin

    # hue / 60deg = sector + num / delta, with num in [-delta, delta]
    sector = np.where(vmax == r, 0, np.where(vmax == g, 2, 4))
    num = np.where(vmax == r, g - b, np.where(vmax == g, b - r, r - g))
    sixths = sector * delta + num  # hue in units of 60deg * delta
    sixths = np.where(sixths < 0, sixths + 6 * delta, sixths)
    safe_delta = np.maximum(delta, 1)
    # round(255 * sixths / (6 * delta)) with halves rounded up
    hue = (510 * sixths + 6 * safe_delta) // (12 * safe_delta)
    hue = np.where(delta == 0, 0, hue)

    safe_max = np.maximum(vmax, 1)
    sat = (510 * delta + safe_max) // (2 * safe_max)
    sat = np.where(vmax == 0, 0, sat)

    return np.stack([hue, sat, vmax], axis=2).astype(np.uint8)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Rounded mean of the three channels, ``(R + G + B) / 3``."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8)
    s = image[..., :3].astype(np.int64).sum(axis=2)
    return ((2 * s + 3) // 6).astype(np.uint8)


# --------------------------------------------------------------------------
# labelling and morphology


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def neighbor_offsets(connectivity: int) -> np.ndarray:
    """(dy, dx) offsets of the 4- or 8-neighbourhood."""
    if connectivity == 4:
        return np.array([(-1, 0), (0, -1), (0, 1), (1, 0)], dtype=np.int64)
    if connectivity == 8:
        return np.array(
            [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
            dtype=np.int64,
        )
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label the connected foreground components of ``mask``.

    Labels start at 1 and follow raster order of each component's first pixel.
    Returns ``(labels, n_components)``.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    return labels.astype(LABEL_DTYPE), int(n)


def disk(radius: int) -> np.ndarray:
    """Euclidean disk structuring element ``dx^2 + dy^2 <= radius^2``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disk(radius), border_value=0)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disk(radius), border_value=0)


def opening(mask: np.ndarray, radius: int) -> np.ndarray:
    return dilate(erode(mask, radius), radius)


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each foreground pixel to the nearest background.

    The image is surrounded by background, so an isolated foreground pixel gets
    distance 1 and background pixels get exactly 0.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def instance_boundaries(labels: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Labelled pixels having a neighbour with a different label (or the image edge)."""
    labels = np.asarray(labels)
    padded = np.pad(labels, 1, constant_values=0)
    h, w = labels.shape
    out = np.zeros(labels.shape, dtype=bool)
    for dy, dx in neighbor_offsets(connectivity):
        out |= padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] != labels
    return out & (labels > 0)


def label_ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


# --------------------------------------------------------------------------
# file formats


def read_image(path: str | os.PathLike) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.array(im)
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.array(im)


def write_png(path: str | os.PathLike, array: np.ndarray) -> None:
    from PIL import Image

    array = np.ascontiguousarray(array)
    if array.dtype == np.uint16:
        img = Image.fromarray(array)
    elif array.dtype == np.uint8:
        img = Image.fromarray(array, mode="RGB" if array.ndim == 3 else "L")
    else:
        raise TypeError(f"unsupported PNG dtype {array.dtype}")
    img.save(path, format="PNG")


def write_labels(path: str | os.PathLike, labels: np.ndarray) -> Path:
    """Write an instance label map.

    Maps whose ids fit in 16 bits go to a 16-bit gray PNG.  Larger ids are
    written to a run-length text sidecar (``<stem>.rle.txt``) instead; the
    path actually written is returned.
    """
    path = Path(path)
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) > PNG16_MAX_LABEL:
        rle_path = path.with_name(path.stem + ".rle.txt")
        write_labels_rle(rle_path, labels)
        return rle_path
    write_png(path, labels.astype(np.uint16))
    return path


def read_labels(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.name.endswith(".rle.txt"):
        return read_labels_rle(path)
    arr = read_image(path)
    if arr.ndim != 2:
        raise DimensionError(f"{path}: label maps must be single-channel")
    return arr.astype(LABEL_DTYPE)


def write_labels_rle(path: str | os.PathLike, labels: np.ndarray) -> None:
    """Run-length text format.

    First line ``# width height``, then one ``label x y runlength`` line per
    horizontal run of a non-zero label, in raster order.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    lines = [f"# {w} {h}"]
    for y in range(h):
        row = labels[y]
        change = np.flatnonzero(np.diff(row)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [w]])
        for s, e in zip(starts, ends):
            if row[s]:
                lines.append(f"{int(row[s])} {s} {y} {e - s}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels_rle(path: str | os.PathLike) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "#":
            raise ValueError(f"{path}: missing '# width height' header")
        w, h = int(header[1]), int(header[2])
        labels = np.zeros((h, w), dtype=LABEL_DTYPE)
        for line in fh:
            if not line.strip():
                continue
            lab, x, y, n = (int(v) for v in line.split())
            labels[y, x : x + n] = lab
    return labels
