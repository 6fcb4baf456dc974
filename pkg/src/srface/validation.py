"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import List, Optional

import numpy as np


def check_images(X, size: Optional[int] = None, channels: int = 3) -> np.ndarray:
    """Return ``X`` as ``float32`` ``(n, H, W, C)`` in ``[0, 1]``.

    ``uint8`` input is rescaled by 1/255; a single ``(H, W, C)`` image is
    promoted to a batch of one.
    """
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W, C), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if arr.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[-1]}")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[1]}x{arr.shape[2]}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"unsupported image dtype {arr.dtype}")
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or inf")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float images must lie in [0, 1]")
    return arr


def check_boxes(y, n_images: int) -> List[np.ndarray]:
    """Return one ``(k, 4)`` float32 array per image with ``x2 >= x1``, ``y2 >= y1``."""
    if len(y) != n_images:
        raise ValueError(f"got boxes for {len(y)} images but {n_images} images")
    out = []
    for i, boxes in enumerate(y):
        b = np.asarray(boxes, dtype=np.float32)
        if b.size == 0:
            b = b.reshape(0, 4)
        if b.ndim != 2 or b.shape[1] != 4:
            raise ValueError(f"image {i}: boxes must be shaped (k, 4), got {b.shape}")
        if not np.isfinite(b).all():
            raise ValueError(f"image {i}: non-finite box coordinates")
        if (b[:, 2] < b[:, 0]).any() or (b[:, 3] < b[:, 1]).any():
            raise ValueError(f"image {i}: boxes need x2 >= x1 and y2 >= y1")
        out.append(b)
    return out
