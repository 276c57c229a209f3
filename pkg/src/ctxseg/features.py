"""Query, texture and shape feature families.

Query features are built from an orthonormal 2-d Haar decomposition: the coarsest
approximation band, flattened, followed by the mean absolute value of every detail
subband, L2-normalised.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

DETAIL_BANDS = ("lh", "hl", "hh")


def haar2d_level(x: np.ndarray):
    """One analysis step on 2x2 blocks ``[[a, b], [c, d]]``; returns ``(ll, lh, hl, hh)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise DimensionError(f"Haar step needs even dimensions, got {x.shape}")
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def ihaar2d_level(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape
    out = np.empty((2 * h, 2 * w), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def haar2d(x: np.ndarray, levels: int = 2):
    """Multi-level decomposition. Returns ``(approx, details)`` with ``details[0]`` the finest level."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    approx = np.asarray(x, dtype=np.float64)
    details = []
    for _ in range(levels):
        approx, lh, hl, hh = haar2d_level(approx)
        details.append((lh, hl, hh))
    return approx, details


def ihaar2d(approx: np.ndarray, details) -> np.ndarray:
    out = approx
    for lh, hl, hh in reversed(details):
        out = ihaar2d_level(out, lh, hl, hh)
    return out


def wavelet_descriptor(image: np.ndarray, levels: int = 2):
    """Unnormalised query descriptor parts: ``(flattened approximation, detail energies)``.

    Energies are ordered finest level first, ``lh, hl, hh`` within a level.
    """
    approx, details = haar2d(image, levels)
    energies = np.array([np.abs(band).mean() for level in details for band in level])
    return approx.ravel(), energies


def query_dim(size: int, levels: int = 2) -> int:
    side = size >> levels
    return side * side + 3 * levels


def query_features(image: np.ndarray, levels: int = 2) -> np.ndarray:
    """Haar query feature ``q``: approximation ++ detail energies, unit L2 norm unless all-zero."""
    approx, energies = wavelet_descriptor(image, levels)
    q = np.concatenate([approx, energies])
    norm = np.linalg.norm(q)
    if norm > 0:
        q = q / norm
    return q.astype(np.float32)


def texture_features(extractor, image: np.ndarray) -> np.ndarray:
    return extractor.extract(np.asarray(image)[None])[0]


def shape_features(sae, mask: np.ndarray) -> np.ndarray:
    return sae.encode(mask)
