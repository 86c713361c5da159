"""Synthetic test material: textured frames and a blocky DCT quantiser.

Nothing here models HEVC; it only produces content with block-coding style
artifacts so that the networks and the scheduler have something to chew on.
"""

import numpy as np
from scipy.fft import dctn, idctn

from .models import PatchPair


def textured_plane(height, width, seed=0, phase=0.0, noise=0.01):
    """Smooth gradients, sinusoidal texture and a few discs, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / 40.0
    img = 0.5 + 0.2 * np.sin(2 * np.pi * (rng.uniform(0.5, 2) * xx + rng.uniform(0.5, 2) * yy)
                             + rng.uniform(0, 6) + phase)
    img += 0.15 * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1)) * 40.0 / max(height, width)
    for _ in range(max(1, height * width // 1600)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(5, 25)
        img += rng.uniform(-0.2, 0.2) * (((yy * 40 - cy) ** 2 + (xx * 40 - cx) ** 2) < r * r)
    # busier lower-right quadrant gives CTUs a spread of activity
    img[height // 2:, width // 2:] += 0.08 * np.sin(xx[height // 2:, width // 2:] * 60)
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def to_uint8(plane):
    return np.rint(np.clip(plane, 0, 1) * 255).astype(np.uint8)


def block_quantise(plane, step=0.15, block=8):
    """Quantise orthonormal block DCT coefficients with a uniform step.

    Works on [0, 1] floats or uint8 (returned in the same type).
    """
    as_uint8 = np.asarray(plane).dtype == np.uint8
    x = np.asarray(plane, dtype=np.float64) / (255.0 if as_uint8 else 1.0)
    h, w = x.shape
    ph, pw = (-h) % block, (-w) % block
    xp = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    hb, wb = xp.shape[0] // block, xp.shape[1] // block
    tiles = xp.reshape(hb, block, wb, block).transpose(0, 2, 1, 3)
    coef = dctn(tiles, axes=(2, 3), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(xp.shape)[:h, :w]
    rec = np.clip(rec, 0, 1)
    return to_uint8(rec) if as_uint8 else rec


def synthetic_sequence(frames, height, width, seed=0, step=0.15):
    """(raw, compressed) uint8 planes of a slowly drifting textured scene."""
    raw, coded = [], []
    for t in range(frames):
        plane = to_uint8(textured_plane(height, width, seed=seed, phase=0.15 * t))
        raw.append(plane)
        coded.append(block_quantise(plane, step))
    return raw, coded


def toy_patch_pairs(count=8, size=40, seed=0, step=0.15, noise=0.01):
    """Fixed 8-bit patch pairs (ground truth, compressed) scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        x = to_uint8(textured_plane(size, size, seed=int(rng.integers(2**31)), noise=noise))
        y = block_quantise(x, step)
        pairs.append(PatchPair(x / 255.0, y / 255.0))
    return pairs
