"""Synthetic single-example scenes, corruption, and segmentation metrics.

Label convention: class 0 is the object (disc), class 1 the background.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SynthScene:
    data: np.ndarray
    truth: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_class(self) -> int:
        return 2


def _sq_dist(H, W, center):
    r, c = np.mgrid[0:H, 0:W]
    return (r - center[0]) ** 2 + (c - center[1]) ** 2


def _fit_level(d2, target):
    # pixel count is a step function of the radius: scan every distinct step
    flat = np.sort(d2.ravel())
    levels = np.unique(flat)
    frac = np.searchsorted(flat, levels, side="right") / flat.size
    best = int(np.argmin(np.abs(frac - target)))
    return float(levels[best]), float(frac[best])


def gen_disc_scene(
    H: int,
    W: int,
    area_fraction: float,
    sigma: float,
    n_chan: int = 3,
    seed: int = 0,
    center=None,
    contrast: float = 1.0,
) -> SynthScene:
    """A disc covering ``area_fraction`` of the grid (to within 0.01) over a
    flat background, plus i.i.d. Gaussian noise of std ``sigma``.

    Each channel's disc mean differs from its background by ``contrast``
    (sign drawn per channel), so the signal-to-noise ratio is
    ``contrast / sigma``. ``center`` defaults to the grid center.
    """
    if not 0.0 < area_fraction < 1.0:
        raise ValueError("area_fraction must lie strictly between 0 and 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    if center is None:
        center = ((H - 1) / 2.0, (W - 1) / 2.0)
    d2 = _sq_dist(H, W, center)
    level, frac = _fit_level(d2, area_fraction)
    if abs(frac - area_fraction) > 0.01:
        raise ValueError(
            f"no disc on a {H}x{W} grid covers {area_fraction:.4f} of the pixels to within 0.01 "
            f"(closest {frac:.4f})"
        )
    disc = d2 <= level
    signs = rng.choice([-1.0, 1.0], size=n_chan)
    base = rng.uniform(-0.5, 0.5, size=n_chan)
    data = base[:, None, None] + contrast * signs[:, None, None] * disc[None]
    data = data + sigma * rng.standard_normal((n_chan, H, W))
    truth = np.where(disc, 0, 1).astype(np.int64)
    meta = {
        "generator": "disc",
        "seed": seed,
        "radius": float(np.sqrt(level)),
        "center": [float(center[0]), float(center[1])],
        "fractions": [frac, 1.0 - frac],
        "snr": contrast / sigma if sigma > 0 else float("inf"),
    }
    return SynthScene(data, truth, meta)


def corrupt(scene: SynthScene, missing_fraction: float, seed: int = 0):
    """Zero a random ``floor(missing_fraction * N)`` pixels in every channel.

    Returns ``(data, known)`` where ``data`` carries an extra final channel
    equal to ``known`` (1 for observed pixels, 0 for missing ones).
    """
    if not 0.0 <= missing_fraction < 1.0:
        raise ValueError("missing_fraction must lie in [0, 1)")
    C, H, W = scene.data.shape
    N = H * W
    n_miss = int(np.floor(missing_fraction * N + 1e-9))
    rng = np.random.default_rng(seed)
    known = np.ones(N)
    known[rng.choice(N, size=n_miss, replace=False)] = 0.0
    known = known.reshape(H, W)
    data = np.concatenate([scene.data * known[None], known[None]], axis=0)
    return data, known


def argmax_segmentation(probs: np.ndarray) -> np.ndarray:
    """Per-pixel class of highest probability; ties go to the lowest id."""
    return np.argmax(probs, axis=-3)


def iou(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Intersection over union for one class; 1.0 when both are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    p, t = pred == class_id, truth == class_id
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


def iou_all(pred, truth, n_class: int | None = None) -> list:
    if n_class is None:
        n_class = int(max(np.max(pred), np.max(truth))) + 1
    return [iou(pred, truth, k) for k in range(n_class)]


# -- PGM export ------------------------------------------------------------


def write_pgm(path, image: np.ndarray, maxval: int) -> None:
    """Binary P5 graymap; 16-bit samples are big-endian per the format."""
    image = np.asarray(image)
    H, W = image.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos:], dtype=dtype, count=H * W).reshape(H, W).astype(np.int64)


def write_channel_pgm(path, channel: np.ndarray) -> None:
    """16-bit min-max scaled view of one channel."""
    lo, hi = float(channel.min()), float(channel.max())
    scaled = np.zeros_like(channel) if hi == lo else (channel - lo) / (hi - lo)
    write_pgm(path, np.round(scaled * 65535).astype(np.int64), 65535)


def write_label_pgm(path, labels: np.ndarray) -> None:
    write_pgm(path, np.asarray(labels, dtype=np.int64), 255)
