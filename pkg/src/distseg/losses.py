"""Label-side objectives: masked cross-entropy, bounding-box supervision and
the sum-of-probabilities size penalty used as a baseline.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projections import Cardinality

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class SupervisionMask:
    """Sparse per-pixel labels on an ``H x W`` grid.

    ``pixels`` are flat indices ``row * W + col``; ``classes`` the labels.
    Any subset of pixels and classes may be covered, including none.
    """

    pixels: np.ndarray
    classes: np.ndarray
    shape: tuple

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.int64).ravel()
        classes = np.asarray(self.classes, dtype=np.int64).ravel()
        if pixels.shape != classes.shape:
            raise ValueError("pixels and classes must have equal length")
        H, W = self.shape
        if pixels.size and (pixels.min() < 0 or pixels.max() >= H * W):
            raise ValueError("pixel index out of range")
        if classes.size and classes.min() < 0:
            raise ValueError("negative class id")
        if np.unique(pixels).size != pixels.size:
            raise ValueError("duplicate pixel entries in supervision mask")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "shape", (int(H), int(W)))

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), shape)

    @classmethod
    def from_rows_cols(cls, rows, cols, classes, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        H, W = shape
        if rows.size and (rows.min() < 0 or rows.max() >= H or cols.min() < 0 or cols.max() >= W):
            raise ValueError("pixel coordinates out of range")
        return cls(rows * W + cols, classes, shape)

    def __len__(self):
        return int(self.pixels.size)

    @property
    def rows(self):
        return self.pixels // self.shape[1]

    @property
    def cols(self):
        return self.pixels % self.shape[1]

    def subset(self, index) -> "SupervisionMask":
        return SupervisionMask(self.pixels[index], self.classes[index], self.shape)

    def sorted(self) -> "SupervisionMask":
        order = np.argsort(self.pixels, kind="stable")
        return self.subset(order)

    def split(self, fraction: float, rng) -> tuple["SupervisionMask", "SupervisionMask"]:
        """Random ``(kept, held_out)`` split with ``round(fraction * M)`` held out."""
        n_hold = int(round(fraction * len(self)))
        perm = rng.permutation(len(self))
        return self.subset(np.sort(perm[n_hold:])), self.subset(np.sort(perm[:n_hold]))


def save_mask_csv(path, mask: SupervisionMask) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# distseg-mask v1 shape={mask.shape[0]},{mask.shape[1]}\n")
        w = csv.writer(fh)
        w.writerow(["pixel_row", "pixel_col", "class"])
        for r, c, k in zip(mask.rows, mask.cols, mask.classes):
            w.writerow([int(r), int(c), int(k)])


def load_mask_csv(path, shape=None) -> SupervisionMask:
    """Read ``pixel_row,pixel_col,class`` rows.

    The grid shape comes from the header comment unless ``shape`` is given.
    """
    rows, cols, classes = [], [], []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if shape is None and "shape=" in line:
                shape = tuple(int(s) for s in line.split("shape=")[1].split(","))
            continue
        body.append(line)
    reader = csv.DictReader(body)
    for rec in reader:
        rows.append(int(rec["pixel_row"]))
        cols.append(int(rec["pixel_col"]))
        classes.append(int(rec["class"]))
    if shape is None:
        raise ValueError(f"{path}: grid shape unknown (no header and none given)")
    return SupervisionMask.from_rows_cols(rows, cols, classes, shape)


def masked_cross_entropy(probs: np.ndarray, mask: SupervisionMask):
    """Mean ``-log p[class, pixel]`` over the labeled entries.

    Returns ``(loss, grad)`` with the gradient taken w.r.t. ``probs``
    (chain through the softmax separately); it is zero off the mask.
    """
    n_class, H, W = probs.shape
    if len(mask) == 0:
        raise ValueError("masked cross-entropy needs at least one labeled pixel")
    if (H, W) != mask.shape:
        raise ValueError(f"mask grid {mask.shape} does not match output {(H, W)}")
    if mask.classes.max() >= n_class:
        raise ValueError(f"class id {mask.classes.max()} >= n_class={n_class}")
    flat = probs.reshape(n_class, H * W)
    p = np.maximum(flat[mask.classes, mask.pixels], LOG_CLAMP)
    M = len(mask)
    loss = float(-np.log(p).sum() / M)
    grad = np.zeros_like(flat)
    grad[mask.classes, mask.pixels] = -1.0 / (M * p)
    return loss, grad.reshape(probs.shape)


@dataclass(frozen=True)
class BoundingBox:
    """Rows ``row0:row1`` and columns ``col0:col1`` (end exclusive)."""

    row0: int
    col0: int
    row1: int
    col1: int
    channel: int = 0

    def __post_init__(self):
        if self.row1 <= self.row0 or self.col1 <= self.col0:
            raise ValueError(f"degenerate bounding box {self}")
        if self.row0 < 0 or self.col0 < 0:
            raise ValueError(f"bounding box starts outside the image: {self}")

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def inside(self, H, W) -> np.ndarray:
        m = np.zeros((H, W), dtype=bool)
        m[self.row0 : self.row1, self.col0 : self.col1] = True
        return m


def bbox_to_supervision(box: BoundingBox, H: int, W: int, rho_min: float = 0.43, n_class: int = 2):
    """Background labels outside the box plus cardinality bounds.

    The object channel may occupy at most the box area; the background
    channel at most ``N - ceil(rho_min * box area)`` pixels, i.e. the object
    fills at least ``rho_min`` of its box. Returns ``(mask, sets)``.
    """
    if box.row1 > H or box.col1 > W:
        raise ValueError(f"bounding box {box} exceeds image {H}x{W}")
    if not 0.0 <= rho_min <= 1.0:
        raise ValueError("rho_min must lie in [0, 1]")
    if n_class != 2:
        raise ValueError("bounding-box supervision is defined for object/background")
    if box.channel not in (0, 1):
        raise ValueError("object channel must be 0 or 1")
    background = 1 - box.channel
    N = H * W
    outside = np.flatnonzero(~box.inside(H, W).ravel())
    mask = SupervisionMask(outside, np.full(outside.size, background), (H, W))
    min_object = math.ceil(rho_min * box.area - 1e-9)
    sets = [Cardinality(box.channel, box.area), Cardinality(background, N - min_object)]
    return mask, sets


@dataclass(frozen=True)
class SizeSumPenalty:
    """Quadratic penalty on the probability mass of one channel leaving
    ``[a1, a2]`` (totals in pixels), scaled by ``lam``.
    """

    channel: int
    a1: float
    a2: float
    lam: float = 1.0

    def __post_init__(self):
        if self.a1 > self.a2:
            raise ValueError("need a1 <= a2")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def value_and_grad(self, probs):
        value, g = size_sum_penalty(probs[self.channel], self.a1, self.a2, self.lam)
        grad = np.zeros_like(probs)
        grad[self.channel] = g
        return value, grad

    def distance(self, probs) -> float:
        """Squared violation of the band (0 inside it)."""
        s = float(probs[self.channel].sum())
        v = min(s - self.a1, 0.0) + max(s - self.a2, 0.0)
        return v * v


def size_sum_penalty(s: np.ndarray, a1: float, a2: float, lam: float = 1.0):
    """``lam * (1's - a)^2`` outside the band, with its exact gradient.

    The gradient is the same value ``2 lam (1's - a)`` at every pixel.
    """
    if a1 > a2:
        raise ValueError("need a1 <= a2")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    total = float(np.sum(s))
    if total < a1:
        r = total - a1
    elif total > a2:
        r = total - a2
    else:
        return 0.0, np.zeros_like(s)
    return lam * r * r, np.full_like(s, 2.0 * lam * r)
