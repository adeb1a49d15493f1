"""Dense tensor kernels: same-padded convolution and its adjoint, channel
softmax, pointwise activations, and the raw tensor file format.

Tensors are plain numpy arrays laid out channels x height x width, with an
optional leading example axis. Nothing here mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KernelBank:
    """Convolution weights of shape ``out x in x kh x kw``.

    ``out_channels < in_channels`` is allowed (flat blocks).
    """

    weights: np.ndarray

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4:
            raise ShapeError(f"kernel bank needs 4 axes, got shape {w.shape}")
        if w.shape[2] < 1 or w.shape[3] < 1:
            raise ShapeError("kernel extents must be >= 1")
        if not np.all(np.isfinite(w)):
            raise NumericError("kernel weights are not finite")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]

    @property
    def shape(self):
        return self.weights.shape


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding that keeps the extent for kernel size k.

    Even sizes put the extra row/column after: floor((k-1)/2) before,
    ceil((k-1)/2) after.
    """
    before = (k - 1) // 2
    return before, k - 1 - before


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains NaN or Inf")


def _pad(x, kh, kw):
    pt, pb = same_padding(kh)
    pl, pr = same_padding(kw)
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr)))


def _batched(fn):
    # lift a 3-axis kernel to an optional leading example axis
    def wrapper(x, K, *args):
        x = np.asarray(x)
        if x.ndim == 4:
            return np.stack([fn(xi, K, *args) for xi in x])
        if x.ndim != 3:
            raise ShapeError(f"expected c x H x W (or n x c x H x W), got {x.shape}")
        return fn(x, K, *args)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x: np.ndarray, K: KernelBank) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding."""
    if x.shape[0] != K.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {K.in_channels}")
    check_finite(x, "conv2d input")
    w = np.ascontiguousarray(K.weights, dtype=x.dtype)
    return _backend.kernels.correlate(np.ascontiguousarray(_pad(x, K.kh, K.kw)), w)


@_batched
def conv2d_transpose(x: np.ndarray, K: KernelBank) -> np.ndarray:
    """Adjoint of :func:`conv2d`: maps ``out`` channels back to ``in`` channels."""
    if x.shape[0] != K.out_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel has {K.out_channels} outputs")
    check_finite(x, "conv2d_transpose input")
    kh, kw = K.kh, K.kw
    pt, pb = same_padding(kh)
    pl, pr = same_padding(kw)
    # adjoint = valid correlation of the oppositely padded input with the
    # spatially flipped, channel-swapped kernel
    xpad = np.pad(x, ((0, 0), (pb, pt), (pr, pl)))
    w = np.ascontiguousarray(K.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dtype=x.dtype)
    return _backend.kernels.correlate(np.ascontiguousarray(xpad), w)


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gradient of ``<conv2d(x, K), g>`` with respect to the weights of K."""
    x = np.asarray(x)
    if x.ndim == 4:
        return sum(conv2d_weight_grad(xi, gi, kh, kw) for xi, gi in zip(x, g))
    if x.shape[1:] != g.shape[1:]:
        raise ShapeError(f"spatial mismatch {x.shape} vs {g.shape}")
    xpad = np.ascontiguousarray(_pad(x, kh, kw))
    return _backend.kernels.correlate_weight_grad(xpad, np.ascontiguousarray(g, dtype=x.dtype), kh, kw)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis (axis -3)."""
    if x.shape[-3] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def softmax_channels_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the channel softmax evaluated at output ``y``."""
    return y * (upstream - np.sum(y * upstream, axis=-3, keepdims=True))


ACTIVATIONS = ("tanh", "relu-smooth")


def _check_kind(kind):
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def activation(x: np.ndarray, kind: str = "tanh") -> np.ndarray:
    """Elementwise activation. ``relu-smooth`` is softplus, log(1 + e^x)."""
    _check_kind(kind)
    if kind == "tanh":
        return np.tanh(x)
    return np.logaddexp(0.0, x)


def activation_deriv(x: np.ndarray, kind: str = "tanh") -> np.ndarray:
    _check_kind(kind)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    # logistic sigmoid, written to avoid overflow for large |x|
    return np.exp(-np.logaddexp(0.0, -x))


# -- raw tensor files -------------------------------------------------------

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def _header_path(path: Path) -> Path:
    return path.with_name(path.name + ".hdr")


def save_tensor(path, x: np.ndarray) -> Path:
    """Write ``x`` as a little-endian payload plus a ``key=value`` sidecar.

    The payload goes to ``path`` and the descriptor to ``path + ".hdr"``.
    """
    path = Path(path)
    x = np.asarray(x)
    name = x.dtype.name
    if name not in _DTYPES:
        x = x.astype(np.float64)
        name = "float64"
    path.write_bytes(np.ascontiguousarray(x, dtype=_DTYPES[name]).tobytes())
    shape = ",".join(str(s) for s in x.shape)
    _header_path(path).write_text(f"dtype={name}\nshape={shape}\nbyteorder=little\n")
    return path


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    meta = {}
    for line in _header_path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    try:
        dtype = _DTYPES[meta["dtype"]]
        shape = tuple(int(s) for s in meta["shape"].split(",") if s)
    except KeyError as exc:
        raise ValueError(f"bad tensor descriptor for {path}: missing {exc}") from None
    data = np.frombuffer(path.read_bytes(), dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{path}: payload has {data.size} values, descriptor says {shape}")
    return data.reshape(shape).astype(meta["dtype"])
