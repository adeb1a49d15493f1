"""Segmentation networks with hand-written adjoint backpropagation.

Two architectures share one parameter layout: a learned 1x1 opening that
lifts the input to the network width, a stack of convolutional layers, and a
closing that slices the first ``n_class`` channels of the final state as
logits (followed by a channel softmax).

``resnet``      y_{j+1} = y_j - f(K_j y_j)
``hyperbolic``  y_{j+1} = 2 y_j - y_{j-1} - h^2 K_j^T f(K_j y_j), y_0 = y_1

The hyperbolic recursion can be run backwards exactly, so its trajectory
keeps only the last two states and backward recomputes the rest.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import (
    KernelBank,
    ShapeError,
    activation,
    activation_deriv,
    conv2d,
    conv2d_transpose,
    conv2d_weight_grad,
    load_tensor,
    save_tensor,
    softmax_channels,
)

ARCHS = ("resnet", "hyperbolic")


class ConsistencyError(ValueError):
    """Trajectory and parameters do not belong together."""


@dataclass
class ParamStack:
    arch: str
    opening: KernelBank
    layers: list
    n_class: int = 2
    h: float = 0.2
    activation: str = "tanh"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if not self.h > 0:
            raise ValueError("time step h must be positive")
        if self.opening.kh != 1 or self.opening.kw != 1:
            raise ShapeError("opening layer must be 1x1")
        width = self.width
        if not 2 <= self.n_class <= width:
            raise ShapeError(f"need 2 <= n_class <= width, got n_class={self.n_class}, width={width}")
        for i, K in enumerate(self.layers):
            if K.in_channels != width:
                raise ShapeError(f"layer {i} reads {K.in_channels} channels, width is {width}")
            if self.arch == "resnet" and K.out_channels != width:
                raise ShapeError(f"resnet layer {i} must map width to width")
        activation(np.zeros(1), self.activation)  # validates the kind

    @property
    def width(self) -> int:
        return self.opening.out_channels

    @property
    def in_channels(self) -> int:
        return self.opening.in_channels

    def kernels(self):
        """All kernel banks, opening first."""
        return [self.opening, *self.layers]

    def with_weights(self, weights) -> "ParamStack":
        """Copy with new weight arrays, ordered as :meth:`kernels`."""
        weights = list(weights)
        return replace(
            self,
            opening=KernelBank(weights[0]),
            layers=[KernelBank(w) for w in weights[1:]],
        )

    def step(self, grads: "Gradients", lr: float) -> "ParamStack":
        """Plain gradient step ``K <- K - lr * dK`` on every kernel."""
        return self.with_weights(K.weights - lr * g for K, g in zip(self.kernels(), grads.all()))


@dataclass
class Gradients:
    opening: np.ndarray
    layers: list

    def all(self):
        return [self.opening, *self.layers]


@dataclass
class StateTrajectory:
    """Network states of one forward pass.

    resnet keeps every state; hyperbolic keeps only the last two unless
    ``keep_states`` was requested (for inspection, backward ignores them).
    """

    arch: str
    states: list
    n_states: int
    data: np.ndarray = field(repr=False)


def init_params(
    arch: str,
    n_chan: int,
    width: int = 16,
    n_layers: int = 4,
    kernel_size=3,
    n_class: int = 2,
    seed: int = 0,
    h: float = 0.2,
    activation: str = "tanh",
    block_channels: int | None = None,
) -> ParamStack:
    """Zero-mean uniform weights scaled by 1/sqrt(fan-in), seeded.

    ``block_channels`` sets the output count of hyperbolic layers (a "flat"
    block when smaller than ``width``); resnet layers are always square.
    """
    rng = np.random.default_rng(seed)
    kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else tuple(kernel_size)

    def bank(o, i, a, b):
        bound = 1.0 / np.sqrt(i * a * b)
        return KernelBank(rng.uniform(-bound, bound, size=(o, i, a, b)))

    out = width
    if arch == "hyperbolic" and block_channels is not None:
        out = block_channels
    opening = bank(width, n_chan, 1, 1)
    layers = [bank(out, width, kh, kw) for _ in range(n_layers)]
    return ParamStack(arch, opening, layers, n_class=n_class, h=h, activation=activation)


def hyperbolic_step(y_cur, y_prev, K: KernelBank, h: float, f: str):
    """One forward leapfrog step: returns the state after ``y_cur``."""
    return 2.0 * y_cur - y_prev - h * h * conv2d_transpose(activation(conv2d(y_cur, K), f), K)


def inverse_hyperbolic_step(y_j, y_jm1, K: KernelBank, h: float, f: str):
    """Recover ``y_{j-2}`` from ``(y_j, y_{j-1})`` by running the step backwards."""
    return 2.0 * y_jm1 - y_j - h * h * conv2d_transpose(activation(conv2d(y_jm1, K), f), K)


def _logits(params, y):
    return y[..., : params.n_class, :, :]


def forward(params: ParamStack, d: np.ndarray, keep_states: bool = False):
    """Run the network; returns ``(logits, probs, trajectory)``."""
    d = np.asarray(d)
    if d.shape[-3] != params.in_channels:
        raise ShapeError(f"data has {d.shape[-3]} channels, network expects {params.in_channels}")
    f = params.activation
    y = conv2d(d, params.opening)
    if params.arch == "resnet":
        states = [y]
        for K in params.layers:
            y = y - activation(conv2d(y, K), f)
            states.append(y)
        n_states = len(states)
    else:
        prev, cur = y, y
        states = [prev, cur] if keep_states else None
        for K in params.layers:
            prev, cur = cur, hyperbolic_step(cur, prev, K, params.h, f)
            if keep_states:
                states.append(cur)
        n_states = len(params.layers) + 2
        if not keep_states:
            states = [prev, cur]
        y = cur
    logits = _logits(params, y)
    probs = softmax_channels(logits)
    return logits, probs, StateTrajectory(params.arch, states, n_states, d)


def _check_trajectory(params, traj):
    if traj.arch != params.arch:
        raise ConsistencyError(f"trajectory from {traj.arch!r}, parameters are {params.arch!r}")
    expected = len(params.layers) + (1 if params.arch == "resnet" else 2)
    if traj.n_states != expected:
        raise ConsistencyError(f"trajectory has {traj.n_states} states, network implies {expected}")
    if params.arch == "resnet" and len(traj.states) != expected:
        raise ConsistencyError("resnet trajectory must retain every state")
    if traj.states[-1].shape[-3] != params.width:
        raise ConsistencyError("state width does not match parameters")


def _full_multiplier(params, y_last, p_n):
    p_n = np.asarray(p_n)
    if p_n.shape[-3] == params.width:
        return p_n.astype(y_last.dtype, copy=True)
    if p_n.shape[-3] != params.n_class:
        raise ShapeError(f"multiplier has {p_n.shape[-3]} channels, expected {params.n_class} or {params.width}")
    p = np.zeros_like(y_last)
    p[..., : params.n_class, :, :] = p_n
    return p


def backward(params: ParamStack, traj: StateTrajectory, p_n: np.ndarray) -> Gradients:
    """Gradients of the objective w.r.t. every kernel, given its gradient
    ``p_n`` at the logits (or at the full final state).

    Multipliers run from the last layer to the first; each layer's kernel
    gradient is formed from its incoming state and multiplier.
    """
    _check_trajectory(params, traj)
    f = params.activation
    if params.arch == "resnet":
        states = traj.states
        p = _full_multiplier(params, states[-1], p_n)
        grads = [None] * len(params.layers)
        for j in range(len(params.layers) - 1, -1, -1):
            K, y = params.layers[j], states[j]
            fp = activation_deriv(conv2d(y, K), f) * p
            grads[j] = -conv2d_weight_grad(y, fp, K.kh, K.kw)
            p = p - conv2d_transpose(fp, K)
        p_open = p
    else:
        h2 = params.h * params.h
        s_prev, s_cur = traj.states[-2], traj.states[-1]
        lam_cur = _full_multiplier(params, s_cur, p_n)
        lam_prev = np.zeros_like(s_cur)
        grads = [None] * len(params.layers)
        for t in range(len(params.layers) - 1, -1, -1):
            # s_cur = 2 s_prev - s_back - h^2 K^T f(K s_prev)
            K = params.layers[t]
            u = conv2d(s_prev, K)
            a = activation(u, f)
            s_back = 2.0 * s_prev - s_cur - h2 * conv2d_transpose(a, K)
            w = conv2d(lam_cur, K)
            fw = activation_deriv(u, f) * w
            grads[t] = -h2 * (
                conv2d_weight_grad(s_prev, fw, K.kh, K.kw) + conv2d_weight_grad(lam_cur, a, K.kh, K.kw)
            )
            lam_prev, lam_cur = -lam_cur, lam_prev + 2.0 * lam_cur - h2 * conv2d_transpose(fw, K)
            s_prev, s_cur = s_back, s_prev
        # both initial states equal the opened input
        p_open = lam_prev + lam_cur
    g_open = conv2d_weight_grad(traj.data, p_open, 1, 1)
    return Gradients(g_open, grads)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(directory, params: ParamStack, iteration: int | None = None) -> Path:
    """One tensor file per kernel bank plus a ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = ["opening"] + [f"layer_{i:03d}" for i in range(len(params.layers))]
    lines = [
        "# distseg checkpoint v1",
        f"arch={params.arch}",
        f"h={params.h!r}",
        f"activation={params.activation}",
        f"n_class={params.n_class}",
        f"n_layers={len(params.layers)}",
        f"iteration={'' if iteration is None else iteration}",
    ]
    for name, K in zip(names, params.kernels()):
        save_tensor(directory / f"{name}.raw", K.weights)
        lines.append(f"shape.{name}={','.join(map(str, K.shape))}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory):
    """Returns ``(params, iteration)``."""
    directory = Path(directory)
    meta = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            meta[k] = v
    n = int(meta["n_layers"])
    opening = KernelBank(load_tensor(directory / "opening.raw"))
    layers = [KernelBank(load_tensor(directory / f"layer_{i:03d}.raw")) for i in range(n)]
    params = ParamStack(
        meta["arch"], opening, layers, n_class=int(meta["n_class"]), h=float(meta["h"]),
        activation=meta["activation"],
    )
    it = int(meta["iteration"]) if meta.get("iteration") else None
    return params, it
