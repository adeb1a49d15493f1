"""Training loop with distance-to-set penalties on the network output.

Each iteration: augment, forward, build the final multiplier (label-loss
gradient plus alpha times the distance gradient, chained through the
softmax), backpropagate, take a gradient step, then grow alpha when the
distance rises above its recent maximum.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import SupervisionMask, masked_cross_entropy
from .network import ParamStack, backward, forward
from .tensor import softmax_channels_backward

log = logging.getLogger(__name__)

MODES = ("feasibility", "labels+constraints", "hard-feasibility")


class DivergenceError(ArithmeticError):
    def __init__(self, iteration, what):
        super().__init__(f"training diverged at iteration {iteration}: {what}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    mode: str = "feasibility"
    alpha0: float = 1.0
    eta: float = 2.0
    m: int = 5
    eps: float | None = None  # None: 1e-3 * sqrt(pixel count)
    lr: float = 1e-3
    max_iter: int = 2000
    seed: int = 0
    augment: bool = True
    subsample: float = 0.1
    background_class: int = 1
    validation_fraction: float = 0.2
    plateau_growth: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode == "labels":
            self.mode = "labels+constraints"
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not self.eta > 1:
            raise ValueError("penalty growth factor eta must exceed 1")
        if self.m < 1:
            raise ValueError("history window m must be >= 1")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("feasibility tolerance eps must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not self.alpha0 >= 0:
            raise ValueError("alpha0 must be >= 0")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample fraction must lie in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def tolerance(self, n_pixels: int) -> float:
        return self.eps if self.eps is not None else 1e-3 * math.sqrt(n_pixels)


@dataclass
class TrainResult:
    params: ParamStack
    best: tuple | None  # (params, iteration) of the best feasible checkpoint
    distance: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    label_used: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    feasible: bool = False
    eps: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.distance)

    def selected_params(self) -> ParamStack:
        """Best checkpoint when one exists, else the final parameters."""
        return self.best[0] if self.best is not None else self.params


def assemble_final_multiplier(probs, logits, mask, penalty, alpha, penalty_grad=None, use_labels=True):
    """Gradient of ``loss + alpha * penalty`` at the logits.

    With an empty mask (or ``use_labels=False``) only the penalty term
    remains. ``penalty_grad`` skips re-projecting when the caller already
    has the penalty gradient at ``probs``.
    """
    upstream = np.zeros_like(probs)
    if use_labels and mask is not None and len(mask) > 0:
        _, g = masked_cross_entropy(probs, mask)
        upstream += g
    if penalty is not None and alpha != 0:
        if penalty_grad is None:
            _, penalty_grad = penalty.value_and_grad(probs)
        upstream += alpha * penalty_grad
    return softmax_channels_backward(probs, upstream)


def update_alpha(history, d_i, alpha, eta, m=None, plateau=False):
    """Multiply ``alpha`` by ``eta`` when ``d_i`` exceeds the max of the
    previous ``m`` distances (``>=`` with ``plateau``). Inactive while fewer
    than ``m`` previous values exist.
    """
    history = list(history)
    if m is None:
        m = len(history)
    if m < 1 or len(history) < m:
        return alpha
    window_max = max(history[-m:])
    grow = d_i >= window_max if plateau else d_i > window_max
    return alpha * eta if grow else alpha


@dataclass(frozen=True)
class Augmentation:
    """Flips and transposition of the last two (spatial) axes."""

    flip_rows: bool = False
    flip_cols: bool = False
    transpose: bool = False

    def apply(self, x):
        if self.flip_rows:
            x = x[..., ::-1, :]
        if self.flip_cols:
            x = x[..., :, ::-1]
        if self.transpose:
            x = np.swapaxes(x, -1, -2)
        return np.ascontiguousarray(x)

    def invert(self, x):
        if self.transpose:
            x = np.swapaxes(x, -1, -2)
        if self.flip_cols:
            x = x[..., :, ::-1]
        if self.flip_rows:
            x = x[..., ::-1, :]
        return np.ascontiguousarray(x)

    def map_mask(self, mask: SupervisionMask) -> SupervisionMask:
        H, W = mask.shape
        r, c = mask.rows, mask.cols
        if self.flip_rows:
            r = H - 1 - r
        if self.flip_cols:
            c = W - 1 - c
        shape = (H, W)
        if self.transpose:
            r, c = c, r
            shape = (W, H)
        return SupervisionMask.from_rows_cols(r, c, mask.classes, shape).sorted()


def augment(d, mask, rng, subsample=1.0, background_class=1, flips=True, transpose=True):
    """Random flips / transposition of data and mask plus background-label
    subsampling. Returns ``(d', mask', augmentation)``; use
    ``augmentation.invert`` to map predictions back.
    """
    H, W = d.shape[-2:]
    fr, fc, tr = (bool(b) for b in rng.random(3) < 0.5)
    if not flips:
        fr = fc = False
    if tr and (not transpose or H != W):
        if H != W and transpose:
            log.info("skipping transposition for non-square %dx%d input", H, W)
        tr = False
    aug = Augmentation(fr, fc, tr)
    out_mask = mask
    if mask is not None and len(mask) > 0:
        if subsample < 1.0:
            bg = np.flatnonzero(mask.classes == background_class)
            n_keep = int(round(subsample * bg.size))
            drop = np.setdiff1d(bg, rng.choice(bg, size=n_keep, replace=False))
            out_mask = mask.subset(np.setdiff1d(np.arange(len(mask)), drop))
        out_mask = aug.map_mask(out_mask)
    return aug.apply(d), out_mask, aug


def _evaluate_penalty(penalty, probs):
    """(value, grad, distance) from one set of projections."""
    if penalty is None:
        return 0.0, np.zeros_like(probs), 0.0
    if hasattr(penalty, "residuals"):
        value, dist = 0.0, 0.0
        grad = np.zeros_like(probs)
        for w, r in penalty.residuals(probs):
            sq = float(np.vdot(r, r))
            value += w * 0.5 * sq
            dist += sq
            grad += w * r
        return value, grad, dist
    value, grad = penalty.value_and_grad(probs)
    return value, grad, penalty.distance(probs)


def _cast(params, dtype):
    return params.with_weights(K.weights.astype(dtype) for K in params.kernels())


def train(params0: ParamStack, d, mask, penalty, cfg: TrainConfig) -> TrainResult:
    """Run the constrained training loop; see :class:`TrainConfig` for modes.

    ``penalty`` is a :class:`~distseg.distance.DistancePenalty` or any object
    with ``value_and_grad(probs)`` and ``distance(probs)`` (e.g. the
    sum-penalty baseline).
    """
    dtype = np.dtype(cfg.dtype)
    d = np.asarray(d, dtype=dtype)
    H, W = d.shape[-2:]
    N = H * W
    if mask is None:
        mask = SupervisionMask.empty((H, W))
    has_labels = len(mask) > 0
    if cfg.mode == "feasibility" and has_labels:
        raise ValueError("feasibility mode takes no labels; use labels+constraints")
    if cfg.mode != "feasibility" and not has_labels:
        raise ValueError(f"{cfg.mode} mode needs a nonempty supervision mask")
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.tolerance(N)
    tol_sq = eps * eps

    train_mask, val_mask = mask, None
    if has_labels and cfg.validation_fraction > 0:
        train_mask, val_mask = mask.split(cfg.validation_fraction, rng)
        if len(val_mask) == 0:
            val_mask = None

    params = _cast(params0, dtype)
    alpha = float(cfg.alpha0)
    res = TrainResult(params=params, best=None, eps=eps)
    res.metadata = {
        "config": asdict(cfg),
        "eps": eps,
        "n_train_labels": len(train_mask),
        "n_val_labels": 0 if val_mask is None else len(val_mask),
        "alpha_rule": "d_i >= window max" if cfg.plateau_growth else "d_i > window max",
        "feasibility_test": "d_i <= eps^2",
    }
    best_val = math.inf

    for it in range(cfg.max_iter):
        t0 = time.perf_counter()
        if cfg.augment:
            d_it, mask_it, aug = augment(d, train_mask, rng, cfg.subsample, cfg.background_class)
        else:
            d_it, mask_it, aug = d, train_mask, Augmentation()
        logits, probs, traj = forward(params, d_it)
        probs_c = aug.invert(probs)
        pen_value, pen_grad_c, d_i = _evaluate_penalty(penalty, probs_c)

        label_loss = 0.0
        if has_labels and len(mask_it) > 0:
            label_loss, _ = masked_cross_entropy(probs, mask_it)
        objective = label_loss + alpha * pen_value
        if not (math.isfinite(objective) and math.isfinite(d_i)):
            raise DivergenceError(it, f"objective={objective}, distance={d_i}")

        feasible = d_i <= tol_sq
        val = math.nan
        if has_labels:
            val = label_loss if val_mask is None else masked_cross_entropy(probs_c, val_mask)[0]
            if feasible and val < best_val:
                best_val = val
                res.best = (params, it)

        use_labels = has_labels and not (cfg.mode == "hard-feasibility" and not feasible)
        res.distance.append(d_i)
        res.loss.append(objective)
        res.alpha.append(alpha)
        res.val_loss.append(val)
        res.label_used.append(use_labels)

        if cfg.mode == "feasibility" and feasible:
            res.wall_clock.append(time.perf_counter() - t0)
            break

        p_n = assemble_final_multiplier(
            probs, logits, mask_it, penalty, alpha, penalty_grad=aug.apply(pen_grad_c), use_labels=use_labels
        )
        grads = backward(params, traj, p_n)
        params = params.step(grads, cfg.lr)
        alpha = update_alpha(res.distance[:-1], d_i, alpha, cfg.eta, cfg.m, cfg.plateau_growth)
        res.wall_clock.append(time.perf_counter() - t0)

    res.params = params
    res.feasible = res.distance[-1] <= tol_sq
    return res


def write_history_csv(path, res: TrainResult) -> None:
    """``iteration,d_i,loss,alpha`` rows, values in repr precision."""
    lines = ["# distseg-history v1", "iteration,d_i,loss,alpha"]
    for i, (di, lo, al) in enumerate(zip(res.distance, res.loss, res.alpha)):
        lines.append(f"{i},{di!r},{lo!r},{al!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
