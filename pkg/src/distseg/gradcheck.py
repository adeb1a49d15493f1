"""Central finite-difference checks for every hand-written gradient.

Each suite returns the worst relative error it saw; :func:`run_all` compares
them with per-suite tolerances. The relative error of a gradient vector is
``||g_fd - g|| / max(||g_fd||, ||g||)`` (0 when both vanish).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distance import distance_grad, distance_sq
from .losses import SizeSumPenalty, SupervisionMask, masked_cross_entropy
from .network import Gradients, ParamStack, backward, forward, init_params
from .projections import Cardinality, L1Ball
from .tensor import softmax_channels, softmax_channels_backward
from .trainer import _evaluate_penalty, assemble_final_multiplier

TOLERANCES = {
    "distance": 1e-6,
    "softmax": 1e-6,
    "network": 1e-4,
    "sum_penalty": 1e-8,
}


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def fd_gradient(fun, x, step=1e-6):
    """Central differences of scalar ``fun`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fun(x)
        flat[i] = old - step
        fm = fun(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def tie_free_vector(rng, n, k, gap=1e-3):
    """Random vector whose sorted magnitudes differ by at least ``gap``
    between positions ``k - 1`` and ``k`` (so the top-k support is stable)."""
    while True:
        v = rng.standard_normal(n)
        mags = np.sort(np.abs(v))[::-1]
        if k == 0 or k == n or mags[k - 1] - mags[k] >= gap:
            return v


def check_distance(trials=20, seed=0, step=1e-6) -> float:
    """``distance_grad`` against differences of ``distance_sq`` for
    cardinality and l1-ball sets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 13))
        k = int(rng.integers(0, n))
        y = tie_free_vector(rng, n, k)[None]
        for cset in (Cardinality(0, k), L1Ball(0, float(rng.uniform(0.1, 1.0) * np.abs(y).sum()))):
            fd = fd_gradient(lambda z: distance_sq(z, cset), y, step)
            worst = max(worst, rel_error(fd, distance_grad(y, cset)))
    return worst


def check_softmax(trials=20, seed=0, step=1e-6) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((3, 2, 2))
        u = rng.standard_normal((3, 2, 2))
        fd = fd_gradient(lambda z: float(np.vdot(softmax_channels(z), u)), x, step)
        worst = max(worst, rel_error(fd, softmax_channels_backward(softmax_channels(x), u)))
    return worst


def check_sum_penalty(trials=20, seed=0, step=1e-6) -> float:
    """Away from the kinks at ``1's = a1`` and ``1's = a2``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        probs = rng.uniform(0.05, 0.95, size=(2, 4, 4))
        total = probs[0].sum()
        # alternate below / above the band, never near its ends
        a1, a2 = (total + 2.0, total + 4.0) if t % 2 else (total - 4.0, total - 2.0)
        pen = SizeSumPenalty(0, a1, a2, lam=float(rng.uniform(0.5, 2.0)))
        fd = fd_gradient(lambda z: pen.value_and_grad(z)[0], probs, step)
        worst = max(worst, rel_error(fd, pen.value_and_grad(probs)[1]))
    return worst


def composite_objective(params: ParamStack, d, mask, penalty, alpha):
    """``masked cross-entropy + alpha * penalty`` and its kernel gradients."""
    logits, probs, traj = forward(params, d)
    loss = masked_cross_entropy(probs, mask)[0] if len(mask) else 0.0
    value, grad, _ = _evaluate_penalty(penalty, probs)
    p_n = assemble_final_multiplier(probs, logits, mask, penalty, alpha, penalty_grad=grad)
    return loss + alpha * value, backward(params, traj, p_n)


@dataclass
class NetworkCase:
    params: ParamStack
    data: np.ndarray
    mask: SupervisionMask
    penalty: object
    alpha: float = 0.7


def small_case(arch="hyperbolic", n_layers=2, H=8, W=8, width=4, kernel_size=3, n_chan=2, seed=0,
               activation="tanh", h=0.2) -> NetworkCase:
    """Random 2-class instance with a partial mask and an area penalty."""
    from .distance import DistancePenalty
    from .projections import FractionBounds, fraction_bounds_to_cardinality

    rng = np.random.default_rng(seed)
    # a wider init than the training default so the network is far from linear
    params = init_params(arch, n_chan, width=width, n_layers=n_layers, kernel_size=kernel_size,
                         seed=seed, activation=activation, h=h)
    params = params.with_weights(3.0 * K.weights for K in params.kernels())
    d = rng.standard_normal((n_chan, H, W))
    N = H * W
    pix = rng.choice(N, size=max(2, N // 8), replace=False)
    mask = SupervisionMask(pix, rng.integers(0, 2, size=pix.size), (H, W))
    sets = fraction_bounds_to_cardinality(FractionBounds(0.3, 0.6), N)
    return NetworkCase(params, d, mask, DistancePenalty(tuple(sets)))


def check_network(case: NetworkCase, step=1e-6, corrupt_backward=False) -> float:
    """Backpropagated kernel gradients against differences over every entry."""
    params = case.params
    _, grads = composite_objective(params, case.data, case.mask, case.penalty, case.alpha)
    if corrupt_backward:
        # negative control: perturb one layer's gradient the way a dropped
        # term in the multiplier recursion would
        grads = Gradients(grads.opening, [1.05 * g for g in grads.layers[:1]] + grads.layers[1:])
    kernels = [K.weights for K in params.kernels()]
    worst = 0.0
    for idx, g in enumerate(grads.all()):
        def fun(w, idx=idx):
            ws = list(kernels)
            ws[idx] = w
            return composite_objective(params.with_weights(ws), case.data, case.mask, case.penalty, case.alpha)[0]

        worst = max(worst, rel_error(fd_gradient(fun, kernels[idx], step), g))
    return worst


def run_all(cases=None, corrupt_backward=False) -> dict:
    """Every suite; ``cases`` defaults to one small instance per architecture."""
    if cases is None:
        cases = [small_case("resnet"), small_case("hyperbolic")]
    return {
        "distance": check_distance(),
        "softmax": check_softmax(),
        "network": max(check_network(c, corrupt_backward=corrupt_backward) for c in cases),
        "sum_penalty": check_sum_penalty(),
    }


def failures(results: dict) -> list:
    return [name for name, err in results.items() if not err <= TOLERANCES[name]]
