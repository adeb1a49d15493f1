import logging
import math

import numpy as np
import pytest

from distseg.distance import DistancePenalty
from distseg.losses import SupervisionMask, masked_cross_entropy
from distseg.network import backward, forward, init_params
from distseg.projections import Cardinality, FractionBounds, fraction_bounds_to_cardinality
from distseg.synth import argmax_segmentation, gen_disc_scene
from distseg.tensor import softmax_channels_backward
from distseg.trainer import (
    Augmentation,
    DivergenceError,
    TrainConfig,
    assemble_final_multiplier,
    augment,
    train,
    update_alpha,
    write_history_csv,
)


def test_update_alpha_examples():
    assert update_alpha([0.5, 0.4, 0.3], 0.35, 1.0, 2.0, m=3) == 1.0
    assert update_alpha([0.5, 0.4, 0.3], 0.6, 1.0, 2.0, m=3) == 2.0
    assert update_alpha([0.5, 0.4], 0.9, 1.0, 2.0, m=3) == 1.0
    # only the last m entries count
    assert update_alpha([9.0, 0.4, 0.3], 0.6, 1.0, 2.0, m=2) == 2.0
    # the default rule is strict; the plateau variant also fires on equality
    assert update_alpha([0.5, 0.5], 0.5, 1.0, 2.0, m=2) == 1.0
    assert update_alpha([0.5, 0.5], 0.5, 1.0, 2.0, m=2, plateau=True) == 2.0


def test_update_alpha_scripted_sequence():
    d = [5, 4, 6, 3, 2, 7, 7, 1, 8, 0.5]
    m, eta = 2, 3.0
    alpha, fired = 1.0, []
    for i, di in enumerate(d):
        new = update_alpha(d[:i], di, alpha, eta, m)
        fired.append(new != alpha)
        expect = i >= m and di > max(d[i - m:i])
        assert (new == alpha * eta) if expect else (new == alpha)
        alpha = new
    assert fired == [False, False, True, False, False, True, False, False, True, False]


def test_augmentation_involution(rng):
    d = rng.standard_normal((2, 5, 5))
    for fr in (False, True):
        for fc in (False, True):
            a = Augmentation(fr, fc, False)
            np.testing.assert_array_equal(a.apply(a.apply(d)), d)
            t = Augmentation(fr, fc, True)
            np.testing.assert_array_equal(t.invert(t.apply(d)), d)


def test_augment_mask_tracks_data(rng):
    H = W = 6
    d = rng.standard_normal((1, H, W))
    mask = SupervisionMask(np.arange(0, 36, 5), np.arange(8) % 2, (H, W))
    for _ in range(10):
        d2, m2, aug = augment(d, mask, rng, subsample=1.0)
        # the labeled pixel values move with the data
        orig = {round(float(d[0].ravel()[p]), 12): c for p, c in zip(mask.pixels, mask.classes)}
        moved = {round(float(d2[0].ravel()[p]), 12): c for p, c in zip(m2.pixels, m2.classes)}
        assert orig == moved
        np.testing.assert_array_equal(aug.invert(d2), d)


def test_augment_subsample_and_vacuous(rng):
    mask = SupervisionMask(np.arange(40), np.r_[np.zeros(10, int), np.ones(30, int)], (8, 8))
    _, m, aug = augment(np.zeros((1, 8, 8)), mask, rng, subsample=0.1)
    assert np.sum(m.classes == 1) == 3 and np.sum(m.classes == 0) == 10
    _, m, aug = augment(np.zeros((1, 8, 8)), mask, rng, subsample=1.0, flips=False, transpose=False)
    assert aug == Augmentation()
    np.testing.assert_array_equal(m.pixels, mask.pixels)


def test_augment_skips_transpose_on_non_square(rng, caplog):
    d = rng.standard_normal((1, 4, 6))
    with caplog.at_level(logging.INFO, logger="distseg.trainer"):
        for _ in range(20):
            d2, _, aug = augment(d, None, rng)
            assert not aug.transpose and d2.shape == d.shape
    assert "skipping transposition" in caplog.text


def _setup(rng, H=6, W=6):
    P = init_params("hyperbolic", 2, width=4, n_layers=2, seed=3)
    d = rng.standard_normal((2, H, W))
    mask = SupervisionMask([0, 7, 20, 33], [0, 1, 1, 0], (H, W))
    pen = DistancePenalty(tuple(fraction_bounds_to_cardinality(FractionBounds(0.3, 0.5), H * W)))
    return P, d, mask, pen


def test_multiplier_examples(rng):
    P, d, mask, pen = _setup(rng)
    logits, probs, _ = forward(P, d)
    feasible = DistancePenalty((Cardinality(0, 36), Cardinality(1, 36)))
    empty = SupervisionMask.empty((6, 6))
    assert not assemble_final_multiplier(probs, logits, empty, feasible, 1.0).any()
    _, g = masked_cross_entropy(probs, mask)
    np.testing.assert_array_equal(assemble_final_multiplier(probs, logits, mask, pen, 0.0),
                                  softmax_channels_backward(probs, g))
    both = assemble_final_multiplier(probs, logits, mask, pen, 0.8)
    lab = assemble_final_multiplier(probs, logits, mask, None, 0.8)
    con = assemble_final_multiplier(probs, logits, empty, pen, 0.8)
    np.testing.assert_allclose(both, lab + con, rtol=1e-12, atol=1e-15)


def test_one_iteration_equivalence(rng):
    P, d, _, pen = _setup(rng)
    cfg = TrainConfig(mode="feasibility", lr=0.05, max_iter=1, augment=False, eps=1e-9)
    res = train(P, d, None, pen, cfg)
    logits, probs, traj = forward(P, d)
    _, g = pen.value_and_grad(probs)
    p_n = assemble_final_multiplier(probs, logits, None, pen, 1.0, penalty_grad=g)
    grads = backward(P, traj, p_n)
    for K0, K1, gk in zip(P.kernels(), res.params.kernels(), grads.all()):
        assert (K1.weights).tobytes() == (K0.weights - 0.05 * gk).tobytes()


def test_determinism(rng, tmp_path):
    P, d, mask, pen = _setup(rng)
    cfg = TrainConfig(mode="labels+constraints", lr=0.05, max_iter=15, seed=4)
    a = train(P, d, mask, pen, cfg)
    b = train(P, d, mask, pen, cfg)
    assert a.distance == b.distance and a.loss == b.loss and a.alpha == b.alpha
    write_history_csv(tmp_path / "a.csv", a)
    write_history_csv(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_history_csv_format(rng, tmp_path):
    P, d, _, pen = _setup(rng)
    res = train(P, d, None, pen, TrainConfig(max_iter=3, lr=0.01, eps=1e-9))
    write_history_csv(tmp_path / "h.csv", res)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "# distseg-history v1" and lines[1] == "iteration,d_i,loss,alpha"
    assert len(lines) == 2 + res.iterations
    assert float(lines[2].split(",")[1]) == res.distance[0]


def test_histories_and_alpha_monotone(rng):
    P, d, mask, pen = _setup(rng)
    res = train(P, d, mask, pen, TrainConfig(mode="labels", lr=0.5, max_iter=40, m=2, eta=1.5))
    n = res.iterations
    assert len(res.loss) == len(res.alpha) == len(res.val_loss) == len(res.wall_clock) == n == 40
    assert all(b >= a for a, b in zip(res.alpha, res.alpha[1:]))
    for i in range(1, n):
        expect = update_alpha(res.distance[: i - 1], res.distance[i - 1], res.alpha[i - 1], 1.5, 2)
        assert res.alpha[i] == expect


def test_vacuous_penalty_is_plain_supervised(rng):
    P, d, mask, _ = _setup(rng)
    vac = DistancePenalty((Cardinality(0, 36), Cardinality(1, 36)))
    res = train(P, d, mask, vac, TrainConfig(mode="labels", lr=0.1, max_iter=10, augment=False,
                                             validation_fraction=0.0))
    assert all(x == 0.0 for x in res.distance) and set(res.alpha) == {1.0}
    plain = train(P, d, mask, None, TrainConfig(mode="labels", lr=0.1, max_iter=10, augment=False,
                                                validation_fraction=0.0))
    assert res.loss == plain.loss
    for K0, K1 in zip(plain.params.kernels(), res.params.kernels()):
        np.testing.assert_array_equal(K0.weights, K1.weights)


def test_feasible_start_stops_at_first_iteration(rng):
    P, d, _, _ = _setup(rng)
    vac = DistancePenalty((Cardinality(0, 36),))
    res = train(P, d, None, vac, TrainConfig(mode="feasibility"))
    assert res.iterations == 1 and res.feasible
    for K0, K1 in zip(P.kernels(), res.params.kernels()):
        np.testing.assert_array_equal(K0.weights, K1.weights)


def test_hard_feasibility_drops_labels_while_infeasible(rng):
    P, d, mask, pen = _setup(rng)
    cfg = TrainConfig(mode="hard-feasibility", lr=0.3, max_iter=60, eps=0.05)
    res = train(P, d, mask, pen, cfg)
    tol = res.eps**2
    assert res.label_used == [di <= tol for di in res.distance]
    assert not all(res.label_used)


def test_checkpoint_invariant(rng):
    P, d, mask, pen = _setup(rng)
    res = train(P, d, mask, pen, TrainConfig(mode="labels", lr=0.5, max_iter=200, eps=0.3, augment=False))
    tol = res.eps**2
    feas = [i for i, di in enumerate(res.distance) if di <= tol]
    assert feas, "run never became feasible"
    best_params, best_it = res.best
    assert res.distance[best_it] <= tol
    assert res.val_loss[best_it] == min(res.val_loss[i] for i in feas)
    # the stored parameters are the ones evaluated at that iteration
    _, probs, _ = forward(best_params, d)
    assert pen.distance(probs) == pytest.approx(res.distance[best_it], rel=1e-9, abs=1e-15)
    assert res.selected_params() is best_params


def test_config_validation():
    for bad in (dict(mode="x"), dict(eta=1.0), dict(m=0), dict(eps=0.0), dict(lr=0.0), dict(alpha0=-1),
                dict(subsample=0.0), dict(validation_fraction=1.0), dict(max_iter=0), dict(dtype="int8")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(mode="labels").mode == "labels+constraints"
    assert TrainConfig().tolerance(4096) == pytest.approx(0.064)


def test_mode_mask_consistency(rng):
    P, d, mask, pen = _setup(rng)
    with pytest.raises(ValueError):
        train(P, d, mask, pen, TrainConfig(mode="feasibility"))
    with pytest.raises(ValueError):
        train(P, d, None, pen, TrainConfig(mode="labels"))


class _NaNPenalty:
    def value_and_grad(self, probs):
        return math.nan, np.zeros_like(probs)

    def distance(self, probs):
        return math.nan


def test_divergence_raises(rng):
    P, d, _, _ = _setup(rng)
    with pytest.raises(DivergenceError) as e:
        train(P, d, None, _NaNPenalty(), TrainConfig(max_iter=5))
    assert e.value.iteration == 0


def test_float32_mode(rng):
    P, d, _, pen = _setup(rng)
    res = train(P, d, None, pen, TrainConfig(max_iter=3, dtype="float32", lr=0.01, eps=1e-9))
    assert res.params.opening.weights.dtype == np.float32


@pytest.mark.slow
def test_small_disc_feasibility():
    scene = gen_disc_scene(32, 32, 0.3, 0.2, seed=0)
    N = 32 * 32
    pen = DistancePenalty(tuple(fraction_bounds_to_cardinality(FractionBounds(0.2, 0.4), N)))
    P = init_params("hyperbolic", 3, width=8, n_layers=4, seed=0)
    res = train(P, scene.data, None, pen, TrainConfig(mode="feasibility", lr=0.1, max_iter=2000))
    assert res.feasible and res.iterations <= 2000
    _, probs, _ = forward(res.params, scene.data)
    count = int(np.sum(argmax_segmentation(probs) == 0))
    assert 0.2 * N <= count <= 0.4 * N
