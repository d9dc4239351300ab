import math

import numpy as np
import pytest

from astroloc.features import l2_normalize
from astroloc.geodesy import Relation
from astroloc.training import LossParams, chain_grad_to_embeddings, grad_check, ms_loss, na_ms_loss
from astroloc.training.losses import label_relations, similarity_matrix
from astroloc.training.trainer import head_loss_and_grad

from reference import LD, central_diff, max_rel_error, mixed_relations, ms_loss_ref, normalize_rows


def instance(rng, n=8, dim=6, tight=False):
    """Pre-normalization vectors and mixed relations; ``tight`` puts every similarity near 1."""
    if tight:
        Z = rng.normal(size=dim) + 0.15 * rng.normal(size=(n, dim))
    else:
        Z = rng.normal(size=(n, dim))
    return Z, mixed_relations(rng, n)


def test_loss_matches_reference(rng):
    for k in range(10):
        Z, rel = instance(rng, tight=k % 2 == 1)
        E = l2_normalize(Z)
        S = similarity_matrix(E)
        loss, _ = na_ms_loss(S, rel)
        assert loss == pytest.approx(float(ms_loss_ref(S, rel)), rel=1e-12)


def test_similarity_gradient(rng):
    for k in range(10):
        Z, rel = instance(rng, tight=k % 2 == 1)
        S = similarity_matrix(l2_normalize(Z))
        _, G = na_ms_loss(S, rel)
        numeric = central_diff(lambda s: ms_loss_ref(s, rel), S)
        assert max_rel_error(G, numeric) <= 1e-4


def test_embedding_chain_gradient(rng):
    for k in range(10):
        Z, rel = instance(rng, tight=k % 2 == 1)
        E = l2_normalize(Z)
        _, G = na_ms_loss(similarity_matrix(E), rel)
        analytic = chain_grad_to_embeddings(G, E, pre_norm=Z)

        def f(z):
            e = normalize_rows(z)
            return ms_loss_ref(e @ e.T, rel)

        assert max_rel_error(analytic, central_diff(f, Z)) <= 1e-4
        # without pre_norm the result is the gradient w.r.t. E itself
        fe = central_diff(lambda e: ms_loss_ref(e @ e.T, rel), E)
        assert max_rel_error(chain_grad_to_embeddings(G, E), fe) <= 1e-4


def test_head_weight_gradient(rng):
    F = l2_normalize(rng.normal(size=(8, 5)))
    W = np.eye(5)[:, :4] + 0.1 * rng.normal(size=(5, 4))
    rel = mixed_relations(rng, 8)
    _, dW = head_loss_and_grad(F, W, rel, LossParams())

    def f(w):
        e = normalize_rows(F.astype(LD) @ w)
        return ms_loss_ref(e @ e.T, rel)

    assert max_rel_error(dW, central_diff(f, W)) <= 1e-4


def test_grad_check_helper_and_negative_control(rng):
    Z, rel = instance(rng)

    def good(z):
        e = l2_normalize(z)
        loss, G = na_ms_loss(similarity_matrix(e), rel)
        return loss, chain_grad_to_embeddings(G, e, pre_norm=z)

    def broken(z):
        loss, g = good(z)
        return loss, g * 1.01

    # float64 differences need a larger floor than the long double oracle
    assert grad_check(good, Z, eps=1e-5, floor=1e-5) < 1e-4
    assert grad_check(broken, Z, eps=1e-5, floor=1e-5) > 5e-3
    with pytest.raises(ValueError):
        grad_check(good, Z, eps=0.0)


def test_hand_values():
    p = LossParams()
    S4 = np.full((4, 4), p.lam)
    loss, _ = na_ms_loss(S4, np.ones((4, 4), np.int8))
    assert abs(loss - math.log(4) / p.alpha) <= 1e-9
    S2 = np.full((2, 2), p.lam)
    loss, _ = ms_loss(S2, ["a", "b"])
    assert abs(loss - math.log(2) / p.beta) <= 1e-9


def test_na_ms_equals_ms_without_neutrals(rng):
    for _ in range(50):
        labels = rng.integers(0, 4, size=8)
        E = l2_normalize(rng.normal(size=(8, 6)))
        S = similarity_matrix(E)
        a, ga = na_ms_loss(S, label_relations(labels))
        b, gb = ms_loss(S, labels)
        assert abs(a - b) <= 1e-12
        np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)


def test_neutral_pair_has_no_influence(rng):
    E = l2_normalize(rng.normal(size=(8, 6)))
    S = similarity_matrix(E)
    rel = mixed_relations(rng, 8)
    rel[1, 2] = rel[2, 1] = Relation.NEUTRAL
    loss, G = na_ms_loss(S, rel)
    assert G[1, 2] == 0.0 and G[2, 1] == 0.0
    for delta in (0.3, -0.7, 5.0):
        S2 = S.copy()
        S2[1, 2] += delta
        S2[2, 1] += delta
        assert na_ms_loss(S2, rel)[0] == loss


def test_negative_term_rewards_dissimilarity():
    rel = np.array([[1, -1], [-1, 1]], np.int8)
    close = na_ms_loss(np.array([[1.0, 0.9], [0.9, 1.0]]), rel)[0]
    far = na_ms_loss(np.array([[1.0, -0.9], [-0.9, 1.0]]), rel)[0]
    assert close > far


def test_input_validation():
    with pytest.raises(ValueError):
        na_ms_loss(np.zeros((2, 3)), np.zeros((2, 3), np.int8))
    with pytest.raises(ValueError):
        na_ms_loss(np.zeros((2, 2)), np.full((2, 2), 2, np.int8))
    with pytest.raises(ValueError):
        na_ms_loss(np.array([[np.nan, 0], [0, 1.0]]), np.ones((2, 2), np.int8))
    with pytest.raises(ValueError):
        LossParams(alpha=0.0)
    assert na_ms_loss(np.zeros((0, 0)), np.zeros((0, 0), np.int8))[0] == 0.0
    rel = np.array([[Relation.POSITIVE, Relation.NEUTRAL], [Relation.NEUTRAL, Relation.POSITIVE]], dtype=object)
    assert na_ms_loss(np.eye(2), rel)[0] == 0.0
