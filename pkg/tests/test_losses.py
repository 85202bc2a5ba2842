import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrt import numerics as nx
from lrt.errors import ConfigError, ContractError
from lrt.losses import (LossWeights, base_loss, ce_loss, context_prompt_loss, imagined_contrastive_loss,
                        margin_ce_loss, negative_mask, sample_pairs, softmax_ce)

from gradcheck import check


def brute_margin(c, y, s, m):
    c = np.clip(np.asarray(c, float), -1 + 1e-7, 1 - 1e-7)
    z = [s * math.cos(math.acos(c[j]) + m) if j == y else s * c[j] for j in range(len(c))]
    return -math.log(math.exp(z[y]) / sum(math.exp(v) for v in z))


def brute_infonce(F, Tx, pairs, rule="pair", scale=1.0):
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a)) / math.sqrt(sum(y * y for y in b))

    total = 0.0
    for k, (i, j) in enumerate(pairs):
        num = math.exp(scale * cos(F[k], Tx[k]))
        den = 0.0
        for l, (p, q) in enumerate(pairs):
            neg = {"pair": (p, q) != (i, j), "strict": p != i and q != j, "batch": True}[rule]
            if l == k or neg:
                den += math.exp(scale * cos(F[k], Tx[l]))
        total += -math.log(num / den)
    return total / len(pairs)


def test_ce_examples(rng):
    assert ce_loss([0.0, 1.0, 0.0], 1).item() == 0.0
    assert ce_loss(np.full(4, 0.25), 2).item() == pytest.approx(1.38629436, abs=1e-8)
    p = rng.dirichlet(np.ones(5))
    assert ce_loss(p, 3).item() == pytest.approx(-math.log(p[3]), abs=1e-14)
    assert ce_loss([1.0, 0.0], 1).item() == pytest.approx(-math.log(1e-12))  # epsilon floor
    P = rng.dirichlet(np.ones(3), size=4)
    y = np.array([0, 2, 1, 1])
    assert ce_loss(P, y).item() == pytest.approx(np.mean(-np.log(P[np.arange(4), y])), abs=1e-14)
    with pytest.raises(ContractError):
        ce_loss(P, y[:2])


def test_margin_examples(rng):
    c = rng.uniform(-1, 1, size=5)
    assert margin_ce_loss(c, 2, 3.0, 0.0).item() == pytest.approx(softmax_ce(3.0 * c, 2).item(), abs=1e-10)
    assert margin_ce_loss([0.3], 0, 1.0, 0.4).item() == 0.0
    c3 = [0.9, 0.1, -0.2]
    assert margin_ce_loss(c3, 0, 1.0, 0.4).item() == pytest.approx(brute_margin(c3, 0, 1.0, 0.4), abs=1e-12)
    assert np.isfinite(margin_ce_loss([1.0, -1.0], 0, 1.0, 0.4).item())  # clamp at the poles


@given(st.integers(2, 6), st.integers(0, 2**31), st.floats(0.5, 8.0), st.floats(0.0, 1.5))
def test_margin_matches_formula(n, seed, s, m):
    r = np.random.default_rng(seed)
    c, y = r.uniform(-1, 1, size=n), int(r.integers(n))
    got = margin_ce_loss(c, y, s, m).item()
    assert got >= 0 and got == pytest.approx(brute_margin(c, y, s, m), rel=1e-10, abs=1e-12)


def test_infonce_single_pair_is_zero(rng):
    assert imagined_contrastive_loss(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), [(0, 1)]).item() == 0.0


def test_infonce_duplicate_pair_tie(rng):
    F = rng.normal(size=(2, 4))
    t = rng.normal(size=4)
    dup = [(0, 1), (0, 1)]
    # plain in-batch counting: two tied terms in every denominator
    assert imagined_contrastive_loss(F, np.stack([t, t]), dup, "batch").item() == pytest.approx(math.log(2), abs=1e-14)
    # the default rule never treats another copy of the positive pair as a negative
    assert imagined_contrastive_loss(F, np.stack([t, t]), dup, "pair").item() == 0.0
    # distinct pairs whose mixtures happen to tie do compete
    assert imagined_contrastive_loss(F, np.stack([t, t]), [(0, 1), (2, 3)]).item() == pytest.approx(math.log(2))


def test_infonce_matches_brute_force():
    r = np.random.default_rng(5)
    for B in range(1, 5):
        for rule in ("pair", "strict", "batch"):
            pairs = [tuple(r.choice(4, 2, replace=False)) for _ in range(B)]
            F, Tx = r.normal(size=(B, 3)), r.normal(size=(B, 3))
            got = imagined_contrastive_loss(F, Tx, pairs, rule, 2.0).item()
            assert abs(got - brute_infonce(F, Tx, pairs, rule, 2.0)) < 1e-12


def test_negative_mask_rules():
    pairs = [(0, 1), (0, 2), (3, 1), (0, 1)]
    pm = negative_mask(pairs, "pair")
    sm = negative_mask(pairs, "strict")
    assert pm[0].tolist() == [True, True, True, False]
    assert sm[0].tolist() == [True, False, False, False]
    assert pm[3, 3] and sm[3, 3]
    with pytest.raises(ContractError):
        negative_mask([(2, 2)])
    with pytest.raises(ConfigError):
        negative_mask(pairs, "or")


def test_sample_pairs(rng):
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 3])
    for _ in range(50):
        P = sample_pairs(labels, rng)
        assert P.shape == (4, 2)
        assert np.all(labels[P[:, 0]] != labels[P[:, 1]])
        assert len(set(P[:, 0])) == 4
    with pytest.raises(ContractError):
        sample_pairs(np.zeros(4, int), rng)


def test_context_prompt_examples():
    assert context_prompt_loss(np.ones((3, 2)), np.zeros(3, int), np.array([[1.0, 0.5]]), 1.0, 5.0).item() == 0.0
    T = np.eye(3)
    s = 20.0
    got = context_prompt_loss(np.array([[1.0, 0.0, 0.0]]), [0], T, 1.0, s).item()
    assert got == pytest.approx(-math.log(math.exp(s) / (math.exp(s) + 2)), abs=1e-12)
    assert got < 1e-8


def test_base_loss_combination():
    w = LossWeights()
    assert float(nx.as_tensor(base_loss(0.5, 1.0, 2.0, w)).data) == pytest.approx(0.7)
    assert float(nx.as_tensor(base_loss(0.5, 1.0, 2.0, LossWeights(0.0, 0.0))).data) == 0.5


def test_loss_weights_validation():
    assert LossWeights().validate().lambda_m == 0.1
    for bad in (dict(lambda_m=-1.0), dict(margin=2.0), dict(scale=float("nan"))):
        with pytest.raises(ConfigError):
            LossWeights(**bad).validate()


def test_losses_are_non_negative_and_finite(rng):
    for _ in range(30):
        F, Tx = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        pairs = [(0, 1), (1, 2), (2, 3), (3, 0)]
        vals = [
            imagined_contrastive_loss(F, Tx, pairs, "strict", 10.0).item(),
            margin_ce_loss(rng.uniform(-1, 1, 6), 1, 1.0, 0.4).item(),
            context_prompt_loss(F, [0, 1, 2, 3], Tx, 1.0, 16.0).item(),
            ce_loss(rng.dirichlet(np.ones(3)), 0).item(),
        ]
        assert all(np.isfinite(v) and v >= 0 for v in vals)


def test_loss_gradients_small_fd(rng):
    c = nx.parameter(rng.uniform(-0.9, 0.9, size=5))
    assert check(lambda: margin_ce_loss(c, 1, 2.0, 0.4), [c]) < 1e-4
    F, Tx = nx.parameter(rng.normal(size=(3, 4))), nx.parameter(rng.normal(size=(3, 4)))
    assert check(lambda: imagined_contrastive_loss(F, Tx, [(0, 1), (1, 2), (2, 0)]), [F, Tx]) < 1e-4
