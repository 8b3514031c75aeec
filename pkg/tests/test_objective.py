import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pond import numgrad as ng
from pond.errors import ConfigError
from pond.objective import (
    LossWeights,
    brute_force_entropy,
    brute_force_mi,
    combine,
    loss_D,
    pairwise_terms,
    similarity,
    total_G,
)

prompt_sets = arrays(np.float64, st.tuples(st.integers(3, 5), st.just(2), st.just(3)),
                     elements=st.floats(-2, 2))


def test_similarity_is_frobenius():
    a = np.arange(6.0).reshape(2, 3)
    b = np.ones((2, 3))
    assert similarity(a, b) == 15.0


def test_orthogonal_unit_prompts_give_zero():
    value, fallback = loss_D([np.eye(3)[i:i + 1] for i in range(3)])
    assert not fallback
    # each term is 0 - log(exp(0)) = 0
    assert value == pytest.approx(0.0, abs=1e-12)


def test_identical_prompts_value():
    # every similarity equals s; each of M(M-1) terms is s - (s + log(M-2))
    M = 4
    value, _ = loss_D([np.full((2, 2), 1.0)] * M)
    assert value == pytest.approx(-M * (M - 1) * math.log(M - 2), abs=1e-12)


def test_two_domain_fallback():
    a, b = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
    value, fallback = loss_D([a, b])
    assert fallback and value == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        loss_D([a])
    with pytest.raises(ConfigError):
        loss_D([a, b], similarity="dot")


@settings(max_examples=40, deadline=None)
@given(prompt_sets)
def test_pairwise_terms_sum_to_loss(P):
    for sim in ("trace", "cosine"):
        terms = pairwise_terms(list(P), sim)
        assert np.isnan(np.diag(terms)).all()
        assert np.nansum(terms) == pytest.approx(loss_D(list(P), sim)[0], rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(prompt_sets, st.floats(0.1, 10))
def test_cosine_is_scale_invariant(P, c):
    P = P + 0.5  # keep away from zero-norm prompts
    base = loss_D(list(P), "cosine")[0]
    assert loss_D(list(c * P), "cosine")[0] == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(prompt_sets)
def test_trace_loss_is_bounded_by_log_terms(P):
    # each term is at most S_ab - max_{i != a,b} S_ai, and at least that minus log(M-2)
    M = len(P)
    F = P.reshape(M, -1)
    S = F @ F.T
    terms = pairwise_terms(list(P))
    for a in range(M):
        for b in range(M):
            if a != b:
                mx = max(S[a, i] for i in range(M) if i not in (a, b))
                assert S[a, b] - mx - math.log(M - 2) - 1e-9 <= terms[a, b] <= S[a, b] - mx + 1e-9


def test_combine_omits_zero_weights():
    g = ng.Graph()
    R, D, F = g.const(1.0), g.const(2.0), g.const(4.0)
    assert combine(R, D, F, LossWeights(0.0, 0.0)) is R
    assert float(combine(R, D, F, LossWeights(0.5, 0.25)).value) == 3.0
    assert total_G(1.0, 2.0, 4.0, LossWeights(0.5, 0.25)).G == 3.0
    with pytest.raises(ConfigError):
        LossWeights(-1.0, 0.0)


def test_entropy_and_mi_basics():
    assert brute_force_entropy([0, 1, 0, 1]) == pytest.approx(1.0)
    assert brute_force_mi([0, 1, 0, 1], [0, 1, 0, 1]) == pytest.approx(1.0)
    assert brute_force_mi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    assert brute_force_mi([np.array([1, 2]), np.array([1, 2])], ["a", "b"]) == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        brute_force_mi([], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=40))
def test_mi_nonnegative_symmetric_bounded(pairs):
    x = [a for a, _ in pairs]
    y = [b for _, b in pairs]
    mi = brute_force_mi(x, y)
    assert mi >= -1e-12
    assert mi == pytest.approx(brute_force_mi(y, x), abs=1e-12)
    assert mi <= min(brute_force_entropy(x), brute_force_entropy(y)) + 1e-12
