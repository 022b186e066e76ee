from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoarchive.rng import substream
from evoarchive.selection import (
    ScoreChildPropParams,
    SelectionPolicy,
    dynamic_midpoint,
    novelty_bonus,
    sample_parents,
    selection_distribution,
    sigmoid_transform,
    weights_to_distribution,
)

SCP = SelectionPolicy(variant="score-child-prop")


# --- dynamic_midpoint -----------------------------------------------------------


def test_midpoint_with_fewer_nodes_than_pool():
    assert dynamic_midpoint([0.5], 3) == 0.5


def test_midpoint_top_three_oracle():
    scores = [0.1, 0.2, 0.9, 0.8, 0.7]
    expected = sum(sorted(scores, reverse=True)[:3]) / 3  # sort-and-average oracle
    assert dynamic_midpoint(scores, 3) == pytest.approx(expected)
    assert expected == pytest.approx(0.8)


def test_midpoint_all_equal():
    assert dynamic_midpoint([0.4, 0.4, 0.4, 0.4], 3) == pytest.approx(0.4)


def test_midpoint_empty_errors():
    with pytest.raises(ValueError):
        dynamic_midpoint([], 3)


# --- sigmoid_transform -----------------------------------------------------------


def test_sigmoid_at_midpoint_is_half():
    assert sigmoid_transform(0.7, 0.7, 10.0) == 0.5


def test_sigmoid_matches_closed_form():
    # alpha - midpoint = 0.1 with sharpness 10 -> 1 / (1 + e^-1)
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert sigmoid_transform(0.6, 0.5, 10.0) == pytest.approx(expected, abs=1e-15)


@given(
    st.floats(min_value=-5, max_value=5),
    st.floats(min_value=-5, max_value=5),
    st.floats(min_value=0.1, max_value=50),
)
@settings(max_examples=100)
def test_sigmoid_monotone(a: float, b: float, lam: float):
    low, high = min(a, b), max(a, b)
    assert sigmoid_transform(low, 0.0, lam) <= sigmoid_transform(high, 0.0, lam)
    # strict ordering is observable only above float resolution and off saturation
    if high - low > 1e-9 and max(abs(low), abs(high)) * lam < 30:
        assert sigmoid_transform(low, 0.0, lam) < sigmoid_transform(high, 0.0, lam)


def test_sigmoid_saturates_without_error():
    assert sigmoid_transform(1e6, 0.0, 50.0) == pytest.approx(1.0)
    assert sigmoid_transform(-1e6, 0.0, 50.0) == pytest.approx(0.0)


# --- novelty_bonus ---------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(0, 1.0), (1, 0.5), (9, 0.1)])
def test_novelty_bonus(n, expected):
    assert novelty_bonus(n) == pytest.approx(expected)


# --- distribution ----------------------------------------------------------------


def test_injected_all_zero_weights_fall_back_to_uniform():
    probs = weights_to_distribution([0.0, 0.0, 0.0, 0.0])
    assert np.array_equal(probs, np.full(4, 0.25))


def test_equal_scores_children_zero_and_one():
    # equal sigmoid terms, novelty 1 vs 1/2 -> weights 2:1 -> (2/3, 1/3)
    breakdown = selection_distribution([(0.5, 0), (0.5, 1)], SCP)
    assert breakdown.probabilities == pytest.approx([2 / 3, 1 / 3], abs=1e-15)


def test_score_child_prop_four_node_closed_form():
    view = [(0.1, 2), (0.2, 0), (0.8, 1), (0.9, 0)]
    params = ScoreChildPropParams(sharpness=10.0, midpoint_pool_size=3)
    breakdown = selection_distribution([*view], SelectionPolicy(params=params))
    mid = (0.9 + 0.8 + 0.2) / 3
    sig = [1 / (1 + math.exp(-10.0 * (a - mid))) for a, _ in view]
    nov = [1 / (1 + n) for _, n in view]
    weights = [s * h for s, h in zip(sig, nov)]
    total = sum(weights)
    expected = [w / total for w in weights]
    assert breakdown.midpoint == pytest.approx(mid, abs=1e-15)
    np.testing.assert_allclose(breakdown.probabilities, expected, rtol=0, atol=1e-12)


def test_uniform_variant_is_exactly_uniform():
    policy = SelectionPolicy(variant="uniform-random")
    breakdown = selection_distribution([(0.9, 0), (0.1, 3), (0.4, 1)], policy)
    assert np.array_equal(breakdown.probabilities, np.full(3, 1 / 3))


def test_softmax_equal_scores_any_temperature_uniform():
    for temperature in (0.05, 1.0, 7.3):
        policy = SelectionPolicy(variant="softmax", temperature=temperature)
        breakdown = selection_distribution([(0.4, 0), (0.4, 5), (0.4, 1)], policy)
        np.testing.assert_allclose(breakdown.probabilities, np.full(3, 1 / 3), atol=1e-15)


def test_softmax_matches_direct_formula():
    scores = [0.1, 0.5, 0.9]
    policy = SelectionPolicy(variant="softmax", temperature=0.5)
    breakdown = selection_distribution([(s, 0) for s in scores], policy)
    raw = np.exp(np.array(scores) / 0.5)
    np.testing.assert_allclose(breakdown.probabilities, raw / raw.sum(), atol=1e-12)


def test_ucb_strict_max_gets_probability_one():
    policy = SelectionPolicy(variant="ucb", exploration_weight=0.5)
    breakdown = selection_distribution([(0.9, 0), (0.2, 0), (0.3, 5)], policy)
    assert breakdown.probabilities[0] == 1.0
    assert breakdown.probabilities[1] == 0.0


def test_ucb_matches_snippet_formula():
    view = [(0.2, 4), (0.9, 1), (0.5, 0)]
    weight = 0.7
    policy = SelectionPolicy(variant="ucb", exploration_weight=weight)
    breakdown = selection_distribution(view, policy)
    scores = np.array([s for s, _ in view])
    children = np.array([c for _, c in view], dtype=float)
    normalized = (scores - scores.min()) / (scores.max() - scores.min())
    total_children = children.sum()
    bonus = weight * np.sqrt(np.log(total_children + 1) / (children + 1))
    winner = int(np.argmax(normalized + bonus))
    assert breakdown.probabilities[winner] == 1.0


def test_ucb_ties_split_uniformly():
    policy = SelectionPolicy(variant="ucb", exploration_weight=0.0)
    breakdown = selection_distribution([(0.5, 0), (0.5, 0), (0.1, 0)], policy)
    # min-max sends both 0.5 scores to 1.0; no exploration term
    assert breakdown.probabilities == pytest.approx([0.5, 0.5, 0.0])


def test_ucb_all_equal_scores_normalize_to_half():
    policy = SelectionPolicy(variant="ucb", exploration_weight=1.0)
    breakdown = selection_distribution([(0.3, 0), (0.3, 2), (0.3, 5)], policy)
    # equal normalized scores: the fresh node wins on the exploration bonus
    assert breakdown.probabilities[0] == 1.0


def test_ucb_stagnation_boost_changes_pick():
    # variance below 0.01 multiplies exploration by 1.4 for this computation:
    # crafted so the boost flips the argmax from the high scorer to the fresh node
    view = [(0.50, 0), (0.56, 3)]
    base = SelectionPolicy(variant="ucb", exploration_weight=1.45)
    boosted = SelectionPolicy(variant="ucb", exploration_weight=1.45, stagnation_boost=True)
    pick_base = int(np.argmax(selection_distribution(view, base).probabilities))
    pick_boosted = int(np.argmax(selection_distribution(view, boosted).probabilities))
    assert pick_base == 1
    assert pick_boosted == 0


def test_empty_view_errors():
    with pytest.raises(ValueError):
        selection_distribution([], SCP)


# --- invariants & properties -------------------------------------------------------


@st.composite
def archive_views(draw):
    size = draw(st.integers(min_value=1, max_value=12))
    scores = draw(
        st.lists(
            st.floats(min_value=0, max_value=1, allow_nan=False),
            min_size=size, max_size=size,
        )
    )
    children = draw(st.lists(st.integers(min_value=0, max_value=8),
                             min_size=size, max_size=size))
    return list(zip(scores, children))


@given(archive_views())
@settings(max_examples=150, deadline=None)
def test_distribution_sums_to_one_and_non_negative(view):
    for policy in (
        SCP,
        SelectionPolicy(variant="uniform-random"),
        SelectionPolicy(variant="softmax", temperature=0.3),
        SelectionPolicy(variant="ucb", exploration_weight=1.0),
    ):
        breakdown = selection_distribution(view, policy)
        assert abs(float(np.sum(breakdown.probabilities)) - 1.0) <= 1e-12
        assert np.all(breakdown.probabilities >= 0)
        np.testing.assert_array_equal(
            breakdown.weights, breakdown.sigmoid * breakdown.novelty
        )


@given(archive_views(), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_permutation_equivariance(view, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(view))
    permuted = [view[i] for i in perm]
    p_original = selection_distribution(view, SCP).probabilities
    p_permuted = selection_distribution(permuted, SCP).probabilities
    np.testing.assert_allclose(p_permuted, p_original[perm], atol=1e-12)


def test_score_increase_never_decreases_probability():
    rng = np.random.default_rng(7)
    for _ in range(200):
        size = int(rng.integers(2, 10))
        scores = rng.random(size)
        children = rng.integers(0, 6, size)
        view = list(zip(scores.tolist(), children.tolist()))
        # bump the current maximum so the top-m membership cannot change
        target = int(np.argmax(scores))
        boosted = list(view)
        boosted[target] = (min(1.0, scores[target] + 0.05), int(children[target]))
        before = selection_distribution(view, SCP).probabilities[target]
        after = selection_distribution(boosted, SCP).probabilities[target]
        assert after >= before - 1e-12


def test_more_children_never_increases_probability():
    rng = np.random.default_rng(8)
    for _ in range(200):
        size = int(rng.integers(2, 10))
        scores = rng.random(size)
        children = rng.integers(0, 6, size)
        target = int(rng.integers(0, size))
        view = list(zip(scores.tolist(), children.tolist()))
        bumped = list(view)
        bumped[target] = (float(scores[target]), int(children[target]) + 1)
        before = selection_distribution(view, SCP).probabilities[target]
        after = selection_distribution(bumped, SCP).probabilities[target]
        assert after <= before + 1e-12


def test_ucb_pick_invariant_under_constant_shift():
    rng = np.random.default_rng(9)
    policy = SelectionPolicy(variant="ucb", exploration_weight=0.8)
    for _ in range(100):
        size = int(rng.integers(2, 10))
        children = rng.integers(0, 6, size)
        scores = np.round(rng.random(size), 3)
        view = list(zip(scores.tolist(), children.tolist()))
        base = selection_distribution(view, policy)
        # shifting every score leaves min-max normalization untouched
        shifted_scores = np.round(scores + 0.125, 6)
        shifted = list(zip(shifted_scores.tolist(), children.tolist()))
        again = selection_distribution(shifted, policy)
        assert int(np.argmax(base.probabilities)) == int(np.argmax(again.probabilities))


# --- sampling ---------------------------------------------------------------------


def test_sample_from_degenerate_distribution():
    breakdown = selection_distribution([(0.9, 0)], SCP)
    rng = substream(1, "test")
    assert sample_parents(breakdown, 5, rng) == [0, 0, 0, 0, 0]


def test_sample_from_one_hot():
    policy = SelectionPolicy(variant="ucb", exploration_weight=0.0)
    breakdown = selection_distribution([(0.1, 0), (0.9, 0), (0.2, 0)], policy)
    rng = substream(2, "test")
    assert sample_parents(breakdown, 10, rng) == [1] * 10


def test_sample_frequencies_match_two_thirds_one_third():
    breakdown = selection_distribution([(0.5, 0), (0.5, 1)], SCP)
    rng = substream(3, "lln")
    draws = sample_parents(breakdown, 100_000, rng)
    freq0 = draws.count(0) / len(draws)
    assert abs(freq0 - 2 / 3) < 0.01
    assert abs((1 - freq0) - 1 / 3) < 0.01


def test_sample_count_must_be_positive():
    breakdown = selection_distribution([(0.5, 0)], SCP)
    with pytest.raises(ValueError):
        sample_parents(breakdown, 0, substream(1, "x"))


def test_policy_validation():
    with pytest.raises(ValueError):
        SelectionPolicy(variant="nope")
    with pytest.raises(ValueError):
        SelectionPolicy(variant="softmax", temperature=0.0)
    with pytest.raises(ValueError):
        SelectionPolicy(variant="ucb", exploration_weight=-1.0)
    with pytest.raises(ValueError):
        SelectionPolicy(variant="softmax", stagnation_boost=True)
    with pytest.raises(ValueError):
        ScoreChildPropParams(sharpness=0.0)
    with pytest.raises(ValueError):
        ScoreChildPropParams(midpoint_pool_size=0)
