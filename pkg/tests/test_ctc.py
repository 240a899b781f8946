"""CTC forward-backward against brute-force path enumeration, gradient vs
finite differences, feasibility errors, and best-path decoding."""

import math

import numpy as np
import pytest

from pagerec import ctc
from pagerec.autodiff import Tensor, backward, log_softmax
from pagerec.ctc import (InfeasibleLength, best_path_decode, collapse_path,
                         ctc_brute_force, ctc_loss, extend_with_blanks,
                         min_ctc_length)

BLANK = 2  # tests use symbols {0: a, 1: b} + blank 2 unless stated


def logp(rows):
    rows = np.asarray(rows, dtype=np.float64)
    assert np.allclose(rows.sum(axis=1), 1.0)
    with np.errstate(divide="ignore"):  # exact zeros are intentional here
        return Tensor(np.log(rows))


def test_single_frame_single_symbol():
    lp = logp([[0.6, 0.3, 0.1]])
    loss = ctc_loss(lp, [0], blank=BLANK)
    assert loss.data.shape == ()
    np.testing.assert_allclose(loss.data, -math.log(0.6), rtol=1e-12)


def test_two_frames_three_admissible_paths():
    # per-frame p uniform over {a, blank}: P = p(aa)+p(a.)+p(.a) = 3/4
    lp = logp([[0.5, 0.0, 0.5], [0.5, 0.0, 0.5]])
    loss = ctc_loss(lp, [0], blank=BLANK)
    np.testing.assert_allclose(loss.data, -math.log(0.75), rtol=1e-12)


def test_repeat_needs_separating_blank():
    lp = logp([[0.5, 0.0, 0.5], [0.5, 0.0, 0.5]])
    with pytest.raises(InfeasibleLength) as ei:
        ctc_loss(lp, [0, 0], blank=BLANK)
    assert ei.value.t_len == 2
    assert ei.value.required == 3


def test_min_ctc_length_counts_adjacent_repeats():
    assert min_ctc_length([0]) == 1
    assert min_ctc_length([0, 0]) == 3
    assert min_ctc_length([0, 1, 0]) == 3
    assert min_ctc_length([0, 0, 0]) == 5
    assert min_ctc_length([]) == 0


def test_extend_with_blanks():
    np.testing.assert_array_equal(extend_with_blanks([0, 1], blank=2),
                                  [2, 0, 2, 1, 2])
    np.testing.assert_array_equal(extend_with_blanks([], blank=2), [2])


def test_target_containing_blank_rejected():
    lp = logp([[0.5, 0.0, 0.5]])
    with pytest.raises(ValueError, match="blank"):
        ctc_loss(lp, [BLANK], blank=BLANK)


def test_target_id_out_of_range_rejected():
    lp = logp([[0.5, 0.0, 0.5]])
    with pytest.raises(ValueError, match="outside"):
        ctc_loss(lp, [7], blank=BLANK)


def test_brute_force_empty_target_all_blank_product():
    rows = np.array([[0.2, 0.1, 0.7], [0.3, 0.3, 0.4], [0.1, 0.1, 0.8]])
    got = ctc_brute_force(logp(rows), [], blank=BLANK)
    np.testing.assert_allclose(math.exp(-got), 0.7 * 0.4 * 0.8, rtol=1e-12)


def test_brute_force_target_longer_than_frames_is_impossible():
    assert ctc_brute_force(logp([[0.5, 0.3, 0.2]]), [0, 1], blank=BLANK) == math.inf


def test_brute_force_budget_refused():
    lp = Tensor(np.full((30, 4), math.log(0.25)))
    with pytest.raises(ValueError, match="budget"):
        ctc_brute_force(lp, [0], blank=3)


def test_loss_matches_oracle_on_random_cases():
    rng = np.random.default_rng(0)
    targets = [[0], [1], [0, 1], [1, 0], [0, 0], [0, 1, 0], [0, 0, 1]]
    for target in targets:
        for t_len in range(min_ctc_length(target), 7):
            for _ in range(5):
                rows = rng.dirichlet(np.ones(3), size=t_len)
                lp = logp(rows)
                loss = ctc_loss(lp, target, blank=BLANK)
                oracle = ctc_brute_force(lp, target, blank=BLANK)
                assert abs(math.exp(-float(loss.data)) - math.exp(-oracle)) < 1e-9


def test_empty_target_loss_matches_all_blank_path():
    rows = np.array([[0.2, 0.1, 0.7], [0.3, 0.3, 0.4]])
    loss = ctc_loss(logp(rows), [], blank=BLANK)
    np.testing.assert_allclose(math.exp(-float(loss.data)), 0.7 * 0.4, rtol=1e-12)


def test_gradient_matches_finite_differences_through_softmax():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    target = [0, 1, 0]

    def loss_value():
        return float(ctc_loss(log_softmax(logits), target, blank=BLANK).data)

    backward(ctc_loss(log_softmax(logits), target, blank=BLANK))
    analytic = logits.grad.copy()
    h = 1e-6
    flat = logits.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_value()
        flat[i] = orig - h
        dn = loss_value()
        flat[i] = orig
        fd = (up - dn) / (2 * h)
        denom = max(abs(fd), abs(analytic.reshape(-1)[i]), 1e-8)
        assert abs(analytic.reshape(-1)[i] - fd) / denom < 1e-4


def test_gradient_rows_sum_to_zero_through_softmax():
    # d loss / d logits must sum to zero per frame when probabilities are
    # produced by a softmax (shift invariance of the loss)
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    backward(ctc_loss(log_softmax(logits), [0, 1], blank=BLANK))
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-12)


def test_appending_frames_never_makes_target_impossible():
    # monotonicity sanity bound: P_{T+1} >= P_T * min_t p(blank) because any
    # admissible T-path extends by one trailing blank
    rng = np.random.default_rng(3)
    for _ in range(20):
        t_len = int(rng.integers(2, 6))
        rows = rng.dirichlet(np.ones(3), size=t_len + 1)
        target = [0, 1] if t_len >= 2 else [0]
        p_short = math.exp(-ctc_brute_force(logp(rows[:t_len]), target, BLANK))
        p_long = math.exp(-ctc_brute_force(logp(rows), target, BLANK))
        assert p_long >= p_short * rows[t_len, BLANK] - 1e-12


def test_collapse_path_rules():
    assert collapse_path([0, 0, 2, 1, 1], blank=2) == (0, 1)
    assert collapse_path([0, 2, 0], blank=2) == (0, 0)
    assert collapse_path([2, 2, 2], blank=2) == ()
    assert collapse_path([], blank=2) == ()


def test_best_path_decode_examples():
    # frames argmax to [a, a, blank, b, b] -> "ab"
    rows = [[0.8, 0.1, 0.1],
            [0.7, 0.2, 0.1],
            [0.1, 0.2, 0.7],
            [0.1, 0.8, 0.1],
            [0.2, 0.7, 0.1]]
    assert best_path_decode(logp(rows), blank=BLANK) == [0, 1]
    rows = [[0.8, 0.1, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]]
    assert best_path_decode(logp(rows), blank=BLANK) == [0, 0]
    rows = [[0.1, 0.1, 0.8], [0.2, 0.1, 0.7]]
    assert best_path_decode(logp(rows), blank=BLANK) == []


def test_best_path_ties_break_toward_lowest_id():
    lp = Tensor(np.log(np.full((1, 3), 1.0 / 3.0)))
    assert best_path_decode(lp, blank=BLANK) == [0]


def test_decode_output_never_contains_blank_or_unseparated_repeat():
    rng = np.random.default_rng(4)
    for _ in range(50):
        rows = rng.dirichlet(np.ones(4), size=int(rng.integers(1, 9)))
        decoded = best_path_decode(Tensor(np.log(rows)), blank=3)
        assert 3 not in decoded
        frames = list(np.argmax(rows, axis=1))
        # adjacent equal ids in the decode imply a separating blank in frames
        for a, b in zip(decoded, decoded[1:]):
            if a == b:
                assert 3 in frames


def test_underflow_reported_not_silent():
    lp = Tensor(np.full((4, 3), ctc.LOG_ZERO))
    with pytest.raises(FloatingPointError, match="underflow"):
        ctc_loss(lp, [0], blank=BLANK)
