from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asmsel.classifier import (
    classify_utterance,
    evaluate,
    loss_and_grad,
    majority_vote,
    pool_segment,
    pool_segments,
    train_classifier,
)
from asmsel.errors import ContractError
from asmsel.selection import SegmentBatch


def finite_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def batch_from(points, label, uid="u"):
    """One real frame per segment, so pooling returns the point itself."""
    pts = np.atleast_2d(points)
    segs = np.zeros((len(pts), 4, pts.shape[1]))
    segs[:, 0] = pts
    return SegmentBatch(uid, segs, np.ones(len(pts), dtype=np.int64), label)


class TestPooling:
    def test_constant(self):
        np.testing.assert_array_equal(pool_segment(np.full((20, 3), 1.5), np.ones(20, bool)), 1.5)

    def test_ignores_padding(self):
        seg = np.zeros((20, 2))
        seg[:5] = np.arange(10).reshape(5, 2)
        mask = np.arange(20) < 5
        np.testing.assert_array_equal(pool_segment(seg, mask), [4.0, 5.0])

    def test_matches_masked_sum_oracle(self):
        rng = np.random.default_rng(0)
        segs = rng.normal(size=(6, 20, 3))
        lengths = rng.integers(1, 21, 6)
        for k in range(6):
            segs[k, lengths[k]:] = 0.0
        ref = np.array([[sum(segs[k, t, f] for t in range(lengths[k])) / lengths[k] for f in range(3)]
                        for k in range(6)])
        np.testing.assert_allclose(pool_segments(segs, lengths), ref, atol=1e-12)

    def test_all_padding_rejected(self):
        with pytest.raises(ContractError):
            pool_segment(np.zeros((4, 2)), np.zeros(4, bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    C, F, n = rng.integers(2, 5), rng.integers(1, 5), rng.integers(1, 8)
    W, b = rng.normal(size=(C, F)), rng.normal(size=C)
    X, y = rng.normal(size=(n, F)), rng.integers(0, C, n)
    l2 = float(rng.uniform(0, 0.1))
    _, gW, gb = loss_and_grad(W, b, X, y, l2)
    nW = finite_difference(lambda: loss_and_grad(W, b, X, y, l2)[0], W)
    nb = finite_difference(lambda: loss_and_grad(W, b, X, y, l2)[0], b)
    np.testing.assert_allclose(gW, nW, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(gb, nb, rtol=1e-4, atol=1e-8)


class TestTraining:
    def test_separable_two_class(self):
        rng = np.random.default_rng(0)
        batches = [batch_from(rng.normal(-3, 1, (20, 2)), 0, "a"), batch_from(rng.normal(3, 1, (20, 2)), 1, "b")]
        model = train_classifier(batches, 2, epochs=50, seed=0)
        correct = sum(int((model.score_segments(b.segments, b.lengths).argmax(1) == b.label).sum())
                      for b in batches)
        assert correct / 40 >= 0.99
        assert model.loss_history[-1] < model.loss_history[0]

    def test_uninformative_features_learn_priors(self):
        batches = [batch_from(np.ones((30, 2)), 0, "a"), batch_from(np.ones((10, 2)), 1, "b")]
        model = train_classifier(batches, 2, epochs=300, lr=0.5, l2=0.0)
        post = model.score_segments(batches[0].segments[:1], batches[0].lengths[:1])[0]
        np.testing.assert_allclose(post, [0.75, 0.25], atol=0.01)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        batches = [batch_from(rng.normal(size=(15, 3)), c, f"u{c}") for c in range(3)]
        a = train_classifier(batches, 3, seed=5)
        b = train_classifier(batches, 3, seed=5)
        assert a.weights.tobytes() == b.weights.tobytes()

    def test_missing_class(self):
        with pytest.raises(ContractError, match="class 1"):
            train_classifier([batch_from(np.zeros((3, 2)), 0), batch_from(np.ones((3, 2)), 2)], 3)

    def test_unlabeled_batch(self):
        with pytest.raises(ContractError):
            train_classifier([batch_from(np.zeros((3, 2)), None)], 2)


class TestVoting:
    def test_majority(self):
        post = np.eye(8)[[2, 2, 7]]
        label, seg_labels = majority_vote(post)
        assert label == 2
        np.testing.assert_array_equal(seg_labels, [2, 2, 7])

    def test_tie_goes_to_posterior_mass(self):
        # two votes each for classes 1 and 3; summed posteriors 1.2 vs 1.5
        post = np.array([[0.0, 0.60, 0.0, 0.40],
                         [0.0, 0.60, 0.0, 0.40],
                         [0.33, 0.0, 0.32, 0.35],
                         [0.33, 0.0, 0.32, 0.35]])
        assert post[:, 1].sum() == pytest.approx(1.2) and post[:, 3].sum() == pytest.approx(1.5)
        assert majority_vote(post)[0] == 3

    def test_full_tie_goes_to_lower_id(self):
        assert majority_vote(np.array([[0.0, 0.5, 0.5], [0.0, 0.5, 0.5]]))[0] == 1

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=50), st.randoms(use_true_random=False))
    def test_vote_matches_counter_and_ignores_order(self, labels, rnd):
        post = np.full((len(labels), 5), 0.01)
        post[np.arange(len(labels)), labels] = 0.96
        counts = Counter(labels)
        top = max(counts.values())
        expected = min(c for c, n in counts.items() if n == top)
        assert majority_vote(post)[0] == expected
        perm = list(range(len(labels)))
        rnd.shuffle(perm)
        assert majority_vote(post[perm])[0] == expected

    def test_empty(self):
        with pytest.raises(ContractError):
            majority_vote(np.zeros((0, 3)))
        with pytest.raises(ContractError):
            classify_utterance(SegmentBatch("u", np.zeros((0, 4, 2)), np.zeros(0, int)), ByValue(2))


class ByValue:
    """Predicts the class id stored in the first feature of the first frame."""

    def __init__(self, n_classes):
        self.n_classes = n_classes
        self.classes = [f"c{i}" for i in range(n_classes)]

    def score_segments(self, segments, lengths):
        return np.eye(self.n_classes)[segments[:, 0, 0].astype(int)]


class TestEvaluate:
    def batches(self, labels, preds=None):
        preds = labels if preds is None else preds
        return [batch_from([[p, 0.0]], y, f"u{i}") for i, (y, p) in enumerate(zip(labels, preds))]

    def test_perfect(self):
        rep = evaluate(self.batches([0, 1, 2, 1]), ByValue(3))
        assert rep.accuracy == 1.0
        np.testing.assert_array_equal(rep.confusion, np.diag([1, 2, 1]))

    def test_constant_predictor_is_chance(self):
        labels = [0, 1, 2, 3] * 5
        rep = evaluate(self.batches(labels, [2] * 20), ByValue(4))
        assert rep.accuracy == pytest.approx(0.25)
        np.testing.assert_array_equal(rep.confusion.sum(axis=1), [5, 5, 5, 5])
        np.testing.assert_array_equal(rep.confusion[:, 2], [5, 5, 5, 5])

    def test_hand_counted_confusion(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 3, 30).tolist()
        preds = rng.integers(0, 3, 30).tolist()
        rep = evaluate(self.batches(labels, preds), ByValue(3))
        manual = np.zeros((3, 3), int)
        for t, p in zip(labels, preds):
            manual[t, p] += 1
        np.testing.assert_array_equal(rep.confusion, manual)
        assert rep.accuracy == pytest.approx(np.trace(manual) / 30)
        assert rep.predictions == preds
        assert "ALL,30," in rep.to_csv()
        assert "overall accuracy" in rep.to_text("t")

    def test_label_errors(self):
        with pytest.raises(ContractError):
            evaluate(self.batches([0, None], [0, 0]), ByValue(2))
        with pytest.raises(ContractError):
            evaluate(self.batches([0, 5], [0, 0]), ByValue(2))
