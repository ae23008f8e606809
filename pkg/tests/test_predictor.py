import math

import numpy as np
import pytest

from helpers import smooth_tiny_model
from mcrnet import tensor as T
from mcrnet.predictor import (PROB_EPS, ans_loss, answerability_score, best_span, decode_answer, joint_loss,
                              span_distributions, span_loss, span_support)
from mcrnet.tensor import Tensor


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# answerability score


def test_zero_classifier_scores_half():
    rng = T.make_rng(0)
    s, e = t(rng.normal(size=(3, 4))), t(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(answerability_score(s, e, t(np.zeros(8))).data, 0.5)


def test_negated_classifier_gives_complement():
    rng = T.make_rng(1)
    s, e, w = t(rng.normal(size=(5, 3))), t(rng.normal(size=(5, 3))), rng.normal(size=6)
    a = answerability_score(s, e, t(w)).data
    b = answerability_score(s, e, t(-w)).data
    np.testing.assert_allclose(a + b, 1.0, rtol=0, atol=1e-15)


def test_score_hand_value():
    # [1, 0, 0, 2] . [0.5, -0.5, 0.25, 1] = 2.5
    out = answerability_score(t([[1.0, 0.0]]), t([[0.0, 2.0]]), t([0.5, -0.5, 0.25, 1.0]))
    assert out.data[0] == pytest.approx(0.9241418199787566, abs=1e-15)


# ---------------------------------------------------------------------------
# ans loss


def test_ans_loss_at_half_is_ln2():
    assert float(ans_loss(t([0.5, 0.5]), [0, 1]).data) == pytest.approx(math.log(2), abs=1e-15)


def test_ans_loss_batch_hand_value():
    # -(ln 0.9 + ln 0.8) / 2
    out = ans_loss(t([0.9, 0.2]), [1, 0])
    assert float(out.data) == pytest.approx(0.164252033486018, abs=1e-15)


def test_ans_loss_clamps_saturated_scores():
    out = ans_loss(t([1.0, 0.0]), [0, 1])
    assert np.isfinite(out.data)
    assert float(out.data) == pytest.approx(-math.log(PROB_EPS), rel=1e-6)


def test_ans_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        ans_loss(t([0.5]), [2])


# ---------------------------------------------------------------------------
# span distributions and span loss


def test_span_support_layout():
    sup = span_support(np.ones((2, 8), bool), [4, 3], [7, 4])
    assert sup[0].tolist() == [True, False, False, False, True, True, True, False]
    # a single-token passage leaves the sentinel and that token
    assert sup[1].sum() == 2 and sup[1, 0] and sup[1, 3]


def test_zero_start_weights_give_uniform_support():
    fused = t(T.make_rng(2).normal(size=(1, 8, 3)))
    sup = span_support(np.ones((1, 8), bool), [4], [7])
    gamma, eta = span_distributions(fused, sup, t(np.zeros(3)), t(np.ones(3)))
    np.testing.assert_allclose(gamma.data[0][sup[0]], 0.25, atol=1e-15)
    assert np.all(gamma.data[0][~sup[0]] == 0.0) and np.all(eta.data[0][~sup[0]] == 0.0)
    np.testing.assert_allclose(eta.data.sum(), 1.0, atol=1e-12)


def test_span_loss_one_hot_is_zero():
    g = t([[0.0, 1.0, 0.0]])
    e = t([[0.0, 0.0, 1.0]])
    assert float(span_loss(g, e, [1], [2]).data) == 0.0


def test_span_loss_uniform_is_two_log_k():
    k = 5
    u = t(np.full((1, k), 1 / k))
    assert float(span_loss(u, u, [2], [3]).data) == pytest.approx(2 * math.log(k), abs=1e-14)


def test_span_loss_mixed_batch():
    g = t([[0.5, 0.25, 0.25], [0.1, 0.6, 0.3]])
    e = t([[0.2, 0.2, 0.6], [0.7, 0.1, 0.2]])
    # -(ln .25 + ln .6 + ln .1 + ln .7) / 2
    assert float(span_loss(g, e, [1, 0], [2, 0]).data) == pytest.approx(2.2781900109093294, abs=1e-14)


def test_span_loss_rejects_gold_outside_support():
    sup = np.array([[True, False, True]])
    u = t([[0.5, 0.0, 0.5]])
    with pytest.raises(ValueError, match="outside"):
        span_loss(u, u, [1], [2], sup)


def test_joint_loss_weights():
    out = joint_loss(t(2.0), t(1.0))
    assert float(out.joint.data) == pytest.approx(1.7, abs=1e-15)
    rng = T.make_rng(4)
    for _ in range(10):
        a, b, l1, l2 = rng.uniform(0, 5, 4)
        out = joint_loss(t(a), t(b), l1, l2)
        assert float(out.joint.data) == l1 * a + l2 * b


def test_joint_loss_rejects_negative_weight():
    with pytest.raises(ValueError):
        joint_loss(t(1.0), t(1.0), -0.1, 0.3)


# ---------------------------------------------------------------------------
# decoding


def brute_force_span(gamma, eta, ps, pe, max_len):
    best, arg = -1.0, None
    for s in range(ps, pe):
        for e in range(s, min(pe, s + max_len)):
            if gamma[s] * eta[e] > best:
                best, arg = gamma[s] * eta[e], (s, e)
    return arg


def test_best_span_matches_brute_force():
    rng = T.make_rng(5)
    for _ in range(200):
        L = int(rng.integers(3, 33))
        ps = int(rng.integers(1, L - 1))
        pe = int(rng.integers(ps + 1, L + 1))
        gamma, eta = rng.dirichlet(np.ones(L)), rng.dirichlet(np.ones(L))
        if rng.random() < 0.2:  # exercise ties
            gamma = np.round(gamma, 1)
            eta = np.round(eta, 1)
        max_len = int(rng.integers(1, 8))
        assert best_span(gamma, eta, ps, pe, max_len) == brute_force_span(gamma, eta, ps, pe, max_len)


def test_decode_threshold_and_tie_break():
    gamma = np.array([0.0, 0.5, 0.5, 0.0])
    eta = np.array([0.0, 0.5, 0.5, 0.0])
    pred = decode_answer(0.2, gamma, eta, threshold=0.3, max_answer_len=5, passage_region=(1, 3))
    assert pred.answerable and pred.span == (1, 1)
    pred = decode_answer(0.31, gamma, eta, threshold=0.3, max_answer_len=5, passage_region=(1, 3))
    assert not pred.answerable and pred.span is None and pred.best_span == (1, 1)


def test_decode_length_cap():
    # unconstrained best is (1, 3) at 0.81; with the cap (2, 3) at 0.18 beats (1, 2) at 0.09
    gamma = np.array([0.0, 0.9, 0.2, 0.0])
    eta = np.array([0.0, 0.0, 0.1, 0.9])
    pred = decode_answer(0.0, gamma, eta, 0.3, max_answer_len=2, passage_region=(1, 4))
    assert pred.span == (2, 3)


def test_threshold_monotone():
    rng = T.make_rng(6)
    scores = rng.random(100)
    g = e = np.full(5, 0.2)
    counts = [sum(decode_answer(s, g, e, th, 3, (1, 4)).answerable for s in scores)
              for th in np.linspace(0, 1, 11)]
    assert counts == sorted(counts)
    assert counts[-1] == 100


def test_empty_passage_is_degenerate():
    pred = decode_answer(0.0, np.ones(3) / 3, np.ones(3) / 3, 0.3, 5, (2, 2))
    assert pred.degenerate and not pred.answerable


# ---------------------------------------------------------------------------
# full graph

# the clue half of the fusion adds one vector to every position, and the end
# logit bias one scalar to every logit; both are cancelled by a softmax
STRUCTURAL_ZEROS = ("relation.block.logit_b", "relation.fuse_s", "relation.fuse_e")


def _zero_name(name):
    return name in STRUCTURAL_ZEROS


def test_full_pipeline_grad_check(tiny_vocab, tiny_batch):
    model = smooth_tiny_model(len(tiny_vocab), tiny_batch)
    named = model.named_parameters()

    def loss():
        return model.loss(model.forward(tiny_batch), tiny_batch).joint

    checked = {n: p for n, p in named.items() if not _zero_name(n)}
    report = T.grad_check(loss, list(checked.values()), names=list(checked), eps=1e-5, tol=1e-4)
    assert report.max_rel_error <= 1e-4, report.worst()

    zeros = {n: p for n, p in named.items() if _zero_name(n)}
    assert len(zeros) == 3
    T.backward(loss())
    for n, p in zeros.items():
        assert np.max(np.abs(p.grad)) <= 1e-12, n
    T.zero_grad(model.parameters())
    with T.no_grad():
        for n, p in zeros.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-5
                up = float(loss().data)
                flat[i] = orig - 1e-5
                down = float(loss().data)
                flat[i] = orig
                assert abs(up - down) / 2e-5 <= 1e-9, (n, i)


def test_fixture_is_not_saturated(tiny_vocab, tiny_batch):
    model = smooth_tiny_model(len(tiny_vocab), tiny_batch)
    out = model.forward(tiny_batch)
    rows = np.arange(3)
    g = out.gamma.data[rows, tiny_batch.starts]
    assert np.all(g > 1e-3) and np.all(g < 0.9)
    assert np.all((out.score.data > 1e-3) & (out.score.data < 1 - 1e-3))
