import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avlt.errors import InvalidArgumentError
from avlt.metrics import (
    CampaignSummary, MatchConfig, align_unigrams, caption_match, count_chunks, empirical_cdf,
    exact_match, meteor, normalize_caption, rmse, rmse_grad, spearman, success_rate,
    topk_caption_accuracy,
)
from avlt.targets.captions import CAPTION_VOCAB

from oracles import brute_force_alignment, meteor_reference, spearman_reference

WORDS = st.sampled_from(["a", "red", "blue", "shape", "and", "shapes"])
CAPTION = st.lists(WORDS, min_size=1, max_size=6)


class _R:
    def __init__(self, success):
        self.success = success


def test_rmse_hand_values():
    z = np.zeros(4)
    assert rmse(z, z) == 0.0
    assert abs(rmse(z, np.full(4, 2.0)) - 2.0) < 1e-12
    assert abs(rmse(z, np.array([3.0, 4.0, 0.0, 0.0])) - 2.5) < 1e-12


def test_rmse_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        rmse(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(0, 255, size=(3, 48))
    assert rmse(a, b) == pytest.approx(rmse(b, a))
    assert rmse(a, b) >= 0
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


def test_rmse_grad_matches_difference():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(0, 255, 12)
    x = x0 + rng.normal(size=12)
    g = rmse_grad(x, x0)
    for i in range(12):
        e = np.zeros(12)
        e[i] = 1e-5
        assert g[i] == pytest.approx((rmse(x + e, x0) - rmse(x - e, x0)) / 2e-5, rel=1e-5)
    np.testing.assert_array_equal(rmse_grad(x0, x0), 0.0)


def test_success_rate():
    assert success_rate([_R(True)] * 3 + [_R(False)]) == 0.75
    assert success_rate([_R(True)] * 2) == 1.0
    assert success_rate([_R(False)]) == 0.0
    with pytest.raises(InvalidArgumentError):
        success_rate([])


def test_empirical_cdf_examples():
    pts = empirical_cdf([0.2, 0.5, 0.9])
    assert [p[0] for p in pts] == [0.2, 0.5, 0.9]
    np.testing.assert_allclose([p[1] for p in pts], [1 / 3, 2 / 3, 1.0])
    assert empirical_cdf([0.5, 0.5]) == [(0.5, 1.0)]
    with pytest.raises(InvalidArgumentError):
        empirical_cdf([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_empirical_cdf_monotone(values):
    pts = empirical_cdf(values)
    xs, fs = zip(*pts)
    assert list(xs) == sorted(set(xs))
    assert all(f1 <= f2 for f1, f2 in zip(fs, fs[1:]))
    assert fs[-1] == 1.0


def test_campaign_summary_consistency():
    recs = [{"success": s, "adversarial_probability": p} for s, p in [(True, .9), (False, .1), (True, .6)]]
    s = CampaignSummary.from_records(recs)
    assert s.success_rate == pytest.approx(2 / 3)
    # fraction of probabilities coming from successful runs matches the per-record flags
    assert sum(r["success"] for r in s.records) / len(s.records) == s.success_rate
    assert s.cdf[-1][1] == 1.0


def test_exact_match_and_normalization():
    assert exact_match("A window.", "a window")
    assert not exact_match("a window", "a door")
    assert normalize_caption("  Red   shapes. ") == ["red", "shapes"]


def test_meteor_hand_values():
    assert meteor("red blue", "green yellow") == 0.0
    assert meteor("a b c d e", "a b c d e") == pytest.approx(1 - 0.5 * (1 / 5) ** 3)
    assert meteor("a b c d e", "a b c d e") == pytest.approx(0.996)
    # m=2, P=1, R=0.4, F=0.4/0.94, one chunk
    want = (0.4 / 0.94) * (1 - 0.5 * (1 / 2) ** 3)
    assert meteor("a window", "a window on a building") == pytest.approx(want, abs=1e-12)
    assert meteor("a window", "a window on a building") == pytest.approx(0.39894, abs=1e-5)


def test_meteor_rejects_empty():
    with pytest.raises(InvalidArgumentError):
        meteor("", "a")
    with pytest.raises(InvalidArgumentError):
        meteor("a", "  .")


def test_count_chunks():
    assert count_chunks([]) == 0
    assert count_chunks([(0, 0), (1, 1), (2, 2)]) == 1
    assert count_chunks([(0, 1), (1, 0)]) == 2


@settings(max_examples=300, deadline=None)
@given(CAPTION, CAPTION)
def test_alignment_matches_brute_force(cand, ref):
    ali = align_unigrams(cand, ref)
    assert all(cand[c] == ref[r] for c, r in ali)
    assert len({r for _, r in ali}) == len(ali)
    assert (len(ali), count_chunks(ali)) == brute_force_alignment(cand, ref)


@settings(max_examples=100, deadline=None)
@given(CAPTION, CAPTION)
def test_meteor_matches_reference_formula(cand, ref):
    assert meteor(" ".join(cand), " ".join(ref)) == pytest.approx(meteor_reference(cand, ref), abs=1e-12)


@given(st.lists(st.sampled_from(CAPTION_VOCAB[1:]), min_size=2, max_size=6))
def test_meteor_self_score(words):
    # a caption against itself aligns in one chunk: score = 1 - gamma / n^3
    text = " ".join(words)
    n = len(words)
    assert meteor(text, text) == pytest.approx(1 - 0.5 / n**3, abs=1e-12)
    if n >= 4:
        assert meteor(text, text) > 0.99


@settings(max_examples=100, deadline=None)
@given(CAPTION, CAPTION, WORDS)
def test_meteor_appending_shared_token_never_hurts_recall(cand, ref, w):
    # appending the same token to both sides adds a match
    before = len(align_unigrams(cand, ref))
    after = len(align_unigrams(cand + [w], ref + [w]))
    assert after == before + 1


def test_topk_accuracy_examples():
    exact = MatchConfig("exact")
    preds = ["a red shape", "a red shape", "a red shape", "empty gray region", "a blue shape"]
    acc, failed = topk_caption_accuracy("a red shape", preds, 5, exact)
    assert acc == pytest.approx(0.6) and not failed
    acc, _ = topk_caption_accuracy("a b c d e", ["a b c d e"] * 5, 5, MatchConfig("meteor", 0.15))
    assert acc == 1.0
    _, failed = topk_caption_accuracy("red shapes", ["empty gray region"] * 5, 1, exact)
    assert failed
    with pytest.raises(InvalidArgumentError):
        topk_caption_accuracy("a", ["a"], 2, exact)
    with pytest.raises(InvalidArgumentError):
        topk_caption_accuracy("a", ["a"], 0, exact)


@settings(max_examples=100, deadline=None)
@given(CAPTION, st.lists(CAPTION, min_size=5, max_size=5), st.integers(1, 5))
def test_accuracy_bounds_and_exact_implies_meteor(target, preds, k):
    t, ps = " ".join(target), [" ".join(p) for p in preds]
    a_exact, _ = topk_caption_accuracy(t, ps, k, MatchConfig("exact"))
    a_met, _ = topk_caption_accuracy(t, ps, k, MatchConfig("meteor", 0.15))
    assert 0 <= a_exact <= a_met <= 1


def test_caption_match_modes():
    assert caption_match("a red shape", "a red shape", MatchConfig("meteor", 0.25))
    assert not caption_match("a red shape", "", MatchConfig("meteor", 0.15))
    with pytest.raises(InvalidArgumentError):
        MatchConfig("bleu")
    with pytest.raises(InvalidArgumentError):
        MatchConfig("meteor", omega=1.5)


def test_spearman_examples_and_ties():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    a, b = [0, 0, 0, 1, 2], [0.1, 0.3, 0.2, 0.5, 0.4]
    assert spearman(a, b) == pytest.approx(spearman_reference(a, b))
    with pytest.raises(InvalidArgumentError):
        spearman([1, 2], [1, 2])
