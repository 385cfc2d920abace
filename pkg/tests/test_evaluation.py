import math

import numpy as np
import pytest

from mdvc.errors import DataError
from mdvc.evaluation import (
    DEFAULT_TIOU_THRESHOLDS,
    MAX_PREDICTIONS_PER_VIDEO,
    bleu,
    dense_caption_eval,
    tiou,
)


# ------------------------------------------------------------------ tiou

def test_tiou_values():
    assert tiou((0.0, 10.0), (0.0, 10.0)) == 1.0
    assert tiou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert tiou((0.0, 10.0), (5.0, 15.0)) == pytest.approx(0.3333, abs=1e-4)
    assert tiou((0.0, 2.0), (3.0, 4.0)) == 0.0
    assert tiou((3.0, 4.0), (0.0, 2.0)) == 0.0


def test_tiou_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a0, b0 = rng.uniform(0, 10, size=2)
        a = (a0, a0 + rng.uniform(0.1, 5))
        b = (b0, b0 + rng.uniform(0.1, 5))
        assert tiou(a, b) == pytest.approx(tiou(b, a), abs=1e-12)
        assert 0.0 <= tiou(a, b) <= 1.0


def test_tiou_rejects_degenerate_intervals():
    with pytest.raises(DataError):
        tiou((5.0, 5.0), (0.0, 1.0))
    with pytest.raises(DataError):
        tiou((0.0, 1.0), (2.0, 1.0))


# ------------------------------------------------------------------ bleu

def test_bleu_identical_is_one():
    cand = "a man runs fast .".split()
    assert bleu([cand], [[list(cand)]]) == pytest.approx(1.0, abs=1e-12)


def test_bleu_clipped_unigram_precision():
    cand = "the the the the".split()
    ref = "the cat".split()
    # Four candidate "the", clipped at the reference count of one; the
    # candidate is longer than the reference so no brevity penalty.
    assert bleu([cand], [[ref]], max_n=1) == pytest.approx(0.25, abs=1e-12)


def test_bleu_brevity_penalty():
    cand = list("abc")
    ref = list("abcdef")
    score = bleu([cand], [[ref]], max_n=1)
    assert score == pytest.approx(math.exp(1.0 - 6.0 / 3.0), abs=1e-12)
    assert score == pytest.approx(0.36788, abs=1e-5)


def test_bleu_no_penalty_when_candidate_is_longer():
    cand = list("aaaa")
    ref = list("aa")
    assert bleu([cand], [[ref]], max_n=1) == pytest.approx(0.5, abs=1e-12)


def test_bleu_zero_when_any_order_has_no_match():
    assert bleu([list("ab")], [[list("ac")]], max_n=2) == 0.0
    # A single-token candidate yields no bigrams at all.
    assert bleu([list("a")], [[list("a")]], max_n=2) == 0.0


def test_bleu_pools_counts_over_the_corpus():
    candidates = [list("aa"), list("b")]
    references = [[list("aa")], [list("c")]]
    # Pooled: clipped 2 of 3 unigrams; lengths 3 vs 3, no penalty.
    assert bleu(candidates, references, max_n=1) == pytest.approx(2.0 / 3.0,
                                                                  abs=1e-12)


def test_bleu_reference_length_tie_prefers_shorter():
    cand = list("xxx")
    refs = [list("xx"), list("xxxx")]
    # Both references are one token away; the shorter one (2) wins,
    # so the candidate counts as long enough and no penalty applies.
    assert bleu([cand], [refs], max_n=1) == pytest.approx(1.0, abs=1e-12)


def test_bleu_picks_closest_reference_length():
    cand = list("xxxx")
    refs = [list("xx"), list("xxxxx")]
    expected = math.exp(1.0 - 5.0 / 4.0)
    assert bleu([cand], [refs], max_n=1) == pytest.approx(expected, abs=1e-12)


def test_bleu_multiple_references_clip_at_max_count():
    cand = "a a b".split()
    refs = [["a", "c"], ["a", "a"]]
    # "a" appears twice in one reference, so both candidate "a" count.
    assert bleu([cand], [refs], max_n=1) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_bleu_input_validation():
    with pytest.raises(DataError):
        bleu([], [])
    with pytest.raises(DataError):
        bleu([list("a")], [])
    with pytest.raises(DataError):
        bleu([list("a")], [[]])
    with pytest.raises(DataError):
        bleu([list("a")], [[list("a")]], max_n=0)


# ------------------------------------------------------- dense protocol

def _video(interval, sentence):
    return (tuple(interval), sentence.split())


def test_dense_eval_perfect_predictions_score_one():
    preds = {"v1": [_video((0, 10), "a man runs fast"),
                    _video((12, 20), "a dog barks loudly")]}
    refs = [{"v1": [_video((0, 10), "a man runs fast"),
                    _video((12, 20), "a dog barks loudly")]}]
    for n in (1, 4):
        report = dense_caption_eval(preds, refs, max_n=n)
        assert report.final == pytest.approx(1.0, abs=1e-12)
        for score in report.per_threshold.values():
            assert score == pytest.approx(1.0, abs=1e-12)
    assert report.metric == "bleu@4"
    assert report.thresholds == DEFAULT_TIOU_THRESHOLDS


def test_dense_eval_gates_by_strict_overlap():
    preds = {"v1": [_video((0, 6), "a man runs fast")]}
    refs = [{"v1": [_video((0, 10), "a man runs fast")]}]  # tIoU = 0.6
    report = dense_caption_eval(preds, refs, max_n=1)
    assert report.per_threshold[0.3] == pytest.approx(1.0, abs=1e-12)
    assert report.per_threshold[0.5] == pytest.approx(1.0, abs=1e-12)
    assert report.per_threshold[0.7] == 0.0
    assert report.per_threshold[0.9] == 0.0
    assert report.final == pytest.approx(0.5, abs=1e-12)


def test_dense_eval_boundary_overlap_scores_zero():
    preds = {"v1": [_video((0, 5), "a man runs fast")]}
    refs = [{"v1": [_video((0, 10), "a man runs fast")]}]  # tIoU = 0.5 exactly
    report = dense_caption_eval(preds, refs, thresholds=(0.5,), max_n=1)
    assert report.final == 0.0


def test_dense_eval_zero_prediction_video_scores_zero():
    preds = {"v1": [_video((0, 10), "a man runs")]}
    refs = [{"v1": [_video((0, 10), "a man runs")],
             "v2": [_video((0, 10), "a dog barks")]}]
    report = dense_caption_eval(preds, refs, thresholds=(0.3,), max_n=1)
    assert report.per_threshold[0.3] == pytest.approx(0.5, abs=1e-12)
    assert report.per_video["v2"][0.3] == 0.0


def test_dense_eval_counts_only_first_hundred_predictions():
    good = _video((0, 10), "a man runs")
    junk = _video((900, 901), "x")
    preds = {"v1": [good] * MAX_PREDICTIONS_PER_VIDEO + [junk] * 50}
    refs = [{"v1": [good]}]
    report = dense_caption_eval(preds, refs, thresholds=(0.3,), max_n=1)
    assert report.final == pytest.approx(1.0, abs=1e-12)


def test_dense_eval_averages_across_reference_sets():
    preds = {"v1": [_video((0, 10), "a man runs")]}
    agree = {"v1": [_video((0, 10), "a man runs")]}
    disagree = {"v1": [_video((0, 10), "something else entirely happens")]}
    report = dense_caption_eval(preds, [agree, disagree], thresholds=(0.3,),
                                max_n=1)
    assert report.final == pytest.approx(0.5, abs=1e-12)


def test_dense_eval_prediction_order_does_not_matter():
    rng = np.random.default_rng(1)
    preds_list = [_video((0, 10), "a man runs"),
                  _video((5, 9), "a dog barks"),
                  _video((50, 60), "rain falls")]
    refs = [{"v1": [_video((0, 10), "a man runs"),
                    _video((48, 62), "rain falls hard")]}]
    base = dense_caption_eval({"v1": preds_list}, refs, max_n=1).final
    for _ in range(5):
        shuffled = list(preds_list)
        rng.shuffle(shuffled)
        got = dense_caption_eval({"v1": shuffled}, refs, max_n=1).final
        assert got == pytest.approx(base, abs=1e-12)


def test_dense_eval_zero_overlap_prediction_never_helps():
    preds = {"v1": [_video((0, 10), "a man runs")]}
    refs = [{"v1": [_video((0, 10), "a man runs")]}]
    base = dense_caption_eval(preds, refs, max_n=1)
    withjunk = {"v1": preds["v1"] + [_video((500, 501), "junk")]}
    worse = dense_caption_eval(withjunk, refs, max_n=1)
    for t in base.per_threshold:
        assert worse.per_threshold[t] <= base.per_threshold[t] + 1e-12


def test_dense_eval_threshold_monotonicity_random_fixtures():
    rng = np.random.default_rng(2)
    words = ["a", "b", "c", "d", "e"]
    for _ in range(100):
        preds, refs = {}, {}
        for v in range(rng.integers(1, 4)):
            vid = f"v{v}"
            refs[vid] = []
            for _ in range(rng.integers(1, 4)):
                s = rng.uniform(0, 50)
                refs[vid].append(((s, s + rng.uniform(1, 20)),
                                  rng.choice(words, size=4).tolist()))
            preds[vid] = []
            for _ in range(rng.integers(0, 4)):
                s = rng.uniform(0, 50)
                preds[vid].append(((s, s + rng.uniform(1, 20)),
                                   rng.choice(words, size=4).tolist()))
        report = dense_caption_eval(preds, [refs], max_n=1)
        scores = [report.per_threshold[t] for t in report.thresholds]
        assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))


def test_dense_eval_validation_errors():
    preds = {"v1": [_video((0, 10), "a")]}
    with pytest.raises(DataError):
        dense_caption_eval(preds, [])
    with pytest.raises(DataError):
        dense_caption_eval(preds, [{"v1": [_video((0, 10), "a")]}], thresholds=())
    with pytest.raises(DataError):
        dense_caption_eval(preds, [{}])
    with pytest.raises(DataError):
        dense_caption_eval(preds, [{"v1": []}])


def test_report_to_dict_shape():
    preds = {"v1": [_video((0, 10), "a man runs")]}
    refs = [{"v1": [_video((0, 10), "a man runs")]}]
    report = dense_caption_eval(preds, refs, max_n=1)
    raw = report.to_dict()
    assert raw["metric"] == "bleu@1"
    assert raw["meteor"] is None
    assert set(raw["per_threshold"]) == {"0.3", "0.5", "0.7", "0.9"}
    assert raw["final"] == pytest.approx(
        np.mean(list(report.per_threshold.values())), abs=1e-12)
