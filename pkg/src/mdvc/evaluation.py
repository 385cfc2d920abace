"""Captioning metrics: temporal IoU, corpus BLEU, and the gated protocol.

A predicted caption only scores when its segment overlaps a reference
segment by strictly more than the tIoU threshold; otherwise it counts
as zero. Scores average per video, then across videos, then across
thresholds, and finally across reference sets when more than one is
given.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import DataError

DEFAULT_TIOU_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
MAX_PREDICTIONS_PER_VIDEO = 100

Tokens = Sequence[Hashable]


def tiou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two [start, end) intervals."""
    (a0, a1), (b0, b1) = a, b
    if a1 <= a0 or b1 <= b0:
        raise DataError(f"degenerate interval: {tuple(a)} vs {tuple(b)}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
         max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions under a brevity penalty.

    references[i] lists the acceptable token sequences for candidates[i].
    The brevity penalty uses each candidate's closest reference length
    (ties go to the shorter one). Any order of n-gram with zero clipped
    matches over the whole corpus zeroes the score.
    """
    if max_n < 1:
        raise DataError(f"bleu order must be >= 1, got {max_n}")
    if not candidates:
        raise DataError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise DataError(
            f"{len(candidates)} candidates vs {len(references)} reference lists"
        )
    for refs in references:
        if not refs:
            raise DataError("every candidate needs at least one reference")

    cand_total = 0
    ref_total = 0
    clipped = [0] * max_n
    totals = [0] * max_n
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        cand_total += len(cand)
        ref_lengths = [len(r) for r in refs]
        ref_total += min(ref_lengths, key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, max_n + 1):
            got = _ngrams(cand, n)
            if not got:
                continue
            best = Counter()
            for ref in refs:
                for gram, count in _ngrams(ref, n).items():
                    if count > best[gram]:
                        best[gram] = count
            totals[n - 1] += sum(got.values())
            clipped[n - 1] += sum(min(count, best[gram])
                                  for gram, count in got.items())

    if cand_total == 0 or any(c == 0 for c in clipped) or any(t == 0 for t in totals):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    brevity = 1.0 if cand_total > ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_precision)


@dataclass
class EvalReport:
    """Scores of one dense-captioning evaluation."""

    metric: str
    thresholds: tuple[float, ...]
    per_threshold: dict[float, float]
    per_video: dict[str, dict[float, float]]
    final: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "thresholds": list(self.thresholds),
            "per_threshold": {str(t): s for t, s in self.per_threshold.items()},
            "per_video": {v: {str(t): s for t, s in by_t.items()}
                          for v, by_t in self.per_video.items()},
            "final": self.final,
            "meteor": None,
        }


def dense_caption_eval(predictions: dict[str, list],
                       reference_sets: Sequence[dict[str, list]],
                       thresholds: Sequence[float] = DEFAULT_TIOU_THRESHOLDS,
                       max_n: int = 4) -> EvalReport:
    """Score captioned segments against one or more reference sets.

    predictions maps video id to [(interval, tokens), ...]; each
    reference set maps video id to the same shape. Every prediction is
    scored against its best-overlapping reference when that overlap
    exceeds the threshold, zero otherwise; a video with no predictions
    scores zero. Only the first 100 predictions per video count.
    """
    if not reference_sets:
        raise DataError("at least one reference set is required")
    thresholds = tuple(thresholds)
    if not thresholds:
        raise DataError("at least one tIoU threshold is required")

    set_scores: list[dict[float, float]] = []
    video_scores: dict[str, dict[float, list[float]]] = {}
    for ref_set in reference_sets:
        if not ref_set:
            raise DataError("reference set holds no videos")
        per_threshold: dict[float, float] = {}
        for threshold in thresholds:
            totals = []
            for video_id, refs in ref_set.items():
                if not refs:
                    raise DataError(f"video {video_id!r} has no reference segments")
                preds = predictions.get(video_id, [])[:MAX_PREDICTIONS_PER_VIDEO]
                if preds:
                    scores = [_gated_score(interval, tokens, refs, threshold, max_n)
                              for interval, tokens in preds]
                    video_score = sum(scores) / len(scores)
                else:
                    video_score = 0.0
                totals.append(video_score)
                video_scores.setdefault(video_id, {}).setdefault(
                    threshold, []).append(video_score)
            per_threshold[threshold] = sum(totals) / len(totals)
        set_scores.append(per_threshold)

    per_threshold = {t: sum(s[t] for s in set_scores) / len(set_scores)
                     for t in thresholds}
    final = sum(per_threshold.values()) / len(thresholds)
    per_video = {v: {t: sum(vals) / len(vals) for t, vals in by_t.items()}
                 for v, by_t in video_scores.items()}
    return EvalReport(metric=f"bleu@{max_n}", thresholds=thresholds,
                      per_threshold=per_threshold, per_video=per_video,
                      final=final)


def _gated_score(interval, tokens, refs, threshold: float, max_n: int) -> float:
    best_overlap = -1.0
    best_tokens = None
    for ref_interval, ref_tokens in refs:
        overlap = tiou(interval, ref_interval)
        if overlap > best_overlap:
            best_overlap = overlap
            best_tokens = ref_tokens
    if best_overlap <= threshold:
        return 0.0
    return bleu([list(tokens)], [[list(best_tokens)]], max_n=max_n)
