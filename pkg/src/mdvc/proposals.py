"""Fusing bidirectional event-proposal confidences into scored segments.

Two passes over a video score candidate segments on a shared grid: the
forward pass anchors each candidate at its ending cell, the backward
pass at its starting cell. A segment's fused confidence is the product
of the two scores; segments seen by only one pass are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import AlignmentError, DataError

DIRECTIONS = ("forward", "backward")


@dataclass(frozen=True)
class Proposal:
    """One candidate event segment in seconds."""

    start: float
    end: float
    score: float

    def __post_init__(self):
        if not 0.0 <= self.start < self.end:
            raise DataError(f"bad proposal interval [{self.start}, {self.end})")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"proposal score {self.score} outside [0, 1]")


@dataclass
class ConfidenceStream:
    """Grid of confidences from one directional pass.

    entries maps (anchor_cell, span_cells) to a confidence in [0, 1].
    A forward entry anchors the segment's last cell, a backward entry
    its first; span_cells counts grid cells covered (>= 1).
    """

    direction: str
    step_seconds: float
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise DataError(f"unknown stream direction {self.direction!r}")
        if self.step_seconds <= 0:
            raise DataError(f"grid step must be positive, got {self.step_seconds}")
        for (anchor, span), score in self.entries.items():
            if anchor < 0 or span < 1:
                raise DataError(f"bad grid entry anchor={anchor}, span={span}")
            if not 0.0 <= score <= 1.0:
                raise DataError(f"confidence {score} outside [0, 1]")

    def span_vocabulary(self) -> frozenset[int]:
        return frozenset(span for _, span in self.entries)

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "step_seconds": self.step_seconds,
            "entries": [[a, s, score] for (a, s), score in sorted(self.entries.items())],
        }

    @classmethod
    def from_json(cls, raw: dict) -> "ConfidenceStream":
        try:
            entries = {(int(a), int(s)): float(score)
                       for a, s, score in raw["entries"]}
            return cls(direction=raw["direction"],
                       step_seconds=float(raw["step_seconds"]),
                       entries=entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed confidence stream: {exc}") from None


@dataclass
class FusedGrid:
    """Product-fused confidences keyed by (start_cell, end_cell)."""

    step_seconds: float
    scores: dict[tuple[int, int], float]


def fuse_bidirectional(forward: ConfidenceStream,
                       backward: ConfidenceStream) -> FusedGrid:
    """Multiply forward and backward confidences of the same segment.

    Both streams must share the grid step and the span vocabulary.
    Cells scored by only one stream are dropped, as are forward entries
    whose span would begin before the grid origin.
    """
    if forward.direction != "forward" or backward.direction != "backward":
        raise AlignmentError(
            f"need a forward and a backward stream, got "
            f"{forward.direction!r} and {backward.direction!r}"
        )
    if forward.step_seconds != backward.step_seconds:
        raise AlignmentError(
            f"grid steps differ: {forward.step_seconds} vs {backward.step_seconds}"
        )
    if forward.span_vocabulary() != backward.span_vocabulary():
        raise AlignmentError("span vocabularies differ between streams")

    backward_cells = {(anchor, anchor + span - 1): score
                      for (anchor, span), score in backward.entries.items()}
    fused = {}
    for (anchor, span), score in forward.entries.items():
        start_cell = anchor - span + 1
        if start_cell < 0:
            continue
        cell = (start_cell, anchor)
        if cell in backward_cells:
            fused[cell] = score * backward_cells[cell]
    return FusedGrid(forward.step_seconds, fused)


def filter_proposals(grid: FusedGrid, threshold: float = 0.5,
                     max_count: int = 100) -> list[Proposal]:
    """Keep confident cells as seconds-valued proposals, best first.

    Cells scoring at least the threshold become proposals ordered by
    descending score; ties prefer the earlier start, then the shorter
    span. At most max_count proposals survive.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold {threshold} outside [0, 1]")
    if max_count < 1:
        raise DataError(f"max_count must be positive, got {max_count}")
    step = grid.step_seconds
    kept = [
        Proposal(start_cell * step, (end_cell + 1) * step, score)
        for (start_cell, end_cell), score in grid.scores.items()
        if score >= threshold
    ]
    kept.sort(key=lambda p: (-p.score, p.start, p.end))
    return kept[:max_count]
