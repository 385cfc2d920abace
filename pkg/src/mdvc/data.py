"""Datasets on disk: feature files, manifests, vocabulary, text rules.

A dataset is one manifest.json plus binary feature files. Feature files
store float32 row-major matrices on a fixed time grid; rows widen to
float64 when read. Text is normalized one way everywhere: lowercase,
punctuation detached, whitespace split.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .model import ModelConfig

# Reserved token ids, shared by caption and speech vocabularies.
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

FEATURE_MAGIC = b"MDVF1"
DEFAULT_STEP_SECONDS = 0.96
SPLITS = ("train", "val", "test")

_PUNCT_RE = re.compile(r"([.,!?;:'\"()\[\]])")
_SOUND_TAG_RE = re.compile(r"\[[^\]]*\]")


def normalize_text(text: str) -> str:
    """Lowercase, split punctuation into its own tokens, squeeze spaces."""
    spaced = _PUNCT_RE.sub(r" \1 ", text.lower())
    return " ".join(spaced.split())


def tokenize(text: str) -> list[str]:
    return normalize_text(text).split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def strip_sound_tags(text: str) -> str:
    """Remove bracketed non-speech annotations such as "[Applause]"."""
    return " ".join(_SOUND_TAG_RE.sub(" ", text).split())


class Vocabulary:
    """Token table with four reserved ids: pad, start, end, unk."""

    RESERVED = ("<pad>", "<start>", "<end>", "<unk>")

    def __init__(self, words: Sequence[str]):
        for word in words:
            if word in self.RESERVED:
                raise DataError(f"word {word!r} collides with a reserved token")
        self.tokens = list(self.RESERVED) + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary holds duplicate words")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        """Alphabetical vocabulary of tokens seen at least min_freq times."""
        if min_freq < 1:
            raise DataError(f"min_freq must be >= 1, got {min_freq}")
        counts: dict[str, int] = {}
        for text in texts:
            for token in tokenize(text):
                counts[token] = counts.get(token, 0) + 1
        words = sorted(tok for tok, n in counts.items()
                       if n >= min_freq and tok not in cls.RESERVED)
        return cls(words)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(tok, UNK_ID) for tok in tokens],
                        dtype=np.int64)

    def encode_caption(self, text: str) -> np.ndarray:
        ids = self.encode(tokenize(text))
        return np.concatenate(([START_ID], ids, [END_ID])).astype(np.int64)

    def decode(self, ids: Sequence[int], keep_markers: bool = False) -> list[str]:
        out = []
        for i in ids:
            if i < 0 or i >= len(self.tokens):
                raise DataError(f"token id {i} outside vocabulary of {len(self.tokens)}")
            if not keep_markers and i in (PAD_ID, START_ID, END_ID):
                continue
            out.append(self.tokens[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:4]) != cls.RESERVED:
            raise DataError("vocabulary list must begin with the reserved tokens")
        return cls(tokens[4:])


@dataclass
class FeatureRecord:
    """One modality's feature matrix on a uniform time grid."""

    modality: str
    step_seconds: float
    values: np.ndarray  # (rows, width) float64 in memory

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"features must be 2-axis, got {self.values.shape}")
        if self.step_seconds <= 0:
            raise DataError(f"step must be positive, got {self.step_seconds}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.modality}: non-finite feature values")

    @property
    def duration(self) -> float:
        return self.values.shape[0] * self.step_seconds


def write_features(path, record: FeatureRecord) -> None:
    """Serialize a FeatureRecord; the payload narrows to float32."""
    try:
        tag = record.modality.encode("ascii")
    except UnicodeEncodeError:
        raise DataError(f"bad modality tag {record.modality!r}") from None
    if not 1 <= len(tag) <= 255:
        raise DataError(f"bad modality tag {record.modality!r}")
    rows, cols = record.values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<B", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<IId", rows, cols, record.step_seconds))
        fh.write(np.ascontiguousarray(record.values, dtype="<f4").tobytes())


def read_features(path) -> FeatureRecord:
    """Parse a feature file, widening the payload back to float64."""
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path}: not a feature file (magic {magic!r})")
        tag_len = _read_exactly(fh, 1, path)[0]
        tag = _read_exactly(fh, tag_len, path).decode("ascii")
        rows, cols, step = struct.unpack("<IId", _read_exactly(fh, 16, path))
        payload = _read_exactly(fh, rows * cols * 4, path)
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return FeatureRecord(tag, step, values.astype(np.float64))


def _read_exactly(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated feature file")
    return data


def slice_rows(record: FeatureRecord, start: float, end: float) -> np.ndarray:
    """Rows whose [i*step, (i+1)*step) cell intersects [start, end).

    The requested interval must lie inside the recording. A degenerate
    request that touches no cell snaps to the single nearest row.
    """
    if not 0.0 <= start <= end:
        raise DataError(f"bad slice interval [{start}, {end})")
    duration = record.duration
    if end > duration + 1e-9:
        raise DataError(
            f"slice [{start}, {end}) exceeds recording of {duration:.6f}s"
        )
    step = record.step_seconds
    rows = record.values.shape[0]
    first = max(0, int(np.floor(start / step)))
    # First cell strictly after `start` only counts if it begins before `end`.
    if (first + 1) * step <= start + 1e-12:
        first += 1
    last = min(rows, int(np.ceil(end / step)))
    if first < last:
        return record.values[first:last].copy()
    nearest = int(np.clip(np.floor((start + end) / 2.0 / step), 0, rows - 1))
    return record.values[nearest:nearest + 1].copy()


def select_speech(segments: Sequence[tuple], start: float, end: float) -> str:
    """Join the transcript segments that overlap [start, end).

    A segment qualifies when it ends after the interval starts and
    starts before the interval ends. Bracketed sound tags are removed.
    """
    chosen = sorted(
        (seg for seg in segments if seg[1] > start and seg[0] < end),
        key=lambda seg: (seg[0], seg[1]),
    )
    return " ".join(filter(None, (strip_sound_tags(seg[2]) for seg in chosen)))


@dataclass
class VideoEntry:
    """One video's metadata inside a manifest."""

    video_id: str
    duration: float
    split: str
    features: dict[str, str | None] = field(default_factory=dict)
    speech_segments: list[tuple[float, float, str]] = field(default_factory=list)
    annotations: list[tuple[float, float, str]] = field(default_factory=list)

    def validate(self) -> None:
        if self.duration <= 0:
            raise DataError(f"{self.video_id}: duration must be positive")
        if self.split not in SPLITS:
            raise DataError(f"{self.video_id}: unknown split {self.split!r}")
        for kind, intervals in (("speech", self.speech_segments),
                                ("annotation", self.annotations)):
            for item in intervals:
                s, e = item[0], item[1]
                if not (0.0 <= s < e <= self.duration + 1e-6):
                    raise DataError(
                        f"{self.video_id}: {kind} interval [{s}, {e}) outside "
                        f"[0, {self.duration}]"
                    )


@dataclass
class Manifest:
    """All videos of a dataset plus the directory that anchors paths."""

    videos: list[VideoEntry]
    root: Path

    def split(self, name: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == name]

    def feature_path(self, entry: VideoEntry, modality: str) -> Path | None:
        rel = entry.features.get(modality)
        return None if rel is None else self.root / rel


def save_manifest(path, videos: Sequence[VideoEntry]) -> None:
    payload = {
        "videos": [
            {
                "video_id": v.video_id,
                "duration": v.duration,
                "split": v.split,
                "features": v.features,
                "speech_segments": [[s, e, t] for s, e, t in v.speech_segments],
                "annotations": [[s, e, t] for s, e, t in v.annotations],
            }
            for v in videos
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    videos = []
    try:
        for item in raw["videos"]:
            entry = VideoEntry(
                video_id=item["video_id"],
                duration=float(item["duration"]),
                split=item["split"],
                features=dict(item.get("features", {})),
                speech_segments=[(float(s), float(e), str(t))
                                 for s, e, t in item.get("speech_segments", [])],
                annotations=[(float(s), float(e), str(t))
                             for s, e, t in item.get("annotations", [])],
            )
            entry.validate()
            videos.append(entry)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from None
    ids = [v.video_id for v in videos]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate video ids")
    return Manifest(videos=videos, root=path.parent)


@dataclass
class ModalityInput:
    """One modality's slice of one sample.

    kind "dense" carries a (rows, width) float matrix; kind "token"
    carries a 1-axis id array unless the source was missing, in which
    case substituted is True and values holds stand-in dense features.
    """

    kind: str
    values: np.ndarray
    substituted: bool = False


@dataclass
class TrainSample:
    """Inputs plus the encoded caption for one annotated segment."""

    video_id: str
    interval: tuple[float, float]
    inputs: dict[str, ModalityInput]
    caption_ids: np.ndarray
    caption_tokens: list[str]


def _stable_seed(*parts) -> list[int]:
    mixed = []
    for part in parts:
        if isinstance(part, int):
            mixed.append(part & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode("utf-8")).digest()
            mixed.append(int.from_bytes(digest[:4], "little"))
    return mixed


def substitution_rng(seed: int, video_id: str, modality: str) -> np.random.Generator:
    """Generator for missing-modality stand-ins, stable across runs."""
    return np.random.default_rng(_stable_seed(seed, video_id, modality))


def _substitute_rows(interval, step: float) -> int:
    start, end = interval
    return max(1, int(round((end - start) / step)))


def load_modality_inputs(manifest: Manifest, entry: VideoEntry,
                         config: "ModelConfig", interval: tuple[float, float],
                         speech_vocab: Vocabulary | None,
                         seed: int = 0,
                         cache: dict | None = None) -> dict[str, ModalityInput]:
    """Slice every configured modality of one video to one interval.

    A missing source (absent feature file, or no qualifying speech) is
    replaced by seeded standard-normal features of the modality's width
    so downstream code sees one uniform policy.
    """
    inputs: dict[str, ModalityInput] = {}
    for mcfg in config.modalities:
        if mcfg.kind == "token":
            if speech_vocab is None:
                raise DataError(f"{mcfg.name}: token modality needs a vocabulary")
            text = select_speech(entry.speech_segments, *interval)
            tokens = tokenize(text)
            if tokens:
                inputs[mcfg.name] = ModalityInput("token", speech_vocab.encode(tokens))
                continue
            rng = substitution_rng(seed, entry.video_id, mcfg.name)
            rows = _substitute_rows(interval, DEFAULT_STEP_SECONDS)
            inputs[mcfg.name] = ModalityInput(
                "token", rng.standard_normal((rows, mcfg.d_model)), substituted=True
            )
            continue
        path = manifest.feature_path(entry, mcfg.name)
        if path is None:
            rng = substitution_rng(seed, entry.video_id, mcfg.name)
            rows = _substitute_rows(interval, DEFAULT_STEP_SECONDS)
            inputs[mcfg.name] = ModalityInput(
                "dense", rng.standard_normal((rows, mcfg.d_model)), substituted=True
            )
            continue
        record = _read_cached(path, cache)
        if record.modality != mcfg.name:
            raise DataError(
                f"{path}: holds modality {record.modality!r}, expected {mcfg.name!r}"
            )
        if record.values.shape[1] != mcfg.d_model:
            raise ShapeError(
                f"{mcfg.name}: feature width {record.values.shape[1]} != "
                f"model width {mcfg.d_model}"
            )
        inputs[mcfg.name] = ModalityInput("dense", slice_rows(record, *interval))
    return inputs


def _read_cached(path: Path, cache: dict | None) -> FeatureRecord:
    if cache is None:
        return read_features(path)
    key = str(path)
    if key not in cache:
        cache[key] = read_features(path)
    return cache[key]


def build_training_samples(manifest: Manifest, config: "ModelConfig",
                           split: str, caption_vocab: Vocabulary,
                           speech_vocab: Vocabulary | None,
                           seed: int = 0) -> list[TrainSample]:
    """One TrainSample per annotated segment of the requested split."""
    samples = []
    cache: dict = {}
    for entry in manifest.split(split):
        for start, end, caption in entry.annotations:
            inputs = load_modality_inputs(manifest, entry, config, (start, end),
                                          speech_vocab, seed=seed, cache=cache)
            samples.append(TrainSample(
                video_id=entry.video_id,
                interval=(start, end),
                inputs=inputs,
                caption_ids=caption_vocab.encode_caption(caption),
                caption_tokens=tokenize(caption),
            ))
    return samples
