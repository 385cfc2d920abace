"""Synthetic tri-modal dataset with a known information layout.

Every clip pairs a three-slot caption "subject action object ." with
inputs that each reveal exactly one slot: the transcript speaks only
the subject, the audio features point only along the action's
direction, and the visual features only along the object's. Any single
modality is therefore blind to the other two slots by construction,
which pins the exact-match ceilings a model can reach.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DEFAULT_STEP_SECONDS, FeatureRecord, VideoEntry, save_manifest, write_features
from .errors import ConfigError

DEFAULT_SUBJECTS = ("amy", "ben", "cara", "dan")
DEFAULT_ACTIONS = ("claps", "jumps", "spins", "waves")
DEFAULT_OBJECTS = ("ball", "drum", "kite", "rope")


@dataclass
class SynthSpec:
    """Shape and noise of a generated dataset."""

    seed: int = 0
    n_train: int = 2048
    n_val: int = 512
    subjects: tuple[str, ...] = DEFAULT_SUBJECTS
    actions: tuple[str, ...] = DEFAULT_ACTIONS
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    audio_dim: int = 8
    visual_dim: int = 16
    rows: int = 3
    audio_noise: float = 0.5
    visual_noise: float = 0.05
    step_seconds: float = DEFAULT_STEP_SECONDS

    def __post_init__(self):
        slots = (self.subjects, self.actions, self.objects)
        if any(len(s) < 2 for s in slots):
            raise ConfigError("every slot alphabet needs at least two words")
        merged = list(itertools.chain.from_iterable(slots))
        if len(set(merged)) != len(merged):
            raise ConfigError("slot alphabets must be pairwise disjoint")
        if self.audio_dim < len(self.actions):
            raise ConfigError("audio_dim must cover one direction per action")
        if self.visual_dim < len(self.objects):
            raise ConfigError("visual_dim must cover one direction per object")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("both splits need at least one sample")
        if self.rows < 1:
            raise ConfigError("rows must be positive")
        if self.audio_noise < 0 or self.visual_noise < 0:
            raise ConfigError("noise levels cannot be negative")
        if self.step_seconds <= 0:
            raise ConfigError("step_seconds must be positive")

    @property
    def duration(self) -> float:
        return self.rows * self.step_seconds


def caption_for(subject: str, action: str, obj: str) -> str:
    return f"{subject} {action} {obj} ."


def _balanced_combos(spec: SynthSpec, n: int,
                     rng: np.random.Generator) -> list[tuple[str, str, str]]:
    """n slot combinations, each appearing as equally often as possible."""
    combos = list(itertools.product(spec.subjects, spec.actions, spec.objects))
    repeats = math.ceil(n / len(combos))
    pool = combos * repeats
    rng.shuffle(pool)
    return pool[:n]


def generate(out_dir, spec: SynthSpec) -> Path:
    """Write feature files plus manifest.json; returns the manifest path.

    The same spec always produces byte-identical files.
    """
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    videos = []
    for split, count in (("train", spec.n_train), ("val", spec.n_val)):
        for i, (subject, action, obj) in enumerate(_balanced_combos(spec, count, rng)):
            video_id = f"{split}{i:05d}"
            audio = _direction_features(spec.actions.index(action), spec.audio_dim,
                                        spec.rows, spec.audio_noise, rng)
            visual = _direction_features(spec.objects.index(obj), spec.visual_dim,
                                         spec.rows, spec.visual_noise, rng)
            paths = {}
            for modality, values in (("audio", audio), ("visual", visual)):
                rel = f"features/{video_id}_{modality}.fea"
                write_features(out_dir / rel,
                               FeatureRecord(modality, spec.step_seconds, values))
                paths[modality] = rel
            videos.append(VideoEntry(
                video_id=video_id,
                duration=spec.duration,
                split=split,
                features=paths,
                speech_segments=[(0.0, spec.duration, subject)],
                annotations=[(0.0, spec.duration, caption_for(subject, action, obj))],
            ))
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, videos)
    return manifest_path


def _direction_features(index: int, dim: int, rows: int, noise: float,
                        rng: np.random.Generator) -> np.ndarray:
    values = np.zeros((rows, dim))
    values[:, index] = 1.0
    if noise > 0:
        values += rng.normal(0.0, noise, size=(rows, dim))
    return values


def exact_match_ceiling(known_slots: frozenset[str] | set[str],
                        spec: SynthSpec) -> float:
    """Best possible caption exact-match given which slots are observable.

    Enumerates the uniform joint over slot combinations: an ideal
    predictor reproduces every known slot and can only fix one guess
    per unknown slot.
    """
    sizes = {"subject": len(spec.subjects), "action": len(spec.actions),
             "object": len(spec.objects)}
    if not set(known_slots) <= set(sizes):
        raise ConfigError(f"unknown slot names: {known_slots}")
    unknown = set(sizes) - set(known_slots)
    ceiling = 1.0
    for slot in unknown:
        ceiling /= sizes[slot]
    return ceiling
