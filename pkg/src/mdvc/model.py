"""The multi-modal captioning model.

Each modality owns a full encoder/decoder transformer in its own width;
the per-modality decoder outputs are fused by a generator into one
distribution over the caption vocabulary. Dense modalities (audio,
visual) feed feature matrices straight into their encoder; token
modalities (speech) pass through an input embedding first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import _xavier
from .data import END_ID, PAD_ID, START_ID, UNK_ID, detokenize, load_modality_inputs
from .errors import ConfigError, FusionError, MdvcError, ShapeError
from .tensor import Tensor, add, concat, matmul, mul, relu, reshape, scale, softmax
from .transformer import (
    RESIDUAL_MODES,
    DecoderStack,
    DropoutPolicy,
    EncoderStack,
    embed_scaled,
    positional_encoding,
)

MODALITY_KINDS = ("dense", "token")
FUSION_MODES = ("concat", "average")

# Feature widths the full-scale configuration uses per modality.
DEFAULT_WIDTHS = {"speech": 512, "audio": 128, "visual": 1024}


@dataclass
class ModalityConfig:
    """One modality's transformer geometry."""

    name: str
    d_model: int
    kind: str = "dense"
    n_layers: int = 1
    input_vocab: int | None = None  # token kind only

    def validate(self, n_heads: int) -> None:
        if self.kind not in MODALITY_KINDS:
            raise ConfigError(f"unknown modality kind {self.kind!r}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"{self.name}: width {self.d_model} must be even")
        if self.d_model % n_heads != 0:
            raise ConfigError(
                f"{self.name}: width {self.d_model} not divisible by {n_heads} heads"
            )
        if self.n_layers < 1:
            raise ConfigError(f"{self.name}: needs at least one layer")
        if self.kind == "token":
            if self.input_vocab is None or self.input_vocab < 4:
                raise ConfigError(
                    f"{self.name}: token modality needs an input vocabulary "
                    f"of at least the 4 reserved ids, got {self.input_vocab}"
                )


@dataclass
class ModelConfig:
    """Architecture settings shared by construction and checkpoints."""

    modalities: list[ModalityConfig]
    vocab_size: int
    n_heads: int = 4
    d_inner: int = 2048
    dropout: float = 0.1
    smoothing: float = 0.7
    residual_mode: str = "verbatim"
    fusion: str = "concat"
    max_caption_len: int = 30

    def __post_init__(self):
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names: {names}")
        for m in self.modalities:
            m.validate(self.n_heads)
        widest = max(m.d_model for m in self.modalities)
        if self.d_inner <= widest:
            raise ConfigError(
                f"inner width {self.d_inner} must exceed widest modality {widest}"
            )
        if self.vocab_size < 5:
            raise ConfigError(f"vocab needs the 4 reserved ids plus at least one word")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.residual_mode not in RESIDUAL_MODES:
            raise ConfigError(f"unknown residual_mode {self.residual_mode!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.max_caption_len < 1:
            raise ConfigError("max_caption_len must be positive")

    @property
    def d_fused(self) -> int:
        return sum(m.d_model for m in self.modalities)

    def to_dict(self) -> dict:
        return {
            "modalities": [
                {"name": m.name, "d_model": m.d_model, "kind": m.kind,
                 "n_layers": m.n_layers, "input_vocab": m.input_vocab}
                for m in self.modalities
            ],
            "vocab_size": self.vocab_size,
            "n_heads": self.n_heads,
            "d_inner": self.d_inner,
            "dropout": self.dropout,
            "smoothing": self.smoothing,
            "residual_mode": self.residual_mode,
            "fusion": self.fusion,
            "max_caption_len": self.max_caption_len,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        try:
            modalities = [ModalityConfig(**m) for m in raw["modalities"]]
            rest = {k: raw[k] for k in
                    ("vocab_size", "n_heads", "d_inner", "dropout", "smoothing",
                     "residual_mode", "fusion", "max_caption_len")}
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from None
        return cls(modalities=modalities, **rest)


@dataclass
class ModalityBatch:
    """Padded per-modality inputs for a batch of samples.

    key_pad flags padded positions with True. Token batches may carry
    replacement features for samples whose source was missing: those
    samples contribute pad ids (blended away) plus dense rows instead.
    """

    kind: str
    key_pad: np.ndarray                  # (B, T) bool
    dense: np.ndarray | None = None      # (B, T, D) float
    ids: np.ndarray | None = None        # (B, T) int
    replaced: np.ndarray | None = None   # (B,) bool
    replacement: np.ndarray | None = None  # (B, T, D) float, zero where unused

    @property
    def batch_size(self) -> int:
        return self.key_pad.shape[0]

    @property
    def length(self) -> int:
        return self.key_pad.shape[1]


class ModalityTransformer:
    """Encoder/decoder pair plus embeddings for one modality."""

    def __init__(self, mcfg: ModalityConfig, cfg: ModelConfig,
                 rng: np.random.Generator):
        self.mcfg = mcfg
        self.caption_embedding = _xavier(rng, cfg.vocab_size, mcfg.d_model)
        self.input_embedding = (
            _xavier(rng, mcfg.input_vocab, mcfg.d_model)
            if mcfg.kind == "token" else None
        )
        self.encoder = EncoderStack(mcfg.n_layers, mcfg.d_model, cfg.n_heads,
                                    cfg.d_inner, rng)
        self.decoder = DecoderStack(mcfg.n_layers, mcfg.d_model, cfg.n_heads,
                                    cfg.d_inner, rng)
        self._pe = np.zeros((0, mcfg.d_model))

    def pe(self, n: int) -> np.ndarray:
        if n > self._pe.shape[0]:
            self._pe = positional_encoding(n, self.mcfg.d_model)
        return self._pe[:n]

    def encode(self, batch: ModalityBatch, drop: DropoutPolicy) -> Tensor:
        if batch.kind != self.mcfg.kind:
            raise ShapeError(
                f"{self.mcfg.name}: batch kind {batch.kind!r} != {self.mcfg.kind!r}"
            )
        if self.mcfg.kind == "dense":
            if batch.dense.shape[-1] != self.mcfg.d_model:
                raise ShapeError(
                    f"{self.mcfg.name}: feature width {batch.dense.shape[-1]} "
                    f"!= model width {self.mcfg.d_model}"
                )
            x = Tensor(batch.dense)
        else:
            x = embed_scaled(batch.ids, self.input_embedding)
            if batch.replaced is not None and batch.replaced.any():
                keep = (~batch.replaced).astype(np.float64)[:, None, None]
                x = add(mul(x, keep), Tensor(batch.replacement))
        x = drop(add(x, Tensor(self.pe(batch.length))))
        enc_mask = ~batch.key_pad[:, None, :]
        return self.encoder(x, drop, mask=enc_mask)

    def decode(self, prefix_ids: np.ndarray, prefix_pad: np.ndarray | None,
               memory: Tensor, memory_pad: np.ndarray, drop: DropoutPolicy,
               residual_mode: str) -> Tensor:
        n = prefix_ids.shape[-1]
        g = drop(add(embed_scaled(prefix_ids, self.caption_embedding),
                     Tensor(self.pe(n))))
        self_mask = np.tril(np.ones((n, n), dtype=bool))
        if prefix_pad is not None:
            self_mask = self_mask[None, :, :] & ~prefix_pad[:, None, :]
        memory_mask = ~memory_pad[:, None, :]
        return self.decoder(g, memory, drop, self_mask=self_mask,
                            memory_mask=memory_mask, residual_mode=residual_mode)

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        named = {f"{prefix}.caption_embedding": self.caption_embedding}
        if self.input_embedding is not None:
            named[f"{prefix}.input_embedding"] = self.input_embedding
        named.update(self.encoder.named_tensors(f"{prefix}.encoder"))
        named.update(self.decoder.named_tensors(f"{prefix}.decoder"))
        return named


class GeneratorWeights:
    """Fusion head turning decoder outputs into one vocabulary distribution."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fusion = cfg.fusion
        if cfg.fusion == "concat":
            self.w_hidden = _xavier(rng, cfg.d_fused, cfg.vocab_size)
            self.w_out = _xavier(rng, cfg.vocab_size, cfg.vocab_size)
            self.w_gen = {}
        else:
            self.w_hidden = None
            self.w_out = None
            self.w_gen = {m.name: _xavier(rng, m.d_model, cfg.vocab_size)
                          for m in cfg.modalities}

    def named_tensors(self, prefix: str) -> dict[str, Tensor]:
        if self.fusion == "concat":
            return {f"{prefix}.w_hidden": self.w_hidden,
                    f"{prefix}.w_out": self.w_out}
        return {f"{prefix}.{name}": t for name, t in self.w_gen.items()}


def generator_fuse_concat(decoder_outputs: Sequence[Tensor],
                          weights: GeneratorWeights,
                          drop: DropoutPolicy) -> Tensor:
    """Concatenate modality outputs and apply the two fusion layers."""
    if weights.fusion != "concat":
        raise FusionError("generator was built for average fusion")
    if not decoder_outputs:
        raise FusionError("no modality outputs to fuse")
    fused = concat(decoder_outputs)
    if fused.shape[-1] != weights.w_hidden.shape[0]:
        raise FusionError(
            f"fused width {fused.shape[-1]} != generator input "
            f"{weights.w_hidden.shape[0]}"
        )
    hidden = drop(relu(matmul(fused, weights.w_hidden)))
    return softmax(matmul(hidden, weights.w_out))


def generator_fuse_average(distributions: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of per-modality vocabulary distributions."""
    if not distributions:
        raise FusionError("no distributions to average")
    shape = distributions[0].shape
    for d in distributions[1:]:
        if d.shape != shape:
            raise FusionError(f"distribution shapes differ: {shape} vs {d.shape}")
    total = distributions[0]
    for d in distributions[1:]:
        total = add(total, d)
    return scale(total, 1.0 / len(distributions))


class CaptioningModel:
    """All per-modality transformers plus the fusion generator."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.parts = {m.name: ModalityTransformer(m, config, rng)
                      for m in config.modalities}
        self.generator = GeneratorWeights(config, rng)

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for name, part in self.parts.items():
            named.update(part.named_tensors(name))
        named.update(self.generator.named_tensors("generator"))
        return named

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def forward(self, batch: dict[str, ModalityBatch], prefix_ids: np.ndarray,
                prefix_pad: np.ndarray | None = None,
                drop: DropoutPolicy | None = None) -> Tensor:
        """Distributions over the vocabulary at every prefix position."""
        if drop is None:
            drop = DropoutPolicy.inference()
        prefix_ids = np.asarray(prefix_ids)
        squeeze = prefix_ids.ndim == 1
        if squeeze:
            prefix_ids = prefix_ids[None, :]
        outputs = []
        for mcfg in self.config.modalities:
            if mcfg.name not in batch:
                raise FusionError(f"missing input for modality {mcfg.name!r}")
            mb = batch[mcfg.name]
            part = self.parts[mcfg.name]
            memory = part.encode(mb, drop)
            outputs.append(part.decode(prefix_ids, prefix_pad, memory,
                                       mb.key_pad, drop,
                                       self.config.residual_mode))
        if self.config.fusion == "concat":
            dist = generator_fuse_concat(outputs, self.generator, drop)
        else:
            per_modality = [
                softmax(matmul(out, self.generator.w_gen[mcfg.name]))
                for out, mcfg in zip(outputs, self.config.modalities)
            ]
            dist = generator_fuse_average(per_modality)
        return _squeeze0(dist) if squeeze else dist

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointError

        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names mismatch; missing={missing}, unexpected={unexpected}"
            )
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: "
                    f"checkpoint {arr.shape} vs model {tensor.data.shape}"
                )
            tensor.data = arr.copy()
            tensor.grad = None


def _squeeze0(t: Tensor) -> Tensor:
    # Drop the singleton batch axis of a single-sample forward pass.
    return reshape(t, t.shape[1:])


def build_model(config: ModelConfig, seed: int = 0) -> CaptioningModel:
    """Deterministically initialized model for the given configuration."""
    return CaptioningModel(config, seed=seed)


def collate(per_sample: Sequence[dict], config: ModelConfig) -> dict[str, ModalityBatch]:
    """Pad a list of per-sample modality inputs into one ModalityBatch each.

    Each sample is a dict name -> ModalityInput (see data module). Dense
    inputs are zero-padded; token inputs are pad-id padded. A token
    sample whose source was substituted carries dense replacement rows
    that bypass the input embedding.
    """
    n = len(per_sample)
    if n == 0:
        raise ShapeError("cannot collate an empty sample list")
    batches: dict[str, ModalityBatch] = {}
    for mcfg in config.modalities:
        rows = []
        for sample in per_sample:
            if mcfg.name not in sample:
                raise FusionError(f"sample lacks modality {mcfg.name!r}")
            rows.append(sample[mcfg.name])
        longest = max(_input_length(r) for r in rows)
        key_pad = np.ones((n, longest), dtype=bool)
        if mcfg.kind == "dense":
            dense = np.zeros((n, longest, mcfg.d_model))
            for i, r in enumerate(rows):
                values = np.asarray(r.values, dtype=np.float64)
                if values.ndim != 2 or values.shape[1] != mcfg.d_model:
                    raise ShapeError(
                        f"{mcfg.name}: sample {i} features {values.shape} "
                        f"!= (rows, {mcfg.d_model})"
                    )
                dense[i, :values.shape[0]] = values
                key_pad[i, :values.shape[0]] = False
            batches[mcfg.name] = ModalityBatch("dense", key_pad, dense=dense)
        else:
            ids = np.full((n, longest), PAD_ID, dtype=np.int64)
            replaced = np.zeros(n, dtype=bool)
            replacement = np.zeros((n, longest, mcfg.d_model))
            for i, r in enumerate(rows):
                if r.substituted:
                    values = np.asarray(r.values, dtype=np.float64)
                    replaced[i] = True
                    replacement[i, :values.shape[0]] = values
                    key_pad[i, :values.shape[0]] = False
                else:
                    tokens = np.asarray(r.values, dtype=np.int64)
                    ids[i, :tokens.shape[0]] = tokens
                    key_pad[i, :tokens.shape[0]] = False
            batches[mcfg.name] = ModalityBatch(
                "token", key_pad, ids=ids,
                replaced=replaced if replaced.any() else None,
                replacement=replacement if replaced.any() else None,
            )
    return batches


def _input_length(modal_input) -> int:
    values = np.asarray(modal_input.values)
    length = values.shape[0]
    if length < 1:
        raise ShapeError("modality input with zero positions")
    return length


def greedy_decode(model: CaptioningModel, batch: dict[str, ModalityBatch],
                  max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding, one token at a time, ties broken to the lowest id.

    Runs in evaluation mode (no dropout, nothing recorded). Each output
    sequence is [start, tokens..., end]; the end marker is absent when
    max_len was exhausted first. At most max_len tokens follow start.
    """
    if max_len is None:
        max_len = model.config.max_caption_len
    n = next(iter(batch.values())).batch_size
    prefix = np.full((n, 1), START_ID, dtype=np.int64)
    finished = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        dist = model.forward(batch, prefix)
        nxt = np.argmax(dist.data[:, -1, :], axis=-1).astype(np.int64)
        nxt[finished] = PAD_ID
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        finished |= nxt == END_ID
        if finished.all():
            break
    sequences = []
    for row in prefix:
        ids = row.tolist()
        if END_ID in ids:
            ids = ids[: ids.index(END_ID) + 1]
        sequences.append(ids)
    return sequences


@dataclass
class CaptionResult:
    """Outcome of captioning one proposal."""

    start: float
    end: float
    sentence: str | None
    substituted: list[str]
    error: str | None = None


def caption_proposals(model: CaptioningModel, manifest, entry, proposals,
                      caption_vocab, speech_vocab=None, seed: int = 0,
                      batch_size: int = 32) -> list[CaptionResult]:
    """Greedy-caption each proposed segment of one video.

    proposals is a sequence of (start, end) pairs in seconds. A proposal
    whose inputs cannot be built is reported in place with its error
    instead of aborting the rest. Results keep the input order.
    """
    cache: dict = {}
    results: list[CaptionResult | None] = [None] * len(proposals)
    ready: list[tuple[int, dict]] = []
    for i, (start, end) in enumerate(proposals):
        try:
            inputs = load_modality_inputs(manifest, entry, model.config,
                                          (float(start), float(end)),
                                          speech_vocab, seed=seed, cache=cache)
        except MdvcError as exc:
            results[i] = CaptionResult(float(start), float(end), None, [],
                                       error=f"{type(exc).__name__}: {exc}")
            continue
        ready.append((i, inputs))

    for lo in range(0, len(ready), batch_size):
        chunk = ready[lo:lo + batch_size]
        batch = collate([inputs for _, inputs in chunk], model.config)
        decoded = greedy_decode(model, batch)
        for (i, inputs), ids in zip(chunk, decoded):
            start, end = proposals[i]
            substituted = sorted(name for name, mi in inputs.items()
                                 if mi.substituted)
            sentence = detokenize(caption_vocab.decode(ids))
            results[i] = CaptionResult(float(start), float(end), sentence,
                                       substituted)
    return results  # type: ignore[return-value]
