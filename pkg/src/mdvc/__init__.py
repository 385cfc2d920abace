"""Multi-modal dense video captioning with hand-rolled transformers.

Per-modality encoder/decoder stacks over speech, audio and visual
inputs feed a shared caption generator; training, proposal fusion,
tIoU-gated BLEU evaluation and a synthetic dataset round out the kit.
"""

from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .data import (
    END_ID,
    PAD_ID,
    START_ID,
    UNK_ID,
    FeatureRecord,
    Manifest,
    ModalityInput,
    TrainSample,
    VideoEntry,
    Vocabulary,
    build_training_samples,
    load_manifest,
    load_modality_inputs,
    read_features,
    save_manifest,
    select_speech,
    slice_rows,
    tokenize,
    write_features,
)
from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    FusionError,
    GradError,
    IndexLookupError,
    MaskError,
    MdvcError,
    NumericError,
    ParamError,
    ShapeError,
)
from .evaluation import EvalReport, bleu, dense_caption_eval, tiou
from .model import (
    DEFAULT_WIDTHS,
    CaptioningModel,
    CaptionResult,
    ModalityConfig,
    ModelConfig,
    build_model,
    caption_proposals,
    collate,
    greedy_decode,
)
from .proposals import (
    ConfidenceStream,
    Proposal,
    filter_proposals,
    fuse_bidirectional,
)
from .synth import SynthSpec, exact_match_ceiling, generate
from .tensor import Tape, Tensor
from .training import (
    AUDIO_ONLY_PRESET,
    Adam,
    TrainConfig,
    TrainResult,
    masked_kl_loss,
    pad_batch,
    smooth_labels,
    train_loop,
    validation_score,
)

__version__ = "0.1.0"
