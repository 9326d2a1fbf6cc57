"""Contrastive token re-weighting on a synthetic captioning workbench."""

from .autodiff import Adam, Tape, Tensor, backward, detach, zero_grads
from .data import (
    Corpus, LabeledCaption, Sample, Scene, Tokenizer, build_batches,
    generate_caption, generate_corpus, generate_scene, get_tokenizer,
    load_corpus, render_features, save_corpus, swap_corrupt,
)
from .errors import (
    ConfigError, DegenerateSampleError, LengthError, NonFiniteError,
    ShapeError, VocabularyError,
)
from .loss import (
    CalConfig, TokenWeights, WeightReport, cal_loss, clamp_weights,
    compute_token_weights, delta_logits, mle_loss, pool_weights,
)
from .harness import (
    DataConfig, ExperimentConfig, MetricsRecord, OptimConfig, StageFlags,
    bench_overhead, evaluate, export_heatmap, grid_clamp, grid_condition,
    sweep_noise, train, weight_histogram,
)
from .model import (
    FULL_DROP, ContrastCondition, ModelConfig, ModelParams, VisualPrefix,
    apply_condition, forward, forward_contrast, init_params,
    load_checkpoint, save_checkpoint,
)

__version__ = "0.1.0"
