"""Decoder-only toy captioner with an optional projected visual prefix.

Architecture: learned token and absolute position embeddings, pre-norm
transformer blocks (multi-head causal self-attention plus a GELU MLP), a
final layer norm, and a linear vocabulary head. A visual prefix is a short
sequence of continuous feature vectors pushed through a linear projector
into the embedding space and prepended to the token embeddings.

Two ways of running "without the image" are supported and selected by
``ModelConfig.image_removal_mode``:

* ``drop_prefix``   - the prefix rows are simply absent; text starts at
                      position 0.
* ``attention_mask`` - the prefix slots stay in the sequence (zero features)
                      but attention from every text position to every prefix
                      position is masked out, so text positions keep the same
                      positional indices as in the with-image pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, LengthError, ShapeError, VocabularyError

IMAGE_REMOVAL_MODES = ("drop_prefix", "attention_mask")
CONDITION_KINDS = ("full_drop", "patch_mask", "gaussian_perturb")

# Large negative additive mask. At this magnitude adding any realistic score
# is absorbed below float64 resolution and exp() underflows to exactly 0, so
# masked positions contribute nothing, bit for bit.
_MASK_VALUE = -1e18


@dataclass
class ModelConfig:
    vocab_size: int = 120
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 48
    prefix_len: int = 8
    feature_dim: int = 32
    image_removal_mode: str = "drop_prefix"

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("d_model, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be positive")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be non-negative")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.image_removal_mode not in IMAGE_REMOVAL_MODES:
            raise ConfigError(
                f"image_removal_mode must be one of {IMAGE_REMOVAL_MODES}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "prefix_len": self.prefix_len,
            "feature_dim": self.feature_dim,
            "image_removal_mode": self.image_removal_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class VisualPrefix:
    """prefix_len feature vectors of length feature_dim, float64."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"prefix features must be 2-D, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("prefix features must be finite")


@dataclass(frozen=True)
class ContrastCondition:
    """How the prefix is transformed for the image-free contrast pass."""

    kind: str = "full_drop"
    ratio: float = 0.0
    sigma: float = 0.0

    @classmethod
    def full_drop(cls) -> "ContrastCondition":
        return cls("full_drop")

    @classmethod
    def patch_mask(cls, ratio: float) -> "ContrastCondition":
        return cls("patch_mask", ratio=ratio)

    @classmethod
    def gaussian_perturb(cls, sigma: float) -> "ContrastCondition":
        return cls("gaussian_perturb", sigma=sigma)

    def validate(self) -> None:
        if self.kind not in CONDITION_KINDS:
            raise ConfigError(f"condition kind must be one of {CONDITION_KINDS}")
        if self.kind == "patch_mask" and not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("patch_mask ratio must lie in [0, 1]")
        if self.kind == "gaussian_perturb" and not self.sigma > 0.0:
            raise ConfigError("gaussian_perturb sigma must be positive")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "patch_mask":
            d["ratio"] = self.ratio
        elif self.kind == "gaussian_perturb":
            d["sigma"] = self.sigma
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastCondition":
        cond = cls(kind=d.get("kind", "full_drop"),
                   ratio=float(d.get("ratio", 0.0)),
                   sigma=float(d.get("sigma", 0.0)))
        cond.validate()
        return cond

    def describe(self) -> str:
        if self.kind == "patch_mask":
            return f"patch_mask(ratio={self.ratio})"
        if self.kind == "gaussian_perturb":
            return f"gaussian_perturb(sigma={self.sigma})"
        return "full_drop"


FULL_DROP = ContrastCondition.full_drop()


def apply_condition(prefix: VisualPrefix, condition: ContrastCondition,
                    rng: np.random.Generator | None = None) -> VisualPrefix | None:
    """Transform a prefix for the contrast pass; None means "prefix absent"."""
    condition.validate()
    if condition.kind == "full_drop":
        return None
    if rng is None:
        raise ValueError(f"{condition.kind} needs an rng")
    feats = prefix.features
    if condition.kind == "patch_mask":
        n_mask = math.ceil(condition.ratio * feats.shape[0])
        out = feats.copy()
        if n_mask > 0:
            rows = rng.choice(feats.shape[0], size=n_mask, replace=False)
            out[rows] = 0.0
        return VisualPrefix(out)
    # gaussian_perturb
    return VisualPrefix(feats + rng.normal(0.0, condition.sigma, size=feats.shape))


class ModelParams:
    """Named parameter tensors plus the config they were shaped for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def projector(self) -> list[Tensor]:
        """The visual-projector parameter group (the warmup stage trains only this)."""
        return [self._tensors["vis_proj"]]

    def n_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            name: _param(t.data.copy()) for name, t in self._tensors.items()
        })

    def assert_finite(self) -> None:
        for name, t in self._tensors.items():
            t.assert_finite(f"parameter {name}")


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: N(0, 0.02) weights, unit norm gains, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size
    hidden = 4 * d

    def normal(*shape):
        return _param(rng.normal(0.0, 0.02, size=shape))

    tensors: dict[str, Tensor] = {}
    tensors["tok_emb"] = normal(v, d)
    tensors["pos_emb"] = normal(config.max_seq_len, d)
    tensors["vis_proj"] = normal(config.feature_dim, d)
    for i in range(config.n_layers):
        p = f"layer{i}."
        tensors[p + "ln1_gain"] = _param(np.ones(d))
        tensors[p + "ln1_bias"] = _param(np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            tensors[p + name] = normal(d, d)
            tensors[p + name.replace("w", "b")] = _param(np.zeros(d))
        tensors[p + "ln2_gain"] = _param(np.ones(d))
        tensors[p + "ln2_bias"] = _param(np.zeros(d))
        tensors[p + "w_up"] = normal(d, hidden)
        tensors[p + "b_up"] = _param(np.zeros(hidden))
        tensors[p + "w_down"] = normal(hidden, d)
        tensors[p + "b_down"] = _param(np.zeros(d))
    tensors["ln_f_gain"] = _param(np.ones(d))
    tensors["ln_f_bias"] = _param(np.zeros(d))
    tensors["head"] = normal(d, v)
    return ModelParams(config, tensors)


def _attention_mask(total: int, masked_prefix_rows: int) -> np.ndarray:
    """Additive mask: causal, plus optional text-to-prefix blocking."""
    mask = np.where(np.triu(np.ones((total, total), dtype=bool), k=1), _MASK_VALUE, 0.0)
    if masked_prefix_rows > 0:
        mask[masked_prefix_rows:, :masked_prefix_rows] = _MASK_VALUE
    return mask


def _block(params: ModelParams, layer: int, x: Tensor, mask: Tensor,
           tape: Tape | None) -> Tensor:
    cfg = params.config
    p = f"layer{layer}."
    total = x.shape[0]
    n_heads = cfg.n_heads
    head_dim = cfg.d_model // n_heads

    h = ad.layer_norm(x, params[p + "ln1_gain"], params[p + "ln1_bias"], tape=tape)

    def proj(name):
        y = ad.add(ad.matmul(h, params[p + "w" + name], tape), params[p + "b" + name], tape)
        y = ad.reshape(y, (total, n_heads, head_dim), tape)
        return ad.transpose(y, (1, 0, 2), tape)  # [heads, total, head_dim]

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1), tape), tape)
    scores = ad.scale(scores, 1.0 / math.sqrt(head_dim), tape)
    scores = ad.add(scores, mask, tape)
    probs = ad.exp(ad.log_softmax(scores, tape), tape)
    ctx = ad.matmul(probs, v, tape)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2), tape), (total, cfg.d_model), tape)
    attn = ad.add(ad.matmul(ctx, params[p + "wo"], tape), params[p + "bo"], tape)
    x = ad.add(x, attn, tape)

    h2 = ad.layer_norm(x, params[p + "ln2_gain"], params[p + "ln2_bias"], tape=tape)
    up = ad.gelu(ad.add(ad.matmul(h2, params[p + "w_up"], tape), params[p + "b_up"], tape), tape)
    down = ad.add(ad.matmul(up, params[p + "w_down"], tape), params[p + "b_down"], tape)
    return ad.add(x, down, tape)


def forward(params: ModelParams, tokens, prefix: VisualPrefix | None = None,
            tape: Tape | None = None) -> Tensor:
    """Next-token logits, one row per text token.

    Row j holds the logits predicting token j+1 given the prefix (if any)
    and tokens up to j. Passing a tape records the pass for backward;
    ``tape=None`` runs gradient-free.
    """
    cfg = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ShapeError(f"tokens must be a non-empty 1-D sequence, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise VocabularyError(
            f"token id out of range for vocabulary of size {cfg.vocab_size}")

    masked_rows = 0
    if prefix is not None:
        if prefix.features.shape != (cfg.prefix_len, cfg.feature_dim):
            raise ShapeError(
                f"prefix features must have shape ({cfg.prefix_len}, {cfg.feature_dim}), "
                f"got {prefix.features.shape}")
        feats = prefix.features
        n_prefix = cfg.prefix_len
    elif cfg.image_removal_mode == "attention_mask":
        feats = np.zeros((cfg.prefix_len, cfg.feature_dim))
        n_prefix = cfg.prefix_len
        masked_rows = n_prefix
    else:
        feats = None
        n_prefix = 0

    total = n_prefix + ids.size
    if total > cfg.max_seq_len:
        raise LengthError(
            f"sequence of length {total} exceeds max_seq_len {cfg.max_seq_len}")

    tok = ad.embedding_lookup(params["tok_emb"], ids, tape)
    if n_prefix > 0:
        pemb = ad.matmul(Tensor(feats), params["vis_proj"], tape)
        x = ad.concat_rows((pemb, tok), tape)
    else:
        x = tok
    pos = ad.embedding_lookup(params["pos_emb"], np.arange(total), tape)
    x = ad.add(x, pos, tape)

    mask = Tensor(_attention_mask(total, masked_rows))
    for layer in range(cfg.n_layers):
        x = _block(params, layer, x, mask, tape)
    x = ad.layer_norm(x, params["ln_f_gain"], params["ln_f_bias"], tape=tape)
    logits = ad.matmul(x, params["head"], tape)
    return ad.slice_rows(logits, n_prefix, total, tape)


def forward_contrast(params: ModelParams, tokens, prefix: VisualPrefix,
                     condition: ContrastCondition = FULL_DROP,
                     rng: np.random.Generator | None = None,
                     tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """One recorded pass with the intact prefix, one gradient-free pass without.

    The second pass runs entirely off-tape with the prefix transformed per
    ``condition``, so its logits carry no gradient linkage.
    """
    o_with = forward(params, tokens, prefix, tape=tape)
    o_without = forward(params, tokens, apply_condition(prefix, condition, rng), tape=None)
    return o_with, o_without


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Single file: one JSON header line, then the raw little-endian float64
# payloads of every parameter concatenated in header order (C order).

CHECKPOINT_FORMAT = "calign-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "config": params.config.to_dict(),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    tensors: dict[str, Tensor] = {}
    offset = newline + 1
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        tensors[entry["name"]] = _param(block.reshape(shape).astype(np.float64))
    if offset != len(raw):
        raise ConfigError(f"checkpoint {path} has trailing bytes")
    return ModelParams(config, tensors)
