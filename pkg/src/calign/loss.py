"""Per-token weighting from contrastive logit differences, and the losses.

The weighting pipeline is: take the logit assigned to each label token with
and without the image, subtract, clamp the difference into [alpha, beta],
then smooth with a shrinking-window moving average. The resulting weights
enter the loss as plain numbers - they are computed outside any tape, so no
gradient ever flows through the weight computation.

Weights are only ever computed for trainable (response) positions; prompt
rows carry a raw logit difference for inspection but never a weight.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DegenerateSampleError, ShapeError
from .model import ContrastCondition, VisualPrefix, apply_condition

__all__ = [
    "CalConfig", "TokenWeights", "WeightEntry", "WeightReport",
    "ContrastCondition", "VisualPrefix", "apply_condition",
    "delta_logits", "clamp_weights", "pool_weights", "compute_token_weights",
    "cal_loss", "mle_loss", "build_weight_report", "write_weight_report",
]


@dataclass
class CalConfig:
    """Knobs of the re-weighted objective.

    ``alpha == beta`` is allowed and collapses every weight to that constant,
    which makes the weighted loss coincide with the plain MLE loss.
    ``enabled=False`` selects the plain MLE baseline in the harness.
    """

    alpha: float = 1.0
    beta: float = 5.0
    window: int = 3
    condition: ContrastCondition = field(default_factory=ContrastCondition.full_drop)
    enabled: bool = True
    use_log_probs: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= self.beta:
            raise ConfigError(
                f"clamp bounds need 0 <= alpha <= beta, got [{self.alpha}, {self.beta}]")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"pooling window must be odd and >= 1, got {self.window}")
        self.condition.validate()

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": "inf" if math.isinf(self.beta) else self.beta,
            "window": self.window,
            "condition": self.condition.to_dict(),
            "enabled": self.enabled,
            "use_log_probs": self.use_log_probs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalConfig":
        beta = d.get("beta", 5.0)
        if isinstance(beta, str):
            beta = math.inf if beta.lower() in ("inf", "+inf", "infinity") else float(beta)
        cfg = cls(
            alpha=float(d.get("alpha", 1.0)),
            beta=float(beta),
            window=int(d.get("window", 3)),
            condition=ContrastCondition.from_dict(d.get("condition", {})),
            enabled=bool(d.get("enabled", True)),
            use_log_probs=bool(d.get("use_log_probs", False)),
        )
        cfg.validate()
        return cfg


@dataclass
class TokenWeights:
    """Per-row logit differences and the weights derived from them.

    All arrays share one length: the number of logit rows (labels). Entries
    of ``clamped``/``pooled`` outside the trainable mask are zero and unused.
    """

    delta: np.ndarray
    clamped: np.ndarray
    pooled: np.ndarray
    trainable_mask: np.ndarray

    def mass(self) -> float:
        return float(self.pooled[self.trainable_mask].sum())


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def delta_logits(o_with, o_without, labels) -> np.ndarray:
    """Raw logit difference at each label token: with-image minus without."""
    a, b = _values(o_with), _values(o_without)
    idx = np.asarray(labels, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"logit shapes must match and be 2-D: {a.shape} vs {b.shape}")
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"need one label per row: {idx.shape} for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"label id out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    return a[rows, idx] - b[rows, idx]


def clamp_weights(delta, alpha: float, beta: float) -> np.ndarray:
    """Bound each value into [alpha, beta]; beta may be +inf."""
    if alpha > beta:
        raise ConfigError(f"clamp bounds need alpha <= beta, got [{alpha}, {beta}]")
    return np.clip(np.asarray(delta, dtype=np.float64), alpha, beta)


def pool_weights(w, window: int) -> np.ndarray:
    """Moving average with an odd window that shrinks at the boundaries.

    ``window=1`` is the identity. A window longer than the sequence falls
    back to the full-sequence mean.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"pooling window must be odd and >= 1, got {window}")
    arr = np.asarray(w, dtype=np.float64)
    n = arr.size
    if n == 0 or window == 1:
        return arr.copy()
    if window > n:
        return np.full(n, arr.mean())
    half = window // 2
    out = np.empty(n)
    for j in range(n):
        out[j] = arr[max(0, j - half): min(n, j + half + 1)].mean()
    return out


def compute_token_weights(o_with, o_without, labels, trainable_mask,
                          config: CalConfig) -> TokenWeights:
    """Full weight pipeline: difference, clamp, then pool, in that order.

    Clamping and pooling run on the ordered trainable subsequence only, so
    the smoothing window never mixes prompt rows into response weights.
    """
    config.validate()
    mask = np.asarray(trainable_mask, dtype=bool)
    a, b = _values(o_with), _values(o_without)
    if config.use_log_probs:
        a, b = _log_softmax_np(a), _log_softmax_np(b)
    delta = delta_logits(a, b, labels)
    if mask.shape != delta.shape:
        raise ShapeError(f"mask shape {mask.shape} must match rows {delta.shape}")
    clamped = np.zeros_like(delta)
    pooled = np.zeros_like(delta)
    active = clamp_weights(delta[mask], config.alpha, config.beta)
    clamped[mask] = active
    pooled[mask] = pool_weights(active, config.window)
    return TokenWeights(delta=delta, clamped=clamped, pooled=pooled, trainable_mask=mask)


def cal_loss(o_with: Tensor, labels, weights: TokenWeights,
             tape: Tape | None = None) -> Tensor:
    """Weight-normalized negative log-likelihood over trainable rows.

    The weights enter as constants; gradients flow only through ``o_with``.
    Raises DegenerateSampleError when the pooled weight mass is zero (possible
    only with alpha=0); callers fall back to uniform weights for that sample.
    """
    mask = weights.trainable_mask
    if not mask.any():
        raise DegenerateSampleError("sample has no trainable positions")
    mass = weights.mass()
    if not mass > 0.0:
        raise DegenerateSampleError("pooled weight mass is zero")
    w = np.where(mask, weights.pooled, 0.0)
    log_probs = ad.take_per_row(ad.log_softmax(o_with, tape), labels, tape)
    weighted = ad.multiply(log_probs, Tensor(w), tape)
    return ad.scale(ad.sum_all(weighted, tape), -1.0 / mass, tape)


def mle_loss(o_with: Tensor, labels, trainable_mask,
             tape: Tape | None = None) -> Tensor:
    """Mean negative log-likelihood over trainable rows (the uniform baseline)."""
    mask = np.asarray(trainable_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise DegenerateSampleError("sample has no trainable positions")
    log_probs = ad.take_per_row(ad.log_softmax(o_with, tape), labels, tape)
    picked = ad.multiply(log_probs, Tensor(mask.astype(np.float64)), tape)
    return ad.scale(ad.sum_all(picked, tape), -1.0 / n, tape)


# ---------------------------------------------------------------------------
# weight report (heatmap / histogram export)
# ---------------------------------------------------------------------------

@dataclass
class WeightEntry:
    position: int
    token: str
    kind: str | None
    delta: float | None
    clamped: float | None
    pooled: float | None


@dataclass
class WeightReport:
    """One record per caption token; weights only where the loss uses them."""

    sample_index: int
    entries: list[WeightEntry]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "sample_index": self.sample_index,
            "tokens": [
                {
                    "position": e.position,
                    "token": e.token,
                    "kind": e.kind,
                    "delta": e.delta,
                    "clamped": e.clamped,
                    "pooled": e.pooled,
                }
                for e in self.entries
            ],
        }


def build_weight_report(words: list[str], kinds: list[str | None],
                        weights: TokenWeights, sample_index: int = 0) -> WeightReport:
    """Assemble per-token records from caption words and computed weights.

    ``words``/``kinds`` cover the whole caption; ``weights`` covers the logit
    rows, where row j predicts token j+1. Token 0 is never predicted, so its
    record carries no numbers.
    """
    if len(words) != len(kinds):
        raise ShapeError("words and kinds must have equal length")
    if weights.delta.size != len(words) - 1:
        raise ShapeError(
            f"expected {len(words) - 1} weight rows for {len(words)} tokens, "
            f"got {weights.delta.size}")
    entries = [WeightEntry(0, words[0], kinds[0], None, None, None)]
    for p in range(1, len(words)):
        row = p - 1
        trainable = bool(weights.trainable_mask[row])
        entries.append(WeightEntry(
            position=p,
            token=words[p],
            kind=kinds[p],
            delta=float(weights.delta[row]),
            clamped=float(weights.clamped[row]) if trainable else None,
            pooled=float(weights.pooled[row]) if trainable else None,
        ))
    return WeightReport(sample_index=sample_index, entries=entries)


def write_weight_report(report: WeightReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position", "token", "kind", "delta", "clamped", "pooled"])
            for e in report.entries:
                writer.writerow([
                    e.position, e.token, e.kind if e.kind is not None else "",
                    "" if e.delta is None else repr(e.delta),
                    "" if e.clamped is None else repr(e.clamped),
                    "" if e.pooled is None else repr(e.pooled),
                ])
