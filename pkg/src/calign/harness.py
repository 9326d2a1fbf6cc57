"""Experiment driver: training loop, evaluation, ablation sweeps, exports.

A run is fully determined by its config and seed. Training has two phases
mirroring the usual projector-then-full-model schedule: a warmup that updates
only the visual projector, then a full fine-tune; the re-weighted loss can be
switched on per phase.

Metric CSVs contain only deterministic columns so a re-run reproduces them
byte for byte; wall-clock timings go to the JSON run manifest instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Adam, Tape, backward
from .data import (
    CONTRADICTORY, CORRELATED, IRRELEVANT, BatchItem, Corpus, Sample,
    attribute_word, build_batches, generate_corpus, get_tokenizer,
    prepare_item, swap_corrupt,
)
from .errors import ConfigError, DegenerateSampleError, NonFiniteError
from .loss import (
    CalConfig, build_weight_report, cal_loss, compute_token_weights,
    mle_loss, write_weight_report,
)
from .model import (
    FULL_DROP, ContrastCondition, ModelConfig, ModelParams, apply_condition,
    forward, forward_contrast, init_params, load_checkpoint, save_checkpoint,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    corpus_size: int = 2000
    contradiction_rate: float = 0.5
    swap_ratio: float = 0.0
    eval_size: int = 400

    def validate(self) -> None:
        if self.corpus_size < 1 or self.eval_size < 1:
            raise ConfigError("corpus_size and eval_size must be positive")
        if not 0.0 <= self.contradiction_rate <= 1.0:
            raise ConfigError("contradiction_rate must lie in [0, 1]")
        if not 0.0 <= self.swap_ratio <= 1.0:
            raise ConfigError("swap_ratio must lie in [0, 1]")


@dataclass
class OptimConfig:
    lr: float = 3e-4
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    eval_every: int | None = None
    pt_fraction: float = 0.1

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if not 0.0 <= self.pt_fraction <= 1.0:
            raise ConfigError("pt_fraction must lie in [0, 1]")

    def resolved_eval_every(self) -> int:
        return self.eval_every if self.eval_every is not None else max(1, self.steps // 8)


@dataclass
class StageFlags:
    """Whether the re-weighted loss is active in each training phase."""

    cal_in_pt: bool = True
    cal_in_it: bool = True


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cal: CalConfig = field(default_factory=CalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage_flags: StageFlags = field(default_factory=StageFlags)
    output_dir: str | None = None
    init_checkpoint: str | None = None  # resume weights instead of seeding

    def validate(self) -> None:
        self.model.validate()
        self.cal.validate()
        self.data.validate()
        self.optim.validate()

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "cal": self.cal.to_dict(),
            "data": {
                "corpus_size": self.data.corpus_size,
                "contradiction_rate": self.data.contradiction_rate,
                "swap_ratio": self.data.swap_ratio,
                "eval_size": self.data.eval_size,
            },
            "optim": {
                "lr": self.optim.lr,
                "steps": self.optim.steps,
                "batch_size": self.optim.batch_size,
                "seed": self.optim.seed,
                "eval_every": self.optim.eval_every,
                "pt_fraction": self.optim.pt_fraction,
            },
            "stage_flags": {
                "cal_in_pt": self.stage_flags.cal_in_pt,
                "cal_in_it": self.stage_flags.cal_in_it,
            },
            "output_dir": self.output_dir,
            "init_checkpoint": self.init_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            cfg = cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                cal=CalConfig.from_dict(d.get("cal", {})),
                data=DataConfig(**d.get("data", {})),
                optim=OptimConfig(**d.get("optim", {})),
                stage_flags=StageFlags(**d.get("stage_flags", {})),
                output_dir=d.get("output_dir"),
                init_checkpoint=d.get("init_checkpoint"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    """Evaluation snapshot. All accuracies lie in [0, 1].

    ``acc_contradictory_true`` scores contradictory-labeled positions against
    the true scene attribute, i.e. whether the model resisted the corrupted
    label. Logit-difference means are per ground-truth kind, with counts.
    """

    step: int
    train_loss: float
    acc_overall: float
    acc_correlated: float
    acc_contradictory_true: float
    delta_mean_correlated: float
    delta_mean_irrelevant: float
    delta_mean_contradictory: float
    n_correlated: int
    n_irrelevant: int
    n_contradictory: int
    auc_correlated_contradictory: float
    wall_clock: float = 0.0


METRICS_CSV_COLUMNS = [
    "step", "train_loss", "acc_overall", "acc_correlated",
    "acc_contradictory_true", "delta_mean_correlated", "delta_mean_irrelevant",
    "delta_mean_contradictory", "n_correlated", "n_irrelevant",
    "n_contradictory", "auc_correlated_contradictory",
]  # wall_clock is intentionally absent: it would break byte-identical re-runs


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_COLUMNS)
        for r in records:
            writer.writerow([_fmt(getattr(r, c)) for c in METRICS_CSV_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rank_auc(positives: np.ndarray, negatives: np.ndarray) -> float:
    """Probability a positive scores above a negative (ties count half)."""
    if positives.size == 0 or negatives.size == 0:
        return math.nan
    ranks = rankdata(np.concatenate([positives, negatives]))
    n_pos, n_neg = positives.size, negatives.size
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(params: ModelParams, corpus: Corpus,
             condition: ContrastCondition = FULL_DROP,
             use_log_probs: bool = False, step: int = 0,
             train_loss: float = math.nan,
             condition_seed: int = 0) -> MetricsRecord:
    """Teacher-forced next-token accuracy and logit-difference statistics.

    Per-kind statistics skip samples whose captions were swapped onto a
    foreign image (their kind labels are untrusted). No parameters change.
    """
    t0 = time.perf_counter()
    tokenizer = get_tokenizer()
    cfg = params.config
    rng = np.random.default_rng(condition_seed)
    hits = total = 0
    corr_hits = corr_total = 0
    contra_hits = contra_total = 0
    deltas: dict[str, list[float]] = {CORRELATED: [], IRRELEVANT: [], CONTRADICTORY: []}

    for index, sample in enumerate(corpus.samples):
        item = prepare_item(sample, cfg, index)
        n = item.labels.size
        o_with = forward(params, item.tokens, item.prefix).data[:n]
        preds = o_with.argmax(axis=1)
        mask = item.trainable_mask
        hits += int((preds[mask] == item.labels[mask]).sum())
        total += int(mask.sum())
        if item.corrupted:
            continue
        o_without = forward(
            params, item.tokens,
            apply_condition(item.prefix, condition, rng)).data[:n]
        if use_log_probs:
            from .loss import _log_softmax_np
            o_w, o_wo = _log_softmax_np(o_with), _log_softmax_np(o_without)
        else:
            o_w, o_wo = o_with, o_without
        rows = np.arange(n)
        delta = o_w[rows, item.labels] - o_wo[rows, item.labels]
        for j in range(n):
            if not mask[j]:
                continue
            kind = item.label_kinds[j]
            deltas[kind].append(float(delta[j]))
            if kind == CORRELATED:
                corr_total += 1
                corr_hits += int(preds[j] == item.labels[j])
            elif kind == CONTRADICTORY:
                true_id = tokenizer.word_id(attribute_word(
                    item.label_slots[j], item.scene.attributes[item.label_slots[j]]))
                contra_total += 1
                contra_hits += int(preds[j] == true_id)

    def mean(xs):
        return float(np.mean(xs)) if xs else math.nan

    return MetricsRecord(
        step=step,
        train_loss=train_loss,
        acc_overall=hits / total if total else math.nan,
        acc_correlated=corr_hits / corr_total if corr_total else math.nan,
        acc_contradictory_true=contra_hits / contra_total if contra_total else math.nan,
        delta_mean_correlated=mean(deltas[CORRELATED]),
        delta_mean_irrelevant=mean(deltas[IRRELEVANT]),
        delta_mean_contradictory=mean(deltas[CONTRADICTORY]),
        n_correlated=len(deltas[CORRELATED]),
        n_irrelevant=len(deltas[IRRELEVANT]),
        n_contradictory=len(deltas[CONTRADICTORY]),
        auc_correlated_contradictory=rank_auc(
            np.array(deltas[CORRELATED]), np.array(deltas[CONTRADICTORY])),
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def _sample_loss(params, item: BatchItem, cal_cfg: CalConfig, use_cal: bool,
                 rng_cond, tape: Tape):
    """Loss tensor for one sample; returns (loss, weights or None, fell_back)."""
    n = item.labels.size
    if use_cal:
        o_with, o_without = forward_contrast(
            params, item.tokens, item.prefix, cal_cfg.condition, rng_cond, tape)
        rows = ad.slice_rows(o_with, 0, n, tape)
        weights = compute_token_weights(
            o_with.data[:n], o_without.data[:n], item.labels,
            item.trainable_mask, cal_cfg)
        try:
            return cal_loss(rows, item.labels, weights, tape), weights, False
        except DegenerateSampleError:
            # zero weight mass (alpha=0, all differences clamped away):
            # train this sample uniformly instead of crashing
            return mle_loss(rows, item.labels, item.trainable_mask, tape), weights, True
    o_with = forward(params, item.tokens, item.prefix, tape=tape)
    rows = ad.slice_rows(o_with, 0, n, tape)
    return mle_loss(rows, item.labels, item.trainable_mask, tape), None, False


def run_train_step(params: ModelParams, batch: list[BatchItem],
                   cal_cfg: CalConfig, use_cal: bool, opt: Adam,
                   rng_cond: np.random.Generator) -> tuple[float, int]:
    """One optimizer step over a batch; returns (loss value, fallback count)."""
    tape = Tape()
    opt.zero_grad()
    total = None
    fallbacks = 0
    per_sample = []
    for item in batch:
        sample_loss, weights, fell_back = _sample_loss(
            params, item, cal_cfg, use_cal, rng_cond, tape)
        fallbacks += int(fell_back)
        per_sample.append((item, sample_loss, weights))
        total = sample_loss if total is None else ad.add(total, sample_loss, tape)
    batch_loss = ad.scale(total, 1.0 / len(batch), tape)
    value = batch_loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(_nonfinite_message(per_sample))
    backward(batch_loss, tape)
    opt.step()
    return value, fallbacks


def _nonfinite_message(per_sample) -> str:
    worst = [
        {
            "sample_index": item.sample_index,
            "loss": s.item(),
            "tokens": [int(t) for t in item.tokens],
            "weights": None if w is None else build_weight_report(
                get_tokenizer().decode(item.tokens),
                [None] + list(item.label_kinds), w, item.sample_index).to_dict(),
        }
        for item, s, w in per_sample
    ]
    return "non-finite batch loss; diagnostics: " + json.dumps(worst)


def _dump_diagnostics(exc: NonFiniteError, out_dir: Path, step: int) -> None:
    payload = str(exc)
    marker = "diagnostics: "
    body = payload[payload.index(marker) + len(marker):] if marker in payload else "[]"
    path = out_dir / f"diagnostics_step{step}.json"
    path.write_text(json.dumps({"step": step, "batch": json.loads(body)}, indent=2))


def train(config: ExperimentConfig) -> tuple[ModelParams, list[MetricsRecord]]:
    """Projector warmup then full fine-tune; deterministic per seed.

    Writes metrics.csv, final.ckpt and manifest.json into ``output_dir`` when
    one is configured. Aborts with NonFiniteError (after dumping the
    offending batch's weight reports) if a loss goes non-finite.
    """
    config.validate()
    t_start = time.perf_counter()
    seq = np.random.SeedSequence(config.optim.seed)
    s_init, s_train, s_eval, s_swap, s_cond, s_batch = seq.spawn(6)

    train_corpus = generate_corpus(
        config.data.corpus_size, config.data.contradiction_rate,
        _seed_int(s_train), split="train")
    if config.data.swap_ratio > 0.0:
        train_corpus = swap_corrupt(
            train_corpus, config.data.swap_ratio,
            np.random.default_rng(_seed_int(s_swap)))
    eval_corpus = generate_corpus(
        config.data.eval_size, config.data.contradiction_rate,
        _seed_int(s_eval), split="eval")

    if config.init_checkpoint:
        params = load_checkpoint(config.init_checkpoint)
        if params.config != config.model:
            raise ConfigError(
                f"checkpoint {config.init_checkpoint} was written for a "
                f"different model config")
    else:
        params = init_params(config.model, _seed_int(s_init))
    rng_cond = np.random.default_rng(_seed_int(s_cond))
    batch_seed_base = _seed_int(s_batch)

    steps = config.optim.steps
    pt_steps = int(round(config.optim.pt_fraction * steps))
    it_steps = steps - pt_steps
    eval_every = config.optim.resolved_eval_every()

    stages = []
    if pt_steps > 0:
        stages.append(("pt", pt_steps, params.projector(),
                       config.cal.enabled and config.stage_flags.cal_in_pt))
    if it_steps > 0:
        stages.append(("it", it_steps, params.tensors(),
                       config.cal.enabled and config.stage_flags.cal_in_it))

    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records: list[MetricsRecord] = []
    fallback_count = 0
    global_step = 0
    loss_window: list[float] = []
    epoch = 0
    batches: list[list[BatchItem]] = []
    batch_pos = 0

    for _, n_steps, tensors, use_cal in stages:
        opt = Adam(tensors, lr=config.optim.lr)
        for _ in range(n_steps):
            if batch_pos >= len(batches):
                batches = build_batches(
                    train_corpus, config.model, config.optim.batch_size,
                    seed=(batch_seed_base + epoch) % (2 ** 63))
                batch_pos = 0
                epoch += 1
            batch = batches[batch_pos]
            batch_pos += 1
            try:
                value, fallbacks = run_train_step(
                    params, batch, config.cal, use_cal, opt, rng_cond)
            except NonFiniteError as exc:
                if out_dir is not None:
                    _dump_diagnostics(exc, out_dir, global_step)
                raise
            fallback_count += fallbacks
            loss_window.append(value)
            global_step += 1
            if global_step % eval_every == 0 or global_step == steps:
                record = evaluate(
                    params, eval_corpus, step=global_step,
                    train_loss=float(np.mean(loss_window)))
                records.append(record)
                loss_window = []

    if out_dir is not None:
        metrics_path = out_dir / "metrics.csv"
        write_metrics_csv(records, metrics_path)
        ckpt_path = out_dir / "final.ckpt"
        save_checkpoint(params, ckpt_path)
        digest = hashlib.sha256(metrics_path.read_bytes()
                                + ckpt_path.read_bytes()).hexdigest()
        manifest = {
            "config": config.to_dict(),
            "seed": config.optim.seed,
            "content_hash": digest,
            "fallback_count": fallback_count,
            "wall_clock_s": time.perf_counter() - t_start,
            "n_params": params.n_params(),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return params, records


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

def _cell_config(base: ExperimentConfig, out_dir, name: str,
                 **updates) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(base.to_dict())
    if "swap_ratio" in updates:
        cfg.data.swap_ratio = updates["swap_ratio"]
    if "enabled" in updates:
        cfg.cal.enabled = updates["enabled"]
    if "alpha" in updates:
        cfg.cal.alpha = updates["alpha"]
    if "beta" in updates:
        cfg.cal.beta = updates["beta"]
    if "condition" in updates:
        cfg.cal.condition = updates["condition"]
    if "seed" in updates:
        cfg.optim.seed = updates["seed"]
    cfg.output_dir = str(Path(out_dir) / "cells" / name) if out_dir else None
    cfg.validate()
    return cfg


def _write_rows(rows: list[dict], path) -> None:
    if not rows:
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        columns = list(rows[0].keys())
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def sweep_noise(base: ExperimentConfig, ratios=(0.0, 0.1, 0.2, 0.3),
                n_seeds: int = 3, out_dir=None) -> list[dict]:
    """Caption-swap noise sweep: baseline vs re-weighted at each ratio.

    Emits one aggregated row per (ratio, method) with the seed-median
    correlated-token accuracy, plus a per-run detail CSV.
    """
    rows: list[dict] = []
    runs: list[dict] = []
    for ratio in ratios:
        for method, enabled in (("baseline", False), ("cal", True)):
            accs, overall = [], []
            for k in range(n_seeds):
                name = f"ratio{ratio:g}_{method}_seed{k}"
                cfg = _cell_config(base, out_dir, name, swap_ratio=ratio,
                                   enabled=enabled, seed=base.optim.seed + k)
                _, records = train(cfg)
                final = records[-1]
                accs.append(final.acc_correlated)
                overall.append(final.acc_overall)
                runs.append({
                    "ratio": ratio, "method": method, "seed": cfg.optim.seed,
                    "acc_correlated": final.acc_correlated,
                    "acc_overall": final.acc_overall,
                    "auc": final.auc_correlated_contradictory,
                })
            rows.append({
                "ratio": ratio, "method": method, "n_seeds": n_seeds,
                "acc_correlated_median": statistics.median(accs),
                "acc_overall_median": statistics.median(overall),
            })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_rows(rows, Path(out_dir) / "noise_sweep.csv")
        _write_rows(runs, Path(out_dir) / "noise_sweep_runs.csv")
    return rows


def noise_degradation(rows: list[dict], method: str) -> float:
    """Median correlated accuracy drop from the lowest to the highest ratio."""
    cells = [r for r in rows if r["method"] == method]
    cells.sort(key=lambda r: r["ratio"])
    return cells[0]["acc_correlated_median"] - cells[-1]["acc_correlated_median"]


def grid_clamp(base: ExperimentConfig,
               settings=((0.0, math.inf), (0.0, 5.0), (1.0, math.inf), (1.0, 5.0)),
               n_seeds: int = 3, out_dir=None) -> list[dict]:
    """Clamp-bound grid plus the unweighted baseline; one row per setting."""
    rows: list[dict] = []
    runs: list[dict] = []
    cells = [("baseline", None)] + [(f"[{a:g},{b:g}]", (a, b)) for a, b in settings]
    for name, bounds in cells:
        accs = []
        for k in range(n_seeds):
            cell_name = f"clamp_{name}_seed{k}".replace("[", "").replace("]", "").replace(",", "_")
            if bounds is None:
                cfg = _cell_config(base, out_dir, cell_name, enabled=False,
                                   seed=base.optim.seed + k)
            else:
                cfg = _cell_config(base, out_dir, cell_name, enabled=True,
                                   alpha=bounds[0], beta=bounds[1],
                                   seed=base.optim.seed + k)
            _, records = train(cfg)
            final = records[-1]
            accs.append(final.acc_correlated)
            runs.append({"setting": name, "seed": cfg.optim.seed,
                         "acc_correlated": final.acc_correlated,
                         "acc_overall": final.acc_overall})
        rows.append({
            "setting": name,
            "alpha": "" if bounds is None else bounds[0],
            "beta": "" if bounds is None else ("inf" if math.isinf(bounds[1]) else bounds[1]),
            "n_seeds": n_seeds,
            "acc_correlated_median": statistics.median(accs),
            "acc_correlated_std": float(np.std(accs, ddof=1)) if n_seeds > 1 else 0.0,
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_rows(rows, Path(out_dir) / "clamp_grid.csv")
        _write_rows(runs, Path(out_dir) / "clamp_grid_runs.csv")
    return rows


def grid_condition(base: ExperimentConfig, n_seeds: int = 3,
                   out_dir=None) -> list[dict]:
    """One training run per contrast condition; reports accuracy and the
    per-kind separation AUC measured under that same condition."""
    conditions = [
        ContrastCondition.full_drop(),
        ContrastCondition.patch_mask(0.5),
        ContrastCondition.patch_mask(0.7),
        ContrastCondition.patch_mask(0.9),
        ContrastCondition.gaussian_perturb(1.0),
        ContrastCondition.gaussian_perturb(10.0),
    ]
    rows: list[dict] = []
    for cond in conditions:
        accs, aucs = [], []
        for k in range(n_seeds):
            name = f"cond_{cond.describe()}_seed{k}".replace("(", "_").replace(")", "").replace("=", "")
            cfg = _cell_config(base, out_dir, name, enabled=True,
                               condition=cond, seed=base.optim.seed + k)
            params, records = train(cfg)
            final = records[-1]
            eval_corpus = generate_corpus(
                cfg.data.eval_size, cfg.data.contradiction_rate,
                _seed_int(np.random.SeedSequence(cfg.optim.seed).spawn(6)[2]),
                split="eval")
            under_cond = evaluate(params, eval_corpus, condition=cond)
            accs.append(final.acc_correlated)
            aucs.append(under_cond.auc_correlated_contradictory)
        rows.append({
            "condition": cond.describe(),
            "n_seeds": n_seeds,
            "acc_correlated_median": statistics.median(accs),
            "separation_auc_median": statistics.median(aucs),
        })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_rows(rows, Path(out_dir) / "condition_grid.csv")
    return rows


# ---------------------------------------------------------------------------
# exports and benchmarks
# ---------------------------------------------------------------------------

def export_heatmap(params: ModelParams, sample: Sample, cal_cfg: CalConfig,
                   json_path=None, csv_path=None, sample_index: int = 0,
                   condition_seed: int = 0):
    """Per-token weight report for one sample, exactly as the loss would use it."""
    item = prepare_item(sample, params.config, sample_index)
    n = item.labels.size
    rng = np.random.default_rng(condition_seed)
    o_with = forward(params, item.tokens, item.prefix)
    o_without = forward(params, item.tokens,
                        apply_condition(item.prefix, cal_cfg.condition, rng))
    weights = compute_token_weights(
        o_with.data[:n], o_without.data[:n], item.labels,
        item.trainable_mask, cal_cfg)
    report = build_weight_report(
        get_tokenizer().decode(item.tokens), sample.caption.kinds,
        weights, sample_index)
    write_weight_report(report, json_path=json_path, csv_path=csv_path)
    return report, weights


def weight_histogram(params: ModelParams, corpus: Corpus, cal_cfg: CalConfig,
                     n_samples: int = 100, seed: int = 0,
                     json_path=None, csv_path=None) -> dict:
    """Distribution of the raw logit differences over sampled label tokens.

    Reports the fraction of label tokens whose difference falls below 5,
    with a 95% normal-approximation confidence interval.
    """
    rng = np.random.default_rng(seed)
    count = min(n_samples, len(corpus.samples))
    chosen = rng.choice(len(corpus.samples), size=count, replace=False)
    deltas: list[float] = []
    for index in sorted(int(i) for i in chosen):
        item = prepare_item(corpus.samples[index], params.config, index)
        n = item.labels.size
        o_with = forward(params, item.tokens, item.prefix).data[:n]
        o_without = forward(
            params, item.tokens,
            apply_condition(item.prefix, cal_cfg.condition, rng)).data[:n]
        rows = np.arange(n)
        delta = o_with[rows, item.labels] - o_without[rows, item.labels]
        deltas.extend(float(d) for d in delta[item.trainable_mask])
    values = np.array(deltas)
    lo = math.floor(values.min()) if values.size else 0
    hi = math.ceil(values.max()) if values.size else 1
    edges = np.arange(lo, hi + 1, dtype=float)
    if edges.size < 2:
        edges = np.array([lo, lo + 1], dtype=float)
    counts, edges = np.histogram(values, bins=edges)
    frac = float((values < 5.0).mean()) if values.size else math.nan
    half = 1.96 * math.sqrt(max(frac * (1 - frac), 0.0) / values.size) if values.size else math.nan
    result = {
        "version": 1,
        "n_samples": count,
        "n_tokens": int(values.size),
        "fraction_below_5": frac,
        "ci95": [frac - half, frac + half],
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
    }
    if json_path is not None:
        Path(json_path).write_text(json.dumps(result, indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for i, c in enumerate(counts):
                writer.writerow([_fmt(float(edges[i])), _fmt(float(edges[i + 1])), c])
    return result


def bench_overhead(config: ExperimentConfig, trials: int = 50) -> dict:
    """Wall-time of one full training step with vs without the extra pass.

    Each arm gets its own parameter copy and optimizer; both see the same
    fixed batch. Reports per-arm means, standard deviations and the ratio.
    """
    config.validate()
    corpus = generate_corpus(
        max(config.optim.batch_size, 2), config.data.contradiction_rate,
        _seed_int(np.random.SeedSequence(config.optim.seed).spawn(6)[1]))
    batch = build_batches(corpus, config.model, config.optim.batch_size, seed=0)[0]

    def time_arm(use_cal: bool) -> list[float]:
        params = init_params(config.model, config.optim.seed)
        opt = Adam(params.tensors(), lr=config.optim.lr)
        rng_cond = np.random.default_rng(0)
        for _ in range(3):  # warmup
            run_train_step(params, batch, config.cal, use_cal, opt, rng_cond)
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            run_train_step(params, batch, config.cal, use_cal, opt, rng_cond)
            times.append(time.perf_counter() - t0)
        return times

    without = time_arm(False)
    with_cal = time_arm(True)
    return {
        "trials": trials,
        "without_cal_mean_s": float(np.mean(without)),
        "without_cal_std_s": float(np.std(without)),
        "with_cal_mean_s": float(np.mean(with_cal)),
        "with_cal_std_s": float(np.std(with_cal)),
        "ratio": float(np.mean(with_cal) / np.mean(without)),
    }
