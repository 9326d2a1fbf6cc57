"""Inspect the weight pipeline on a trained model, token by token.

Trains briefly, then prints the per-token table the loss actually uses:
the raw logit difference, the clamped value, and the pooled weight. Ends
with the histogram summary used to justify the default upper bound.
"""

from calign.data import generate_corpus
from calign.harness import (
    DataConfig, ExperimentConfig, OptimConfig, export_heatmap, train,
    weight_histogram,
)
from calign.loss import CalConfig
from calign.model import ModelConfig

cfg = ExperimentConfig(
    model=ModelConfig(d_model=48, n_layers=2, n_heads=4),
    cal=CalConfig(enabled=False),
    data=DataConfig(corpus_size=800, eval_size=100),
    optim=OptimConfig(steps=600, batch_size=16, seed=1, eval_every=600),
)
print("training a small model (~60s)...")
params, _ = train(cfg)

corpus = generate_corpus(100, 1.0, seed=123, split="eval")
report, _ = export_heatmap(params, corpus.samples[0], CalConfig())
print("\nper-token weight report (first eval sample, one contradictory token):")
print(f"{'pos':>3} {'token':12} {'kind':14} {'delta':>8} {'clamped':>8} {'pooled':>8}")
for e in report.entries:
    fmt = lambda v: "      --" if v is None else f"{v:8.3f}"
    print(f"{e.position:3d} {e.token:12} {e.kind or 'prompt':14} "
          f"{fmt(e.delta)} {fmt(e.clamped)} {fmt(e.pooled)}")

hist = weight_histogram(params, corpus, CalConfig(), n_samples=100, seed=0)
print(f"\nlogit-difference distribution over {hist['n_tokens']} label tokens:")
lo, hi = hist["ci95"]
print(f"fraction below 5: {hist['fraction_below_5']:.3f} "
      f"(95% CI [{lo:.3f}, {hi:.3f}])")
edges, counts = hist["bin_edges"], hist["counts"]
peak = max(counts) or 1
for i, c in enumerate(counts):
    bar = "#" * round(40 * c / peak)
    print(f"[{edges[i]:+5.1f}, {edges[i + 1]:+5.1f}) {c:5d} {bar}")
