"""The synthetic substrate: scenes, labeled captions, and feature prefixes.

Every response token carries a ground-truth correlation kind, so downstream
claims about which tokens the contrast signal highlights are checkable.
"""

import numpy as np

from calign.data import (
    generate_caption, generate_scene, get_tokenizer, render_features,
    generate_corpus, swap_corrupt,
)
from calign.model import ModelConfig

rng = np.random.default_rng(7)
tok = get_tokenizer()
print(f"closed vocabulary: {tok.size} words\n")

scene = generate_scene(rng)
print("scene attributes:", scene.attributes)

caption = generate_caption(scene, contradiction_rate=1.0, rng=rng)
words = tok.decode(caption.tokens)
print(f"\ncaption ({caption.tokens.size} tokens, prompt_len={caption.prompt_len}):")
for p, (word, kind, slot) in enumerate(zip(words, caption.kinds, caption.slots)):
    tag = kind if kind else "prompt"
    extra = f" <- fills the {slot} slot" if slot else ""
    print(f"  {p:2d} {word:12s} {tag}{extra}")

cfg = ModelConfig()
prefix = render_features(scene, cfg, rng)
print(f"\nvisual prefix: {prefix.features.shape} "
      f"(attribute one-hots + noise block per position)")
print("position 0, first 24 dims (attribute blocks):")
print(np.array2string(prefix.features[0, :24], precision=2))

print("\n== pair-swap corruption ==")
corpus = generate_corpus(10, 0.5, seed=3)
corrupted = swap_corrupt(corpus, 0.4, np.random.default_rng(4))
print(f"corruption log (index pairs): {corrupted.corruption_log}")
for i, (a, b) in enumerate(zip(corpus.samples, corrupted.samples)):
    if b.corrupted:
        print(f"  sample {i}: caption now reads "
              f"{' '.join(tok.decode(b.caption.tokens[b.caption.prompt_len:]))!r}")
