"""Synthetic scenes, labeled captions, and corpora.

A scene is four categorical attributes (color, shape, count, texture). Its
"image" is a block one-hot encoding of those attributes tiled across the
visual prefix, with a small per-position noise block. Captions are filled
templates in a closed 120-word vocabulary where every response token carries
a ground-truth correlation kind:

* correlated    - attribute words derivable from the scene
* irrelevant    - filler drawn independently of the scene
* contradictory - an attribute word replaced by a different value

Prompt tokens precede the response and are never trained or labeled.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, VocabularyError
from .model import ModelConfig, VisualPrefix

CORRELATED = "correlated"
IRRELEVANT = "irrelevant"
CONTRADICTORY = "contradictory"
TOKEN_KINDS = (CORRELATED, IRRELEVANT, CONTRADICTORY)

COLORS = ["red", "green", "blue", "yellow", "purple", "orange", "black", "white"]
SHAPES = ["cube", "sphere", "cone", "cylinder", "pyramid", "torus", "prism", "disk"]
COUNTS = [1, 2, 3, 4]
COUNT_WORDS = ["one", "two", "three", "four"]
TEXTURES = ["matte", "shiny", "striped", "dotted"]

ATTRIBUTE_SLOTS = ("color", "shape", "count", "texture")

_PROMPT_WORDS = [
    "describe", "the", "image", ":", "what", "is", "in", "picture",
    "tell", "me", "about", "scene",
]
_TEMPLATE_WORDS = [
    "there", "are", "a", "of", "on", "against", "shows", "you", "can",
    "see", "placed",
]
FILLER_ADJECTIVES = [
    "simple", "quiet", "tidy", "neutral", "ordinary", "modest", "calm",
    "bare", "clean", "empty", "soft", "gentle", "subtle", "muted", "pale",
    "faint", "mild", "smooth", "still", "open", "wide", "narrow", "distant",
    "usual", "common", "typical", "generic", "standard", "regular", "casual",
    "formal", "minimal", "sparse", "vast", "plain", "cool", "warm", "dim",
    "bright", "flat",
]
FILLER_NOUNS = [
    "room", "area", "space", "field", "corner", "surface", "table", "floor",
    "wall", "board", "frame", "view", "shot", "photo", "layout", "panel",
    "zone", "spot", "stage", "backdrop", "canvas", "sheet", "grid",
    "setting", "background", "desk", "shelf", "mat", "tray", "box",
    "bench", "studio",
]

VOCABULARY = (
    ["<pad>"] + COLORS + SHAPES + COUNT_WORDS + TEXTURES
    + _PROMPT_WORDS + _TEMPLATE_WORDS + FILLER_ADJECTIVES + FILLER_NOUNS
)

PROMPT_TEMPLATES = [
    ["describe", "the", "image", ":"],
    ["what", "is", "in", "the", "picture", ":"],
    ["tell", "me", "about", "the", "scene", ":"],
]

# Response templates: ("lit", word) fixed filler, ("attr", slot) scene
# attribute, ("adj",)/("noun",) independent draws from the filler pools.
RESPONSE_TEMPLATES = [
    [("lit", "there"), ("lit", "are"), ("attr", "count"), ("attr", "texture"),
     ("attr", "color"), ("attr", "shape"), ("lit", "in"), ("lit", "a"),
     ("adj",), ("noun",)],
    [("lit", "a"), ("lit", "picture"), ("lit", "of"), ("attr", "count"),
     ("attr", "color"), ("attr", "texture"), ("attr", "shape"), ("lit", "on"),
     ("lit", "a"), ("adj",), ("noun",)],
    [("lit", "the"), ("lit", "scene"), ("lit", "shows"), ("attr", "count"),
     ("attr", "texture"), ("attr", "color"), ("attr", "shape"),
     ("lit", "against"), ("lit", "a"), ("adj",), ("noun",)],
    [("lit", "you"), ("lit", "can"), ("lit", "see"), ("attr", "count"),
     ("attr", "color"), ("attr", "texture"), ("attr", "shape"),
     ("lit", "placed"), ("lit", "in"), ("lit", "a"), ("adj",), ("noun",)],
]

FEATURE_GAIN = 1.0
FEATURE_NOISE_STD = 0.05
ATTRIBUTE_ENCODING_DIM = len(COLORS) + len(SHAPES) + len(COUNTS) + len(TEXTURES)

_SLOT_VALUES = {
    "color": COLORS,
    "shape": SHAPES,
    "count": COUNTS,
    "texture": TEXTURES,
}


class Tokenizer:
    """Word-level closed-vocabulary tokenizer; round-trips exactly."""

    def __init__(self, words: list[str] | None = None):
        self.words = list(words) if words is not None else list(VOCABULARY)
        if len(set(self.words)) != len(self.words):
            raise ConfigError("vocabulary contains duplicate words")
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def encode(self, words: list[str]) -> np.ndarray:
        return np.array([self.word_id(w) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        out = []
        for i in np.asarray(ids, dtype=np.int64):
            if i < 0 or i >= len(self.words):
                raise VocabularyError(f"token id {int(i)} out of range")
            out.append(self.words[i])
        return out


_TOKENIZER = Tokenizer()


def get_tokenizer() -> Tokenizer:
    return _TOKENIZER


@dataclass
class Scene:
    """Four categorical attributes standing in for an image."""

    attributes: dict
    scene_id: int = 0

    def validate(self) -> None:
        for slot in ATTRIBUTE_SLOTS:
            if slot not in self.attributes:
                raise ConfigError(f"scene missing slot {slot!r}")
            if self.attributes[slot] not in _SLOT_VALUES[slot]:
                raise ConfigError(
                    f"scene {slot}={self.attributes[slot]!r} outside its vocabulary")


def attribute_word(slot: str, value) -> str:
    """The caption word that truthfully describes one scene attribute."""
    if slot == "count":
        return COUNT_WORDS[value - 1]
    return value


@dataclass
class LabeledCaption:
    """Token ids plus per-token ground truth.

    ``kinds[p]`` and ``slots[p]`` are None for prompt positions (p below
    prompt_len); ``slots`` names the attribute slot a token fills, when any.
    """

    tokens: np.ndarray
    kinds: list[str | None]
    slots: list[str | None]
    prompt_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not (len(self.tokens) == len(self.kinds) == len(self.slots)):
            raise ConfigError("tokens, kinds and slots must have equal length")
        if not any(k == CORRELATED for k in self.kinds):
            raise ConfigError("caption must contain at least one correlated token")


@dataclass
class Sample:
    scene: Scene
    caption: LabeledCaption
    feature_seed: int
    corrupted: bool = False


@dataclass
class Corpus:
    samples: list[Sample]
    split: str = "train"
    generation_seed: int = 0
    corruption_log: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def generate_scene(rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Attributes drawn uniformly and independently."""
    return Scene(
        attributes={
            "color": COLORS[rng.integers(len(COLORS))],
            "shape": SHAPES[rng.integers(len(SHAPES))],
            "count": int(rng.integers(1, len(COUNTS) + 1)),
            "texture": TEXTURES[rng.integers(len(TEXTURES))],
        },
        scene_id=scene_id,
    )


def render_features(scene: Scene, config: ModelConfig,
                    rng: np.random.Generator) -> VisualPrefix:
    """Block one-hot encoding of the attributes, tiled over the prefix.

    Attribute blocks are deterministic; only the trailing noise block varies,
    independently per prefix position.
    """
    dim = config.feature_dim
    if dim < ATTRIBUTE_ENCODING_DIM + 1:
        raise ConfigError(
            f"feature_dim must be at least {ATTRIBUTE_ENCODING_DIM + 1} "
            f"(attribute blocks plus a noise block), got {dim}")
    base = np.zeros(dim)
    offset = 0
    base[offset + COLORS.index(scene.attributes["color"])] = FEATURE_GAIN
    offset += len(COLORS)
    base[offset + SHAPES.index(scene.attributes["shape"])] = FEATURE_GAIN
    offset += len(SHAPES)
    base[offset + scene.attributes["count"] - 1] = FEATURE_GAIN
    offset += len(COUNTS)
    base[offset + TEXTURES.index(scene.attributes["texture"])] = FEATURE_GAIN
    feats = np.tile(base, (config.prefix_len, 1))
    feats[:, ATTRIBUTE_ENCODING_DIM:] += rng.normal(
        0.0, FEATURE_NOISE_STD, size=(config.prefix_len, dim - ATTRIBUTE_ENCODING_DIM))
    return VisualPrefix(feats)


def generate_caption(scene: Scene, contradiction_rate: float,
                     rng: np.random.Generator,
                     tokenizer: Tokenizer | None = None) -> LabeledCaption:
    """Fill a random template; maybe corrupt one attribute word.

    With probability ``contradiction_rate`` exactly one attribute word is
    replaced by a different value from the same slot vocabulary and labeled
    contradictory.
    """
    if not 0.0 <= contradiction_rate <= 1.0:
        raise ConfigError("contradiction_rate must lie in [0, 1]")
    tokenizer = tokenizer or get_tokenizer()
    prompt = PROMPT_TEMPLATES[rng.integers(len(PROMPT_TEMPLATES))]
    template = RESPONSE_TEMPLATES[rng.integers(len(RESPONSE_TEMPLATES))]

    words = list(prompt)
    kinds: list[str | None] = [None] * len(prompt)
    slots: list[str | None] = [None] * len(prompt)
    attr_positions = []
    for item in template:
        if item[0] == "lit":
            words.append(item[1])
            kinds.append(IRRELEVANT)
            slots.append(None)
        elif item[0] == "attr":
            slot = item[1]
            attr_positions.append(len(words))
            words.append(attribute_word(slot, scene.attributes[slot]))
            kinds.append(CORRELATED)
            slots.append(slot)
        elif item[0] == "adj":
            words.append(FILLER_ADJECTIVES[rng.integers(len(FILLER_ADJECTIVES))])
            kinds.append(IRRELEVANT)
            slots.append(None)
        else:
            words.append(FILLER_NOUNS[rng.integers(len(FILLER_NOUNS))])
            kinds.append(IRRELEVANT)
            slots.append(None)

    if rng.random() < contradiction_rate:
        pos = attr_positions[rng.integers(len(attr_positions))]
        slot = slots[pos]
        truth = words[pos]
        others = [attribute_word(slot, v) for v in _SLOT_VALUES[slot]
                  if attribute_word(slot, v) != truth]
        words[pos] = others[rng.integers(len(others))]
        kinds[pos] = CONTRADICTORY

    return LabeledCaption(
        tokens=tokenizer.encode(words),
        kinds=kinds,
        slots=slots,
        prompt_len=len(prompt),
    )


def generate_corpus(size: int, contradiction_rate: float, seed: int,
                    split: str = "train") -> Corpus:
    """Deterministic corpus: scenes, captions, and per-sample feature seeds."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(size):
        scene = generate_scene(rng, scene_id=i)
        caption = generate_caption(scene, contradiction_rate, rng)
        feature_seed = int(rng.integers(2 ** 31 - 1))
        samples.append(Sample(scene=scene, caption=caption,
                              feature_seed=feature_seed))
    return Corpus(samples=samples, split=split, generation_seed=seed)


def swap_corrupt(corpus: Corpus, ratio: float, rng: np.random.Generator) -> Corpus:
    """Exchange the captions of randomly selected sample pairs.

    Draws 2*floor(ratio*n/2) distinct indices, pairs them consecutively, and
    swaps captions within each pair. Both members of a pair are flagged
    corrupted, so their kind labels are treated as untrusted downstream.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("swap ratio must lie in [0, 1]")
    n = len(corpus.samples)
    # epsilon guards against float products like 0.3*1000 landing below 300
    n_pairs = int(math.floor(ratio * n / 2.0 + 1e-9))
    if ratio > 0.0 and n_pairs == 0:
        warnings.warn(f"swap ratio {ratio} selects fewer than 2 of {n} samples; no-op")
    new_samples = list(corpus.samples)
    pairs: list[tuple[int, int]] = []
    if n_pairs > 0:
        chosen = rng.permutation(n)[: 2 * n_pairs]
        for p in range(n_pairs):
            i, j = int(chosen[2 * p]), int(chosen[2 * p + 1])
            a, b = new_samples[i], new_samples[j]
            new_samples[i] = replace(a, caption=b.caption, corrupted=True)
            new_samples[j] = replace(b, caption=a.caption, corrupted=True)
            pairs.append((i, j))
    return Corpus(samples=new_samples, split=corpus.split,
                  generation_seed=corpus.generation_seed,
                  corruption_log=list(corpus.corruption_log) + pairs)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class BatchItem:
    """One sample prepared for the model: aligned rows and rendered prefix.

    ``labels[j]`` is the token that logits row j predicts; ``label_kinds``
    and ``label_slots`` are the ground truth of that predicted token.
    """

    sample_index: int
    tokens: np.ndarray
    labels: np.ndarray
    trainable_mask: np.ndarray
    label_kinds: list[str | None]
    label_slots: list[str | None]
    prefix: VisualPrefix
    scene: Scene
    corrupted: bool


def prepare_item(sample: Sample, config: ModelConfig, index: int) -> BatchItem:
    cap = sample.caption
    ids = cap.tokens
    positions = np.arange(1, ids.size)
    return BatchItem(
        sample_index=index,
        tokens=ids,
        labels=ids[1:].copy(),
        trainable_mask=positions >= cap.prompt_len,
        label_kinds=cap.kinds[1:],
        label_slots=cap.slots[1:],
        prefix=render_features(sample.scene, config,
                               np.random.default_rng(sample.feature_seed)),
        scene=sample.scene,
        corrupted=sample.corrupted,
    )


def build_batches(corpus: Corpus, config: ModelConfig, batch_size: int,
                  seed: int) -> list[list[BatchItem]]:
    """One epoch: a seeded shuffle partitioned into batches."""
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    order = np.random.default_rng(seed).permutation(len(corpus.samples))
    batches = []
    for start in range(0, order.size, batch_size):
        batches.append([
            prepare_item(corpus.samples[int(i)], config, int(i))
            for i in order[start: start + batch_size]
        ])
    return batches


# ---------------------------------------------------------------------------
# serialization: line-delimited JSON, one header record then one per sample
# ---------------------------------------------------------------------------

CORPUS_SCHEMA_VERSION = 1


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "version": CORPUS_SCHEMA_VERSION,
            "record": "corpus",
            "split": corpus.split,
            "generation_seed": corpus.generation_seed,
            "corruption_log": [list(p) for p in corpus.corruption_log],
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in corpus.samples:
            row = {
                "version": CORPUS_SCHEMA_VERSION,
                "record": "sample",
                "scene_id": sample.scene.scene_id,
                "attributes": sample.scene.attributes,
                "feature_seed": sample.feature_seed,
                "token_ids": [int(t) for t in sample.caption.tokens],
                "kinds": sample.caption.kinds,
                "slots": sample.caption.slots,
                "prompt_len": sample.caption.prompt_len,
                "corrupted": sample.corrupted,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "corpus":
        raise ConfigError(f"{path} is not a corpus file (missing header record)")
    header = lines[0]
    if header.get("version") != CORPUS_SCHEMA_VERSION:
        raise ConfigError(f"unsupported corpus schema version {header.get('version')}")
    samples = []
    for row in lines[1:]:
        scene = Scene(attributes=row["attributes"], scene_id=row["scene_id"])
        scene.validate()
        caption = LabeledCaption(
            tokens=np.array(row["token_ids"], dtype=np.int64),
            kinds=row["kinds"],
            slots=row["slots"],
            prompt_len=row["prompt_len"],
        )
        samples.append(Sample(scene=scene, caption=caption,
                              feature_seed=row["feature_seed"],
                              corrupted=row["corrupted"]))
    return Corpus(samples=samples, split=header["split"],
                  generation_seed=header["generation_seed"],
                  corruption_log=[tuple(p) for p in header["corruption_log"]])
