"""Byte-level corpus handling for the character LSTM, plus the bundled
demo text.

A corpus is a stream of byte tokens with a vocabulary of the distinct bytes
(sorted) and contiguous, ordered train/valid/test splits. The demo corpus is
deterministic generated English-like text so runs are reproducible without
any download.
"""

import hashlib
import random
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ValidationError

DEMO_SENTINEL = "demo"


@dataclass
class Corpus:
    tokens: np.ndarray        # int64 ids over the full stream
    vocab: np.ndarray         # uint8 distinct byte values, sorted
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    checksum: str = ""        # sha256 of the raw bytes

    @property
    def vocab_size(self) -> int:
        return int(self.vocab.size)


def corpus_from_bytes(
    raw: bytes, split_fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
) -> Corpus:
    if len(raw) < 100:
        raise ValidationError("corpus too small (need at least 100 bytes)")
    if len(split_fractions) != 3 or any(f <= 0 for f in split_fractions):
        raise ValidationError("split fractions must be three positive numbers")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValidationError("split fractions must sum to 1")
    data = np.frombuffer(raw, dtype=np.uint8)
    vocab = np.unique(data)
    tokens = np.searchsorted(vocab, data).astype(np.int64)
    n = tokens.size
    t_end = int(n * split_fractions[0])
    v_end = t_end + int(n * split_fractions[1])
    if t_end < 2 or v_end - t_end < 2 or n - v_end < 2:
        raise ValidationError("split fractions leave an empty split")
    return Corpus(
        tokens=tokens,
        vocab=vocab,
        train=tokens[:t_end],
        valid=tokens[t_end:v_end],
        test=tokens[v_end:],
        checksum=hashlib.sha256(raw).hexdigest(),
    )


def load_corpus(path, split_fractions=(0.9, 0.05, 0.05)) -> Corpus:
    """Load a raw-byte corpus file; `demo` resolves to the bundled text."""
    if str(path) == DEMO_SENTINEL:
        raw = demo_text()
    else:
        with open(path, "rb") as f:
            raw = f.read()
    return corpus_from_bytes(raw, tuple(split_fractions))


def demo_text() -> bytes:
    """The bundled demo corpus (generated once, shipped as package data)."""
    return resources.files("iterquant").joinpath("data/demo.txt").read_bytes()


# ---------------------------------------------------------------------------
# demo text generator (used once to produce data/demo.txt, kept for
# regeneration and for synthesizing small test corpora)
# ---------------------------------------------------------------------------

_DETS = ["the", "a", "one", "this", "that", "every", "each", "some"]
_ADJS = [
    "old", "quick", "bright", "small", "quiet", "heavy", "green", "little",
    "sharp", "round", "warm", "cold", "long", "short", "dark", "pale",
    "soft", "hard", "wide", "thin", "deep", "high", "low", "plain",
]
_NOUNS = [
    "fox", "dog", "bird", "stone", "river", "house", "tree", "road",
    "cloud", "fire", "hill", "field", "boat", "wind", "lamp", "door",
    "bridge", "garden", "market", "forest", "valley", "tower", "wall",
    "path", "well", "mill", "barn", "gate", "pond", "meadow", "storm",
    "rain", "snow", "moon", "star", "sun", "night", "morning", "child",
    "farmer",
]
_VERBS = [
    "runs", "walks", "jumps", "sees", "holds", "finds", "keeps", "makes",
    "takes", "gives", "leaves", "meets", "follows", "watches", "carries",
    "crosses", "climbs", "passes", "reaches", "touches", "hears", "calls",
    "builds", "opens", "closes", "moves", "turns", "waits",
]
_TAILS = [
    "slowly", "quickly", "quietly", "at dawn", "at noon", "at night",
    "in the rain", "in the snow", "before long", "once more", "again",
    "without a sound", "all day", "all night",
]


def make_demo_text(seed: int = 1, size: int = 180_000) -> bytes:
    """Deterministic English-like sentences totalling roughly `size` bytes."""
    rng = random.Random(seed)
    out: list[str] = []
    total = 0
    line_len = 0
    while total < size:
        words = [rng.choice(_DETS)]
        if rng.random() < 0.6:
            words.append(rng.choice(_ADJS))
        words.append(rng.choice(_NOUNS))
        words.append(rng.choice(_VERBS))
        if rng.random() < 0.55:
            words.append("the" if rng.random() < 0.5 else "a")
            if rng.random() < 0.4:
                words.append(rng.choice(_ADJS))
            words.append(rng.choice(_NOUNS))
        if rng.random() < 0.5:
            words.append(rng.choice(_TAILS))
        sentence = " ".join(words) + "."
        sep = "\n" if line_len + len(sentence) > 72 else " "
        if not out:
            sep = ""
        out.append(sep + sentence)
        line_len = len(sentence) if sep == "\n" else line_len + len(sep) + len(sentence)
        total += len(sentence) + 1
    return "".join(out).encode("ascii")
