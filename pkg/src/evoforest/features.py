"""Token-frequency feature vectors used for similarity retrieval and diversity.

Vectors are sparse ``dict[str, float]`` maps, L2-normalized. The featurizer
is deterministic so prompts, samples and checkpoints stay reproducible; a
different embedding provider can be plugged in wherever a ``Featurizer`` is
accepted.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Iterable
from typing import Callable

SparseVector = dict[str, float]
Featurizer = Callable[[str], SparseVector]

_TOKEN_RE = re.compile(r"[a-z0-9_]+")
_WS_RE = re.compile(r"\s+")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s")

MAX_KEY_LENGTH = 120


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def term_vector(text: str) -> SparseVector:
    """L2-normalized term-frequency vector of ``text``; empty text gives ``{}``."""
    counts = Counter(tokenize(text))
    norm = math.sqrt(sum(c * c for c in counts.values()))
    if norm == 0.0:
        return {}
    # sorted keys keep JSON dumps and float summation order stable
    return {tok: counts[tok] / norm for tok in sorted(counts)}


def combine(texts: Iterable[str]) -> SparseVector:
    return term_vector("\n".join(texts))


def cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine similarity of two sparse vectors. Zero if either is empty."""
    if not a or not b:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    dot = math.fsum(w * b[t] for t, w in a.items() if t in b)
    na = math.sqrt(math.fsum(w * w for w in a.values()))
    nb = math.sqrt(math.fsum(w * w for w in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, dot / (na * nb)))


def modification_key(summary: str) -> str:
    """Normalize a high-level proposal into a modification identity key.

    First sentence, lowercased, whitespace collapsed, truncated to 120 chars.
    """
    text = _WS_RE.sub(" ", summary.strip())
    first = _SENTENCE_END_RE.split(text, maxsplit=1)[0]
    return first.lower()[:MAX_KEY_LENGTH]
