"""Synthetic topic-similarity corpus for desk-scale training.

Words are grouped into topics. Sentence ``a`` draws its words from one
topic; sentence ``b`` takes ``k`` words from the same topic (never the words
used in ``a``) and the rest from other topics. The label is ``k / len(b)``,
so similarity has to be learned from co-occurrence: the two sentences never
share a surface token. Every word has a fixed part-of-speech tag, which lets
the same corpus drive the POS analyses.
"""
from __future__ import annotations

import random

from xjac.trainer import Pair

TAGS = ("NN", "VB", "JJ", "RB")


def topic_words(n_topics: int = 10, words_per_topic: int = 10) -> list[list[str]]:
    return [[f"{TAGS[w % len(TAGS)].lower()}{t}x{w}" for w in range(words_per_topic)] for t in range(n_topics)]


def word_tag(word: str) -> str:
    return word[:2].upper()


def synthetic_pairs(n: int, seed: int = 0, n_topics: int = 10, words_per_topic: int = 10,
                    graded: bool = True) -> list[Pair]:
    """``n`` scored pairs. With ``graded=False`` labels are only 0.0 (disjoint topics) or 1.0."""
    rng = random.Random(seed)
    topics = topic_words(n_topics, words_per_topic)
    pairs = []
    for _ in range(n):
        t = rng.randrange(n_topics)
        len_a = rng.randint(3, 5)
        len_b = rng.randint(3, 4)
        a_words = rng.sample(topics[t], len_a)
        remaining = [w for w in topics[t] if w not in a_words]
        k = rng.randint(0, len_b) if graded else rng.choice((0, len_b))
        b_words = rng.sample(remaining, k)
        others = [w for j, words in enumerate(topics) if j != t for w in words]
        b_words += rng.sample(others, len_b - k)
        rng.shuffle(b_words)
        pairs.append(Pair(" ".join(a_words), " ".join(b_words), k / len_b))
    return pairs


def tags_file_text(pairs: list[Pair]) -> str:
    """CoNLL-like ``word<TAB>tag`` blocks, one block per distinct sentence."""
    seen, blocks = set(), []
    for p in pairs:
        for text in (p.text_a, p.text_b):
            if text in seen:
                continue
            seen.add(text)
            blocks.append("\n".join(f"{w}\t{word_tag(w)}" for w in text.split()))
    return "\n\n".join(blocks) + "\n"
