"""Small synthetic triplet corpora for smoke tests and desk-scale experiments.

Source words ``s0..s{k-1}`` translate one-to-one into target words via a fixed
permutation, so a "correct" mt or pe is a word-by-word image of src.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .corpus import Corpus, Origin, Triplet


def _lexicon(size: int, seed: int) -> dict:
    perm = np.random.default_rng(seed).permutation(size)
    return {f"s{i}": f"t{int(perm[i])}" for i in range(size)}


def translate(src, lexicon: dict) -> Tuple[str, ...]:
    return tuple(lexicon[w] for w in src)


def post_editing_corpus(n: int, seed: int = 0, vocab: int = 12, min_len: int = 3, max_len: int = 7,
                        error_rate: float = 0.7) -> Corpus:
    """pe is the correct translation of src; mt is pe with (usually) one word substituted."""
    rng = np.random.default_rng(seed)
    lex = _lexicon(vocab, seed)
    targets = sorted(set(lex.values()))
    triplets = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        src = tuple(f"s{int(i)}" for i in rng.integers(0, vocab, size=length))
        pe = translate(src, lex)
        mt = list(pe)
        if rng.random() < error_rate:
            k = int(rng.integers(0, length))
            mt[k] = targets[int(rng.integers(0, len(targets)))]
        triplets.append(Triplet(src, tuple(mt), pe, Origin.OFFICIAL))
    return Corpus(tuple(triplets), "post-editing")


def attention_shift_corpora(n_each: int, seed: int = 0, vocab: int = 10, garbage: int = 6,
                            min_len: int = 3, max_len: int = 6) -> Tuple[Corpus, Corpus]:
    """Two halves with opposite evidence.

    ``keep``: mt is a fluent target sentence unrelated to src, and pe = mt.
    ``fix``: mt is drawn from a disjoint junk vocabulary, and pe is the
    translation of src.
    """
    rng = np.random.default_rng(seed)
    lex = _lexicon(vocab, seed)
    targets = sorted(set(lex.values()))

    def words(prefix_or_pool, length):
        return tuple(prefix_or_pool[int(i)] for i in rng.integers(0, len(prefix_or_pool), size=length))

    src_words = [f"s{i}" for i in range(vocab)]
    junk = [f"x{i}" for i in range(garbage)]
    keep: List[Triplet] = []
    fix: List[Triplet] = []
    for _ in range(n_each):
        src = words(src_words, int(rng.integers(min_len, max_len + 1)))
        mt = words(targets, int(rng.integers(min_len, max_len + 1)))
        keep.append(Triplet(src, mt, mt))
        src = words(src_words, int(rng.integers(min_len, max_len + 1)))
        mt = words(junk, int(rng.integers(min_len, max_len + 1)))
        fix.append(Triplet(src, mt, translate(src, lex)))
    return Corpus(tuple(keep), "keep"), Corpus(tuple(fix), "fix")
