"""Byte-pair-encoding subwords and per-language vocabularies.

Words start as character sequences in which every non-final character
carries the ``@@`` continuation marker, so ``"low"`` is ``["l@@", "o@@", "w"]``.
Merging ``("l@@", "o@@")`` yields ``"lo@@"``; merging ``("lo@@", "w")`` yields
``"low"``. Removing the markers and joining reconstructs the word.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

MARKER = "@@"
MERGES_HEADER = "#version: toolkit-bpe 1"

UNK, BOS, EOS, PAD = "<unk>", "<s>", "</s>", "<pad>"
SPECIALS = (UNK, BOS, EOS, PAD)
UNK_ID, BOS_ID, EOS_ID, PAD_ID = 0, 1, 2, 3

Pair = Tuple[str, str]


class DanglingContinuationError(ValueError):
    pass


def split_word(word: str) -> List[str]:
    if word.endswith(MARKER):
        # the final unit would end in the marker and be indistinguishable from a continuation
        raise ValueError(f"token {word!r} ends with the continuation marker {MARKER!r}")
    chars = list(word)
    return [c + MARKER for c in chars[:-1]] + chars[-1:]


def merge_units(left: str, right: str) -> str:
    return left[: -len(MARKER)] + right


def _merge_word(units: Sequence[str], pair: Pair, merged: str) -> List[str]:
    out = []
    i = 0
    n = len(units)
    while i < n:
        if i + 1 < n and units[i] == pair[0] and units[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(units[i])
            i += 1
    return out


@dataclass(frozen=True)
class BpeModel:
    merges: Tuple[Pair, ...] = ()
    continuation_marker: str = MARKER
    ranks: Dict[Pair, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        merges = tuple(tuple(p) for p in self.merges)
        object.__setattr__(self, "merges", merges)
        ranks = {pair: i for i, pair in enumerate(merges)}
        if len(ranks) != len(merges):
            raise ValueError("duplicate pair in merge list")
        object.__setattr__(self, "ranks", ranks)

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(MERGES_HEADER + "\n")
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or lines[0] != MERGES_HEADER:
            raise ValueError(f"{path}: missing header {MERGES_HEADER!r}")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(tuple(merges))


def word_counts(lines: Iterable[Sequence[str]]) -> Counter:
    counts: Counter = Counter()
    for tokens in lines:
        counts.update(tokens)
    return counts


def learn_bpe(lines: Iterable[Sequence[str]], num_merges: int, min_frequency: int = 2) -> BpeModel:
    """Greedy BPE over the words of ``lines``.

    At each step the most frequent adjacent pair is merged (ties go to the
    lexicographically smaller pair). Stops after ``num_merges`` merges or when
    no pair occurs ``min_frequency`` times.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    counts = word_counts(lines)
    words: List[List[str]] = []
    freqs: List[int] = []
    for word, freq in sorted(counts.items()):
        words.append(split_word(word))
        freqs.append(freq)

    pair_counts: Dict[Pair, int] = defaultdict(int)
    where: Dict[Pair, set] = defaultdict(set)
    for wi, units in enumerate(words):
        for pair in zip(units, units[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    heap = [(-c, pair) for pair, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: List[Pair] = []
    while len(merges) < num_merges and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if -neg != current:
            # stale entry; the live count was pushed separately
            continue
        if current < min_frequency:
            break
        merges.append(pair)
        merged = merge_units(*pair)
        touched = set()
        for wi in sorted(where.pop(pair, ())):
            units = words[wi]
            for old in zip(units, units[1:]):
                pair_counts[old] -= freqs[wi]
                touched.add(old)
            new_units = _merge_word(units, pair, merged)
            words[wi] = new_units
            for new in zip(new_units, new_units[1:]):
                pair_counts[new] += freqs[wi]
                where[new].add(wi)
                touched.add(new)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
                where.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p))
    return BpeModel(tuple(merges))


def _segment(model: BpeModel, word: str) -> List[str]:
    units = split_word(word)
    ranks = model.ranks
    last = -1
    while len(units) > 1:
        best = None
        for pair in zip(units, units[1:]):
            r = ranks.get(pair)
            if r is not None and r > last and (best is None or r < best):
                best = r
        if best is None:
            break
        pair = model.merges[best]
        units = _merge_word(units, pair, merge_units(*pair))
        last = best
    return units


def apply_bpe(model: BpeModel, tokens: Sequence[str], cache: Dict[str, List[str]] = None) -> List[str]:
    """Split every token into subword units by replaying the merges in priority order."""
    out: List[str] = []
    for tok in tokens:
        if cache is not None:
            seg = cache.get(tok)
            if seg is None:
                seg = cache[tok] = _segment(model, tok)
        else:
            seg = _segment(model, tok)
        out.extend(seg)
    return out


def debpe(units: Sequence[str], strict: bool = True) -> List[str]:
    """Join units back into tokens.

    A trailing continuation unit is an error unless ``strict`` is false, in
    which case it is closed off as a token of its own.
    """
    out: List[str] = []
    pending = ""
    for unit in units:
        if unit.endswith(MARKER):
            pending += unit[: -len(MARKER)]
        else:
            out.append(pending + unit)
            pending = ""
    if units and units[-1].endswith(MARKER):
        if strict:
            raise DanglingContinuationError(f"sequence ends with continuation unit {units[-1]!r}")
        if pending:
            out.append(pending)
    return out


class Vocabulary:
    """Token/id tables with ``<unk> <s> </s> <pad>`` at ids 0-3."""

    def __init__(self, tokens: Sequence[str], counts: Sequence[int] = ()):
        self.itos: List[str] = list(SPECIALS) + list(tokens)
        self.stoi: Dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = i
        self.counts = list(counts) if counts else [0] * len(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        get = self.stoi.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        size = len(self.itos)
        out = []
        for i in ids:
            if not 0 <= i < size:
                raise IndexError(f"id {i} out of range for vocabulary of size {size}")
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok, c in zip(self.itos[len(SPECIALS):], self.counts):
                fh.write(f"{tok}\t{c}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), start=1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>count'")
            tokens.append(parts[0])
            counts.append(int(parts[1]))
        return cls(tokens, counts)

    def digest(self) -> str:
        h = hashlib.sha256()
        for tok in self.itos:
            h.update(tok.encode("utf-8") + b"\n")
        return h.hexdigest()


def build_vocab(lines: Iterable[Sequence[str]], max_size: int = 50000) -> Vocabulary:
    counts = word_counts(lines)
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary([t for t, _ in ranked], [c for _, c in ranked])


def encode_ids(vocab: Vocabulary, tokens: Sequence[str]) -> List[int]:
    return vocab.encode(tokens)


def decode_ids(vocab: Vocabulary, ids: Iterable[int]) -> List[str]:
    return vocab.decode(ids)


@dataclass
class Preprocessor:
    """BPE models and the three vocabularies needed to turn triplet sides into ids.

    With joint BPE the same model is used for every side.
    """

    bpe: Dict[str, BpeModel]
    vocabs: Dict[str, Vocabulary]
    _caches: Dict[str, Dict[str, List[str]]] = field(default_factory=dict, repr=False)

    @classmethod
    def joint(cls, bpe: BpeModel, vocabs: Dict[str, Vocabulary]) -> "Preprocessor":
        return cls({side: bpe for side in ("src", "mt", "pe")}, vocabs)

    @classmethod
    def word_level(cls, vocabs: Dict[str, Vocabulary]) -> "Preprocessor":
        return cls({side: None for side in ("src", "mt", "pe")}, vocabs)

    def segment(self, side: str, tokens: Sequence[str]) -> List[str]:
        if self.bpe.get(side) is None:
            return list(tokens)
        cache = self._caches.setdefault(side, {})
        return apply_bpe(self.bpe[side], tokens, cache)

    def ids(self, side: str, tokens: Sequence[str]) -> List[int]:
        return self.vocabs[side].encode(self.segment(side, tokens))

    def triplet_ids(self, triplet) -> Tuple[List[int], List[int], List[int]]:
        return self.ids("src", triplet.src), self.ids("mt", triplet.mt), self.ids("pe", triplet.pe)
