"""Aligned (src, mt, pe) triplet corpora."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np


class Origin(str, enum.Enum):
    OFFICIAL = "official"
    ARTIFICIAL = "artificial"


class AlignmentError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    src: Tuple[str, ...]
    mt: Tuple[str, ...]
    pe: Tuple[str, ...]
    origin: Origin = Origin.OFFICIAL

    def __post_init__(self):
        for side in ("src", "mt", "pe"):
            tokens = getattr(self, side)
            if not isinstance(tokens, tuple):
                object.__setattr__(self, side, tuple(tokens))
                tokens = getattr(self, side)
            if not tokens:
                raise CorpusFormatError(f"empty {side} sequence")
            for tok in tokens:
                if not tok or any(ch in tok for ch in "\n\t "):
                    raise CorpusFormatError(f"bad token {tok!r} in {side}")

    @classmethod
    def from_strings(cls, src: str, mt: str, pe: str, origin: Origin = Origin.OFFICIAL) -> "Triplet":
        return cls(tuple(src.split()), tuple(mt.split()), tuple(pe.split()), origin)


@dataclass(frozen=True)
class Corpus:
    triplets: Tuple[Triplet, ...]
    name: str = ""

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def __getitem__(self, idx):
        return self.triplets[idx]

    def side(self, which: str) -> List[Tuple[str, ...]]:
        return [getattr(t, which) for t in self.triplets]


def _read_lines(path: Path) -> List[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    # a single trailing newline terminates the last line; it is not an extra sentence
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel_files(src_path, mt_path, pe_path, origin: Origin = Origin.OFFICIAL,
                        name: str = "") -> Corpus:
    paths = {"src": Path(src_path), "mt": Path(mt_path), "pe": Path(pe_path)}
    sides = {key: _read_lines(p) for key, p in paths.items()}
    n = len(sides["src"])
    for key in ("mt", "pe"):
        if len(sides[key]) != n:
            raise AlignmentError(
                f"{paths[key]} has {len(sides[key])} lines but {paths['src']} has {n}")
    triplets = []
    for i in range(n):
        row = {}
        for key in ("src", "mt", "pe"):
            line = sides[key][i]
            if "\t" in line or "\r" in line:
                raise CorpusFormatError(f"{paths[key]}:{i + 1}: tab or carriage return in sentence")
            if not line.strip():
                raise CorpusFormatError(f"{paths[key]}:{i + 1}: empty line")
            tokens = tuple(line.split(" "))
            if "" in tokens:
                raise CorpusFormatError(f"{paths[key]}:{i + 1}: tokens must be separated by single spaces")
            row[key] = tokens
        triplets.append(Triplet(row["src"], row["mt"], row["pe"], Origin(origin)))
    return Corpus(tuple(triplets), name or paths["src"].stem)


def load_split(prefix, origin: Origin = Origin.OFFICIAL) -> Corpus:
    """Load ``<prefix>.src``, ``<prefix>.mt`` and ``<prefix>.pe``."""
    prefix = str(prefix)
    return load_parallel_files(prefix + ".src", prefix + ".mt", prefix + ".pe", origin,
                               name=Path(prefix).name)


def write_parallel_files(corpus: Corpus, prefix) -> None:
    prefix = str(prefix)
    for side in ("src", "mt", "pe"):
        with open(f"{prefix}.{side}", "w", encoding="utf-8", newline="\n") as fh:
            for tokens in corpus.side(side):
                fh.write(" ".join(tokens) + "\n")


def oversample_and_merge(official: Corpus, artificial: Corpus, factor: int) -> Corpus:
    """Repeat every official triplet ``factor`` times and append the artificial ones.

    Repeats share the same Triplet objects.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"oversampling factor must be a positive integer, got {factor!r}")
    merged = official.triplets * int(factor) + artificial.triplets
    return Corpus(merged, f"{official.name}x{factor}+{artificial.name}")


def epoch_order(corpus: Sequence, seed: int) -> np.ndarray:
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot order an empty corpus")
    return np.random.default_rng(seed).permutation(n)
