"""Corpus BLEU and TER over pre-tokenized sentences (case-sensitive, no normalisation)."""

from __future__ import annotations

import math
from collections import Counter
from typing import Dict, List, Sequence, Tuple, Union

Sentence = Union[str, Sequence[str]]

MAX_SHIFT_SIZE = 10
MAX_SHIFT_DIST = 50


def _tokens(s: Sentence) -> Tuple[str, ...]:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def _check_lengths(hyps, refs) -> None:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")


# -- BLEU ----------------------------------------------------------------------


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[str], ref: Sequence[str], max_order: int = 4) -> List[int]:
    """[hyp_len, ref_len, match_1, total_1, ..., match_N, total_N] for one sentence."""
    stats = [len(hyp), len(ref)]
    for n in range(1, max_order + 1):
        h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
        stats.append(sum(min(c, r[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return stats


def bleu_from_stats(stats: Sequence[int], max_order: int = 4) -> float:
    hyp_len, ref_len = stats[0], stats[1]
    if hyp_len == 0:
        return 0.0
    log_prec = 0.0
    for n in range(max_order):
        matches, total = stats[2 + 2 * n], stats[3 + 2 * n]
        if matches == 0 or total == 0:
            return 0.0
        log_prec += math.log(matches / total)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / max_order)


def bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence], max_order: int = 4) -> float:
    """Corpus BLEU in [0, 100]: pooled clipped n-gram precisions, geometric mean, brevity penalty."""
    _check_lengths(hypotheses, references)
    if not references:
        raise ValueError("no references")
    totals = [0] * (2 + 2 * max_order)
    for h, r in zip(hypotheses, references):
        for i, v in enumerate(bleu_stats(_tokens(h), _tokens(r), max_order)):
            totals[i] += v
    return bleu_from_stats(totals, max_order)


# -- TER -----------------------------------------------------------------------


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> int:
    """Word-level Levenshtein distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, hw in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, rw in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (hw != rw))
        prev = cur
    return prev[-1]


def _alignment(hyp: Sequence[str], ref: Sequence[str]):
    """Edit distance plus, from one optimal path: ref position -> hyp position for
    matches/substitutions, and per-position error flags for both sides."""
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, up = d[i], d[i - 1]
        hw = hyp[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j] + 1, row[j - 1] + 1, up[j - 1] + (hw != ref[j - 1]))
    align: Dict[int, int] = {}
    hyp_err = [1] * n
    ref_err = [1] * m
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            align[j - 1] = i - 1
            if hyp[i - 1] == ref[j - 1]:
                hyp_err[i - 1] = ref_err[j - 1] = 0
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    return d[n][m], align, hyp_err, ref_err


def apply_shift(words: Sequence[str], start: int, length: int, dest: int) -> Tuple[str, ...]:
    """Move ``words[start:start+length]`` so that it begins before original index ``dest``."""
    words = tuple(words)
    block = words[start:start + length]
    rest = words[:start] + words[start + length:]
    pos = dest if dest <= start else dest - length
    return rest[:pos] + block + rest[pos:]


def _best_shift(hyp: Tuple[str, ...], ref: Tuple[str, ...], cache: Dict):
    cost, align, hyp_err, ref_err = _alignment(hyp, ref)
    best = None
    for start in range(len(hyp)):
        for rstart in range(len(ref)):
            if abs(rstart - start) > MAX_SHIFT_DIST:
                continue
            length = 0
            while (length < MAX_SHIFT_SIZE and start + length < len(hyp) and rstart + length < len(ref)
                   and hyp[start + length] == ref[rstart + length]):
                length += 1
                # only move words that are currently wrong to a place that is currently wrong
                if not any(hyp_err[start:start + length]) or not any(ref_err[rstart:rstart + length]):
                    continue
                if rstart in align and start <= align[rstart] < start + length:
                    continue
                # candidate landing spots: just after the hyp word aligned to the
                # reference word preceding (or inside) the matched block
                dests = [0] if rstart == 0 else []
                dests += [align[k] + 1 for k in range(rstart - 1, rstart + length) if k in align]
                if rstart + length == len(ref):
                    dests.append(len(hyp))
                tried = set()
                for dest in dests:
                    if dest in tried or start <= dest <= start + length:
                        continue
                    tried.add(dest)
                    shifted = apply_shift(hyp, start, length, dest)
                    new_cost = cache.get(shifted)
                    if new_cost is None:
                        new_cost = cache[shifted] = edit_distance(shifted, ref)
                    key = (cost - new_cost, length, -start, -dest)
                    if best is None or key > best[0]:
                        best = (key, shifted)
    return cost, best


def ter_edits(hyp: Sentence, ref: Sentence) -> Tuple[int, int]:
    """(number of edits including shifts, reference length) for one sentence.

    Shifts are chosen greedily: at every round the block move that most reduces
    the edit distance is applied, until no move reduces it.
    """
    h, r = _tokens(hyp), _tokens(ref)
    if not r:
        raise ValueError("empty reference sentence")
    shifts = 0
    cache: Dict = {}
    while True:
        cost, best = _best_shift(h, r, cache)
        if best is None or best[0][0] <= 0:
            return shifts + cost, len(r)
        h = best[1]
        shifts += 1


def ter(hypotheses: Sequence[Sentence], references: Sequence[Sentence]) -> float:
    """Corpus TER as a percentage: total edits over total reference tokens."""
    _check_lengths(hypotheses, references)
    if not references:
        raise ValueError("no references")
    edits = words = 0
    for h, r in zip(hypotheses, references):
        e, n = ter_edits(h, r)
        edits += e
        words += n
    return 100.0 * edits / words


def sentence_ter(hyp: Sentence, ref: Sentence) -> float:
    e, n = ter_edits(hyp, ref)
    return 100.0 * e / n
