"""Beam-search decoding with attention recording."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import (AttentionRecord, Memory, ModelConfig, decoder_step_graph, encode_batch, param_nodes,
                    _as_batch, _check_ids)
from .numerics import Graph
from .subword import BOS_ID, EOS_ID, debpe

log = logging.getLogger(__name__)

# step(prev_ids, states) -> (log-probs (K, V), new states, attention rows (K, L) or None)
StepFn = Callable[[np.ndarray, list], Tuple[np.ndarray, list, Optional[np.ndarray]]]


@dataclass
class Hypothesis:
    ids: List[int]
    score: float
    state: object
    alphas: List[np.ndarray] = field(default_factory=list)
    finished: bool = False


def beam_search_core(step: StepFn, init_state, beam: int, max_len: int, eos_id: int = EOS_ID,
                     bos_id: int = BOS_ID) -> Hypothesis:
    """Keep the ``beam`` best extensions by total log-probability at every step.

    Extensions ending in ``eos_id`` are set aside as finished. Search stops once
    the best finished hypothesis outscores every live one, nothing is live, or
    ``max_len`` tokens have been emitted. Equal scores prefer the lower token id.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis([], 0.0, init_state)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        prev = np.array([h.ids[-1] if h.ids else bos_id for h in live], dtype=np.int64)
        logp, states, alphas = step(prev, [h.state for h in live])
        logp = np.asarray(logp, dtype=np.float64)
        totals = np.array([h.score for h in live])[:, None] + logp
        n_hyp, vocab = totals.shape
        hyp_idx, tok_idx = np.divmod(np.arange(n_hyp * vocab), vocab)
        # lexsort: last key is primary -> highest score, then lower token id, then earlier hypothesis
        ranked = np.lexsort((hyp_idx, tok_idx, -totals.reshape(-1)))[:beam]
        new_live = []
        for flat in ranked:
            k, v = int(hyp_idx[flat]), int(tok_idx[flat])
            parent = live[k]
            hyp = Hypothesis(parent.ids + [v], float(totals[k, v]), states[k],
                             parent.alphas + ([alphas[k]] if alphas is not None else []),
                             finished=(v == eos_id))
            (finished if hyp.finished else new_live).append(hyp)
        live = new_live
        if not live:
            break
        if finished and max(h.score for h in finished) > max(h.score for h in live):
            break
    pool = finished or live
    # max() keeps the first of equal scores, which is the earlier-ranked one
    return max(pool, key=lambda h: h.score)


class ModelStepper:
    """Adapts the neural decoder to :func:`beam_search_core` for one sentence."""

    def __init__(self, params: Dict[str, np.ndarray], config: ModelConfig, src_ids: Sequence[int],
                 mt_ids: Sequence[int]):
        self.params = params
        self.config = config
        g = Graph(grad=False)
        self.P = param_nodes(g, params)
        memory, state = encode_batch(g, self.P, config, _as_batch(src_ids), _as_batch(mt_ids))
        self.memory = memory
        self.init_state = [(h.value[0], c.value[0]) for h, c in state]

    def _memory_for(self, g: Graph, k: int) -> Memory:
        m = self.memory
        keys = g.constant(np.repeat(m.keys.value, k, axis=0))
        values = keys if m.values is m.keys else g.constant(np.repeat(m.values.value, k, axis=0))
        return Memory(keys, values, np.repeat(m.mask, k, axis=0), m.src_len)

    def __call__(self, prev: np.ndarray, states: list):
        g = Graph(grad=False)
        P = {name: g.constant(node.value) for name, node in self.P.items()}
        k = len(prev)
        layers = [(g.constant(np.stack([s[layer][0] for s in states])),
                   g.constant(np.stack([s[layer][1] for s in states])))
                  for layer in range(self.config.dec_layers)]
        new_state, logits, alpha = decoder_step_graph(g, P, self.config, prev, layers, self._memory_for(g, k))
        logp = g.log_softmax(logits).value
        per_hyp = [[(h.value[i], c.value[i]) for h, c in new_state] for i in range(k)]
        return logp, per_hyp, alpha.value


def beam_search(params: Dict[str, np.ndarray], config: ModelConfig, src_ids: Sequence[int], mt_ids: Sequence[int],
                beam: int = 5, max_len: Optional[int] = None) -> Tuple[List[int], AttentionRecord, float]:
    """Best pe id sequence (with ``</s>`` if it finished), its attention record and log-probability."""
    if len(src_ids) == 0 or len(mt_ids) == 0:
        raise ValueError("beam_search needs non-empty src and mt")
    _check_ids(np.asarray(src_ids), config.src_vocab, "src")
    _check_ids(np.asarray(mt_ids), config.mt_vocab, "mt")
    if max_len is None:
        max_len = default_max_len(len(mt_ids))
    stepper = ModelStepper(params, config, src_ids, mt_ids)
    best = beam_search_core(stepper, stepper.init_state, beam, max_len)
    matrix = np.stack(best.alphas, axis=1)
    return best.ids, AttentionRecord(matrix, len(src_ids)), best.score


def default_max_len(mt_len: int) -> int:
    return 2 * mt_len + 10


def score_sequence(params: Dict[str, np.ndarray], config: ModelConfig, src_ids: Sequence[int],
                   mt_ids: Sequence[int], out_ids: Sequence[int]) -> float:
    """Total log-probability of ``out_ids`` (which may end in ``</s>``) under teacher forcing."""
    finished = len(out_ids) > 0 and out_ids[-1] == EOS_ID
    body = list(out_ids[:-1]) if finished else list(out_ids)
    g = Graph(grad=False)
    P = param_nodes(g, params)
    memory, state = encode_batch(g, P, config, _as_batch(src_ids), _as_batch(mt_ids))
    total = 0.0
    prev = BOS_ID
    targets = body + ([EOS_ID] if finished else [])
    for tok in targets:
        state, logits, _ = decoder_step_graph(g, P, config, np.array([prev]), state, memory)
        total += float(g.log_softmax(logits).value[0, tok])
        prev = tok
    return total


@dataclass
class TranslationResult:
    index: int
    tokens: List[str]  # word-level output, markers removed
    record: Optional[AttentionRecord]
    score: float = float("nan")
    error: Optional[str] = None


def translate_corpus(params: Dict[str, np.ndarray], config: ModelConfig, corpus, pre, beam: int = 5,
                     max_len: Optional[int] = None, threads: int = 1) -> List[TranslationResult]:
    """Decode every triplet of ``corpus`` (src and mt are used; pe is ignored).

    ``pre`` is a :class:`~shared_ape.subword.Preprocessor`. A failing sentence
    yields a result with ``error`` set and does not stop the rest. Results keep
    the corpus order whatever the thread count.
    """
    def one(item):
        i, triplet = item
        try:
            src_units, mt_units = pre.segment("src", triplet.src), pre.segment("mt", triplet.mt)
            src_ids, mt_ids = pre.vocabs["src"].encode(src_units), pre.vocabs["mt"].encode(mt_units)
            limit = max_len if max_len is not None else default_max_len(len(mt_ids))
            ids, record, score = beam_search(params, config, src_ids, mt_ids, beam, limit)
            body = ids[:-1] if ids and ids[-1] == EOS_ID else ids
            record.src_tokens, record.mt_tokens = list(src_units), list(mt_units)
            record.pe_tokens = pre.vocabs["pe"].decode(ids)
            return TranslationResult(i, debpe(pre.vocabs["pe"].decode(body), strict=False), record, score)
        except Exception as exc:  # noqa: BLE001 - reported per sentence
            log.warning("sentence %d failed: %s", i, exc)
            return TranslationResult(i, [], None, error=f"sentence {i}: {exc}")

    items = list(enumerate(corpus))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]
