"""Dual-encoder encoder-decoder with one attention shared by both encoders.

src and mt each go through their own stacked bidirectional LSTM. The top-layer
vectors of both are laid end to end (src first) and a single softmax over all
N + M positions gives the attention weights at every decoder step, so the
weights on src and mt always add up to one.

Batched tensors are laid out (batch, time, features). Padding is masked by
sentence length: the encoder carries its state unchanged through padded
positions and the attention gives them zero weight.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import DimensionError, Graph, Node, init_uniform
from .subword import BOS_ID, EOS_ID, PAD_ID

State = List[Tuple[Node, Node]]  # (h, c) per decoder layer


class Variant(str, enum.Enum):
    SHARED = "shared"
    PROJECTED = "projected"


@dataclass
class ModelConfig:
    word_dim: int = 300
    enc_hidden: int = 500
    dec_hidden: int = 500
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.3
    attention_kind: str = "general"
    variant: Variant = Variant.SHARED
    src_vocab: int = 0
    mt_vocab: int = 0
    pe_vocab: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        for name in ("word_dim", "enc_hidden", "dec_hidden", "enc_layers", "dec_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.enc_hidden % 2:
            raise ValueError("enc_hidden must be even (split across two directions)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.attention_kind != "general":
            raise ValueError(f"unsupported attention kind {self.attention_kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class JoinedStates:
    """Top-layer encoder vectors, src positions first."""

    vectors: np.ndarray  # (N + M, enc_hidden)
    boundary: int

    def __post_init__(self):
        if not 0 <= self.boundary <= len(self.vectors):
            raise ValueError("boundary outside [0, N + M]")

    @property
    def src(self) -> np.ndarray:
        return self.vectors[: self.boundary]

    @property
    def mt(self) -> np.ndarray:
        return self.vectors[self.boundary:]


@dataclass
class AttentionRecord:
    """Attention weights, one column per emitted pe token, rows src then mt."""

    matrix: np.ndarray  # (N + M, T_out)
    boundary: int
    src_tokens: List[str] = field(default_factory=list)
    mt_tokens: List[str] = field(default_factory=list)
    pe_tokens: List[str] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.matrix.shape[1]

    @property
    def row_labels(self) -> List[str]:
        return list(self.src_tokens) + list(self.mt_tokens)


# -- parameters ----------------------------------------------------------------


def _lstm_shapes(prefix: str, in_dim: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.W": (in_dim + hidden, 4 * hidden), f"{prefix}.b": (4 * hidden,)}


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    c = config
    if min(c.src_vocab, c.mt_vocab, c.pe_vocab) <= 0:
        raise ValueError("vocabulary sizes must be set on the config before creating parameters")
    half = c.enc_hidden // 2
    shapes: Dict[str, Tuple[int, ...]] = {
        "emb.src": (c.src_vocab, c.word_dim),
        "emb.mt": (c.mt_vocab, c.word_dim),
        "emb.pe": (c.pe_vocab, c.word_dim),
    }
    for enc in ("enc_src", "enc_mt"):
        for layer in range(c.enc_layers):
            in_dim = c.word_dim if layer == 0 else c.enc_hidden
            for direction in ("fwd", "bwd"):
                shapes.update(_lstm_shapes(f"{enc}.l{layer}.{direction}", in_dim, half))
    for layer in range(c.dec_layers):
        in_dim = c.word_dim if layer == 0 else c.dec_hidden
        shapes.update(_lstm_shapes(f"dec.l{layer}", in_dim, c.dec_hidden))
        for part in ("h", "c"):
            shapes[f"bridge.l{layer}.{part}.W"] = (c.enc_hidden, c.dec_hidden)
            shapes[f"bridge.l{layer}.{part}.b"] = (c.dec_hidden,)
    shapes["attn.W_a"] = (c.dec_hidden, c.enc_hidden)
    shapes["attn.W_c"] = (c.enc_hidden + c.dec_hidden, c.dec_hidden)
    shapes["out.W"] = (c.dec_hidden, c.pe_vocab)
    shapes["out.b"] = (c.pe_vocab,)
    if c.variant is Variant.PROJECTED:
        shapes["proj.U_src"] = (c.enc_hidden, c.enc_hidden)
        shapes["proj.U_mt"] = (c.enc_hidden, c.enc_hidden)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, scale: float = 0.1,
                dtype=np.float64) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {name: init_uniform(rng, shape, scale, dtype) for name, shape in param_shapes(config).items()}


def check_params(params: Dict[str, np.ndarray], config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"missing parameters: {missing}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


def param_nodes(g: Graph, params: Dict[str, np.ndarray]) -> Dict[str, Node]:
    if g.grad:
        return {name: g.leaf(value, name) for name, value in params.items()}
    return {name: g.constant(value) for name, value in params.items()}


# -- building blocks -------------------------------------------------------------


def lstm_cell(g: Graph, P: Dict[str, Node], prefix: str, x: Node, h: Node, c: Node) -> Tuple[Node, Node]:
    """One LSTM step. Gate order in the weight matrix: input, forget, output, candidate."""
    hidden = h.shape[-1]
    z = g.add(g.matmul(g.concat([x, h], axis=-1), P[prefix + ".W"]), P[prefix + ".b"])
    gates = g.sigmoid(g.slice(z, 0, 3 * hidden))
    cand = g.tanh(g.slice(z, 3 * hidden, 4 * hidden))
    i = g.slice(gates, 0, hidden)
    f = g.slice(gates, hidden, 2 * hidden)
    o = g.slice(gates, 2 * hidden, 3 * hidden)
    c_new = g.add(g.mul(f, c), g.mul(i, cand))
    h_new = g.mul(o, g.tanh(c_new))
    return h_new, c_new


@dataclass
class EncoderOutput:
    states: Optional[Node]  # (B, T, enc_hidden), None when T == 0
    mask: np.ndarray  # (B, T) bool
    finals: List[Tuple[Node, Node]]  # per layer: ([h_fwd; h_bwd], [c_fwd; c_bwd])


def run_encoder(g: Graph, P: Dict[str, Node], config: ModelConfig, name: str, ids: np.ndarray,
                training: bool = False, rng: Optional[np.random.Generator] = None,
                lengths: Optional[Sequence[int]] = None) -> EncoderOutput:
    """Stacked bidirectional LSTM over a padded (B, T) id matrix; ``lengths`` default to T."""
    ids = np.asarray(ids, dtype=np.int64)
    batch, steps = ids.shape
    mask = length_mask(lengths, steps) if lengths is not None else np.ones((batch, steps), dtype=bool)
    half = config.enc_hidden // 2
    dtype = P["emb.src"].value.dtype
    zero = g.constant(np.zeros((batch, half), dtype=dtype))
    if steps == 0:
        finals = [(g.constant(np.zeros((batch, config.enc_hidden), dtype=dtype)),) * 2
                  for _ in range(config.enc_layers)]
        return EncoderOutput(None, mask, finals)
    emb = g.dropout(g.embedding(P["emb." + name.split("_")[1]], ids), config.dropout, training, rng)
    inputs = [g.reshape(g.slice(emb, t, t + 1, axis=1), (batch, config.word_dim)) for t in range(steps)]
    finals = []
    for layer in range(config.enc_layers):
        if layer > 0:
            inputs = [g.dropout(x, config.dropout, training, rng) for x in inputs]
        outs = {}
        last = {}
        for direction, order in (("fwd", range(steps)), ("bwd", range(steps - 1, -1, -1))):
            prefix = f"{name}.l{layer}.{direction}"
            h, c = zero, zero
            seq = [None] * steps
            for t in order:
                h_new, c_new = lstm_cell(g, P, prefix, inputs[t], h, c)
                h = g.mask_blend(h_new, h, mask[:, t])
                c = g.mask_blend(c_new, c, mask[:, t])
                seq[t] = h
            outs[direction] = seq
            last[direction] = (h, c)
        inputs = [g.concat([outs["fwd"][t], outs["bwd"][t]], axis=-1) for t in range(steps)]
        finals.append((g.concat([last["fwd"][0], last["bwd"][0]], axis=-1),
                       g.concat([last["fwd"][1], last["bwd"][1]], axis=-1)))
    return EncoderOutput(g.stack(inputs, axis=1), mask, finals)


@dataclass
class Memory:
    """Everything the decoder attends over for a batch."""

    keys: Node  # (B, N + M, enc_hidden), used for energies
    values: Node  # keys, or per-encoder projected keys for the projected variant
    mask: np.ndarray  # (B, N + M)
    src_len: int  # padded src width, i.e. the row where mt starts


def join_states(g: Graph, P: Dict[str, Node], config: ModelConfig, src: EncoderOutput,
                mt: EncoderOutput) -> Memory:
    parts = [o for o in (src.states, mt.states) if o is not None]
    keys = parts[0] if len(parts) == 1 else g.concat(parts, axis=1)
    mask = np.concatenate([src.mask, mt.mask], axis=1)
    src_len = src.mask.shape[1]
    if config.variant is Variant.PROJECTED:
        proj = []
        for states, u in ((src.states, "proj.U_src"), (mt.states, "proj.U_mt")):
            if states is not None:
                proj.append(project_states(g, states, P[u]))
        values = proj[0] if len(proj) == 1 else g.concat(proj, axis=1)
    else:
        values = keys
    return Memory(keys, values, mask, src_len)


def project_states(g: Graph, states: Node, u: Node) -> Node:
    """Apply ``U @ h`` to every vector of a (B, T, D) node."""
    b, t, d = states.shape
    out = g.matmul(g.reshape(states, (b * t, d)), g.transpose(u))
    return g.reshape(out, (b, t, out.shape[1]))


def bridge(g: Graph, P: Dict[str, Node], config: ModelConfig, mt: EncoderOutput) -> State:
    """Initial decoder state: a linear map of the mt encoder's final states."""
    state = []
    for layer in range(config.dec_layers):
        src_layer = min(layer, config.enc_layers - 1)
        h_enc, c_enc = mt.finals[src_layer]
        h = g.add(g.matmul(h_enc, P[f"bridge.l{layer}.h.W"]), P[f"bridge.l{layer}.h.b"])
        c = g.add(g.matmul(c_enc, P[f"bridge.l{layer}.c.W"]), P[f"bridge.l{layer}.c.b"])
        state.append((h, c))
    return state


def attend(g: Graph, P: Dict[str, Node], memory: Memory, s: Node) -> Tuple[Node, Node]:
    """General attention: energies ``s W_a h_j``, one softmax over every position, weighted sum."""
    query = g.matmul(s, P["attn.W_a"])
    energies = g.batched_dot(memory.keys, query)
    alpha = g.softmax(energies, axis=-1, mask=memory.mask)
    context = g.weighted_sum(alpha, memory.values)
    return alpha, context


def decoder_step_graph(g: Graph, P: Dict[str, Node], config: ModelConfig, prev_ids: np.ndarray,
                       state: State, memory: Memory, training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> Tuple[State, Node, Node]:
    """Advance the decoder one token. Returns (new state, logits, alpha)."""
    x = g.dropout(g.embedding(P["emb.pe"], prev_ids), config.dropout, training, rng)
    new_state: State = []
    for layer, (h, c) in enumerate(state):
        if layer > 0:
            x = g.dropout(x, config.dropout, training, rng)
        h, c = lstm_cell(g, P, f"dec.l{layer}", x, h, c)
        new_state.append((h, c))
        x = h
    alpha, context = attend(g, P, memory, x)
    attn_state = g.tanh(g.matmul(g.concat([context, x], axis=-1), P["attn.W_c"]))
    logits = g.add(g.matmul(attn_state, P["out.W"]), P["out.b"])
    return new_state, logits, alpha


def length_mask(lengths: Sequence[int], width: int) -> np.ndarray:
    """(B, width) bool mask, true on the first ``lengths[b]`` positions of row b.

    Masks come from lengths, never from id values, so a real token may carry
    any id, the padding id included.
    """
    return np.arange(width)[None, :] < np.asarray(lengths, dtype=np.int64)[:, None]


def pad_batch(seqs: Sequence[Sequence[int]], width: Optional[int] = None) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0) if width is None else width
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def encode_batch(g: Graph, P: Dict[str, Node], config: ModelConfig, src_ids: np.ndarray, mt_ids: np.ndarray,
                 training: bool = False, rng: Optional[np.random.Generator] = None,
                 src_lens: Optional[Sequence[int]] = None,
                 mt_lens: Optional[Sequence[int]] = None) -> Tuple[Memory, State]:
    src = run_encoder(g, P, config, "enc_src", src_ids, training, rng, src_lens)
    mt = run_encoder(g, P, config, "enc_mt", mt_ids, training, rng, mt_lens)
    return join_states(g, P, config, src, mt), bridge(g, P, config, mt)


@dataclass
class BatchResult:
    loss: Node  # summed cross-entropy over all real target tokens
    n_tokens: int
    alphas: List[Node]  # per target step, (B, N + M)
    logits: List[Node]
    memory: Memory


def _check_ids(ids: np.ndarray, size: int, side: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexError(f"{side} id out of range for vocabulary of size {size}")


def teacher_forcing_batch(g: Graph, P: Dict[str, Node], config: ModelConfig,
                          src: Sequence[Sequence[int]], mt: Sequence[Sequence[int]],
                          pe: Sequence[Sequence[int]], training: bool = False,
                          rng: Optional[np.random.Generator] = None) -> BatchResult:
    """Summed cross-entropy of ``pe + </s>`` given gold previous tokens ``<s> + pe``."""
    src_ids, mt_ids = pad_batch(src), pad_batch(mt)
    dec_in = pad_batch([[BOS_ID] + list(p) for p in pe])
    targets = pad_batch([list(p) + [EOS_ID] for p in pe])
    for ids, size, side in ((src_ids, config.src_vocab, "src"), (mt_ids, config.mt_vocab, "mt"),
                            (targets, config.pe_vocab, "pe")):
        _check_ids(ids, size, side)
    memory, state = encode_batch(g, P, config, src_ids, mt_ids, training, rng,
                                 [len(s) for s in src], [len(m) for m in mt])
    target_mask = length_mask([len(p) + 1 for p in pe], targets.shape[1])
    losses, alphas, logits_all = [], [], []
    for t in range(targets.shape[1]):
        state, logits, alpha = decoder_step_graph(g, P, config, dec_in[:, t], state, memory, training, rng)
        losses.append(g.cross_entropy(logits, targets[:, t], weights=target_mask[:, t]))
        alphas.append(alpha)
        logits_all.append(logits)
    total = losses[0]
    for term in losses[1:]:
        total = g.add(total, term)
    return BatchResult(total, int(target_mask.sum()), alphas, logits_all, memory)


# -- single-sentence API ---------------------------------------------------------


def _as_batch(ids: Sequence[int]) -> np.ndarray:
    return np.asarray(list(ids), dtype=np.int64).reshape(1, -1)


def encode(params: Dict[str, np.ndarray], config: ModelConfig, src_ids: Sequence[int],
           mt_ids: Sequence[int]) -> JoinedStates:
    if len(src_ids) == 0 or len(mt_ids) == 0:
        raise ValueError("encode needs non-empty src and mt")
    _check_ids(np.asarray(src_ids), config.src_vocab, "src")
    _check_ids(np.asarray(mt_ids), config.mt_vocab, "mt")
    g = Graph(grad=False)
    P = param_nodes(g, params)
    memory, _ = encode_batch(g, P, config, _as_batch(src_ids), _as_batch(mt_ids))
    return JoinedStates(memory.keys.value[0].copy(), len(src_ids))


def attention_scores(params: Dict[str, np.ndarray], joined: JoinedStates, s_prev: np.ndarray) -> np.ndarray:
    """``e[j] = s_prev . W_a . h_join[j]`` for every joined position."""
    w_a = params["attn.W_a"]
    s_prev = np.asarray(s_prev)
    if s_prev.shape != (w_a.shape[0],) or joined.vectors.shape[1] != w_a.shape[1]:
        raise DimensionError(
            f"attention_scores: state {s_prev.shape}, W_a {w_a.shape}, states {joined.vectors.shape}")
    g = Graph(grad=False)
    keys = g.constant(joined.vectors[None])
    query = g.matmul(g.constant(s_prev[None]), g.constant(w_a))
    return g.batched_dot(keys, query).value[0]


def attention_weights(energies: np.ndarray) -> np.ndarray:
    """One softmax across all src and mt positions together."""
    g = Graph(grad=False)
    return g.softmax(g.constant(np.asarray(energies, dtype=float)[None]), axis=-1).value[0]


def context_vector(alpha: np.ndarray, joined: JoinedStates) -> np.ndarray:
    alpha = np.asarray(alpha)
    if alpha.shape != (len(joined.vectors),):
        raise DimensionError(f"context_vector: {alpha.shape[0]} weights for {len(joined.vectors)} states")
    g = Graph(grad=False)
    return g.weighted_sum(g.constant(alpha[None]), g.constant(joined.vectors[None])).value[0]


def context_vector_projected(alpha: np.ndarray, h_src: np.ndarray, h_mt: np.ndarray, u_src: np.ndarray,
                             u_mt: np.ndarray) -> np.ndarray:
    """Weighted sum of per-encoder projected states ``U_k h``."""
    h_src = np.asarray(h_src).reshape(-1, np.shape(u_src)[1])
    h_mt = np.asarray(h_mt).reshape(-1, np.shape(u_mt)[1])
    projected = np.concatenate([h_src @ np.asarray(u_src).T, h_mt @ np.asarray(u_mt).T], axis=0)
    return context_vector(alpha, JoinedStates(projected, len(h_src)))


@dataclass
class DecoderState:
    layers: List[Tuple[np.ndarray, np.ndarray]]  # (h, c) per layer, each (dec_hidden,)

    @property
    def top(self) -> np.ndarray:
        return self.layers[-1][0]


def initial_state(params: Dict[str, np.ndarray], config: ModelConfig, mt_ids: Sequence[int]) -> DecoderState:
    g = Graph(grad=False)
    P = param_nodes(g, params)
    mt = run_encoder(g, P, config, "enc_mt", _as_batch(mt_ids))
    return DecoderState([(h.value[0], c.value[0]) for h, c in bridge(g, P, config, mt)])


def decoder_step(params: Dict[str, np.ndarray], config: ModelConfig, prev_pe_id: int, s_prev: DecoderState,
                 joined: JoinedStates) -> Tuple[DecoderState, np.ndarray, np.ndarray]:
    """One decoding step for a single sentence: (next state, log-probabilities, alpha)."""
    if not 0 <= prev_pe_id < config.pe_vocab:
        raise IndexError(f"pe id {prev_pe_id} out of range")
    g = Graph(grad=False)
    P = param_nodes(g, params)
    memory = _memory_from_joined(g, P, config, joined)
    if len(s_prev.layers) != config.dec_layers or any(h.shape != (config.dec_hidden,) for h, _ in s_prev.layers):
        raise DimensionError("decoder state does not match dec_layers x dec_hidden")
    state = [(g.constant(h[None]), g.constant(c[None])) for h, c in s_prev.layers]
    new_state, logits, alpha = decoder_step_graph(g, P, config, np.array([prev_pe_id]), state, memory)
    logp = g.log_softmax(logits).value[0]
    return DecoderState([(h.value[0], c.value[0]) for h, c in new_state]), logp, alpha.value[0]


def _memory_from_joined(g: Graph, P: Dict[str, Node], config: ModelConfig, joined: JoinedStates) -> Memory:
    vecs = joined.vectors
    if vecs.shape[1] != config.enc_hidden:
        raise DimensionError(f"joined width {vecs.shape[1]} != enc_hidden {config.enc_hidden}")
    src_part = g.constant(vecs[None, : joined.boundary])
    mt_part = g.constant(vecs[None, joined.boundary:])
    n, m = joined.boundary, len(vecs) - joined.boundary
    src = EncoderOutput(src_part if n else None, np.ones((1, n), dtype=bool), [])
    mt = EncoderOutput(mt_part if m else None, np.ones((1, m), dtype=bool), [])
    return join_states(g, P, config, src, mt)


def forward_teacher_forcing(params: Dict[str, np.ndarray], config: ModelConfig, src_ids: Sequence[int],
                            mt_ids: Sequence[int], pe_ids: Sequence[int]) -> Tuple[float, AttentionRecord]:
    """Mean per-token loss over ``pe + </s>`` (dropout off) and the attention matrix."""
    if len(pe_ids) == 0:
        raise ValueError("pe must contain at least one token")
    g = Graph(grad=False)
    P = param_nodes(g, params)
    res = teacher_forcing_batch(g, P, config, [src_ids], [mt_ids], [pe_ids])
    matrix = np.stack([a.value[0] for a in res.alphas], axis=1)
    return float(res.loss.value) / res.n_tokens, AttentionRecord(matrix, len(src_ids))


def record_from_batch(alphas: Sequence[np.ndarray], row: int, src_len: int, mt_len: int, src_width: int,
                      n_steps: int) -> AttentionRecord:
    """Cut one sentence's unpadded attention matrix out of batched alpha rows."""
    cols = [a[row] for a in alphas[:n_steps]]
    full = np.stack(cols, axis=1)
    matrix = np.concatenate([full[:src_len], full[src_width: src_width + mt_len]], axis=0)
    return AttentionRecord(matrix, src_len)
