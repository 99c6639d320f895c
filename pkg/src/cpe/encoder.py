"""Sequential encoding of oriented proposal features.

An LSTM cell folds the step sequence of a pooled proposal into hidden
states; because the initial sequence is a prefix of the extended one,
encoding the extension is exactly a continuation of the initial encoding
when cell weights are shared. Scaled dot-product attention pools the
per-step hiddens, a sigmoid head turns the pooled vector into semantic
scores, and a small dual-stream decoder constrains the encoding space.

All operations exist in two forms: the per-sequence public form (vectors
in, vectors out) and a batched form over proposals used by the detector.
Both run the same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpe import tensorcore as tc
from cpe.tensorcore import Tensor

__all__ = [
    "LstmParams",
    "LstmState",
    "AttentionParams",
    "DcpeHead",
    "init_lstm",
    "init_head",
    "lstm_step",
    "encode_sequence",
    "attention_pool",
    "semantic_score",
    "decoder_forward",
    "step_batch",
    "encode_batch",
    "CellWeights",
    "zero_state",
    "attention_pool_batch",
]


@dataclass
class LstmParams:
    """Gate weights of one LSTM cell (input, forget, output, candidate)."""

    input_dim: int
    hidden_dim: int
    w_i: Tensor
    w_f: Tensor
    w_o: Tensor
    w_g: Tensor
    u_i: Tensor
    u_f: Tensor
    u_o: Tensor
    u_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            name: getattr(self, name)
            for name in ("w_i", "w_f", "w_o", "w_g", "u_i", "u_f", "u_o", "u_g", "b_i", "b_f", "b_o", "b_g")
        }


@dataclass
class LstmState:
    """Hidden and cell vectors; batched states hold one row per sequence."""

    h: Tensor
    c: Tensor


@dataclass
class AttentionParams:
    """Query/key/value projections for attention over encoder steps."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class DcpeHead:
    """Per-encoder head: attention pooling, score layer, decoder streams."""

    attn: AttentionParams
    score_w: Tensor
    score_b: Tensor
    cls_w: Tensor
    cls_b: Tensor
    dec_w: Tensor
    dec_b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {"attn_q": self.attn.w_q, "attn_k": self.attn.w_k, "attn_v": self.attn.w_v}
        for name in ("score_w", "score_b", "cls_w", "cls_b", "dec_w", "dec_b"):
            out[name] = getattr(self, name)
        return out


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_lstm(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> LstmParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, forget bias +1."""
    m, d = hidden_dim, input_dim
    params = LstmParams(
        input_dim=d,
        hidden_dim=m,
        w_i=_uniform(rng, (m, d), d),
        w_f=_uniform(rng, (m, d), d),
        w_o=_uniform(rng, (m, d), d),
        w_g=_uniform(rng, (m, d), d),
        u_i=_uniform(rng, (m, m), m),
        u_f=_uniform(rng, (m, m), m),
        u_o=_uniform(rng, (m, m), m),
        u_g=_uniform(rng, (m, m), m),
        b_i=Tensor(np.zeros(m), requires_grad=True),
        b_f=Tensor(np.ones(m), requires_grad=True),
        b_o=Tensor(np.zeros(m), requires_grad=True),
        b_g=Tensor(np.zeros(m), requires_grad=True),
    )
    return params


def init_head(hidden_dim: int, classes: int, rng: np.random.Generator) -> DcpeHead:
    m = hidden_dim
    return DcpeHead(
        attn=AttentionParams(
            w_q=_uniform(rng, (m, m), m),
            w_k=_uniform(rng, (m, m), m),
            w_v=_uniform(rng, (m, m), m),
        ),
        score_w=_uniform(rng, (classes, m), m),
        score_b=Tensor(np.zeros(classes), requires_grad=True),
        cls_w=_uniform(rng, (classes, m), m),
        cls_b=Tensor(np.zeros(classes), requires_grad=True),
        dec_w=_uniform(rng, (classes, m), m),
        dec_b=Tensor(np.zeros(classes), requires_grad=True),
    )


def zero_state(p: LstmParams, batch: int | None = None) -> LstmState:
    shape = (p.hidden_dim,) if batch is None else (batch, p.hidden_dim)
    return LstmState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


class CellWeights:
    """Pre-transposed gate weights, hoisted out of the step loop."""

    def __init__(self, p: LstmParams):
        self.p = p
        self.w = {g: tc.transpose(getattr(p, f"w_{g}")) for g in "ifog"}
        self.u = {g: tc.transpose(getattr(p, f"u_{g}")) for g in "ifog"}
        self.b = {g: getattr(p, f"b_{g}") for g in "ifog"}


def step_batch(cw: CellWeights, state: LstmState, x: Tensor) -> LstmState:
    """One LSTM step over a batch: x is (N, input_dim), state rows (N, M)."""
    h, c = state.h, state.c
    i = tc.sigmoid(x @ cw.w["i"] + h @ cw.u["i"] + cw.b["i"])
    f = tc.sigmoid(x @ cw.w["f"] + h @ cw.u["f"] + cw.b["f"])
    o = tc.sigmoid(x @ cw.w["o"] + h @ cw.u["o"] + cw.b["o"])
    g = tc.tanh(x @ cw.w["g"] + h @ cw.u["g"] + cw.b["g"])
    c_new = f * c + i * g
    h_new = o * tc.tanh(c_new)
    return LstmState(h_new, c_new)


def lstm_step(p: LstmParams, state: LstmState, x) -> LstmState:
    """Standard gate equations for a single input vector.

    i = sig(W_i x + U_i h + b_i), f, o alike; g = tanh(W_g x + U_g h + b_g);
    c' = f*c + i*g; h' = o*tanh(c').
    """
    x = tc.as_tensor(x)
    if x.ndim != 1 or x.shape[0] != p.input_dim:
        raise ValueError(f"step input must be a vector of length {p.input_dim}, got shape {x.shape}")
    if state.h.shape != (p.hidden_dim,) or state.c.shape != (p.hidden_dim,):
        raise ValueError("state dims do not match the cell")
    batched = step_batch(
        CellWeights(p),
        LstmState(tc.reshape(state.h, (1, p.hidden_dim)), tc.reshape(state.c, (1, p.hidden_dim))),
        tc.reshape(x, (1, p.input_dim)),
    )
    return LstmState(
        tc.reshape(batched.h, (p.hidden_dim,)),
        tc.reshape(batched.c, (p.hidden_dim,)),
    )


def encode_sequence(p: LstmParams, seq, init: LstmState | None = None) -> tuple[LstmState, list[Tensor]]:
    """Fold the cell over a step sequence; returns final state and hiddens.

    Because the fold runs the steps in order from the given state,
    encode(A ++ B, s0) and encode(B, encode(A, s0).final) are the same
    computation, which is the prefix identity the contrastive pair relies
    on. An empty sequence returns the initial state and no hiddens.
    """
    steps = list(seq.steps) if hasattr(seq, "steps") else list(seq)
    state = init if init is not None else zero_state(p)
    hiddens: list[Tensor] = []
    for x in steps:
        state = lstm_step(p, state, x)
        hiddens.append(state.h)
    return state, hiddens


def encode_batch(
    cw: CellWeights,
    steps: list[Tensor],
    init: LstmState,
) -> tuple[LstmState, list[Tensor]]:
    """Batched fold: each step is (N, input_dim), states are (N, M)."""
    state = init
    hiddens: list[Tensor] = []
    for x in steps:
        state = step_batch(cw, state, x)
        hiddens.append(state.h)
    return state, hiddens


def attention_pool_batch(attn: AttentionParams, hiddens: Tensor) -> Tensor:
    """Scaled dot-product self-attention over steps, then a mean.

    ``hiddens`` is (N, T, M); queries, keys and values are per-step
    projections, scores are scaled by 1/sqrt(M), and the attended values
    are averaged over the T steps into an (N, M) encoding.
    """
    m = hiddens.shape[-1]
    q = hiddens @ tc.transpose(attn.w_q)
    k = hiddens @ tc.transpose(attn.w_k)
    v = hiddens @ tc.transpose(attn.w_v)
    scores = (q @ tc.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(m))
    weights = tc.softmax(scores, axis=-1)
    return tc.mean(weights @ v, axis=1)


def attention_pool(attn: AttentionParams, hiddens) -> Tensor:
    """Attention-pool a list of per-step M-vectors into one M-vector."""
    steps = list(hiddens)
    if not steps:
        raise ValueError("attention_pool needs at least one hidden state")
    m = steps[0].shape[0]
    stacked = tc.reshape(tc.stack(steps, axis=0), (1, len(steps), m))
    return tc.reshape(attention_pool_batch(attn, stacked), (m,))


def semantic_score(head: DcpeHead, pooled: Tensor) -> Tensor:
    """Sigmoid semantic scores, one per class, strictly inside (0, 1)."""
    return tc.sigmoid(pooled @ tc.transpose(head.score_w) + head.score_b)


def decoder_forward(head: DcpeHead, d: Tensor, labels=None) -> tuple[Tensor, Tensor | None]:
    """Dual-stream decoder over per-proposal encodings.

    The class stream is a row softmax of a linear layer, the detection
    stream a column softmax of another; their elementwise product summed
    over proposals gives per-class image scores in [0, 1]. With binary
    image labels the decoder loss is the usual multi-class cross entropy
    on those scores.
    """
    if d.ndim != 2 or d.shape[0] < 1:
        raise ValueError(f"decoder input must be (N, M) with N >= 1, got shape {d.shape}")
    cls = tc.softmax_rows(d @ tc.transpose(head.cls_w) + head.cls_b)
    dec = tc.softmax_cols(d @ tc.transpose(head.dec_w) + head.dec_b)
    image_scores = tc.sum_(cls * dec, axis=0)
    if labels is None:
        return image_scores, None
    return image_scores, tc.binary_cross_entropy(image_scores, labels)
