"""Word-level tokenizer and a tiny causal transformer decoder.

The model consumes the fused manifold as a conditioning prefix and emits a
rationale span wrapped in <think> ... </think> followed by an <answer> span
terminated by <eos>. Decoding is greedy with the emission grammar enforced by
masking invalid tokens; the per-step hidden states over the rationale span
are exposed for the contrastive anchor loss.

Checkpoints are a flat binary: magic b"PCCKPT1\\n", uint32 JSON-header
length, a JSON header listing parameter names/shapes plus free-form metadata,
then the row-major float64 payloads concatenated in header order (all
little-endian). Vocabularies serialize as a plain JSON list of token strings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng, Tensor, concat, log_softmax_rows, softmax_rows
from .fusion import FusedManifold

BOS, EOS, THINK, END_THINK, ANSWER = 0, 1, 2, 3, 4
UNK = 5
STRUCTURAL_TOKENS = ["<bos>", "<eos>", "<think>", "</think>", "<answer>"]

_CKPT_MAGIC = b"PCCKPT1\n"
_NEG_INF = -1e30


class ReasonerError(ValueError):
    pass


class Vocab:
    """Bijective string <-> id map; ids 0-4 are the structural tokens."""

    def __init__(self, lexicon: list[str]):
        self.tokens = STRUCTURAL_TOKENS + ["<unk>"] + list(lexicon)
        if len(set(self.tokens)) != len(self.tokens):
            raise ReasonerError("duplicate tokens in lexicon")
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        return [self._ids.get(word, UNK) for word in text.split()]

    def detokenize(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens))

    @staticmethod
    def load(path) -> "Vocab":
        tokens = json.loads(Path(path).read_text())
        if tokens[: len(STRUCTURAL_TOKENS) + 1] != STRUCTURAL_TOKENS + ["<unk>"]:
            raise ReasonerError("vocab file missing reserved tokens")
        return Vocab(tokens[len(STRUCTURAL_TOKENS) + 1 :])


@dataclass
class LmConfig:
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 256
    vocab_size: int = 120

    @property
    def head_dim(self) -> int:
        return self.d_llm // self.n_heads


@dataclass
class ReasoningTrace:
    rationale_ids: list[int]
    answer_ids: list[int]
    hidden_states: np.ndarray  # T x D_llm over rationale steps
    logprob: float
    complete: bool = True
    emitted_ids: list[int] = field(default_factory=list)


def init_lm_params(rng: Rng, cfg: LmConfig) -> dict:
    d = cfg.d_llm
    scale = 0.08
    params = {
        "lm_embed": Tensor.param(rng.normal((cfg.vocab_size, d), scale)),
        "lm_pos": Tensor.param(rng.normal((cfg.context, d), scale)),
        "lm_lnf_g": Tensor.param(np.ones(d)),
        "lm_lnf_b": Tensor.param(np.zeros(d)),
    }
    for layer in range(cfg.n_layers):
        p = f"lm{layer}_"
        params.update(
            {
                p + "ln1_g": Tensor.param(np.ones(d)),
                p + "ln1_b": Tensor.param(np.zeros(d)),
                p + "wq": Tensor.param(rng.normal((d, d), scale)),
                p + "wk": Tensor.param(rng.normal((d, d), scale)),
                p + "wv": Tensor.param(rng.normal((d, d), scale)),
                p + "wo": Tensor.param(rng.normal((d, d), scale)),
                p + "ln2_g": Tensor.param(np.ones(d)),
                p + "ln2_b": Tensor.param(np.zeros(d)),
                p + "ff_w1": Tensor.param(rng.normal((d, 4 * d), scale)),
                p + "ff_b1": Tensor.param(np.zeros(4 * d)),
                p + "ff_w2": Tensor.param(rng.normal((4 * d, d), scale)),
                p + "ff_b2": Tensor.param(np.zeros(d)),
            }
        )
    return params


def _layer_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    from .autodiff import layer_norm

    return layer_norm(x) * gamma + beta


def _causal_self_attention(x: Tensor, params: dict, prefix: str, cfg: LmConfig) -> Tensor:
    t = x.shape[0]
    q = x @ params[prefix + "wq"]
    k = x @ params[prefix + "wk"]
    v = x @ params[prefix + "wv"]
    mask = np.triu(np.full((t, t), _NEG_INF), k=1)
    mask_t = Tensor.const(mask)
    dh = cfg.head_dim
    heads = []
    for h in range(cfg.n_heads):
        sl = (slice(None), slice(h * dh, (h + 1) * dh))
        logits = (q[sl] @ k[sl].transpose()) * (1.0 / np.sqrt(dh)) + mask_t
        heads.append(softmax_rows(logits) @ v[sl])
    return concat(heads, axis=1) @ params[prefix + "wo"]


def _transformer(seq: Tensor, params: dict, cfg: LmConfig) -> Tensor:
    t = seq.shape[0]
    if t > cfg.context:
        raise ReasonerError(f"sequence length {t} exceeds context {cfg.context}")
    x = seq + params["lm_pos"][: t]
    for layer in range(cfg.n_layers):
        p = f"lm{layer}_"
        normed = _layer_norm_affine(x, params[p + "ln1_g"], params[p + "ln1_b"])
        x = x + _causal_self_attention(normed, params, p, cfg)
        normed = _layer_norm_affine(x, params[p + "ln2_g"], params[p + "ln2_b"])
        ff = ((normed @ params[p + "ff_w1"]) + params[p + "ff_b1"]).tanh()
        x = x + (ff @ params[p + "ff_w2"]) + params[p + "ff_b2"]
    return _layer_norm_affine(x, params["lm_lnf_g"], params["lm_lnf_b"])


def forward_causal(
    manifold: FusedManifold, target_ids, params: dict, cfg: LmConfig
):
    """Teacher-forced pass. logits[t] predicts target_ids[t] given the
    manifold and target positions < t. Returns (logits, hidden), each with
    one row per target position."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    m = manifold.tokens.shape[0]
    if target_ids.size:
        seq = concat(
            [manifold.tokens, params["lm_embed"].gather_rows(target_ids)], axis=0
        )
    else:
        seq = manifold.tokens
    hidden_full = _transformer(seq, params, cfg)
    rows = slice(m - 1, m - 1 + target_ids.size)
    hidden = hidden_full[rows]
    logits = hidden @ params["lm_embed"].transpose()
    return logits, hidden


def next_token_state(manifold: FusedManifold, prefix_ids, params: dict, cfg: LmConfig):
    """Logits and hidden state for the position following the prefix."""
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    m = manifold.tokens.shape[0]
    if prefix_ids.size:
        seq = concat(
            [manifold.tokens, params["lm_embed"].gather_rows(prefix_ids)], axis=0
        )
    else:
        seq = manifold.tokens
    hidden_full = _transformer(seq, params, cfg)
    h_last = hidden_full[m - 1 + prefix_ids.size]
    logits = h_last.reshape(1, -1) @ params["lm_embed"].transpose()
    return logits, h_last


def _grammar_mask(vocab_size: int, allowed_ids) -> np.ndarray:
    mask = np.full(vocab_size, _NEG_INF)
    mask[np.asarray(allowed_ids, dtype=np.int64)] = 0.0
    return mask


def decode_look_think_answer(
    manifold: FusedManifold,
    params: dict,
    cfg: LmConfig,
    max_len: int = 48,
) -> ReasoningTrace:
    """Greedy constrained decoding of <think> R </think> <answer> A <eos>.

    Greedy argmax is a single-path point estimate of the MAP rationale; the
    grammar is enforced by masking invalid tokens at each step. Hitting
    max_len before <eos> flags the trace incomplete (scored as wrong, never
    a crash). ``logprob`` sums log-probabilities under the constrained
    distributions actually sampled from.
    """
    vs = cfg.vocab_size
    lexicon_ids = list(range(UNK, vs))
    emitted: list[int] = []
    rationale: list[int] = []
    answer: list[int] = []
    hiddens: list[np.ndarray] = []
    logprob = 0.0
    state = "start"
    from .autodiff import no_grad

    with no_grad():
        for _ in range(max_len):
            logits, h_last = next_token_state(manifold, emitted, params, cfg)
            if state == "start":
                allowed = [THINK]
            elif state == "think":
                allowed = lexicon_ids + [END_THINK]
            elif state == "after_think":
                allowed = [ANSWER]
            else:  # answer span
                allowed = lexicon_ids + [EOS]
            masked = logits + Tensor.const(_grammar_mask(vs, allowed))
            logp = log_softmax_rows(masked).data[0]
            tok = int(np.argmax(logp))
            logprob += float(logp[tok])
            emitted.append(tok)
            if state == "think" and tok != END_THINK:
                rationale.append(tok)
                hiddens.append(h_last.data.copy())
            elif state == "answer" and tok != EOS:
                answer.append(tok)
            if tok == THINK:
                state = "think"
            elif tok == END_THINK:
                state = "after_think"
            elif tok == ANSWER:
                state = "answer"
            elif tok == EOS:
                break
        complete = bool(emitted) and emitted[-1] == EOS and state == "answer"
    hidden_states = (
        np.stack(hiddens) if hiddens else np.zeros((0, cfg.d_llm))
    )
    return ReasoningTrace(
        rationale_ids=rationale,
        answer_ids=answer,
        hidden_states=hidden_states,
        logprob=logprob,
        complete=complete,
        emitted_ids=emitted,
    )


def decode_answer_direct(
    manifold: FusedManifold, params: dict, cfg: LmConfig, max_len: int = 8,
    prefix: list[int] | None = None,
) -> tuple[list[int], list[int]]:
    """Greedy <answer> A <eos> decoding without a rationale span.

    Returns (answer_ids, emitted_ids); ``prefix`` lets callers condition on
    already-emitted tokens."""
    from .autodiff import no_grad

    vs = cfg.vocab_size
    lexicon_ids = list(range(UNK, vs))
    emitted = list(prefix or [])
    answer: list[int] = []
    state = "start"
    with no_grad():
        for _ in range(max_len):
            logits, _ = next_token_state(manifold, emitted, params, cfg)
            allowed = [ANSWER] if state == "start" else lexicon_ids + [EOS]
            masked = logits.data[0] + _grammar_mask(vs, allowed)
            tok = int(np.argmax(masked))
            emitted.append(tok)
            if state == "answer" and tok != EOS:
                answer.append(tok)
            if tok == ANSWER:
                state = "answer"
            elif tok == EOS:
                break
    return answer, emitted


def decode_rationale_probe(
    manifold: FusedManifold, params: dict, cfg: LmConfig, max_len: int = 40,
    prefix: list[int] | None = None,
) -> list[int]:
    """Force a <think> ... </think> span (used to probe models evaluated in
    answer-first modes); returns the rationale token ids."""
    from .autodiff import no_grad

    vs = cfg.vocab_size
    lexicon_ids = list(range(UNK, vs))
    emitted = list(prefix or [])
    rationale: list[int] = []
    state = "start"
    with no_grad():
        for _ in range(max_len):
            logits, _ = next_token_state(manifold, emitted, params, cfg)
            allowed = [THINK] if state == "start" else lexicon_ids + [END_THINK]
            masked = logits.data[0] + _grammar_mask(vs, allowed)
            tok = int(np.argmax(masked))
            emitted.append(tok)
            if state == "think" and tok != END_THINK:
                rationale.append(tok)
            if tok == THINK:
                state = "think"
            elif tok == END_THINK:
                break
    return rationale


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(params: dict, meta: dict, path) -> None:
    names = sorted(params)
    header = {
        "names": names,
        "shapes": [list(params[n].shape) for n in names],
        "meta": meta,
    }
    blob = json.dumps(header).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ReasonerError(f"bad checkpoint magic in {path}")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    params = {}
    for name, shape in zip(header["names"], header["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        params[name] = Tensor.param(arr.reshape(shape))
    return params, header["meta"]
