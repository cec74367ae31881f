"""Training losses and the two-stage curriculum schedule.

Three parts: token-level cross-entropy over the rationale span, the same
over the answer span, and a temperature-scaled InfoNCE anchor that pulls
every rationale-step hidden state toward the matched instance's pooled
geometry embedding against in-batch negatives (cosine similarity in a shared
projection space; the denominator includes the positive).

Stage 1 trains rationale generation plus the anchor only; the answer-span
loss is computed for logging but strictly excluded from the gradient graph.
Stage 2 optimizes the full weighted sum. The optimizer is plain gradient
descent with momentum, which keeps runs bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Rng, Tensor, concat, log_softmax_rows


class ObjectiveError(ValueError):
    pass


@dataclass
class LossConfig:
    lam: float = 1.0  # answer-loss weight
    alpha: float = 0.1  # anchor weight
    tau: float = 0.07  # InfoNCE temperature
    proj_dim: int = 32
    stage: int = 1

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0 or self.tau <= 0:
            raise ObjectiveError("invalid loss weights")
        if self.stage not in (1, 2):
            raise ObjectiveError("stage must be 1 or 2")


@dataclass
class LossParts:
    gen: Tensor
    pred: Tensor
    anchor: Tensor


def init_anchor_heads(
    rng: Rng, d_llm: int, d_geo: int, proj_dim: int = 32, hidden: int = 32
) -> dict:
    scale = 0.2
    return {
        "anc_phi_w1": Tensor.param(rng.normal((d_llm, hidden), scale)),
        "anc_phi_b1": Tensor.param(np.zeros(hidden)),
        "anc_phi_w2": Tensor.param(rng.normal((hidden, proj_dim), scale)),
        "anc_phi_b2": Tensor.param(np.zeros(proj_dim)),
        "anc_psi_w1": Tensor.param(rng.normal((d_geo, hidden), scale)),
        "anc_psi_b1": Tensor.param(np.zeros(hidden)),
        "anc_psi_w2": Tensor.param(rng.normal((hidden, proj_dim), scale)),
        "anc_psi_b2": Tensor.param(np.zeros(proj_dim)),
    }


def _span_cross_entropy(logits: Tensor, target_ids, span: tuple[int, int]) -> Tensor:
    start, end = span
    if not 0 <= start < end <= logits.shape[0]:
        raise ObjectiveError("span outside sequence")
    ids = np.asarray(target_ids, dtype=np.int64)[start:end]
    logp = log_softmax_rows(logits[start:end])
    onehot = np.zeros((end - start, logits.shape[1]))
    onehot[np.arange(end - start), ids] = 1.0
    picked = (logp * Tensor.const(onehot)).sum(axis=1)
    return -picked.mean()


def loss_gen(logits: Tensor, target_ids, rationale_span: tuple[int, int]) -> Tensor:
    """Mean cross-entropy over rationale positions only."""
    if rationale_span[1] <= rationale_span[0]:
        raise ObjectiveError("no rationale supervision")
    return _span_cross_entropy(logits, target_ids, rationale_span)


def loss_pred(logits: Tensor, target_ids, answer_span: tuple[int, int]) -> Tensor:
    """Mean cross-entropy over answer positions only (teacher forced)."""
    if answer_span[1] <= answer_span[0]:
        raise ObjectiveError("no answer supervision")
    return _span_cross_entropy(logits, target_ids, answer_span)


def _project(x: Tensor, params: dict, prefix: str) -> Tensor:
    hidden = ((x @ params[prefix + "w1"]) + params[prefix + "b1"]).tanh()
    return (hidden @ params[prefix + "w2"]) + params[prefix + "b2"]


def _normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm2 = (x * x).sum(axis=1, keepdims=True)
    if np.any(norm2.data < eps * eps):
        raise ObjectiveError("zero-norm projected vector; cosine undefined")
    return x * ((norm2 + eps) ** -0.5)


def loss_anchor(
    hidden: Tensor,
    geo_pos: Tensor,
    geo_negs: Tensor,
    heads: dict,
    tau: float,
) -> Tensor:
    """Step-averaged InfoNCE over cosine similarities.

    ``hidden``: T x D_llm rationale hidden states; ``geo_pos``: pooled
    geometry embedding of the matched instance (D,); ``geo_negs``:
    (K-1) x D pooled embeddings of the negatives.
    """
    if hidden.shape[0] < 1:
        raise ObjectiveError("anchor needs at least one rationale step")
    if geo_negs.shape[0] < 1:
        raise ObjectiveError("anchor needs at least one negative")
    candidates = concat([geo_pos.reshape(1, -1), geo_negs], axis=0)  # K x D
    phi_h = _normalize_rows(_project(hidden, heads, "anc_phi_"))
    psi_g = _normalize_rows(_project(candidates, heads, "anc_psi_"))
    sims = (phi_h @ psi_g.transpose()) * (1.0 / tau)  # T x K, positive at col 0
    logp = log_softmax_rows(sims)
    return -logp[:, 0].mean()


def loss_total(parts: LossParts, config: LossConfig) -> Tensor:
    """Stage-weighted sum; stage 1 truncates all answer-span gradients."""
    if config.stage == 1:
        return parts.gen + config.alpha * parts.anchor
    return parts.gen + config.lam * parts.pred + config.alpha * parts.anchor


def stage_schedule(step: int, stage1_steps: int) -> int:
    """Stage 1 for the first ``stage1_steps`` optimizer steps, then stage 2."""
    return 1 if step < stage1_steps else 2


class SgdMomentum:
    """Deterministic SGD with classical momentum over a named param dict."""

    def __init__(self, params: dict, lr: float = 0.05, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v
