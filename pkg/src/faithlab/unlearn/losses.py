"""Unlearning objectives.

Every loss is ``forget_weight * L_forget + retain_weight * L_retain`` where
each part is averaged over its batch:

ga        L_f = -NLL(forget), no retain term
ga_ret    L_f = -NLL(forget), L_r = NLL(retain)
klue      same objective as ga_ret (updates are masked by the caller)
dpo_*     preference loss; on forget the gold answer is rejected in favour
          of a random wrong option (dpo_mis) or the <reject> token (dpo_rej);
          on retain the roles are swapped
npo       L_f = (2/beta) * log(1 + (pi/pi_ref)^beta), L_r = NLL(retain)
rmu       L_f = MSE(h_l(forget), c*u), L_r = rmu_alpha * MSE(h_l(retain), h_l^ref(retain))
"""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..microlm import ModelState, answer_logprob, forward
from ..worldgen import EncodedItems
from .config import UnlearnConfig

NEEDS_REFERENCE = ("dpo_mis", "dpo_rej", "npo", "rmu")


class ReferenceModel:
    """Frozen copy of the model taken before unlearning."""

    def __init__(self, model: ModelState):
        self._model = model.copy()
        for p in self._model.params.values():
            p.requires_grad = False
        self._checksum = self._model.checksum()

    @property
    def model(self):
        return self._model

    def answer_logprobs(self, ids, answers):
        with ag.no_grad():
            res = forward(self._model, ids)
        z = res.logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return logp[np.arange(len(answers)), np.asarray(answers)]

    def residual(self, ids, layer):
        with ag.no_grad():
            res = forward(self._model, ids, keep_residual=True)
        return res.residual[layer].data

    def unchanged(self):
        return self._model.checksum() == self._checksum


def rmu_direction(d_model: int, seed: int, dtype=np.float64) -> np.ndarray:
    """Fixed random unit vector for the RMU control target."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x726D75,)))
    u = rng.random(d_model)
    return (u / np.linalg.norm(u)).astype(dtype)


def nll(model: ModelState, batch: EncodedItems) -> ag.Tensor:
    return -answer_logprob(model, batch.ids, batch.answers).mean()


def _dpo_term(model, ref, ids, chosen, rejected, beta):
    # both answers are read off the same forward pass
    res = forward(model, ids)
    logp = ag.log_softmax(res.logits)
    rows = np.arange(len(chosen))
    lp_c, lp_r = logp[rows, chosen], logp[rows, rejected]
    margin = (lp_c - ref.answer_logprobs(ids, chosen)) - (lp_r - ref.answer_logprobs(ids, rejected))
    return ag.softplus(-beta * margin).mean()


def _alternatives(batch: EncodedItems, method, reject_id, rng):
    if method == "dpo_rej":
        return np.full(len(batch), reject_id, dtype=np.int64)
    alts = np.empty(len(batch), dtype=np.int64)
    for i, (cands, ans) in enumerate(zip(batch.candidates, batch.answers)):
        wrong = cands[cands != ans]
        alts[i] = wrong[rng.integers(len(wrong))]
    return alts


def loss_for_method(
    method: str,
    model: ModelState,
    ref: ReferenceModel | None,
    forget_batch: EncodedItems,
    retain_batch: EncodedItems | None,
    cfg: UnlearnConfig,
    *,
    reject_id: int | None = None,
    rng: np.random.Generator | None = None,
) -> ag.Tensor:
    """Differentiable scalar objective for one unlearning step."""
    if method in NEEDS_REFERENCE and ref is None:
        raise ValueError(f"method {method!r} requires a reference model")
    if method == "dpo_rej" and reject_id is None:
        raise ValueError("dpo_rej requires the id of the rejection token")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    fw, rw = cfg.forget_weight, cfg.retain_weight
    has_retain = retain_batch is not None and len(retain_batch) > 0 and rw > 0

    if method == "ga":
        return -fw * nll(model, forget_batch)

    if method in ("ga_ret", "klue"):
        loss = -fw * nll(model, forget_batch)
        return loss + rw * nll(model, retain_batch) if has_retain else loss

    if method in ("dpo_mis", "dpo_rej"):
        beta = cfg.beta_pref
        alt_f = _alternatives(forget_batch, method, reject_id, rng)
        loss = fw * _dpo_term(model, ref, forget_batch.ids, alt_f, forget_batch.answers, beta)
        if has_retain:
            alt_r = _alternatives(retain_batch, method, reject_id, rng)
            loss = loss + rw * _dpo_term(model, ref, retain_batch.ids, retain_batch.answers, alt_r, beta)
        return loss

    if method == "npo":
        beta = cfg.beta_pref
        lp = answer_logprob(model, forget_batch.ids, forget_batch.answers)
        ratio = lp - ref.answer_logprobs(forget_batch.ids, forget_batch.answers)
        loss = fw * (2.0 / beta) * ag.softplus(beta * ratio).mean()
        return loss + rw * nll(model, retain_batch) if has_retain else loss

    if method == "rmu":
        layer = cfg.rmu_layer
        if not 0 <= layer < model.config.n_layers:
            raise ValueError(f"rmu_layer {layer} outside model depth {model.config.n_layers}")
        dt = model.params["tok_emb"].dtype
        target = cfg.rmu_c * rmu_direction(model.config.d_model, cfg.seed, dt)
        h_f = forward(model, forget_batch.ids, keep_residual=True).residual[layer]
        diff_f = h_f - target
        loss = fw * (diff_f * diff_f).mean()
        if has_retain:
            h_r = forward(model, retain_batch.ids, keep_residual=True).residual[layer]
            diff_r = h_r - ref.residual(retain_batch.ids, layer).astype(dt)
            loss = loss + rw * cfg.rmu_alpha * (diff_r * diff_r).mean()
        return loss

    raise ValueError(f"unknown method {method!r}")
