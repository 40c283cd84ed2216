"""Knowledge-neuron attribution, mismatch regularization and neuron selection."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autograd as ag
from ..evalkit import memorization_table
from ..microlm import ModelState, NeuronMask, forward
from ..worldgen import Vocab, encode_items


@dataclass
class AttributionMap:
    scores: np.ndarray  # (n_layers, d_ffn)
    batch_ids: tuple = ()
    regularized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("attribution scores must be (n_layers, d_ffn)")

    def digest(self):
        return hashlib.sha256(self.scores.tobytes()).hexdigest()[:16]


def pair_attributions(model: ModelState, ids, answers) -> np.ndarray:
    """Per-pair neuron attributions, shape ``(n_pairs, n_layers, d_ffn)``.

    For every FFN hidden unit: activation times the gradient of the answer's
    full-vocabulary probability, max-pooled over token positions.
    Parameter gradients are left untouched.
    """
    ids = np.asarray(ids)
    answers = np.asarray(answers)
    if len(answers) == 0:
        return np.zeros((0, model.config.n_layers, model.config.d_ffn))
    res = forward(model, ids, capture=True, param_grad=False)
    probs = ag.softmax(res.logits)
    # rows are independent, so the gradient of the sum is the per-row gradient
    target = probs[np.arange(len(answers)), answers].sum()
    ag.backward(target)
    out = np.empty((len(answers), model.config.n_layers, model.config.d_ffn))
    for l in range(model.config.n_layers):
        h = res.activations.values(l).astype(np.float64)
        g = res.activations.grads(l).astype(np.float64)
        out[:, l, :] = (h * g).max(axis=1)
    return out


def _pairs_to_arrays(pairs, vocab):
    if vocab is None:
        ids = np.array([q for q, _ in pairs], dtype=np.int64)
        ans = np.array([a for _, a in pairs], dtype=np.int64)
    else:
        ids = np.array([vocab.encode(q) for q, _ in pairs], dtype=np.int64)
        ans = np.array([vocab.id(a) for _, a in pairs], dtype=np.int64)
    return ids, ans


def attribute(model: ModelState, batch, vocab: Vocab | None = None) -> AttributionMap:
    """Mean over batch pairs of the token-max-pooled attribution.

    ``batch`` holds ``(question, answer)`` pairs, as token strings when
    ``vocab`` is given and as ids otherwise.
    """
    if not batch:
        raise ValueError("attribute: empty batch")
    ids, ans = _pairs_to_arrays(batch, vocab)
    per_pair = pair_attributions(model, ids, ans)
    return AttributionMap(per_pair.mean(axis=0), meta={"n_pairs": len(batch)})


def regularize_scores(base_scores, mismatched_scores, alpha):
    """``base - alpha * mean(clip(mismatched, 0))`` over the mismatched axis."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    base_scores = np.asarray(base_scores, dtype=np.float64)
    mismatched_scores = np.asarray(mismatched_scores, dtype=np.float64)
    if len(mismatched_scores) == 0:
        return base_scores.copy()
    clipped = np.maximum(mismatched_scores, 0.0)
    return base_scores - alpha * clipped.sum(axis=0) / len(clipped)


def regularize(base: AttributionMap, model: ModelState, mismatched, alpha: float,
               vocab: Vocab | None = None) -> AttributionMap:
    """Subtract the averaged, negativity-clipped attribution of mismatched pairs."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not mismatched:
        return AttributionMap(base.scores.copy(), base.batch_ids, True, dict(base.meta, n_mismatch=0))
    ids, ans = _pairs_to_arrays(mismatched, vocab)
    scores = regularize_scores(base.scores, pair_attributions(model, ids, ans), alpha)
    return AttributionMap(scores, base.batch_ids, True, dict(base.meta, n_mismatch=len(mismatched)))


def n_selected(p, total):
    # the epsilon keeps products like 0.07 * 100 from rounding up past the exact count
    return min(total, max(1, math.ceil(p * total - 1e-9)))


def select_neurons(attr: AttributionMap, p: float) -> NeuronMask:
    """Global top-``ceil(p * total)`` neurons; ties go to the lower (layer, neuron)."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    scores = attr.scores
    if np.isnan(scores).any():
        raise ValueError("attribution contains NaN")
    L, F = scores.shape
    order = np.argsort(-scores.ravel(), kind="stable")[: n_selected(p, L * F)]
    return NeuronMask(frozenset((int(i // F), int(i % F)) for i in order), origin=attr.digest())


def random_neurons(n_layers: int, d_ffn: int, p: float, rng: np.random.Generator) -> NeuronMask:
    """Uniformly random neuron set of the same size ``select_neurons`` would pick."""
    total = n_layers * d_ffn
    pick = rng.choice(total, size=n_selected(p, total), replace=False)
    return NeuronMask(frozenset((int(i // d_ffn), int(i % d_ffn)) for i in pick), origin="random")


def select_unforgotten(model: ModelState, forget_items, vocab: Vocab) -> list:
    """Forget items the model still memorizes."""
    table = memorization_table(model, forget_items, vocab)
    return [it for it in forget_items if table[it.id] == 1]


def sample_mismatched(target_answers, pool_ids, pool_answers, n, rng):
    """For each target answer, ``n`` pool question indices whose gold answer differs."""
    out = []
    pool_answers = np.asarray(pool_answers)
    for a in target_answers:
        eligible = np.flatnonzero(pool_answers != a)
        k = min(n, len(eligible))
        out.append(np.sort(rng.choice(eligible, size=k, replace=False)) if k else np.zeros(0, np.intp))
    return out
