"""Unlearning training loop with early stopping on forget accuracy."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autograd as ag
from ..evalkit import accuracy, memorization_table
from ..microlm import ModelState, NeuronMask, apply_gradients, save_checkpoint
from ..worldgen import REJECT, Dataset, encode_items
from .attribution import (
    pair_attributions,
    random_neurons,
    regularize_scores,
    sample_mismatched,
    select_neurons,
    AttributionMap,
)
from .config import UnlearnConfig
from .losses import NEEDS_REFERENCE, ReferenceModel, loss_for_method

log = logging.getLogger(__name__)


class NumericAbort(FloatingPointError):
    """Raised when the unlearning loss becomes non-finite."""

    def __init__(self, message, snapshot):
        self.snapshot = snapshot
        super().__init__(f"{message}; snapshot={snapshot}")


@dataclass
class EpochRecord:
    epoch: int
    ua: float
    skipped: int
    n_active: int
    n_steps: int
    method: str
    loss: float | None
    skipped_ids: list = field(default_factory=list)

    def to_record(self):
        return dict(record="epoch", **asdict(self))


@dataclass
class History:
    epochs: list = field(default_factory=list)
    early_stopped: bool = False
    initial_ua: float | None = None

    def __len__(self):
        return len(self.epochs)

    @property
    def final_ua(self):
        return self.epochs[-1].ua if self.epochs else self.initial_ua

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def _stream(seed, name):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sum(map(ord, name)), len(name))))


class _MomentumSGD:
    def __init__(self, model, momentum):
        self.model, self.mu = model, momentum
        self.buf = {}

    def step(self, lr, mask):
        if self.mu:
            for k, p in self.model.params.items():
                if p.grad is None:
                    continue
                b = self.buf.get(k)
                b = p.grad.copy() if b is None else self.mu * b + p.grad
                self.buf[k] = b
                p.grad = b
        apply_gradients(self.model, lr, mask)


def klue_mask(model, forget_enc, pool_enc, cfg, rng) -> NeuronMask:
    """Neuron mask for one KLUE step on the forget batch ``forget_enc``."""
    L, F = model.config.n_layers, model.config.d_ffn
    if cfg.neuron_selection == "random":
        return random_neurons(L, F, cfg.neuron_ratio, rng)
    base = pair_attributions(model, forget_enc.ids, forget_enc.answers).mean(axis=0)
    if cfg.regularization and cfg.n_mismatch > 0 and cfg.alpha > 0:
        picks = sample_mismatched(forget_enc.answers, pool_enc.ids, pool_enc.answers, cfg.n_mismatch, rng)
        q_idx = np.concatenate(picks)
        a_rep = np.concatenate([np.full(len(p), a) for p, a in zip(picks, forget_enc.answers)])
        mism = pair_attributions(model, pool_enc.ids[q_idx], a_rep)
        scores = regularize_scores(base, mism, cfg.alpha)
    else:
        scores = base
    return select_neurons(AttributionMap(scores, regularized=cfg.regularization), cfg.neuron_ratio)


def unlearn_run(model: ModelState, dataset: Dataset, cfg: UnlearnConfig, *, checkpoint_dir=None,
                callback=None):
    """Unlearn the forget split of ``dataset`` from a copy of ``model``.

    Returns ``(model, history)``; the input model is not modified.
    """
    model = model.copy()
    history = History()
    vocab = dataset.vocab
    forget_items = [c.base for c in dataset.split_clusters("forget")]
    retain_items = [c.base for c in dataset.split_clusters("retain")]
    forget_enc = encode_items(vocab, forget_items)
    retain_enc = encode_items(vocab, retain_items)
    pool_enc = encode_items(vocab, forget_items + retain_items)
    history.initial_ua = accuracy(memorization_table(model, forget_items, vocab), forget_items)
    if cfg.max_epochs == 0 or not forget_items:
        return model, history

    ref = ReferenceModel(model) if cfg.method in NEEDS_REFERENCE else None
    reject_id = vocab.id(REJECT) if REJECT in vocab else None
    rng = _stream(cfg.seed, "unlearn")
    loss_rng = _stream(cfg.seed, "loss")
    mask_rng = _stream(cfg.seed, "mask")
    opt = _MomentumSGD(model, cfg.momentum)
    lr = cfg.learning_rate
    localized = cfg.method == "klue" and cfg.localization
    retain_order, retain_pos = np.zeros(0, np.intp), 0

    def next_retain(k):
        nonlocal retain_order, retain_pos
        if len(retain_enc) == 0:
            return None
        idx = []
        while len(idx) < k:
            if retain_pos >= len(retain_order):
                retain_order, retain_pos = rng.permutation(len(retain_enc)), 0
            take = min(k - len(idx), len(retain_order) - retain_pos)
            idx.extend(retain_order[retain_pos:retain_pos + take])
            retain_pos += take
        return retain_enc.subset(np.asarray(idx))

    for epoch in range(cfg.max_epochs):
        if cfg.selects_samples:
            table = memorization_table(model, forget_items, vocab)
            active = np.array([i for i, it in enumerate(forget_items) if table[it.id] == 1], dtype=np.intp)
        else:
            active = np.arange(len(forget_items))
        skipped_ids = sorted(set(it.id for it in forget_items) - {forget_items[i].id for i in active})
        order = active[rng.permutation(len(active))]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            fb = forget_enc.subset(order[start:start + cfg.batch_size])
            rb = next_retain(cfg.batch_size) if cfg.method != "ga" else None
            mask = klue_mask(model, fb, pool_enc, cfg, mask_rng) if localized else None
            model.zero_grad()
            loss = loss_for_method(cfg.method, model, ref, fb, rb, cfg, reject_id=reject_id, rng=loss_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericAbort("non-finite unlearning loss", {
                    "epoch": epoch, "step": model.step, "loss": value, "method": cfg.method,
                    "checksum": model.checksum(),
                })
            losses.append(value)
            if loss.has_lineage:
                ag.backward(loss)
                opt.step(lr, mask)
            model.zero_grad()

        table = memorization_table(model, forget_items, vocab)
        ua = accuracy(table, forget_items)
        rec = EpochRecord(epoch, ua, len(skipped_ids), len(active), len(losses), cfg.method,
                          float(np.mean(losses)) if losses else None, skipped_ids)
        history.epochs.append(rec)
        log.debug("epoch %d ua=%.2f active=%d", epoch, ua, len(active))
        if callback is not None:
            callback(model, rec)
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"unlearn_epoch{epoch + 1:03d}.npz",
                            {"epoch": epoch + 1, "method": cfg.method})
        if ua <= cfg.ua_stop_threshold:
            history.early_stopped = True
            break
    return model, history
