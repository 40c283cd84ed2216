"""Tiny decoder-only transformer used as the memorizing language model.

The model reads a fixed token sequence (a question) and predicts the answer
entity as a single next token at the final position.  Each layer is pre-LN:
causal multi-head self attention followed by a GELU feed-forward block whose
hidden units are the "neurons" that attribution and masking operate on.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    d_ffn: int = 256
    max_seq_len: int = 32
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")

    @property
    def n_neurons(self):
        return self.n_layers * self.d_ffn


@dataclass
class NeuronMask:
    """Set of selected FFN hidden units, as ``(layer, neuron)`` pairs."""

    selected: frozenset
    origin: str = ""

    def __post_init__(self):
        self.selected = frozenset((int(l), int(i)) for l, i in self.selected)

    def __len__(self):
        return len(self.selected)

    def __contains__(self, item):
        return tuple(item) in self.selected

    def by_layer(self, n_layers):
        out = [[] for _ in range(n_layers)]
        for l, i in sorted(self.selected):
            out[l].append(i)
        return [np.asarray(ix, dtype=np.intp) for ix in out]


@dataclass
class ActivationRecord:
    """FFN hidden activations per layer, shape ``(batch, seq_len, d_ffn)``."""

    hidden: list

    def __len__(self):
        return len(self.hidden)

    def values(self, layer):
        return self.hidden[layer].data

    def grads(self, layer):
        g = self.hidden[layer].grad
        return np.zeros_like(self.hidden[layer].data) if g is None else g


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    step: int = 0

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        return ModelState(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
            self.step,
        )

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def __getitem__(self, name):
        return self.params[name]


def ffn_param_names(layer):
    p = f"layers.{layer}.ffn"
    return f"{p}.w_in", f"{p}.b_in", f"{p}.w_out"


def init_model(config: ModelConfig) -> ModelState:
    """Seeded initialization; equal configs give bitwise-equal parameters."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x6D6F64,)))
    dt = np.dtype(config.dtype)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    std = 0.02
    proj_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, s=std):
        return rng.normal(0.0, s, size=shape).astype(dt)

    params = {
        "tok_emb": normal((v, d)),
        "pos_emb": normal((config.max_seq_len, d)),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}"
        params[f"{p}.ln1.g"] = np.ones(d, dt)
        params[f"{p}.ln1.b"] = np.zeros(d, dt)
        params[f"{p}.attn.wq"] = normal((d, d))
        params[f"{p}.attn.wk"] = normal((d, d))
        params[f"{p}.attn.wv"] = normal((d, d))
        params[f"{p}.attn.wo"] = normal((d, d), proj_std)
        params[f"{p}.ln2.g"] = np.ones(d, dt)
        params[f"{p}.ln2.b"] = np.zeros(d, dt)
        # neuron i owns w_in row i, b_in[i] and w_out column i
        params[f"{p}.ffn.w_in"] = normal((f, d))
        params[f"{p}.ffn.b_in"] = np.zeros(f, dt)
        params[f"{p}.ffn.w_out"] = normal((d, f), proj_std)
        params[f"{p}.ffn.b_out"] = np.zeros(d, dt)
    params["lnf.g"] = np.ones(d, dt)
    params["lnf.b"] = np.zeros(d, dt)
    params["head.w"] = normal((d, v))
    params["head.b"] = np.zeros(v, dt)
    return ModelState(config, {k: Tensor(a, requires_grad=True) for k, a in params.items()})


_mask_cache: dict = {}


def _causal_mask(t, dtype):
    key = (t, np.dtype(dtype).str)
    if key not in _mask_cache:
        m = np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)
        _mask_cache[key] = Tensor(m)
    return _mask_cache[key]


@dataclass
class ForwardResult:
    logits: Tensor  # (B, V) at the final position
    activations: ActivationRecord | None = None
    residual: list = field(default_factory=list)  # per-layer block outputs, (B, T, d)


def _validate_ids(model, ids):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise ModelError("token ids must be a 2-D integer array")
    if ids.shape[1] == 0:
        raise ModelError("empty question")
    if ids.shape[1] > model.config.max_seq_len:
        raise ModelError(f"question length {ids.shape[1]} exceeds max_seq_len={model.config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ModelError("unknown token id")
    return ids


def forward(
    model: ModelState,
    ids,
    *,
    capture: bool = False,
    param_grad: bool = True,
    ffn_hook: Callable[[int, np.ndarray], np.ndarray] | None = None,
    keep_residual: bool = False,
) -> ForwardResult:
    """Run the model on a ``(B, T)`` batch of equal-length token sequences.

    ``capture`` keeps each layer's FFN hidden activation as a graph node so
    that its gradient is populated by a later backward pass.  With
    ``param_grad=False`` parameters enter the graph as constants, so a
    backward pass touches only the captured activations.  ``ffn_hook`` may
    rewrite hidden activation values in place of the computed ones.
    """
    ids = _validate_ids(model, ids)
    cfg = model.config
    B, T = ids.shape
    P = model.params if param_grad else {k: Tensor(v.data) for k, v in model.params.items()}
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(T, P["tok_emb"].dtype)

    x = ag.embedding_lookup(P["tok_emb"], ids) + P["pos_emb"][:T]
    hidden, residual = [], []
    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        a = ag.layer_norm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])

        def heads(w):
            return (a @ w).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(P[f"{p}.attn.wq"]), heads(P[f"{p}.attn.wk"]), heads(P[f"{p}.attn.wv"])
        att = ag.softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        x = x + ctx @ P[f"{p}.attn.wo"]

        m = ag.layer_norm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        h = ag.gelu(m @ P[f"{p}.ffn.w_in"].T + P[f"{p}.ffn.b_in"])
        if ffn_hook is not None:
            new = ffn_hook(l, h.data)
            if new is not None:
                h = h + Tensor(np.asarray(new, dtype=h.dtype) - h.data)
        if capture and not h.has_lineage:
            h = Tensor(h.data, requires_grad=True)
        hidden.append(h)
        x = x + h @ P[f"{p}.ffn.w_out"].T + P[f"{p}.ffn.b_out"]
        if keep_residual:
            residual.append(x)

    last = ag.layer_norm(x[:, -1, :], P["lnf.g"], P["lnf.b"])
    logits = last @ P["head.w"] + P["head.b"]
    return ForwardResult(logits, ActivationRecord(hidden) if capture else None, residual)


def answer_distribution(model: ModelState, question, candidates: Sequence[int], capture: bool = False):
    """Candidate-restricted answer probabilities for one question.

    Returns ``(probs, activations)``: ``probs`` maps candidate id to its full
    vocabulary softmax probability renormalized over ``candidates``.
    """
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise ModelError("empty candidate set")
    if min(candidates) < 0 or max(candidates) >= model.config.vocab_size:
        raise ModelError("unknown candidate token id")
    if capture:
        res = forward(model, question, capture=True, param_grad=False)
    else:
        with ag.no_grad():
            res = forward(model, question)
    logp = _log_softmax_np(res.logits.data[0].astype(np.float64))
    sel = logp[candidates]
    probs = np.exp(sel - np.logaddexp.reduce(sel))
    return dict(zip(candidates, probs.tolist())), res.activations


def _log_softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def candidate_logprobs(model: ModelState, ids, candidates) -> np.ndarray:
    """Full-vocabulary log-probabilities of ``candidates`` (B, K) for a batch."""
    with ag.no_grad():
        res = forward(model, ids)
    logp = _log_softmax_np(res.logits.data.astype(np.float64))
    return np.take_along_axis(logp, np.asarray(candidates), axis=1)


def answer_logprob(model: ModelState, ids, answers, **kw) -> Tensor:
    """Differentiable ``log P(answer | question)`` per batch row, shape (B,)."""
    res = forward(model, ids, **kw)
    logp = ag.log_softmax(res.logits)
    answers = np.asarray(answers)
    return logp[np.arange(len(answers)), answers]


def lm_loss(model: ModelState, question, answer) -> Tensor:
    """Negative log-likelihood of ``answer`` given ``question`` over the full vocabulary.

    Accepts a single question with a scalar answer, or a batch with an answer
    per row; batch losses are averaged.
    """
    ids = np.asarray(question)
    if ids.ndim == 1:
        ids = ids[None, :]
    answers = np.atleast_1d(np.asarray(answer))
    return -answer_logprob(model, ids, answers).mean()


def apply_gradients(model: ModelState, lr: float, mask: NeuronMask | None = None) -> None:
    """Plain SGD step.  With ``mask`` only the selected neurons' parameters move."""
    if not lr > 0:
        raise ModelError("lr must be positive")
    if mask is None:
        missing = [k for k, p in model.params.items() if p.grad is None]
        if len(missing) == len(model.params):
            raise ModelError("no gradients populated")
        for p in model.params.values():
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.dtype, copy=False)
    else:
        touched = False
        for l, idx in enumerate(mask.by_layer(model.config.n_layers)):
            if idx.size == 0:
                continue
            w_in, b_in, w_out = (model.params[n] for n in ffn_param_names(l))
            if w_in.grad is None or b_in.grad is None or w_out.grad is None:
                raise ModelError(f"missing FFN gradients in layer {l}")
            w_in.data[idx] -= (lr * w_in.grad[idx]).astype(w_in.dtype, copy=False)
            b_in.data[idx] -= (lr * b_in.grad[idx]).astype(b_in.dtype, copy=False)
            w_out.data[:, idx] -= (lr * w_out.grad[:, idx]).astype(w_out.dtype, copy=False)
            touched = True
        if not touched and all(p.grad is None for p in model.params.values()):
            raise ModelError("no gradients populated")
    model.step += 1


class Adam:
    """Adam for memorization training (not used during unlearning)."""

    def __init__(self, params: Mapping[str, Tensor], lr=3e-3, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1, c2 = 1 - self.b1**self.t, 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.ndim > 1:
                update += lr * self.wd * p.data
            p.data -= update.astype(p.dtype, copy=False)


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(model: ModelState, path, extra: Mapping | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "step": model.step,
        "extra": dict(extra or {}),
    }
    arrays = {f"param::{k}": v.data for k, v in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        params = {k[len("param::"):]: Tensor(z[k].copy(), requires_grad=True) for k in z.files if k.startswith("param::")}
    return ModelState(ModelConfig(**meta["config"]), params, meta["step"]), meta["extra"]

