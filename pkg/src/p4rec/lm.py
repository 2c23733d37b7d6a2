"""Adapter-conditioned decoder-only transformer policy.

The sequence seen by the decoder is

    [W_I(i), W_U(u), item tokens (padded to N_I), BOS, y_1, ..., y_N]

where W_I and W_U are small feed-forward adapters mapping CF vectors into
the token latent space. Padding positions of the item description are
masked out of attention. Position ids follow the padded layout even when
a batch is computed on a shorter physical window.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary, pad_batch

log = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class LmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    d_cf: int = 16
    adapter_hidden: int = 64
    max_item_tokens: int = 64
    horizon: int = 48
    dropout: float = 0.0
    seed: int = 0

    @property
    def max_len(self) -> int:
        return self.max_item_tokens + 2 + self.horizon

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported (must be 0)")
        if min(self.vocab_size, self.d_model, self.n_layers, self.d_ff, self.d_cf, self.horizon) < 1:
            raise ValueError("model sizes must be positive")


@dataclass
class Context:
    item_tokens: np.ndarray
    i_vec: np.ndarray
    u_vec: np.ndarray


@dataclass
class ContextBatch:
    item_ids: np.ndarray   # (B, L_I), PAD beyond each description
    item_mask: np.ndarray  # (B, L_I)
    i_vecs: np.ndarray     # (B, d_cf)
    u_vecs: np.ndarray     # (B, d_cf)

    def __len__(self) -> int:
        return len(self.i_vecs)

    @classmethod
    def from_contexts(cls, ctxs: Sequence[Context], max_item_tokens: int) -> "ContextBatch":
        for c in ctxs:
            if len(c.item_tokens) > max_item_tokens:
                raise ValueError(f"item description has {len(c.item_tokens)} tokens > N_I={max_item_tokens}")
        ids, mask = pad_batch([c.item_tokens for c in ctxs])
        return cls(ids, mask, np.stack([np.asarray(c.i_vec, float) for c in ctxs]),
                   np.stack([np.asarray(c.u_vec, float) for c in ctxs]))

    def take(self, idx) -> "ContextBatch":
        idx = np.asarray(idx)
        width = max(int(self.item_mask[idx].sum(axis=1).max()), 1)
        return ContextBatch(self.item_ids[idx, :width], self.item_mask[idx, :width], self.i_vecs[idx], self.u_vecs[idx])

    def with_user(self, u_vecs: np.ndarray) -> "ContextBatch":
        return ContextBatch(self.item_ids, self.item_mask, self.i_vecs, np.broadcast_to(u_vecs, self.u_vecs.shape).copy())


class Attention(nx.Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.qkv = nx.Linear(d, 3 * d, rng)
        self.out = nx.Linear(d, d, rng, scale=0.02)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = x.shape
        H = self.n_heads
        dh = d // H
        qkv = nx.reshape(self.qkv(x), (B, T, 3, H, dh))
        qkv = nx.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        att = nx.softmax(nx.masked_fill(scores, ~mask, NEG_INF), axis=-1)
        y = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
        return self.out(y)


class Block(nx.Module):
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        self.ln1 = nx.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = nx.LayerNorm(cfg.d_model)
        self.ffn = nx.MLP([cfg.d_model, cfg.d_ff, cfg.d_model], rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ffn(self.ln2(x))


class PolicyModel(nx.Module):
    """Token/position embeddings, adapters W_I and W_U, transformer T and head Ψ."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = rng if rng is not None else nx.make_rng(cfg.seed)
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nx.Embedding(cfg.vocab_size, d, rng, scale=0.1)
        self.pos_emb = nx.Embedding(cfg.max_len, d, rng, scale=0.02)
        self.adapter_item = nx.MLP([cfg.d_cf, cfg.adapter_hidden, cfg.adapter_hidden, d], rng)
        self.adapter_user = nx.MLP([cfg.d_cf, cfg.adapter_hidden, cfg.adapter_hidden, d], rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = nx.LayerNorm(d)
        self.head = nx.Linear(d, cfg.vocab_size, rng, scale=0.02)
        self.cf_scale = 1.0

    # -- parameter groups ------------------------------------------------------

    def adapter_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("adapter_")}

    def transformer_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not k.startswith("adapter_")}

    # -- forward ---------------------------------------------------------------

    def _cf(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.cfg.d_cf:
            raise ValueError(f"CF vector dimension {v.shape[-1]} does not match adapter input {self.cfg.d_cf}")
        return v / self.cf_scale

    def prefix(self, batch: ContextBatch, use_cf: bool = True) -> Tensor:
        """(B, 2 + L_I, d) embeddings of the adapter outputs and item tokens, with positions."""
        B, L = batch.item_ids.shape
        if L > self.cfg.max_item_tokens:
            raise ValueError(f"item window {L} exceeds N_I={self.cfg.max_item_tokens}")
        if use_cf:
            zi = nx.reshape(self.adapter_item(nx.tensor(self._cf(batch.i_vecs))), (B, 1, -1))
            zu = nx.reshape(self.adapter_user(nx.tensor(self._cf(batch.u_vecs))), (B, 1, -1))
        else:
            zi = zu = nx.tensor(np.zeros((B, 1, self.cfg.d_model)))
        x = nx.concat([zi, zu, self.tok_emb(batch.item_ids)], axis=1)
        return x + self.pos_emb(np.arange(L + 2))

    def encode_context(self, ctx: Context) -> Tensor:
        """Prefix for one context padded to the full N_I + 2 positions."""
        n = len(ctx.item_tokens)
        if n > self.cfg.max_item_tokens:
            raise ValueError(f"item description has {n} tokens > N_I={self.cfg.max_item_tokens}")
        ids = np.full((1, self.cfg.max_item_tokens), PAD_ID)
        ids[0, :n] = ctx.item_tokens
        mask = np.zeros_like(ids, dtype=bool)
        mask[0, :n] = True
        b = ContextBatch(ids, mask, np.atleast_2d(ctx.i_vec), np.atleast_2d(ctx.u_vec))
        return self.prefix(b)[0]

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def hidden(self, batch: ContextBatch, inputs: np.ndarray, use_cf: bool = True) -> Tensor:
        """Final-layer states (B, T, d) at the response positions for inputs [BOS, y_1, ..., y_{T-1}]."""
        inputs = np.asarray(inputs, dtype=np.int64)
        B, T = inputs.shape
        L = batch.item_ids.shape[1]
        if T > self.cfg.horizon:
            raise ValueError(f"response window {T} exceeds horizon {self.cfg.horizon}")
        if inputs.size and (inputs.min() < 0 or inputs.max() >= self.cfg.vocab_size):
            raise ValueError("token outside vocabulary")
        pre = self.prefix(batch, use_cf)
        start = self.cfg.max_item_tokens + 2
        resp = self.tok_emb(inputs) + self.pos_emb(start + np.arange(T))
        x = nx.concat([pre, resp], axis=1)
        n = L + 2 + T
        valid = np.ones((B, n), dtype=bool)
        valid[:, 2:L + 2] = batch.item_mask
        mask = np.tril(np.ones((n, n), dtype=bool))[None, None] & valid[:, None, None, :]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x[:, L + 2:, :])

    def logits(self, batch: ContextBatch, inputs: np.ndarray, use_cf: bool = True) -> Tensor:
        """Next-token logits (B, T, V) for response inputs [BOS, y_1, ..., y_{T-1}]."""
        return self.head(self.hidden(batch, inputs, use_cf))

    def log_probs(self, batch: ContextBatch, inputs: np.ndarray, use_cf: bool = True) -> Tensor:
        return nx.log_softmax(self.logits(batch, inputs, use_cf), axis=-1)

    def token_log_probs(self, batch: ContextBatch, tokens: np.ndarray) -> Tensor:
        """Log-distributions (B, T, V) over y_{n+1} given BOS, y_1..y_n for response ``tokens``."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        inputs = np.concatenate([np.full((len(tokens), 1), BOS_ID), tokens[:, :-1]], axis=1)
        return self.log_probs(batch, inputs)

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path, vocab: Vocabulary | None = None) -> None:
        path = Path(path)
        state = self.state_dict()
        state["__cf_scale"] = np.array(self.cf_scale)
        nx.save_tensors(path, state)
        side = {"config": asdict(self.cfg), "n_parameters": self.num_parameters()}
        if vocab is not None:
            side["vocab_hash"] = vocab.fingerprint()
            side["vocab"] = vocab.to_list()
        path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary | None = None) -> "PolicyModel":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        if vocab is not None and side.get("vocab_hash") not in (None, vocab.fingerprint()):
            raise ValueError("checkpoint vocabulary does not match")
        model = cls(LmConfig(**side["config"]))
        state = nx.load_tensors(path)
        model.cf_scale = float(state.pop("__cf_scale"))
        model.load_state_dict(state)
        return model

    def copy(self) -> "PolicyModel":
        other = PolicyModel(self.cfg, nx.make_rng(0))
        other.load_state_dict(self.state_dict())
        other.cf_scale = self.cf_scale
        return other


# ---------------------------------------------------------------------------
# scoring and sampling
# ---------------------------------------------------------------------------

def response_arrays(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, mask) for teacher forcing on responses that include their EOS."""
    targets, mask = pad_batch([list(s) for s in seqs])
    inputs = np.concatenate([np.full((len(seqs), 1), BOS_ID), targets[:, :-1]], axis=1)
    return inputs, targets, mask


def sequence_log_prob(model: PolicyModel, ctx: Context | ContextBatch, Y: Sequence[int]) -> Tensor:
    """log P(Y | BOS; context) as a differentiable scalar."""
    Y = [int(t) for t in Y]
    if not Y:
        raise ValueError("empty response")
    if len(Y) > model.cfg.horizon:
        raise ValueError(f"response longer than horizon {model.cfg.horizon}")
    if Y[-1] != EOS_ID and len(Y) != model.cfg.horizon:
        raise ValueError("response must end with EOS or have length N")
    batch = ctx if isinstance(ctx, ContextBatch) else ContextBatch.from_contexts([ctx], model.cfg.max_item_tokens)
    inputs, targets, _ = response_arrays([Y])
    lp = model.log_probs(batch, inputs)
    picked = nx.reshape(lp, (-1, lp.shape[-1]))[np.arange(len(Y)), targets[0]]
    return picked.sum()


def batch_sequence_log_probs(model: PolicyModel, batch: ContextBatch, seqs: Sequence[Sequence[int]],
                              use_cf: bool = True) -> Tensor:
    """Per-sequence log probabilities (B,), differentiable."""
    inputs, targets, mask = response_arrays(seqs)
    lp = model.log_probs(batch, inputs, use_cf)
    B, T, V = lp.shape
    flat = nx.reshape(lp, (B * T, V))[np.arange(B * T), targets.reshape(-1)]
    return (nx.reshape(flat, (B, T)) * mask).sum(axis=1)


@dataclass
class Sample:
    tokens: list[int]
    log_probs: list[float]
    truncated: bool


def decode(next_logits, n_rows: int, max_len: int, mode: str = "greedy", temperature: float = 1.0,
           seed: int = 0, eos_id: int | None = EOS_ID) -> list[Sample]:
    """Autoregressive decoding driven by ``next_logits(inputs) -> (B, V)`` logits.

    Recomputes the full prefix each step. Stops a row at ``eos_id`` or after
    ``max_len`` tokens. Greedy ties go to the lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if mode not in ("greedy", "temperature"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "temperature" and temperature <= 0:
        raise ValueError("temperature must be positive")
    rng = nx.make_rng(seed)
    B = n_rows
    seqs = np.zeros((B, 0), dtype=np.int64)
    lps = np.zeros((B, 0))
    done = np.zeros(B, dtype=bool)
    with nx.no_grad():
        for _ in range(max_len):
            inputs = np.concatenate([np.full((B, 1), BOS_ID), seqs], axis=1)
            logits = np.asarray(next_logits(inputs), dtype=np.float64)
            logp = nx.stable_log_softmax(logits, axis=-1)
            if mode == "greedy":
                nxt = np.argmax(logp, axis=-1)
            else:
                probs = nx.stable_softmax(logits / temperature, axis=-1)
                u = rng.random(B)
                nxt = np.minimum((np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
            nxt = np.where(done, PAD_ID, nxt)
            step_lp = np.where(done, 0.0, logp[np.arange(B), nxt])
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            lps = np.concatenate([lps, step_lp[:, None]], axis=1)
            if eos_id is not None:
                done |= nxt == eos_id
            if done.all():
                break
    out = []
    for b in range(B):
        toks = seqs[b].tolist()
        if eos_id is not None and eos_id in toks:
            n = toks.index(eos_id) + 1
            out.append(Sample(toks[:n], lps[b, :n].tolist(), False))
        else:
            out.append(Sample(toks, lps[b].tolist(), eos_id is not None))
    return out


def sample_responses(model: PolicyModel, batch: ContextBatch, mode: str = "greedy", temperature: float = 1.0,
                     max_len: int | None = None, seed: int = 0, use_cf: bool = True) -> list[Sample]:
    N = model.cfg.horizon if max_len is None else max_len
    if N > model.cfg.horizon:
        raise ValueError("max_len exceeds the model horizon")
    return decode(lambda inputs: model.logits(batch, inputs, use_cf).data[:, -1, :], len(batch), N, mode,
                  temperature, seed)


def sample_response(model: PolicyModel, ctx: Context, mode: str = "greedy", temperature: float = 1.0,
                    max_len: int | None = None, seed: int = 0) -> list[int]:
    batch = ContextBatch.from_contexts([ctx], model.cfg.max_item_tokens)
    return sample_responses(model, batch, mode, temperature, max_len, seed)[0].tokens


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 2e-3
    batch_size: int = 32
    clip: float = 1.0
    seed: int = 0


@dataclass
class BcData:
    contexts: ContextBatch
    responses: list[list[int]]  # each ends with EOS

    def __len__(self) -> int:
        return len(self.responses)


class DivergenceError(RuntimeError):
    pass


def bc_train(model: PolicyModel, data: BcData, cfg: TrainConfig, params: dict[str, Tensor] | None = None,
             use_cf: bool = True) -> list[float]:
    """Minimize L_Cond = −E[Σ_n log Ψ(y_n | ...)] by mini-batch Adam.

    Only ``params`` (default: all) are updated. Returns the mean
    per-sequence loss of every epoch.
    """
    if len(data) == 0:
        raise ValueError("behavioural cloning dataset is empty")
    params = model.named_parameters() if params is None else params
    opt = nx.Adam(params, lr=cfg.lr, clip=cfg.clip)
    rng = nx.make_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        total = 0.0
        for s in range(0, len(data), cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            try:
                loss = -batch_sequence_log_probs(model, data.contexts.take(b), [data.responses[j] for j in b],
                                                    use_cf).mean()
            except nx.NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss in epoch {epoch}") from exc
            opt.step(nx.backward(loss, params))
            total += loss.item() * len(b)
        curve.append(total / len(data))
        log.debug("bc epoch %d loss %.4f", epoch, curve[-1])
    return curve


def mean_loss(model: PolicyModel, data: BcData, batch_size: int = 128, use_cf: bool = True) -> float:
    tot = 0.0
    with nx.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            lp = batch_sequence_log_probs(model, data.contexts.take(idx), [data.responses[j] for j in idx], use_cf)
            tot += -lp.data.sum()
    return tot / len(data)


def pretrain_text(model: PolicyModel, data: BcData, cfg: TrainConfig) -> list[float]:
    """Language pretraining of everything except the adapters, with the CF slots zeroed."""
    return bc_train(model, data, cfg, params=model.transformer_parameters(), use_cf=False)


@dataclass
class WarmStartResult:
    stage1: list[float] = field(default_factory=list)
    stage2: list[float] = field(default_factory=list)
    transformer_checksum_before: str = ""
    transformer_checksum_after_stage1: str = ""
    transformer_checksum_after_stage2: str = ""


def warm_start(model: PolicyModel, data: BcData, stage1_epochs: int, stage2_epochs: int,
               cfg: TrainConfig | None = None) -> WarmStartResult:
    """Stage 1 trains only the adapters; stage 2 trains every parameter.

    Stage 1 keeps the best adapter weights seen so far, so its recorded
    training loss never increases.
    """
    if stage1_epochs <= 0 and stage2_epochs <= 0:
        raise ValueError("warm start needs at least one epoch in some stage")
    cfg = cfg or TrainConfig()
    res = WarmStartResult(transformer_checksum_before=nx.checksum(model.transformer_parameters()))
    adapters = model.adapter_parameters()
    best = mean_loss(model, data)
    res.stage1.append(best)
    for e in range(max(stage1_epochs, 0)):
        snapshot = {k: v.data.copy() for k, v in adapters.items()}
        bc_train(model, data, TrainConfig(1, cfg.lr, cfg.batch_size, cfg.clip, nx.derive_seed(cfg.seed, 1, e)),
                 params=adapters)
        cur = mean_loss(model, data)
        if cur > best:
            for k, v in adapters.items():
                v.data = snapshot[k]
            cur = best
        best = cur
        res.stage1.append(cur)
    res.transformer_checksum_after_stage1 = nx.checksum(model.transformer_parameters())
    if stage2_epochs > 0:
        res.stage2 = bc_train(model, data, TrainConfig(stage2_epochs, cfg.lr, cfg.batch_size, cfg.clip,
                                                        nx.derive_seed(cfg.seed, 2)))
    res.transformer_checksum_after_stage2 = nx.checksum(model.transformer_parameters())
    return res
