"""Learned reward models and the scalarized terminal reward.

Four scorers judge an endorsement ``Y`` for an item description ``I``
and user/item CF vectors: entailment against the description (NLI),
stylistic appeal (App), personalization (Per) and preference relevance
(Prel). ``joint_reward`` mixes them into a terminal-only reward sequence.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vocab import EOS_ID, Vocabulary, pad_batch

KINDS = ("nli", "app", "per", "prel")
DEFAULT_ETA = (2.0, 0.1, 1.0, 1.0)


@dataclass
class RewardConfig:
    d_embed: int = 32
    d_hidden: int = 64
    prel_hidden: int = 128
    epochs: int = 30
    prel_epochs: int = 10
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    encoder_epochs: int = 40
    k: int = 3
    relevance_tie_tol: float = 0.05
    encoder_constant: float = 0.3
    truncation_penalty: float = 0.5
    holdout_fraction: float = 0.1
    z_normalize: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if min(self.d_embed, self.d_hidden, self.prel_hidden, self.epochs, self.prel_epochs, self.batch_size) < 1:
            raise ValueError("reward model sizes and budgets must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def bt_pair_loss(score_w, score_l) -> Tensor:
    """−log σ(score_w − score_l), elementwise for arrays."""
    w = score_w if isinstance(score_w, Tensor) else nx.tensor(score_w)
    return -nx.log_sigmoid(w - score_l)


class BagEncoder(nx.Module):
    """Token embeddings averaged over the unmasked positions."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.embed = nx.Embedding(vocab_size, dim, rng, scale=0.3)

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        m = mask[..., None].astype(np.float64)
        counts = np.maximum(m.sum(axis=1), 1.0)
        return (self.embed(ids) * m).sum(axis=1) / counts


class _Texts:
    """Tokenizes and pads lists of strings, memoizing per string."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._cache: dict[str, np.ndarray] = {}

    def ids(self, text: str) -> np.ndarray:
        out = self._cache.get(text)
        if out is None:
            out = self.vocab.encode(text, strict=False)
            self._cache[text] = out
        return out

    def batch(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        return pad_batch([self.ids(t) for t in texts])


def sentence_texts(text: str) -> list[str]:
    out, cur = [], []
    for w in text.split():
        cur.append(w)
        if w in (".", "!"):
            out.append(" ".join(cur))
            cur = []
    if cur:
        out.append(" ".join(cur))
    return out


# ---------------------------------------------------------------------------
# frozen semantic encoder E
# ---------------------------------------------------------------------------

class SemanticEncoder(nx.Module):
    """Mean-pooled embeddings, a linear head, unit-normalized output."""

    def __init__(self, vocab: Vocabulary, d_embed: int, d_enc: int, rng: np.random.Generator):
        self.vocab = vocab
        self.bag = BagEncoder(len(vocab), d_embed, rng)
        self.head = nx.Linear(d_embed, d_enc, rng)
        self._texts = _Texts(vocab)
        self.frozen = False

    def raw(self, texts: Sequence[str]) -> Tensor:
        ids, mask = self._texts.batch(texts)
        return self.head(self.bag(ids, mask))

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        with nx.no_grad():
            z = self.raw(list(texts)).data
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        if (norm == 0).any():
            raise ValueError("encoder produced a zero vector")
        return z / norm


class CachedEncoder:
    """Memoizes a frozen encoder per text; labelling reuses the same few texts heavily."""

    def __init__(self, encoder: Callable[[Sequence[str]], np.ndarray]):
        self.encoder = encoder
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for t, v in zip(missing, self.encoder(missing)):
                self._cache[t] = v
        return np.stack([self._cache[t] for t in texts])


def encoder_targets(texts: Sequence[str], mentions_fn: Callable[[str], list[tuple[int, int]]],
                    n_attributes: int, constant: float = 0.3) -> np.ndarray:
    """Signed attribute indicators plus a constant coordinate, unit-normalized.

    The constant keeps texts without any attribute mention off the origin.
    """
    t = np.zeros((len(texts), n_attributes + 1))
    t[:, -1] = constant
    for k, text in enumerate(texts):
        for a, s in mentions_fn(text):
            t[k, a] += s
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def pretrain_encoder(vocab: Vocabulary, texts: Sequence[str], targets: np.ndarray, cfg: RewardConfig
                     ) -> tuple[SemanticEncoder, list[float]]:
    """Fit E so its direction matches ``targets`` (loss 1 − cos), then freeze it."""
    rng = nx.make_rng(nx.derive_seed(cfg.seed, 100))
    enc = SemanticEncoder(vocab, cfg.d_embed, targets.shape[1], rng)
    texts = list(texts)
    params = enc.named_parameters()
    opt = nx.Adam(params, lr=cfg.lr * 3)
    curve = []
    for _ in range(cfg.encoder_epochs):
        perm = rng.permutation(len(texts))
        tot = 0.0
        for s in range(0, len(texts), cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            z = enc.raw([texts[j] for j in b])
            zn = z / nx.sqrt((z * z).sum(axis=1, keepdims=True) + 1e-12)
            loss = 1.0 - (zn * targets[b]).sum(axis=1).mean()
            opt.step(nx.backward(loss, params))
            tot += loss.item() * len(b)
        curve.append(tot / len(texts))
    enc.frozen = True
    return enc, curve


def relevance_label(E: Callable[[Sequence[str]], np.ndarray], Y: str, item_text: str,
                    prefs: Sequence[str], k: int, tie_tol: float = 0.0) -> float:
    """Mean cos(E(Y), E(U_j)) over the k preferences closest to the item.

    Preferences are ranked by cos(E(U_j), E(I)) descending with ties going
    to the lower index. With ``tie_tol > 0``, runs of sorted similarities
    whose consecutive gaps are at most ``tie_tol`` count as tied, so tiny
    encoder errors cannot reorder preferences that are equally relevant.
    """
    J = len(prefs)
    if k < 1 or k > J:
        raise ValueError(f"k={k} must lie in [1, J={J}]")
    vecs = np.asarray(E([Y, item_text, *prefs]), dtype=np.float64)
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    y, item, P = vecs[0], vecs[1], vecs[2:]
    rel = P @ item
    order = sorted(range(J), key=lambda j: (-rel[j], j))
    if tie_tol > 0:
        group, groups = 0, {}
        for prev, j in zip([None] + order[:-1], order):
            if prev is not None and rel[prev] - rel[j] > tie_tol:
                group += 1
            groups[j] = group
        order = sorted(range(J), key=lambda j: (groups[j], j))
    top = order[:k]
    return float(np.clip(np.mean([P[j] @ y for j in top]), -1.0, 1.0))


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

class RewardScorer(nx.Module):
    kind: str = ""

    def __init__(self, vocab: Vocabulary, cfg: RewardConfig, d_cf: int, rng: np.random.Generator):
        self.vocab = vocab
        self.cfg = cfg
        self.d_cf = d_cf
        self.bag = BagEncoder(len(vocab), cfg.d_embed, rng)
        self._texts = _Texts(vocab)
        self.trained = False
        self.offset = 0.0
        self.cf_scale = 1.0
        self.heldout: dict[str, float] = {}

    def pool(self, texts: Sequence[str]) -> Tensor:
        return self.bag(*self._texts.batch(list(texts)))

    def meta(self) -> dict:
        return {"kind": self.kind, "offset": self.offset, "cf_scale": self.cf_scale,
                "d_cf": self.d_cf, "heldout": self.heldout}

    def save(self, path: str | Path) -> None:
        state = self.state_dict()
        state["__offset"] = np.array(self.offset)
        state["__cf_scale"] = np.array(self.cf_scale)
        nx.save_tensors(path, state)

    def load(self, path: str | Path) -> None:
        state = nx.load_tensors(path)
        self.offset = float(state.pop("__offset"))
        self.cf_scale = float(state.pop("__cf_scale"))
        self.load_state_dict(state)
        self.trained = True

    def _cf(self, v) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        if v.shape[1] != self.d_cf:
            raise ValueError(f"CF vector has dimension {v.shape[1]}, scorer expects {self.d_cf}")
        return v / self.cf_scale


class AppScorer(RewardScorer):
    kind = "app"

    def __init__(self, vocab, cfg, d_cf, rng):
        super().__init__(vocab, cfg, d_cf, rng)
        self.head = nx.MLP([cfg.d_embed, cfg.d_hidden, 1], rng)

    def forward(self, Ys: Sequence[str]) -> Tensor:
        return self.head(self.pool(Ys)).reshape(-1)

    def score(self, Ys: Sequence[str]) -> np.ndarray:
        with nx.no_grad():
            return self.forward(Ys).data - self.offset


class PerScorer(RewardScorer):
    """FFN(pool(Y)) + pool(Y)ᵀ W [u; i].

    The CF vectors enter only through a term bilinear in the text, so a
    context on its own cannot shift the score.
    """

    kind = "per"

    def __init__(self, vocab, cfg, d_cf, rng):
        super().__init__(vocab, cfg, d_cf, rng)
        self.head = nx.MLP([cfg.d_embed, cfg.d_hidden, 1], rng)
        self.cf_proj = nx.Linear(cfg.d_embed, 2 * d_cf, rng, bias=False)

    def forward(self, Ys: Sequence[str], i_vecs, u_vecs) -> Tensor:
        p = self.pool(Ys)
        cf = nx.tensor(np.concatenate([self._cf(u_vecs), self._cf(i_vecs)], axis=1))
        return self.head(p).reshape(-1) + (self.cf_proj(p) * cf).sum(axis=1)

    def score(self, Ys, i_vecs, u_vecs) -> np.ndarray:
        with nx.no_grad():
            return self.forward(Ys, i_vecs, u_vecs).data


class PrelScorer(RewardScorer):
    """tanh head over pooled Y, pooled I, their product and user-gated interactions."""

    kind = "prel"

    def __init__(self, vocab, cfg, d_cf, rng):
        super().__init__(vocab, cfg, d_cf, rng)
        d = cfg.d_embed
        self.user_proj = nx.Linear(d_cf, d, rng)
        self.head = nx.MLP([5 * d + d_cf, cfg.prel_hidden, cfg.prel_hidden, 1], rng)

    def forward(self, Ys, item_texts, u_vecs) -> Tensor:
        y, it = self.pool(Ys), self.pool(item_texts)
        u = nx.tensor(self._cf(u_vecs))
        pu = self.user_proj(u)
        yi = y * it
        feats = nx.concat([y, it, yi, pu * y, pu * yi, u], axis=1)
        return nx.tanh(self.head(feats)).reshape(-1)

    def score(self, Ys, item_texts, u_vecs) -> np.ndarray:
        with nx.no_grad():
            return self.forward(Ys, item_texts, u_vecs).data


class NliScorer(RewardScorer):
    """Per-sentence entailment probability from [h; p; h⊙p]."""

    kind = "nli"

    def __init__(self, vocab, cfg, d_cf, rng):
        super().__init__(vocab, cfg, d_cf, rng)
        d = cfg.d_embed
        self.head = nx.MLP([3 * d, cfg.d_hidden, 1], rng)

    def logits(self, hypotheses: Sequence[str], premises: Sequence[str]) -> Tensor:
        h, p = self.pool(hypotheses), self.pool(premises)
        return self.head(nx.concat([h, p, h * p], axis=1)).reshape(-1)

    def sentence_probs(self, hypotheses, premises) -> np.ndarray:
        with nx.no_grad():
            return nx.stable_sigmoid(self.logits(hypotheses, premises).data)

    def score(self, Ys: Sequence[str], premises: Sequence[str], empty_value: float | None = None) -> np.ndarray:
        """Mean per-sentence entailment probability of each Y given its premise."""
        hyps, prem, owner = [], [], []
        for k, (y, p) in enumerate(zip(Ys, premises)):
            sents = sentence_texts(y)
            if not sents and empty_value is None:
                raise ValueError("NLI score undefined for an empty response")
            hyps += sents
            prem += [p] * len(sents)
            owner += [k] * len(sents)
        out = np.full(len(Ys), np.nan if empty_value is None else float(empty_value))
        if hyps:
            probs = np.clip(self.sentence_probs(hyps, prem), 1e-12, 1 - 1e-12)
            owner = np.array(owner)
            sums = np.bincount(owner, weights=probs, minlength=len(Ys))
            counts = np.bincount(owner, minlength=len(Ys))
            has = counts > 0
            out[has] = sums[has] / counts[has]
        return out


def nli_score(scorer: NliScorer, Y: str, item_text: str) -> float:
    if not Y.split():
        raise ValueError("NLI score undefined for an empty response")
    return float(scorer.score([Y], [item_text])[0])


def prel_score(scorer: PrelScorer, Y: str, item_text: str, u_vec) -> float:
    return float(scorer.score([Y], [item_text], u_vec)[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _fit(scorer: RewardScorer, n: int, loss_fn: Callable[[np.ndarray], Tensor], cfg: RewardConfig,
         rng: np.random.Generator, epochs: int | None = None) -> list[float]:
    params = scorer.named_parameters()
    opt = nx.Adam(params, lr=cfg.lr, clip=5.0)
    curve = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        perm = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, cfg.batch_size):
            b = perm[s:s + cfg.batch_size]
            loss = loss_fn(b)
            if cfg.weight_decay:
                loss = loss + cfg.weight_decay * sum((p * p).sum() for p in params.values())
            opt.step(nx.backward(loss, params))
            tot += loss.item() * len(b)
        curve.append(tot / n)
    scorer.trained = True
    return curve


@dataclass
class PairData:
    """Bradley–Terry training pairs: texts plus optional per-pair CF vectors."""

    winners: list[str]
    losers: list[str]
    i_vecs: np.ndarray | None = None
    u_vecs: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.winners)

    def subset(self, idx) -> "PairData":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return PairData([self.winners[j] for j in idx], [self.losers[j] for j in idx], pick(self.i_vecs),
                        pick(self.u_vecs))


def _cf_scale(*arrays) -> float:
    vals = np.concatenate([np.asarray(a).ravel() for a in arrays if a is not None])
    s = float(vals.std()) if vals.size else 1.0
    return s if s > 0 else 1.0


def train_pairwise_rm(kind: str, data: PairData, vocab: Vocabulary, cfg: RewardConfig, d_cf: int = 1,
                      normalization_texts: Sequence[str] | None = None) -> tuple[RewardScorer, list[float]]:
    """Fit App or Per by minimizing the mean Bradley–Terry pair loss.

    App is re-centred afterwards so its mean over the training population
    (``normalization_texts``, default every text in ``data``) is zero.
    """
    cfg.validate()
    if kind not in ("app", "per"):
        raise ValueError(f"pairwise training supports 'app' and 'per', not {kind!r}")
    if len(data) < 100:
        raise ValueError(f"need at least 100 labelled pairs, got {len(data)}")
    if all(w == l for w, l in zip(data.winners, data.losers)):
        warnings.warn("every pair is tied: no learning signal")
    rng = nx.make_rng(nx.derive_seed(cfg.seed, 200 + KINDS.index(kind)))
    if kind == "app":
        scorer: RewardScorer = AppScorer(vocab, cfg, d_cf, rng)
        fwd = lambda texts, b: scorer.forward(texts)
    else:
        if data.i_vecs is None or data.u_vecs is None:
            raise ValueError("personalization pairs need item and user CF vectors")
        scorer = PerScorer(vocab, cfg, data.i_vecs.shape[1], rng)
        scorer.cf_scale = _cf_scale(data.i_vecs, data.u_vecs)
        fwd = lambda texts, b: scorer.forward(texts, data.i_vecs[b], data.u_vecs[b])

    def loss_fn(b):
        sw = fwd([data.winners[j] for j in b], b)
        sl = fwd([data.losers[j] for j in b], b)
        return bt_pair_loss(sw, sl).mean()

    curve = _fit(scorer, len(data), loss_fn, cfg, rng)
    if kind == "app":
        texts = list(normalization_texts) if normalization_texts is not None else sorted(set(data.winners + data.losers))
        center_app(scorer, texts)
    return scorer, curve


def center_app(scorer: AppScorer, texts: Sequence[str]) -> float:
    """Shift the App offset so the mean score over ``texts`` is zero; idempotent."""
    scorer.offset = 0.0
    with nx.no_grad():
        raw = scorer.forward(list(texts)).data
    scorer.offset = float(np.mean(raw))
    return scorer.offset


def train_nli(hypotheses: Sequence[str], premises: Sequence[str], labels: Sequence[int], vocab: Vocabulary,
              cfg: RewardConfig) -> tuple[NliScorer, list[float]]:
    cfg.validate()
    if not len(labels):
        raise ValueError("empty NLI dataset")
    rng = nx.make_rng(nx.derive_seed(cfg.seed, 200))
    scorer = NliScorer(vocab, cfg, 1, rng)
    y = np.asarray(labels, dtype=np.float64)
    H, P = list(hypotheses), list(premises)

    def loss_fn(b):
        z = scorer.logits([H[j] for j in b], [P[j] for j in b])
        t = y[b]
        # binary cross-entropy on logits
        return -(nx.log_sigmoid(z) * t + nx.log_sigmoid(-z) * (1.0 - t)).mean()

    return scorer, _fit(scorer, len(y), loss_fn, cfg, rng)


def train_prel(Ys: Sequence[str], item_texts: Sequence[str], u_vecs: np.ndarray, labels: Sequence[float],
               vocab: Vocabulary, cfg: RewardConfig) -> tuple[PrelScorer, list[float]]:
    """Minimize mean (s − Prel(Y; I, u))²."""
    cfg.validate()
    if not len(labels):
        raise ValueError("empty relevance dataset")
    u_vecs = np.asarray(u_vecs, dtype=np.float64)
    rng = nx.make_rng(nx.derive_seed(cfg.seed, 203))
    scorer = PrelScorer(vocab, cfg, u_vecs.shape[1], rng)
    scorer.cf_scale = _cf_scale(u_vecs)
    s = np.asarray(labels, dtype=np.float64)
    Ys, Is = list(Ys), list(item_texts)

    def loss_fn(b):
        pred = scorer.forward([Ys[j] for j in b], [Is[j] for j in b], u_vecs[b])
        d = pred - s[b]
        return (d * d).mean()

    return scorer, _fit(scorer, len(s), loss_fn, cfg, rng, epochs=cfg.prel_epochs)


def pairwise_accuracy(score_w: np.ndarray, score_l: np.ndarray) -> float:
    return float(np.mean(np.asarray(score_w) > np.asarray(score_l)))


# ---------------------------------------------------------------------------
# joint terminal reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    nli: float = DEFAULT_ETA[0]
    app: float = DEFAULT_ETA[1]
    per: float = DEFAULT_ETA[2]
    prel: float = DEFAULT_ETA[3]

    def __post_init__(self):
        vals = self.as_array()
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise ValueError("reward weights must be finite and non-negative")
        if not (vals > 0).any():
            raise ValueError("reward weights must not all be zero")

    def as_array(self) -> np.ndarray:
        return np.array([self.nli, self.app, self.per, self.prel], dtype=np.float64)

    @classmethod
    def parse(cls, value) -> "RewardWeights":
        if isinstance(value, RewardWeights):
            return value
        if isinstance(value, str):
            value = [float(v) for v in value.split(",")]
        vals = list(value)
        if len(vals) != 4:
            raise ValueError("expected four reward weights")
        return cls(*map(float, vals))


@dataclass
class RewardBundle:
    vocab: Vocabulary
    nli: NliScorer
    app: AppScorer
    per: PerScorer
    prel: PrelScorer
    weights: RewardWeights = field(default_factory=RewardWeights)
    cfg: RewardConfig = field(default_factory=RewardConfig)
    encoder: SemanticEncoder | None = None
    component_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    component_center: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def scorers(self) -> dict[str, RewardScorer]:
        return {"nli": self.nli, "app": self.app, "per": self.per, "prel": self.prel}

    def check_trained(self) -> None:
        for name, s in self.scorers().items():
            if not s.trained:
                raise ValueError(f"{name} scorer in bundle is untrained")

    def components(self, Ys: Sequence[str], item_texts: Sequence[str], i_vecs, u_vecs) -> np.ndarray:
        """(B, 4) raw component scores [NLI, App, Per, Prel]; empty responses get NLI 0."""
        self.check_trained()
        Ys, item_texts = list(Ys), list(item_texts)
        out = np.empty((len(Ys), 4))
        out[:, 0] = self.nli.score(Ys, item_texts, empty_value=0.0)
        out[:, 1] = self.app.score(Ys)
        out[:, 2] = self.per.score(Ys, i_vecs, u_vecs)
        out[:, 3] = self.prel.score(Ys, item_texts, u_vecs)
        return out

    def scalarize(self, comps: np.ndarray, weights: RewardWeights | None = None) -> np.ndarray:
        w = (weights or self.weights).as_array()
        c = np.atleast_2d(comps)
        if self.cfg.z_normalize:
            c = (c - self.component_center) / self.component_scale
        return c @ w


def _terminal_index(Y: Sequence[int]) -> tuple[int, bool]:
    """(index of the terminal step, whether it was truncated)."""
    Y = list(Y)
    if EOS_ID in Y:
        return Y.index(EOS_ID), False
    return len(Y) - 1, True


def joint_reward(bundle: RewardBundle, Y, item_text: str, i_vec, u_vec,
                 weights: RewardWeights | Sequence[float] | None = None) -> np.ndarray:
    """Per-step rewards: zero everywhere except the terminal step.

    ``Y`` is a token-id sequence (or a string, read as ending in EOS). The
    terminal step is the EOS position; without EOS it is the last step and
    the truncation penalty is subtracted.
    """
    w = RewardWeights.parse(weights) if weights is not None else bundle.weights
    if isinstance(Y, str):
        ids = list(bundle.vocab.encode(Y, strict=False)) + [EOS_ID]
    else:
        ids = [int(t) for t in Y]
    if not ids:
        raise ValueError("empty token sequence")
    return terminal_rewards(bundle, [ids], [item_text], np.atleast_2d(i_vec), np.atleast_2d(u_vec), w)[0]


def terminal_rewards(bundle: RewardBundle, seqs: Sequence[Sequence[int]], item_texts: Sequence[str],
                     i_vecs, u_vecs, weights: RewardWeights | None = None,
                     return_components: bool = False):
    """Batched ``joint_reward`` over token sequences."""
    texts, term = [], []
    for ids in seqs:
        idx, trunc = _terminal_index(ids)
        texts.append(bundle.vocab.decode(ids))
        term.append((idx, trunc))
    comps = bundle.components(texts, item_texts, i_vecs, u_vecs)
    total = bundle.scalarize(comps, weights)
    out = []
    for k, ids in enumerate(seqs):
        idx, trunc = term[k]
        r = np.zeros(len(ids))
        r[idx] = total[k] - (bundle.cfg.truncation_penalty if trunc else 0.0)
        out.append(r)
    return (out, comps) if return_components else out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_SCORER_CLASSES = {"nli": NliScorer, "app": AppScorer, "per": PerScorer, "prel": PrelScorer}


def save_bundle(bundle: RewardBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"weights": bundle.weights.as_array().tolist(), "config": asdict(bundle.cfg),
                "vocab": bundle.vocab.to_list(), "vocab_hash": bundle.vocab.fingerprint(),
                "component_center": bundle.component_center.tolist(),
                "component_scale": bundle.component_scale.tolist(), "scorers": {}}
    for name, s in bundle.scorers().items():
        path = directory / f"{name}.p4t"
        s.save(path)
        manifest["scorers"][name] = {"path": path.name, **s.meta()}
    if bundle.encoder is not None:
        nx.save_tensors(directory / "encoder.p4t", bundle.encoder.state_dict())
        manifest["encoder"] = {"path": "encoder.p4t", "d_enc": int(bundle.encoder.head.weight.shape[1])}
    out = directory / "bundle.json"
    out.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_bundle(directory: str | Path) -> RewardBundle:
    directory = Path(directory)
    manifest = json.loads((directory / "bundle.json").read_text())
    vocab = Vocabulary.from_list(manifest["vocab"])
    cfg = RewardConfig(**manifest["config"])
    scorers = {}
    for name in KINDS:
        meta = manifest["scorers"][name]
        s = _SCORER_CLASSES[name](vocab, cfg, int(meta["d_cf"]), nx.make_rng(0))
        s.load(directory / meta["path"])
        s.heldout = meta.get("heldout", {})
        scorers[name] = s
    enc = None
    if "encoder" in manifest:
        enc = SemanticEncoder(vocab, cfg.d_embed, int(manifest["encoder"]["d_enc"]), nx.make_rng(0))
        enc.load_state_dict(nx.load_tensors(directory / manifest["encoder"]["path"]))
        enc.frozen = True
    return RewardBundle(vocab, scorers["nli"], scorers["app"], scorers["per"], scorers["prel"],
                        RewardWeights(*manifest["weights"]), cfg, enc,
                        np.array(manifest["component_scale"]), np.array(manifest["component_center"]))
