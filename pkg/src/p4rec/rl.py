"""Contextual-MDP fine-tuning: KL-regularized REINFORCE, soft actor-critic and soft-Q distillation.

States are token prefixes s_n = y_{0:n-1}, actions are tokens, the
transition appends the action and the reward arrives once, at EOS or at
truncation. Every policy here exposes ``log_probs(batch, inputs)`` returning
(B, T, V) next-token log-distributions for inputs [BOS, a_0, ..., a_{T-2}],
``named_parameters()`` and ``horizon``. ``PolicyModel`` and ``TabularPolicy``
both qualify.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .lm import ContextBatch, LmConfig, PolicyModel, decode, response_arrays
from .numerics import Tensor
from .rewards import RewardBundle, RewardWeights, terminal_rewards
from .vocab import BOS_ID, EOS_ID

log = logging.getLogger(__name__)

ALGOS = ("reinforce", "sac", "distill")
BASELINES = ("none", "mean", "learned")


class Policy(Protocol):
    horizon: int

    def log_probs(self, batch, inputs: np.ndarray) -> Tensor: ...

    def named_parameters(self) -> dict[str, Tensor]: ...


@dataclass
class RlConfig:
    algo: str = "reinforce"
    beta: float = 0.1
    alpha: float = 0.1
    lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 32
    steps: int = 200
    baseline: str = "mean"
    baseline_rate: float = 0.1
    target_period: int = 20
    critic_updates: int = 1
    buffer_size: int = 4096
    temperature: float = 1.0
    clip: float = 1.0
    eta: list[float] = field(default_factory=lambda: [2.0, 0.1, 1.0, 1.0])
    critic_d_model: int = 32
    critic_layers: int = 1
    dual_q: bool = False
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.alpha <= 0 or self.lr <= 0 or self.critic_lr <= 0 or self.temperature <= 0:
            raise ValueError("alpha, learning rates and temperature must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.target_period < 1:
            raise ValueError("batch_size and target_period must be >= 1, steps >= 0")
        if self.dual_q:
            raise ValueError("dual-Q critics are not implemented")
        RewardWeights.parse(self.eta)


# ---------------------------------------------------------------------------
# environments and trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    context: int
    tokens: list[int]
    log_probs: list[float]
    reward: float | None
    truncated: bool
    policy_tag: str = ""
    components: list[float] | None = None

    def step_rewards(self) -> np.ndarray:
        """Per-step rewards; only the terminal step is nonzero."""
        if self.reward is None:
            raise ValueError("trajectory has no terminal reward")
        r = np.zeros(len(self.tokens))
        r[-1] = self.reward
        return r


@dataclass
class CoMdp:
    """A single-context enumerable CoMDP with a reward over complete action sequences."""

    n_actions: int
    horizon: int
    reward: Callable[[tuple[int, ...]], float]
    eos_id: int | None = None

    def is_terminal(self, seq: Sequence[int]) -> bool:
        return len(seq) >= self.horizon or (self.eos_id is not None and len(seq) > 0 and seq[-1] == self.eos_id)

    def step(self, state: tuple[int, ...], action: int) -> tuple[tuple[int, ...], float, bool]:
        nxt = state + (int(action),)
        done = self.is_terminal(nxt)
        return nxt, (float(self.reward(nxt)) if done else 0.0), done

    def states(self) -> list[tuple[int, ...]]:
        """Every non-terminal state reachable under a full-support policy, shortest first."""
        out = [()]
        frontier = [()]
        for _ in range(self.horizon - 1):
            frontier = [s + (a,) for s in frontier for a in range(self.n_actions)
                        if not self.is_terminal(s + (a,))]
            out += frontier
        return out

    def sequences(self) -> list[tuple[int, ...]]:
        """All terminal action sequences."""
        out = []
        for s in self.states():
            for a in range(self.n_actions):
                if self.is_terminal(s + (a,)):
                    out.append(s + (a,))
        return out

    def rewards(self, ctx_ids: np.ndarray, seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, None]:
        return np.array([self.reward(tuple(s)) for s in seqs], dtype=float), None

    def batch(self, ctx_ids: np.ndarray):
        return ToyBatch(len(ctx_ids))

    @property
    def n_contexts(self) -> int:
        return 1


@dataclass
class ToyBatch:
    size: int

    def __len__(self) -> int:
        return self.size


class LmEnvironment:
    """Training contexts plus the reward bundle that scores finished responses."""

    def __init__(self, bundle: RewardBundle, contexts: ContextBatch, item_texts: Sequence[str],
                 weights: RewardWeights | Sequence[float] | None = None, horizon: int = 48):
        self.bundle = bundle
        self.contexts = contexts
        self.item_texts = list(item_texts)
        self.weights = RewardWeights.parse(weights) if weights is not None else bundle.weights
        self.horizon = horizon
        self.eos_id = EOS_ID

    @property
    def n_contexts(self) -> int:
        return len(self.contexts)

    def batch(self, ctx_ids: np.ndarray) -> ContextBatch:
        return self.contexts.take(ctx_ids)

    def rewards(self, ctx_ids: np.ndarray, seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        ctx_ids = np.asarray(ctx_ids)
        per_step, comps = terminal_rewards(self.bundle, seqs, [self.item_texts[k] for k in ctx_ids],
                                           self.contexts.i_vecs[ctx_ids], self.contexts.u_vecs[ctx_ids],
                                           self.weights, return_components=True)
        return np.array([float(r.sum()) for r in per_step]), comps


def _state_ids(index: dict[tuple[int, ...], int], inputs: np.ndarray) -> np.ndarray:
    """Row of each input position's prefix (BOS dropped); unknown prefixes map to row 0."""
    inputs = np.asarray(inputs)
    B, T = inputs.shape
    ids = np.zeros((B, T), dtype=np.int64)
    for b in range(B):
        for t in range(T):
            ids[b, t] = index.get(tuple(int(x) for x in inputs[b, 1:t + 1]), 0)
    return ids


class TabularPolicy(nx.Module):
    """One softmax per enumerable state; used for exact toy checks."""

    def __init__(self, mdp: CoMdp, logits: np.ndarray | None = None):
        self.mdp = mdp
        self.horizon = mdp.horizon
        self.index = {s: k for k, s in enumerate(mdp.states())}
        shape = (len(self.index), mdp.n_actions)
        self.table = nx.parameter(np.zeros(shape) if logits is None else np.broadcast_to(logits, shape).copy())

    def log_probs(self, batch, inputs: np.ndarray) -> Tensor:
        return nx.log_softmax(nx.embedding(self.table, _state_ids(self.index, inputs)), axis=-1)

    def probs(self, state: tuple[int, ...]) -> np.ndarray:
        return nx.stable_softmax(self.table.data[self.index[state]])

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.mdp, self.table.data.copy())

    @classmethod
    def from_probs(cls, mdp: CoMdp, probs: dict[tuple[int, ...], np.ndarray] | np.ndarray) -> "TabularPolicy":
        pol = cls(mdp)
        for s, k in pol.index.items():
            p = probs[s] if isinstance(probs, dict) else probs
            pol.table.data[k] = np.log(np.asarray(p, float))
        return pol


def _next_logits(policy: Policy, batch) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(policy, PolicyModel):
        return lambda inputs: policy.logits(batch, inputs).data[:, -1, :]
    return lambda inputs: policy.log_probs(batch, inputs).data[:, -1, :]


def rollout_batch(policy: Policy, env, ctx_ids: Sequence[int], seed: int, mode: str = "temperature",
                  temperature: float = 1.0, tag: str = "") -> list[Trajectory]:
    """Decode one response per context and attach its terminal reward."""
    ctx_ids = np.asarray(ctx_ids, dtype=np.int64)
    batch = env.batch(ctx_ids)
    eos = getattr(env, "eos_id", EOS_ID)
    samples = decode(_next_logits(policy, batch), len(ctx_ids), env.horizon, mode, temperature, seed, eos)
    rewards, comps = env.rewards(ctx_ids, [s.tokens for s in samples])
    return [Trajectory(int(c), s.tokens, s.log_probs, float(r), s.truncated, tag,
                       None if comps is None else comps[k].tolist())
            for k, (c, s, r) in enumerate(zip(ctx_ids, samples, rewards))]


def rollout(policy: Policy, env, ctx: int, seed: int, mode: str = "temperature", temperature: float = 1.0
            ) -> Trajectory:
    return rollout_batch(policy, env, [ctx], seed, mode, temperature)[0]


# ---------------------------------------------------------------------------
# log-ratio and policy gradients
# ---------------------------------------------------------------------------

def step_log_probs(policy: Policy, batch, seqs: Sequence[Sequence[int]]
                   ) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray, np.ndarray]:
    """(chosen-token log probs (B, T), full log-distributions (B, T, V), inputs, targets, mask)."""
    inputs, targets, mask = response_arrays(seqs)
    lp = policy.log_probs(batch, inputs)
    B, T, V = lp.shape
    chosen = nx.reshape(nx.reshape(lp, (B * T, V))[np.arange(B * T), targets.reshape(-1)], (B, T))
    return chosen, lp, inputs, targets, mask


def _anchor_step_log_probs(anchor: Policy, batch, seqs, vocab_size: int) -> np.ndarray:
    with nx.no_grad():
        chosen, lp, *_ = step_log_probs(anchor, batch, seqs)
    if lp.shape[-1] != vocab_size:
        raise ValueError(f"vocabulary mismatch: policy {vocab_size} vs anchor {lp.shape[-1]}")
    return chosen.data


def kl_seq(policy: Policy, anchor: Policy, batch, Y: Sequence[int]) -> float:
    """Σ_n [log π_θ(a_n|s_n) − log p_pre(a_n|s_n)] for a single trajectory."""
    return float(kl_seq_batch(policy, anchor, batch, [Y])[0])


def kl_seq_batch(policy: Policy, anchor: Policy, batch, seqs: Sequence[Sequence[int]]) -> np.ndarray:
    with nx.no_grad():
        chosen, lp, _, _, mask = step_log_probs(policy, batch, seqs)
    ref = _anchor_step_log_probs(anchor, batch, seqs, lp.shape[-1])
    return ((chosen.data - ref) * mask).sum(axis=1)


@dataclass
class BaselineState:
    """Per-step running estimate of the shaped return (the "learned" baseline)."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rate: float = 0.1

    def get(self, T: int) -> np.ndarray:
        if len(self.values) < T:
            self.values = np.concatenate([self.values, np.full(T - len(self.values), np.nan)])
        return np.nan_to_num(self.values[:T], nan=0.0)

    def update(self, returns: np.ndarray, mask: np.ndarray) -> None:
        T = returns.shape[1]
        self.get(T)
        for n in range(T):
            col = returns[mask[:, n], n]
            if len(col):
                v = self.values[n]
                self.values[n] = col.mean() if np.isnan(v) else v + self.rate * (col.mean() - v)


def reinforce_loss(policy: Policy, anchor: Policy | None, batch, trajs: Sequence[Trajectory], beta: float,
                   baseline: str = "mean", baseline_state: BaselineState | None = None
                   ) -> tuple[Tensor, dict]:
    """Surrogate whose gradient is −E[Σ_n (G_n − b_n) ∇ log π(a_n|s_n)].

    G_n = r − β Σ_{m≥n} log(π/p_pre)(a_m|s_m): the KL term enters as a
    per-step reward shaping, so each action is credited with the terminal
    reward and the KL penalties it can still influence.
    """
    if not trajs:
        raise ValueError("empty rollout batch")
    seqs = [t.tokens for t in trajs]
    r = np.array([t.reward if t.reward is not None else np.nan for t in trajs])
    if np.isnan(r).any():
        raise ValueError("trajectory has no terminal reward")
    chosen, lp, _, _, mask = step_log_probs(policy, batch, seqs)
    if anchor is not None:
        ratio = (chosen.data - _anchor_step_log_probs(anchor, batch, seqs, lp.shape[-1])) * mask
    else:
        ratio = np.zeros(mask.shape)
    to_go = np.cumsum(ratio[:, ::-1], axis=1)[:, ::-1]
    G = (r[:, None] - beta * to_go) * mask
    if baseline == "none":
        b = np.zeros_like(G)
    elif baseline == "mean":
        b = np.full_like(G, G[:, 0].mean())
    elif baseline == "learned":
        if baseline_state is None:
            raise ValueError("learned baseline needs a BaselineState")
        b = np.broadcast_to(baseline_state.get(G.shape[1]), G.shape)
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    adv = (G - b) * mask
    loss = -(chosen * adv).sum(axis=1).mean()
    diag = {"mean_return": float(r.mean()), "mean_kl": float(ratio.sum(axis=1).mean()),
            "mean_shaped_return": float(G[:, 0].mean()), "mean_length": float(mask.sum(axis=1).mean())}
    if baseline == "learned":
        baseline_state.update(G, mask)
    return loss, diag


def reinforce_step(policy: Policy, anchor: Policy | None, batch, trajs: Sequence[Trajectory], cfg: RlConfig,
                   opt: nx.Adam, baseline_state: BaselineState | None = None) -> dict:
    loss, diag = reinforce_loss(policy, anchor, batch, trajs, cfg.beta, cfg.baseline, baseline_state)
    diag["grad_norm"] = opt.step(nx.backward(loss, opt.params))
    return diag


# ---------------------------------------------------------------------------
# critics
# ---------------------------------------------------------------------------

class CriticHeads(nx.Module):
    """Q_n(s, ·) over all actions and V_n(s) from one decoder trunk; the step index is the position."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator, cf_scale: float = 1.0):
        self.body = PolicyModel(cfg, rng)
        self.body.cf_scale = cf_scale
        self.v_head = nx.Linear(cfg.d_model, 1, rng, scale=0.02)
        self.horizon = cfg.horizon

    def __call__(self, batch, inputs: np.ndarray) -> tuple[Tensor, Tensor]:
        h = self.body.hidden(batch, inputs)
        B, T, _ = h.shape
        return self.body.head(h), nx.reshape(self.v_head(h), (B, T))

    def copy(self) -> "CriticHeads":
        other = CriticHeads(self.body.cfg, nx.make_rng(0), self.body.cf_scale)
        other.load_state_dict(self.state_dict())
        return other


class TabularCritic(nx.Module):
    def __init__(self, mdp: CoMdp, q: np.ndarray | None = None, v: np.ndarray | None = None):
        self.mdp = mdp
        self.index = {s: k for k, s in enumerate(mdp.states())}
        n = len(self.index)
        self.horizon = mdp.horizon
        self.q = nx.parameter(np.zeros((n, mdp.n_actions)) if q is None else q.copy())
        self.v = nx.parameter(np.zeros((n, 1)) if v is None else v.reshape(n, 1).copy())

    def __call__(self, batch, inputs: np.ndarray) -> tuple[Tensor, Tensor]:
        ids = _state_ids(self.index, inputs)
        B, T = ids.shape
        return nx.embedding(self.q, ids), nx.reshape(nx.embedding(self.v, ids), (B, T))

    def copy(self) -> "TabularCritic":
        other = TabularCritic(self.mdp)
        other.load_state_dict(self.state_dict())
        return other

    @classmethod
    def from_backup(cls, mdp: CoMdp, backup: "SoftBackup") -> "TabularCritic":
        c = cls(mdp)
        for s, k in c.index.items():
            c.q.data[k] = backup.Q[s]
            c.v.data[k, 0] = backup.V[s]
        return c


def _gather(x: Tensor, targets: np.ndarray) -> Tensor:
    B, T, V = x.shape
    return nx.reshape(nx.reshape(x, (B * T, V))[np.arange(B * T), targets.reshape(-1)], (B, T))


def critic_losses(critics, target, batch, trajs: Sequence[Trajectory], policy: Policy, anchor: Policy,
                  alpha: float) -> tuple[Tensor, Tensor, Tensor]:
    """(L_Q, L_V, L_θ) averaged over the trajectories.

    L_Q regresses Q_n(s_n, a_n) on V_tar,n+1(s_{n+1}) and, at the last step,
    on the terminal reward. L_V regresses V_n(s_n) on
    Q_tar,n(s_n, a_n) − α log(π/p_pre)(a_n|s_n). L_θ is the actor objective
    Σ_n Q_n(s_n, a_n) − α log(π/p_pre)(a_n|s_n), to be maximized.
    """
    if any(t.reward is None for t in trajs):
        raise ValueError("trajectory missing terminal reward")
    seqs = [t.tokens for t in trajs]
    r = np.array([t.reward for t in trajs])
    chosen, lp, inputs, targets, mask = step_log_probs(policy, batch, seqs)
    ref = _anchor_step_log_probs(anchor, batch, seqs, lp.shape[-1])
    Q, V = critics(batch, inputs)
    with nx.no_grad():
        Qt, Vt = target(batch, inputs)
    q_sa = _gather(Q, targets)
    lengths = mask.sum(axis=1)
    y = np.zeros(mask.shape)
    y[:, :-1] = Vt.data[:, 1:]
    y[np.arange(len(trajs)), lengths - 1] = r
    y *= mask
    L_Q = (((q_sa - y) ** 2) * mask).sum(axis=1).mean()
    log_ratio = (chosen.data - ref) * mask
    qt_sa = np.take_along_axis(Qt.data, targets[..., None], axis=-1)[..., 0]
    L_V = (((V - (qt_sa - alpha * log_ratio)) ** 2) * mask).sum(axis=1).mean()
    actor = (nx.tensor(q_sa.data) - (chosen - nx.tensor(ref)) * alpha) * mask
    L_theta = actor.sum(axis=1).mean()
    return L_Q, L_V, L_theta


def closed_form_targets(target, anchor: Policy, batch, seqs: Sequence[Sequence[int]], rewards: np.ndarray,
                        alpha: float) -> np.ndarray:
    """Bellman targets for Q_n(s_n, a_n) using V_{n+1} = α log E_{p_pre} exp(Q_tar,n+1/α) in closed form."""
    inputs, targets, mask = response_arrays(seqs)
    with nx.no_grad():
        Qt, _ = target(batch, inputs)
        logp = anchor.log_probs(batch, inputs).data
    z = logp + Qt.data / alpha
    m = z.max(axis=-1, keepdims=True)
    v = alpha * (m[..., 0] + np.log(np.exp(z - m).sum(axis=-1)))
    y = np.zeros(mask.shape)
    y[:, :-1] = v[:, 1:]
    y[np.arange(len(seqs)), mask.sum(axis=1) - 1] = rewards
    return y * mask


# ---------------------------------------------------------------------------
# exact backup and distillation
# ---------------------------------------------------------------------------

@dataclass
class SoftBackup:
    V: dict[tuple[int, ...], float]
    Q: dict[tuple[int, ...], np.ndarray]
    mu: dict[tuple[int, ...], np.ndarray]


def _state_log_probs(policy: Policy, states: Sequence[tuple[int, ...]]) -> dict[tuple[int, ...], np.ndarray]:
    out = {}
    by_len: dict[int, list] = {}
    for s in states:
        by_len.setdefault(len(s), []).append(s)
    with nx.no_grad():
        for n, group in by_len.items():
            inputs = np.array([(BOS_ID,) + s for s in group], dtype=np.int64).reshape(len(group), n + 1)
            lp = policy.log_probs(ToyBatch(len(group)), inputs).data[:, -1, :]
            for s, row in zip(group, lp):
                out[s] = row
    return out


def optimal_backup(mdp: CoMdp, anchor: Policy, alpha: float, budget: int = 10 ** 6) -> SoftBackup:
    """Closed-form V*, Q*, μ* of the KL-regularized problem by backward recursion."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mdp.n_actions ** mdp.horizon > budget:
        raise ValueError(f"enumeration budget exceeded: {mdp.n_actions}^{mdp.horizon} > {budget}")
    states = mdp.states()
    logp = _state_log_probs(anchor, states)
    V: dict = {}
    Q: dict = {}
    mu: dict = {}
    for s in sorted(states, key=len, reverse=True):
        q = np.empty(mdp.n_actions)
        for a in range(mdp.n_actions):
            nxt = s + (a,)
            q[a] = mdp.reward(nxt) if mdp.is_terminal(nxt) else V[nxt]
        z = logp[s] + q / alpha
        m = z.max()
        V[s] = float(alpha * (m + np.log(np.exp(z - m).sum())))
        Q[s] = q
        mu[s] = np.exp(z - m) / np.exp(z - m).sum()
    return SoftBackup(V, Q, mu)


def distill_loss(policy: Policy, anchor: Policy, batch, inputs: np.ndarray, q_values: np.ndarray,
                 mask: np.ndarray, alpha: float) -> Tensor:
    """Σ_n Σ_a π(a|s_n)[log π(a|s_n) − log p_pre(a|s_n) − Q_n(s_n, a)/α], batch mean.

    Equals Σ_n KL(π ‖ μ*) up to a θ-independent constant; its gradient is the
    distillation update E_{a∼π}[∇ log π (log π/p_pre − Q/α)].
    """
    lp = policy.log_probs(batch, inputs)
    with nx.no_grad():
        ref = anchor.log_probs(batch, inputs).data
    if ref.shape != lp.shape:
        raise ValueError("vocabulary mismatch between policy and anchor")
    per = (nx.exp(lp) * (lp - (ref + q_values / alpha))).sum(axis=-1)
    return (per * mask).sum(axis=1).mean()


def soft_q_distill_step(policy: Policy, anchor: Policy, batch, inputs: np.ndarray, q_values: np.ndarray,
                        mask: np.ndarray, alpha: float, opt: nx.Adam) -> dict:
    loss = distill_loss(policy, anchor, batch, inputs, q_values, mask, alpha)
    return {"distill_loss": loss.item(), "grad_norm": opt.step(nx.backward(loss, opt.params))}


def backup_q_array(backup: SoftBackup, inputs: np.ndarray, n_actions: int) -> np.ndarray:
    """Q* rows for every input position (zeros where the prefix is not a state)."""
    B, T = inputs.shape
    out = np.zeros((B, T, n_actions))
    for b in range(B):
        for t in range(T):
            s = tuple(int(x) for x in inputs[b, 1:t + 1])
            if s in backup.Q:
                out[b, t] = backup.Q[s]
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """FIFO store of complete trajectories."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list[Trajectory] = []

    def __len__(self) -> int:
        return len(self.items)

    def extend(self, trajs: Sequence[Trajectory]) -> None:
        for t in trajs:
            if t.reward is None or not t.tokens:
                raise ValueError("only complete trajectories with a terminal reward can be stored")
        self.items.extend(trajs)
        if len(self.items) > self.capacity:
            del self.items[:len(self.items) - self.capacity]

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        if not self.items:
            raise ValueError("replay buffer is empty")
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        return [self.items[k] for k in np.sort(idx)]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    history: list[dict] = field(default_factory=list)


def _critic_config(policy: PolicyModel, cfg: RlConfig) -> LmConfig:
    c = policy.cfg
    heads = max(1, min(c.n_heads, cfg.critic_d_model // 8))
    return LmConfig(vocab_size=c.vocab_size, d_model=cfg.critic_d_model, n_layers=cfg.critic_layers, n_heads=heads,
                    d_ff=2 * cfg.critic_d_model, d_cf=c.d_cf, adapter_hidden=cfg.critic_d_model,
                    max_item_tokens=c.max_item_tokens, horizon=c.horizon, seed=c.seed)


def make_critics(policy: Policy, cfg: RlConfig, env=None):
    if isinstance(policy, TabularPolicy):
        return TabularCritic(policy.mdp)
    return CriticHeads(_critic_config(policy, cfg), nx.make_rng(nx.derive_seed(cfg.seed, 77)), policy.cf_scale)


def finetune(policy: Policy, anchor: Policy, env, cfg: RlConfig, log_path: str | Path | None = None,
             checkpoint_dir: str | Path | None = None) -> FinetuneResult:
    """Run ``cfg.steps`` updates of the chosen algorithm, one JSONL log record per update."""
    cfg.validate()
    rng = nx.make_rng(nx.derive_seed(cfg.seed, 31))
    opt = nx.Adam(policy.named_parameters(), lr=cfg.lr, clip=cfg.clip)
    baseline_state = BaselineState(rate=cfg.baseline_rate)
    critics = target = copt = buffer = None
    if cfg.algo != "reinforce":
        critics = make_critics(policy, cfg, env)
        target = critics.copy()
        copt = nx.Adam(critics.named_parameters(), lr=cfg.critic_lr, clip=cfg.clip)
        buffer = ReplayBuffer(cfg.buffer_size)
    fh = open(log_path, "w") if log_path is not None else None
    res = FinetuneResult()
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            ctx_ids = np.sort(rng.choice(env.n_contexts, size=cfg.batch_size,
                                         replace=env.n_contexts < cfg.batch_size))
            trajs = rollout_batch(policy, env, ctx_ids, nx.derive_seed(cfg.seed, 32, step), "temperature",
                                  cfg.temperature, tag=f"theta@{step}")
            if cfg.algo == "reinforce":
                diag = reinforce_step(policy, anchor, env.batch(ctx_ids), trajs, cfg, opt, baseline_state)
            else:
                diag = _actor_critic_step(policy, anchor, env, trajs, cfg, opt, critics, target, copt, buffer, rng)
                if (step + 1) % cfg.target_period == 0:
                    target.load_state_dict(critics.state_dict())
            diag["mean_return"] = float(np.mean([t.reward for t in trajs]))
            comps = [t.components for t in trajs if t.components is not None]
            if comps:
                diag.update({f"mean_{k}": float(v) for k, v in zip(("nli", "app", "per", "prel"),
                                                                    np.mean(comps, axis=0))})
            rec = {"step": step, **diag, "wall_time": round(time.perf_counter() - t0, 3)}
            res.history.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                policy.save(Path(checkpoint_dir) / f"policy_step{step + 1}.p4t")
            log.debug("rl step %d return %.4f kl %.4f", step, diag["mean_return"], diag.get("mean_kl", 0.0))
    finally:
        if fh is not None:
            fh.close()
    return res


def _actor_critic_step(policy, anchor, env, trajs, cfg, opt, critics, target, copt, buffer, rng) -> dict:
    buffer.extend(trajs)
    diag: dict = {}
    for _ in range(cfg.critic_updates):
        sample = buffer.sample(cfg.batch_size, rng)
        ids = np.array([t.context for t in sample])
        batch = env.batch(ids)
        if cfg.algo == "sac":
            L_Q, L_V, L_theta = critic_losses(critics, target, batch, sample, policy, anchor, cfg.alpha)
            loss = L_Q + L_V
            diag.update(L_Q=L_Q.item(), L_V=L_V.item(), L_theta=L_theta.item())
        else:
            seqs = [t.tokens for t in sample]
            y = closed_form_targets(target, anchor, batch, seqs, np.array([t.reward for t in sample]), cfg.alpha)
            inputs, targets, mask = response_arrays(seqs)
            Q, _ = critics(batch, inputs)
            loss = (((_gather(Q, targets) - y) ** 2) * mask).sum(axis=1).mean()
            diag.update(L_Q=loss.item())
        diag["critic_grad_norm"] = copt.step(nx.backward(loss, copt.params))
    seqs = [t.tokens for t in trajs]
    ids = np.array([t.context for t in trajs])
    batch = env.batch(ids)
    inputs, _, mask = response_arrays(seqs)
    with nx.no_grad():
        q, _ = critics(batch, inputs)
    diag.update(soft_q_distill_step(policy, anchor, batch, inputs, q.data, mask, cfg.alpha, opt))
    diag["mean_kl"] = float(kl_seq_batch(policy, anchor, batch, seqs).mean())
    return diag


def estimate_kl(policy: Policy, anchor: Policy, env, ctx_ids: Sequence[int], n_samples: int = 1, seed: int = 0,
                temperature: float = 1.0) -> tuple[float, float]:
    """Monte-Carlo sequence KL(π ‖ p_pre) on ``ctx_ids``: (mean, standard error)."""
    vals = []
    ctx_ids = np.asarray(ctx_ids)
    for k in range(n_samples):
        batch = env.batch(ctx_ids)
        samples = decode(_next_logits(policy, batch), len(ctx_ids), env.horizon, "temperature", temperature,
                         nx.derive_seed(seed, 41, k), getattr(env, "eos_id", EOS_ID))
        vals.append(kl_seq_batch(policy, anchor, batch, [s.tokens for s in samples]))
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0


def enumerate_expected_return(policy: TabularPolicy, mdp: CoMdp) -> float:
    """Exact E_π[r] by enumerating all terminal sequences."""
    total = 0.0
    for seq in mdp.sequences():
        p = 1.0
        for n in range(len(seq)):
            p *= policy.probs(seq[:n])[seq[n]]
        total += p * mdp.reward(seq)
    return total

