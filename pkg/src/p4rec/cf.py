"""Matrix-factorisation collaborative filtering.

Learns user and item vectors whose dot product (plus optional biases and
a global mean) predicts ratings, trained with mini-batch Adam on the
numerics substrate.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx

log = logging.getLogger(__name__)


class MfDivergenceError(RuntimeError):
    pass


@dataclass
class RatingsDataset:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    user_ids: list[int] | None = None  # dense id -> original id
    item_ids: list[int] | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")

    def __len__(self) -> int:
        return len(self.ratings)

    def validate(self, allow_empty: bool = False) -> None:
        if len(self) == 0 and not allow_empty:
            raise ValueError("ratings dataset is empty")
        if len(self) == 0:
            return
        if self.users.min() < 0 or self.users.max() >= self.n_users:
            raise ValueError("user id out of range")
        if self.items.min() < 0 or self.items.max() >= self.n_items:
            raise ValueError("item id out of range")
        if self.ratings.min() < 0.5 or self.ratings.max() > 5.0:
            raise ValueError("ratings must lie in [0.5, 5.0]")
        keys = self.users * self.n_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate (user, item) pair")

    def subset(self, idx: np.ndarray) -> "RatingsDataset":
        return RatingsDataset(self.users[idx], self.items[idx], self.ratings[idx],
                              self.n_users, self.n_items, self.user_ids, self.item_ids)


@dataclass
class MfConfig:
    d_cf: int = 16
    l2_weight: float = 0.05
    epochs: int = 60
    lr: float = 0.02
    batch_size: int = 256
    seed: int = 0
    holdout_fraction: float = 0.1
    use_bias: bool = True
    init_scale: float = 0.1

    def validate(self) -> None:
        if self.d_cf < 1:
            raise ValueError("d_cf must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if not 0.0 <= self.holdout_fraction <= 0.5:
            raise ValueError("holdout_fraction must lie in [0, 0.5]")


@dataclass
class EmbeddingTables:
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_mean: float
    loss_curve: list[float] = field(default_factory=list)

    @property
    def d_cf(self) -> int:
        return self.user_matrix.shape[1]

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        users, items = np.asarray(users), np.asarray(items)
        return (self.global_mean + self.user_bias[users] + self.item_bias[items]
                + np.einsum("ij,ij->i", self.user_matrix[users], self.item_matrix[items]))

    def rmse(self, data: RatingsDataset) -> float:
        if len(data) == 0:
            return float("nan")
        err = self.predict(data.users, data.items) - data.ratings
        return float(np.sqrt(np.mean(err * err)))

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {"user_matrix": self.user_matrix, "item_matrix": self.item_matrix,
                "user_bias": self.user_bias, "item_bias": self.item_bias,
                "global_mean": np.array(self.global_mean)}

    def save(self, path: str | Path, user_ids=None, item_ids=None) -> None:
        path = Path(path)
        nx.save_tensors(path, self.to_tensors())
        sidecar = {"d_cf": self.d_cf,
                   "user_ids": list(map(int, user_ids)) if user_ids is not None else list(range(len(self.user_bias))),
                   "item_ids": list(map(int, item_ids)) if item_ids is not None else list(range(len(self.item_bias)))}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTables":
        t = nx.load_tensors(path)
        return cls(t["user_matrix"], t["item_matrix"], t["user_bias"], t["item_bias"],
                   float(t["global_mean"]))


def predict_affinity(tables: EmbeddingTables, u: int, i: int) -> float:
    """global_mean + user_bias[u] + item_bias[i] + u·i."""
    if not 0 <= u < len(tables.user_bias):
        raise IndexError(f"user id {u} out of range")
    if not 0 <= i < len(tables.item_bias):
        raise IndexError(f"item id {i} out of range")
    return float(tables.global_mean + tables.user_bias[u] + tables.item_bias[i]
                 + tables.user_matrix[u] @ tables.item_matrix[i])


def split_ratings(data: RatingsDataset, fraction: float, seed: int) -> tuple[RatingsDataset, RatingsDataset]:
    """Per-user stratified holdout split.

    Each user contributes round(fraction * n_u) ratings to the holdout but
    always keeps at least one training rating. The global holdout size is
    then topped up or trimmed so it equals round(fraction * len(data)).
    """
    if len(data) == 0:
        raise ValueError("cannot split an empty ratings dataset")
    if not 0.0 <= fraction <= 0.5:
        raise ValueError("fraction must lie in [0, 0.5]")
    target = int(round(fraction * len(data)))
    if target == 0:
        return data.subset(np.arange(len(data))), data.subset(np.array([], dtype=np.int64))
    rng = nx.make_rng(seed)
    perm = rng.permutation(len(data))
    order = perm[np.argsort(data.users[perm], kind="stable")]
    holdout: list[int] = []
    spare: list[int] = []
    start = 0
    users_sorted = data.users[order]
    bounds = np.flatnonzero(np.diff(users_sorted)) + 1
    for chunk in np.split(order, bounds):
        k = min(int(round(fraction * len(chunk))), len(chunk) - 1)
        holdout.extend(chunk[:k].tolist())
        spare.extend(chunk[k:len(chunk) - 1].tolist())
        start += len(chunk)
    holdout_arr = np.array(holdout, dtype=np.int64)
    if len(holdout_arr) > target:
        holdout_arr = rng.choice(holdout_arr, target, replace=False)
    elif len(holdout_arr) < target and spare:
        extra = rng.choice(np.array(spare), min(target - len(holdout_arr), len(spare)), replace=False)
        holdout_arr = np.concatenate([holdout_arr, extra])
    mask = np.zeros(len(data), dtype=bool)
    mask[holdout_arr] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


class _MfModel(nx.Module):
    def __init__(self, n_users, n_items, cfg: MfConfig, rng):
        self.user = nx.parameter(rng.normal(0, cfg.init_scale, size=(n_users, cfg.d_cf)))
        self.item = nx.parameter(rng.normal(0, cfg.init_scale, size=(n_items, cfg.d_cf)))
        self.user_bias = nx.parameter(np.zeros(n_users)) if cfg.use_bias else None
        self.item_bias = nx.parameter(np.zeros(n_items)) if cfg.use_bias else None

    def predict(self, users, items, mean: float) -> nx.Tensor:
        dot = (nx.embedding(self.user, users) * nx.embedding(self.item, items)).sum(axis=1)
        if self.user_bias is not None:
            dot = dot + self.user_bias[users] + self.item_bias[items]
        return dot + mean


def _objective(model: _MfModel, data: RatingsDataset, mean: float, l2: float) -> float:
    """(Σ (r − r̂)² + λ(‖U‖² + ‖V‖²)) / |R| without building a graph."""
    with nx.no_grad():
        err = model.predict(data.users, data.items, mean).data - data.ratings
    reg = float((model.user.data ** 2).sum() + (model.item.data ** 2).sum())
    return float((err @ err + l2 * reg) / len(data))


def train_mf(train: RatingsDataset, cfg: MfConfig) -> EmbeddingTables:
    """Fit embeddings by mini-batch Adam.

    An epoch whose full objective ends above the previous epoch's value is
    rolled back and the learning rate halved, so the recorded loss curve is
    non-increasing.
    """
    cfg.validate()
    if len(train) == 0:
        raise ValueError("training set is empty")
    train.validate()
    if cfg.d_cf > min(train.n_users, train.n_items):
        warnings.warn(f"d_cf={cfg.d_cf} exceeds min(|U|, |I|)={min(train.n_users, train.n_items)}")
    rng = nx.make_rng(cfg.seed)
    model = _MfModel(train.n_users, train.n_items, cfg, rng)
    mean = float(train.ratings.mean()) if cfg.use_bias else 0.0
    params = model.named_parameters()
    opt = nx.Adam(params, lr=cfg.lr)
    n = len(train)
    reg_scale = cfg.l2_weight / n
    curve = [_objective(model, train, mean, cfg.l2_weight)]
    for epoch in range(cfg.epochs):
        snapshot = model.state_dict()
        perm = rng.permutation(n)
        try:
            for start in range(0, n, cfg.batch_size):
                b = perm[start:start + cfg.batch_size]
                pred = model.predict(train.users[b], train.items[b], mean)
                err = pred - train.ratings[b]
                loss = (err * err).mean() + reg_scale * ((model.user ** 2).sum() + (model.item ** 2).sum())
                opt.step(nx.backward(loss, params))
        except nx.NonFiniteError as exc:
            raise MfDivergenceError(f"matrix factorisation diverged in epoch {epoch} "
                                    f"(lr={opt.state.lr:g}, last loss={curve[-1]:.4g})") from exc
        obj = _objective(model, train, mean, cfg.l2_weight)
        if not np.isfinite(obj):
            raise MfDivergenceError(f"non-finite objective in epoch {epoch}")
        if obj > curve[-1]:
            model.load_state_dict(snapshot)
            opt.state.lr *= 0.5
            obj = curve[-1]
            log.debug("epoch %d rolled back, lr -> %g", epoch, opt.state.lr)
        curve.append(obj)
    ub = model.user_bias.data.copy() if cfg.use_bias else np.zeros(train.n_users)
    ib = model.item_bias.data.copy() if cfg.use_bias else np.zeros(train.n_items)
    return EmbeddingTables(model.user.data.copy(), model.item.data.copy(), ub, ib, mean, curve)


def ingest_movielens_csv(path: str | Path) -> RatingsDataset:
    """Read ``userId,movieId,rating,timestamp`` rows and densify ids.

    Dense ids follow ascending original id, so row order does not matter.
    """
    path = Path(path)
    rows: list[tuple[int, int, float]] = []
    seen: dict[tuple[int, int], int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if [h.strip() for h in header[:3]] != ["userId", "movieId", "rating"]:
            raise ValueError(f"{path}:1: expected header userId,movieId,rating,timestamp")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                u, i, r = int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            if not 0.5 <= r <= 5.0:
                raise ValueError(f"{path}:{lineno}: rating {r} outside [0.5, 5.0]")
            if (u, i) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate rating for user {u}, movie {i} "
                                 f"(first seen on line {seen[(u, i)]})")
            seen[(u, i)] = lineno
            rows.append((u, i, r))
    if not rows:
        raise ValueError(f"{path}: no ratings")
    user_ids = sorted({u for u, _, _ in rows})
    item_ids = sorted({i for _, i, _ in rows})
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    rows.sort(key=lambda t: (umap[t[0]], imap[t[1]]))
    data = RatingsDataset(np.array([umap[u] for u, _, _ in rows]), np.array([imap[i] for _, i, _ in rows]),
                          np.array([r for _, _, r in rows]), len(user_ids), len(item_ids), user_ids, item_ids)
    data.validate()
    return data


def planted_low_rank(n_users: int, n_items: int, rank: int, n_obs: int, noise: float, seed: int,
                     scale: float = 1.0, center: float = 3.0) -> tuple[RatingsDataset, np.ndarray]:
    """Ratings from a planted rank-``rank`` matrix; returns (dataset, full clean matrix)."""
    rng = nx.make_rng(seed)
    s = np.sqrt(scale) / rank ** 0.25
    U = rng.normal(0, s, size=(n_users, rank))
    V = rng.normal(0, s, size=(n_items, rank))
    full = center + U @ V.T
    # every user and item observed at least once before sampling the rest
    cells = set()
    for u in range(n_users):
        cells.add((u, int(rng.integers(n_items))))
    for i in range(n_items):
        cells.add((int(rng.integers(n_users)), i))
    while len(cells) < n_obs:
        cells.add((int(rng.integers(n_users)), int(rng.integers(n_items))))
    cells_arr = np.array(sorted(cells))
    users, items = cells_arr[:, 0], cells_arr[:, 1]
    r = np.clip(full[users, items] + rng.normal(0, noise, size=len(users)), 0.5, 5.0)
    return RatingsDataset(users, items, r, n_users, n_items), full
