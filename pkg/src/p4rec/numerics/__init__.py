"""Dense-tensor autodiff, optimisers and serialisation used by every trainable piece."""

from __future__ import annotations

import numpy as np

from .checkpoint import CheckpointError, decode_tensors, encode_tensors, load_tensors, save_tensors
from .nn import MLP, Embedding, LayerNorm, Linear, Module, checksum
from .optim import Adam, AdamState, adam_step, clip_by_global_norm, global_norm
from .tensor import (
    ComputationTape,
    NonFiniteError,
    Tensor,
    backward,
    concat,
    embedding,
    exp,
    grad_enabled,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    no_grad,
    parameter,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stable_log_softmax,
    stable_sigmoid,
    stable_softmax,
    stack,
    take_last,
    tanh,
    tensor,
    transpose,
    tsum,
)


def cosine_similarity(a, b) -> float:
    """a·b / (‖a‖‖b‖); raises on a zero-norm input."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def derive_seed(seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys into an independent 63-bit seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def finite_difference_grads(fn, params: dict[str, Tensor], step: float = 1e-5,
                            max_entries: int | None = None, rng: np.random.Generator | None = None
                            ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``params``.

    Returns name -> (flat indices probed, numeric derivatives). With
    ``max_entries`` a random subset of each tensor is probed.
    """
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        vals = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(fn().data)
            flat[k] = orig - step
            fm = float(fn().data)
            flat[k] = orig
            vals[j] = (fp - fm) / (2 * step)
        out[name] = (idx, vals)
    return out


def gradient_check(fn, params: dict[str, Tensor], step: float = 1e-5, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autodiff and central differences.

    Relative error per tensor is ‖g_auto − g_fd‖ / max(‖g_auto‖, ‖g_fd‖, floor).
    The floor sits 1e5 times above the rounding noise of the central
    difference, √n·eps·max(1, |f|)/step, so a gradient that is exactly zero
    (a bias a pairwise loss cannot see, say) is not scored on that noise.
    """
    out = fn()
    f0 = abs(float(out.data))
    analytic = backward(out, params)
    numeric = finite_difference_grads(fn, params, step, max_entries, rng)
    worst = 0.0
    for name, (idx, fd) in numeric.items():
        ad = analytic[name].reshape(-1)[idx]
        floor = max(1e-8, 1e5 * np.sqrt(idx.size) * np.finfo(float).eps * max(1.0, f0) / step)
        denom = max(np.linalg.norm(ad), np.linalg.norm(fd), floor)
        worst = max(worst, float(np.linalg.norm(ad - fd) / denom))
    return worst


__all__ = [name for name in dir() if not name.startswith("_")]
