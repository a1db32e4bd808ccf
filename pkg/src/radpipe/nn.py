"""Minimal trainable network substrate with hand-written analytic gradients.

Small MLP encoders, the contrastive InfoNCE loss over a FIFO queue of
negatives, and the momentum (exponential moving average) parameter update.
Everything is plain numpy in double precision so gradients stay checkable
against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns NaN/inf."""


@dataclass
class MlpParams:
    """Affine layers with per-layer activation ('relu' or 'identity')."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # (weight (out, in), bias (out,))
    activations: list[str]

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for k, (w, b) in enumerate(self.layers):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight rows {w.shape[0]} != bias {b.shape[0]}")
            if k > 0 and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ValueError(f"layer {k}: input dim {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            activations=list(self.activations),
        )


def init_mlp(sizes: list[int], activations: list[str], rng: np.random.Generator
             ) -> MlpParams:
    """He-scaled random weights, zero biases. sizes = [in, h1, ..., out]."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers=layers, activations=activations)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; x is (in,) or (batch, in)."""
    y, _ = mlp_forward_cached(params, x)
    return y


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass keeping layer inputs/pre-activations for backprop."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[-1]} != expected {params.in_dim}")
    cache = []
    for (w, b), act in zip(params.layers, params.activations):
        z = h @ w.T + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if act == "relu" else z
    return (h[0] if squeeze else h), cache


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray):
    """Backprop. grad_out matches the forward output shape; returns
    (per-layer [(dW, db)], grad wrt input), summed over the batch."""
    g = np.asarray(grad_out, dtype=float)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        (h, z) = cache[k]
        if params.activations[k] == "relu":
            g = g * (z > 0.0)
        grads[k] = (g.T @ h, g.sum(axis=0))
        g = g @ params.layers[k][0]
    return grads, (g[0] if squeeze else g)


def sgd_step(params: MlpParams, grads, lr: float) -> None:
    for (w, b), (dw, db) in zip(params.layers, grads):
        w -= lr * dw
        b -= lr * db


def momentum_update(theta_k: MlpParams, theta_q: MlpParams, m: float) -> MlpParams:
    """Exponential moving average of parameters: m*theta_k + (1-m)*theta_q."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1), got {m}")
    if theta_k.activations != theta_q.activations or len(theta_k.layers) != len(theta_q.layers):
        raise ValueError("parameter structures differ")
    layers = []
    for (wk, bk), (wq, bq) in zip(theta_k.layers, theta_q.layers):
        if wk.shape != wq.shape or bk.shape != bq.shape:
            raise ValueError(f"shape mismatch {wk.shape} vs {wq.shape}")
        layers.append((m * wk + (1.0 - m) * wq, m * bk + (1.0 - m) * bq))
    return MlpParams(layers=layers, activations=list(theta_k.activations))


class NegativeQueue:
    """FIFO ring buffer of unit-norm embedding vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((capacity, dim))
        self.size = 0
        self.head = 0  # next slot to overwrite

    def push(self, batch: np.ndarray) -> list[int]:
        """Insert L2-normalized rows, evicting the oldest entries when full.
        Returns the storage slot of each inserted row."""
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        if batch.shape[1] != self.dim:
            raise ValueError(f"embedding dim {batch.shape[1]} != queue dim {self.dim}")
        norms = np.linalg.norm(batch, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("cannot normalize a zero embedding")
        slots = []
        for row, norm in zip(batch, norms):
            self.entries[self.head] = row / norm
            slots.append(self.head)
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        return slots

    def view(self) -> np.ndarray:
        return self.entries[: self.size]


def queue_push(queue: NegativeQueue, batch: np.ndarray) -> NegativeQueue:
    queue.push(batch)
    return queue


def fill_queue_random(queue: NegativeQueue, rng: np.random.Generator) -> None:
    """Start the queue full of random unit vectors so the loss scale does not
    drift while the buffer warms up."""
    vecs = rng.standard_normal((queue.capacity, queue.dim))
    queue.push(vecs)


def info_nce_loss_and_grad(
    query: np.ndarray,
    positive_index: int,
    queue: NegativeQueue,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Contrastive softmax loss of the query against all queue entries.

    The query is L2-normalized internally; similarities are dot products
    scaled by 1/tau. The returned gradient is with respect to the raw
    (pre-normalization) query, chain rule through the normalization included.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if queue.size == 0:
        raise ValueError("queue is empty")
    if not 0 <= positive_index < queue.size:
        raise ValueError(f"positive_index {positive_index} outside queue size {queue.size}")
    q = np.asarray(query, dtype=float)
    if q.shape != (queue.dim,):
        raise ValueError(f"query shape {q.shape} != ({queue.dim},)")
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("cannot normalize a zero query")

    q_hat = q / norm
    entries = queue.view()
    logits = entries @ q_hat / tau
    logits -= logits.max()  # softmax stability
    exp = np.exp(logits)
    probs = exp / exp.sum()
    loss = -math.log(probs[positive_index])

    grad_hat = (probs @ entries - entries[positive_index]) / tau
    grad = (grad_hat - q_hat * (q_hat @ grad_hat)) / norm
    return loss, grad


@dataclass
class SslConfig:
    """Hyperparameters for the contrastive pretext task."""

    tau: float = 0.07
    m: float = 0.99
    queue_capacity: int = 1024
    embed_dim: int = 64
    proj_dim: int = 32
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    hidden_dim: int = 128
    pool_shape: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.m < 1.0:
            raise ValueError("m must lie in [0, 1)")
        for name in ("queue_capacity", "embed_dim", "proj_dim", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class PretextResult:
    radar_encoder: MlpParams
    projection: MlpParams
    history: list[float]              # mean loss per epoch
    momentum_encoder: MlpParams
    momentum_projection: MlpParams
    config: SslConfig


def pool_to(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Block-mean downsample to `shape` (rows/cols split as evenly as possible)."""
    rows = np.array([c.mean(axis=0) for c in np.array_split(grid, shape[0], axis=0)])
    return np.array([c.mean(axis=1) for c in np.array_split(rows, shape[1], axis=1)]).T


def _prep_input(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    pooled = pool_to(np.asarray(grid, dtype=float), shape)
    lo, hi = pooled.min(), pooled.max()
    if hi > lo:
        pooled = (pooled - lo) / (hi - lo)
    return pooled.reshape(-1)


def pretext_train(pairs, config: SslConfig) -> PretextResult:
    """Train the radar branch contrastively against image-side keys.

    pairs: list of (radar map grid, image-proxy grid); both are pooled to
    config.pool_shape and flattened. The image branch is a momentum copy of
    the radar branch, never backpropagated; its projected embeddings feed
    the FIFO negative queue. Deterministic for a fixed config.seed.
    """
    if len(pairs) < config.batch_size:
        raise ValueError(
            f"need at least batch_size={config.batch_size} pairs, got {len(pairs)}"
        )
    ra_shape = np.asarray(pairs[0][0]).shape
    proxy_shape = np.asarray(pairs[0][1]).shape
    for ra, proxy in pairs:
        if np.asarray(ra).shape != ra_shape or np.asarray(proxy).shape != proxy_shape:
            raise ValueError("all maps must share their branch's shape")

    rng = np.random.default_rng(config.seed)
    in_dim = config.pool_shape[0] * config.pool_shape[1]
    enc_q = init_mlp([in_dim, config.hidden_dim, config.embed_dim],
                     ["relu", "relu"], rng)
    proj_q = init_mlp([config.embed_dim, config.proj_dim], ["identity"], rng)
    enc_k = enc_q.copy()
    proj_k = proj_q.copy()

    queue = NegativeQueue(config.queue_capacity, config.proj_dim)
    fill_queue_random(queue, rng)

    radar_inputs = np.stack([_prep_input(ra, config.pool_shape) for ra, _ in pairs])
    image_inputs = np.stack([_prep_input(px, config.pool_shape) for _, px in pairs])

    history = []
    n = len(pairs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]

            keys = mlp_forward(proj_k, mlp_forward(enc_k, image_inputs[idx]))
            slots = queue.push(keys)

            emb, enc_cache = mlp_forward_cached(enc_q, radar_inputs[idx])
            queries, proj_cache = mlp_forward_cached(proj_q, emb)

            grad_q = np.zeros_like(queries)
            batch_loss = 0.0
            for row, slot in enumerate(slots):
                loss, grad = info_nce_loss_and_grad(queries[row], slot, queue, config.tau)
                batch_loss += loss
                grad_q[row] = grad
            batch_loss /= len(slots)
            grad_q /= len(slots)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite contrastive loss at epoch {epoch}, step {start}"
                )
            losses.append(batch_loss)

            proj_grads, grad_emb = mlp_backward(proj_q, proj_cache, grad_q)
            enc_grads, _ = mlp_backward(enc_q, enc_cache, grad_emb)
            sgd_step(proj_q, proj_grads, config.learning_rate)
            sgd_step(enc_q, enc_grads, config.learning_rate)

            enc_k = momentum_update(enc_k, enc_q, config.m)
            proj_k = momentum_update(proj_k, proj_q, config.m)
        history.append(float(np.mean(losses)))

    return PretextResult(
        radar_encoder=enc_q, projection=proj_q, history=history,
        momentum_encoder=enc_k, momentum_projection=proj_k, config=config,
    )


def embed(encoder: MlpParams, projection: MlpParams, grid: np.ndarray,
          pool_shape: tuple[int, int] = (32, 32)) -> np.ndarray:
    """Unit-norm embedding of a map through encoder + projection."""
    vec = mlp_forward(projection, mlp_forward(encoder, _prep_input(grid, pool_shape)))
    return vec / np.linalg.norm(vec)
