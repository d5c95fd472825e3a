"""Synthetic datasets, disjoint per-cluster shards, and batch construction."""

from __future__ import annotations

import numpy as np

from . import modelcore
from .errors import ConfigError
from .modelcore import Batch, ModelSpec

GENERATORS = ("linear", "mlp", "classify")


def make_dataset(
    generator: str, model: ModelSpec, n_samples: int, seed: int, noise: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (inputs, targets) from a random teacher matching the model dims.

    linear: targets from a random affine teacher (exactly realizable by a
    linear model when noise is 0). mlp: targets from a small tanh teacher
    net. classify: one-hot argmax labels of an mlp teacher's logits.
    """
    if generator not in GENERATORS:
        raise ConfigError(f"unknown dataset generator {generator!r}")
    if n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = rng.normal(0.0, 1.0, size=(n_samples, model.in_dim))
    if generator == "linear":
        w = rng.normal(0.0, 1.0, size=(model.out_dim, model.in_dim))
        b = rng.normal(0.0, 1.0, size=model.out_dim)
        t = x @ w.T + b
    else:
        teacher_arch = [model.in_dim, 2 * model.in_dim, model.out_dim]
        teacher, tparams = modelcore.build_model(teacher_arch, seed + 1, "tanh", model.loss)
        t, _ = modelcore.forward(modelcore.full_submodel(teacher), tparams, x)
        t = 3.0 * t  # spread the teacher outputs so classes are distinguishable
    if generator == "classify":
        labels = np.argmax(t + 1e-9 * rng.normal(size=t.shape), axis=1)
        if noise > 0.0:
            flip = rng.random(n_samples) < noise
            labels[flip] = rng.integers(0, model.out_dim, int(flip.sum()))
        t = np.zeros((n_samples, model.out_dim))
        t[np.arange(n_samples), labels] = 1.0
    elif noise > 0.0:
        t = t + noise * rng.normal(size=t.shape)
    return x, t


def shard_dataset(
    x: np.ndarray, t: np.ndarray, n_clusters: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint shards by round-robin over a seeded permutation."""
    if n_clusters <= 0:
        raise ConfigError("need at least one cluster")
    if x.shape[0] < n_clusters:
        raise ConfigError(f"{x.shape[0]} samples cannot feed {n_clusters} shards")
    perm = np.random.Generator(np.random.Philox(key=seed)).permutation(x.shape[0])
    return [(x[perm[i::n_clusters]], t[perm[i::n_clusters]]) for i in range(n_clusters)]


def make_batch(
    shard: tuple[np.ndarray, np.ndarray],
    seq: int,
    batch_size: int,
    cluster_id: int,
    cluster_pos: int,
    n_clusters: int,
) -> Batch:
    """seq-th batch of one cluster's shard, cycling; globally unique batch id."""
    xs, ts = shard
    n = xs.shape[0]
    idx = [(seq * batch_size + j) % n for j in range(batch_size)]
    return Batch(
        inputs=xs[idx],
        targets=ts[idx],
        batch_id=seq * n_clusters + cluster_pos,
        cluster_id=cluster_id,
    )
