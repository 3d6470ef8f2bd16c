"""Deterministic multi-domain token generator.

Tokens are Gaussian clusters, one per domain, mixed according to per-batch
mixture weights. Labels are either the domain index (classification) or the
output of a seeded linear teacher (regression). Sampling is a pure function
of (seed, step): the same pair always yields the same batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = ["CorpusSpec", "sample_batch", "drift_mixture", "domain_centers"]

LABEL_RULES = ("domain_id", "linear_teacher")

# Stream tags keep center/teacher/batch draws independent under one seed.
_BATCH_STREAM = 0
_CENTER_STREAM = 1
_TEACHER_STREAM = 2


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of the synthetic corpus.

    ``mixture`` gives the expected fraction of each domain per batch.
    ``centers`` may be provided explicitly; by default they are unit-norm
    directions drawn from the spec seed. ``mixture_schedule`` (set via
    drift_mixture) overrides the mixture per step and is never serialized.
    """

    n_domains: int
    dim: int
    mixture: tuple[float, ...] | None = None
    cluster_scale: float = 0.5
    label_rule: str = "domain_id"
    seed: int = 0
    centers: tuple[tuple[float, ...], ...] | None = None
    mixture_schedule: Callable[[int], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.n_domains < 2:
            raise ValueError(f"need at least 2 domains, got {self.n_domains}")
        if self.cluster_scale < 0.0:
            raise ValueError(f"cluster_scale must be nonnegative, got {self.cluster_scale}")
        if self.label_rule not in LABEL_RULES:
            raise ValueError(f"unknown label rule {self.label_rule!r}")
        if self.mixture is None:
            object.__setattr__(
                self, "mixture", tuple([1.0 / self.n_domains] * self.n_domains)
            )
        _check_simplex(np.asarray(self.mixture), self.n_domains, "mixture")
        if self.centers is not None:
            arr = np.asarray(self.centers)
            if arr.shape != (self.n_domains, self.dim):
                raise ValueError(
                    f"centers shape {arr.shape} != ({self.n_domains}, {self.dim})"
                )


def _check_simplex(w: np.ndarray, n: int, name: str) -> None:
    if w.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got shape {w.shape}")
    if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError(f"{name} must be nonnegative and sum to 1, got {w.tolist()}")


def domain_centers(spec: CorpusSpec) -> np.ndarray:
    """Cluster centers: explicit if given, otherwise seeded unit directions."""
    if spec.centers is not None:
        return np.asarray(spec.centers, dtype=np.float64)
    rng = np.random.default_rng((spec.seed, _CENTER_STREAM))
    raw = rng.standard_normal((spec.n_domains, spec.dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def teacher_weights(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng((spec.seed, _TEACHER_STREAM))
    return rng.standard_normal(spec.dim) / spec.dim**0.5


def sample_batch(
    spec: CorpusSpec, n_tokens: int, step: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one batch; returns (tokens, labels, domain_ids).

    Tokens are center + scale * gaussian noise. Fully determined by
    (spec.seed, step).
    """
    if n_tokens < 1:
        raise ValueError(f"need at least one token, got {n_tokens}")
    mixture = np.asarray(spec.mixture, dtype=np.float64)
    if spec.mixture_schedule is not None:
        mixture = np.asarray(spec.mixture_schedule(step), dtype=np.float64)
        _check_simplex(mixture, spec.n_domains, f"mixture_schedule({step})")
    rng = np.random.default_rng((spec.seed, _BATCH_STREAM, step))
    domain_ids = rng.choice(spec.n_domains, size=n_tokens, p=mixture)
    centers = domain_centers(spec)
    x = centers[domain_ids] + spec.cluster_scale * rng.standard_normal(
        (n_tokens, spec.dim)
    )
    if spec.label_rule == "domain_id":
        labels = domain_ids.copy()
    else:
        labels = x @ teacher_weights(spec)
    return x, labels, domain_ids


def drift_mixture(
    spec: CorpusSpec, schedule: Callable[[int], np.ndarray]
) -> CorpusSpec:
    """A copy of the spec whose batches follow a step-indexed mixture schedule."""
    return replace(spec, mixture_schedule=schedule)
