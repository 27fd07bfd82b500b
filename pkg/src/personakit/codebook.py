"""Discrete bottleneck: k-means++ init, nearest-entry quantization,
EMA codebook updates, and dead-code revival.

Entry vectors move only through the EMA rule (never by gradient); the
usage/sum EMAs exist to track liveness for the revival rule.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, PreconditionError

DEFAULT_DECAY = 0.9
DEFAULT_DEAD_FRACTION = 0.1
DEFAULT_REVIVAL_INTERVAL = 50
DEFAULT_WARMUP_STEPS = 100
DEFAULT_REVIVAL_NOISE = 0.01


class Codebook:
    def __init__(
        self,
        entries: np.ndarray,
        decay: float = DEFAULT_DECAY,
        dead_fraction: float = DEFAULT_DEAD_FRACTION,
        revival_interval: int = DEFAULT_REVIVAL_INTERVAL,
        warmup_steps: int = DEFAULT_WARMUP_STEPS,
        revival_noise: float = DEFAULT_REVIVAL_NOISE,
        usage_ema: np.ndarray | None = None,
        sum_ema: np.ndarray | None = None,
    ):
        entries = np.asarray(entries)
        if entries.ndim != 2 or entries.shape[0] < 1:
            raise ConfigError("codebook entries must be a non-empty (K, D) matrix")
        if not np.all(np.isfinite(entries)):
            raise ConfigError("codebook entries must be finite")
        self.entries = entries
        # usage starts at 1 so the mean is well-defined before warmup ends
        self.usage_ema = (
            np.ones(entries.shape[0], dtype=np.float64) if usage_ema is None else usage_ema
        )
        self.sum_ema = (
            entries.astype(np.float64) * self.usage_ema[:, None]
            if sum_ema is None
            else sum_ema
        )
        self.decay = decay
        self.dead_fraction = dead_fraction
        self.revival_interval = revival_interval
        self.warmup_steps = warmup_steps
        self.revival_noise = revival_noise

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def quantize(self, z: np.ndarray) -> tuple[int, np.ndarray]:
        """Nearest entry by squared distance; ties break to the lowest index."""
        z = np.asarray(z)
        if z.shape != (self.dim,):
            raise PreconditionError(f"expected a {self.dim}-vector")
        d2 = np.sum((self.entries - z) ** 2, axis=1, dtype=np.float64)
        k = int(np.argmin(d2))
        return k, self.entries[k].copy()

    def quantize_batch(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        batch = np.atleast_2d(batch)
        if batch.shape[1] != self.dim:
            raise PreconditionError(f"expected rows of width {self.dim}")
        e64 = self.entries.astype(np.float64)
        b64 = batch.astype(np.float64)
        d2 = (
            np.sum(b64 * b64, axis=1)[:, None]
            - 2.0 * (b64 @ e64.T)
            + np.sum(e64 * e64, axis=1)[None, :]
        )
        assignments = np.argmin(d2, axis=1)
        return assignments, self.entries[assignments].copy()

    def ema_update(self, batch: np.ndarray, assignments: np.ndarray) -> None:
        """Fold a batch into the EMAs; only assigned entries' vectors move."""
        batch = np.atleast_2d(batch)
        assignments = np.asarray(assignments)
        if assignments.shape[0] != batch.shape[0]:
            raise PreconditionError("assignments must align with the batch")
        counts = np.bincount(assignments, minlength=self.size).astype(np.float64)
        sums = np.zeros((self.size, self.dim), dtype=np.float64)
        np.add.at(sums, assignments, batch.astype(np.float64))

        g = self.decay
        self.usage_ema = g * self.usage_ema + (1 - g) * counts
        self.sum_ema = g * self.sum_ema + (1 - g) * sums

        assigned = counts > 0
        if np.any(assigned):
            means = sums[assigned] / counts[assigned, None]
            updated = g * self.entries[assigned].astype(np.float64) + (1 - g) * means
            self.entries[assigned] = updated.astype(self.entries.dtype)

    def dead_mask(self) -> np.ndarray:
        return self.usage_ema < self.dead_fraction * self.usage_ema.mean()

    def active_count(self) -> int:
        return int(np.sum(~self.dead_mask()))

    def revive_dead(
        self, step: int, batch: np.ndarray, rng: np.random.Generator
    ) -> int:
        """Replace under-used entries with noisy batch samples at revival steps.

        Returns the number of revived entries; 0 for off-schedule steps and
        for an empty batch (skipped with a diagnostic left to the caller).
        """
        if step < 0:
            raise PreconditionError("step must be non-negative")
        if step < self.warmup_steps or step % self.revival_interval != 0:
            return 0
        batch = np.atleast_2d(batch)
        if batch.shape[0] == 0 or batch.size == 0:
            return 0
        mean_usage = self.usage_ema.mean()
        dead = np.flatnonzero(self.usage_ema < self.dead_fraction * mean_usage)
        for k in dead:
            source = batch[int(rng.integers(batch.shape[0]))]
            noisy = source.astype(np.float64) + self.revival_noise * rng.normal(size=self.dim)
            self.entries[k] = noisy.astype(self.entries.dtype)
            self.usage_ema[k] = mean_usage
            self.sum_ema[k] = mean_usage * noisy
        return int(dead.size)


def kmeanspp_indices(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct seed indices chosen by the squared-distance sampling rule."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if n < k:
        raise ConfigError(f"need at least k={k} rows for k-means++ seeding, got {n}")
    chosen = [int(rng.integers(n))]
    d2 = np.sum((rows - rows[chosen[0]]) ** 2, axis=1)
    for _ in range(k - 1):
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point duplicates a chosen seed; fall back to uniform
            taken = set(chosen)
            remaining = [i for i in range(n) if i not in taken]
            pick = remaining[int(rng.integers(len(remaining)))]
        chosen.append(pick)
        d2 = np.minimum(d2, np.sum((rows - rows[pick]) ** 2, axis=1))
    return np.asarray(chosen)


def init_kmeanspp(
    encoder_outputs: np.ndarray,
    k: int,
    rng: np.random.Generator,
    **codebook_options,
) -> Codebook:
    """Codebook seeded from encoder outputs by the k-means++ rule."""
    outputs = np.atleast_2d(encoder_outputs)
    indices = kmeanspp_indices(outputs, k, rng)
    return Codebook(outputs[indices].copy(), **codebook_options)
