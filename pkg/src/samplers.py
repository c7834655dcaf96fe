"""
Samplers module for the Slow SDE Laboratory.
Implements the two distributed batch samplers: i.i.d. draws with replacement
and epoch-synchronized shards of a shared permutation without replacement.

Workers are numbered 0..K−1 and dataset indices 0..N−1.
"""

import logging
from typing import Callable, Optional

import numpy as np

from exceptions import ConfigError, DomainError, SamplerSkewError
from streams import NoiseStreams

logger = logging.getLogger(__name__)

SAMPLER_KINDS = {"with": "with_replacement", "without": "without_replacement"}


class SamplerState:
    """Cursor, epoch and permutation bookkeeping for one run."""

    def __init__(self, kind, dataset_size, workers, local_batch, streams: NoiseStreams,
                 augment: Optional[Callable] = None):
        if kind not in SAMPLER_KINDS.values():
            kind = SAMPLER_KINDS.get(kind, kind)
        if kind not in SAMPLER_KINDS.values():
            raise ConfigError(f"unknown sampler kind: {kind}", key="run.sampler")
        if dataset_size < 1 or workers < 1 or local_batch < 1:
            raise ConfigError("sampler needs N, K, B_loc ≥ 1", key="run.sampler")
        self.kind = kind
        self.dataset_size = dataset_size
        self.workers = workers
        self.local_batch = local_batch
        self.streams = streams
        self.augment = augment
        self.local_batches = dataset_size // (workers * local_batch)
        if kind == "without_replacement" and self.local_batches == 0:
            raise ConfigError(
                f"N={dataset_size} is too small for K={workers} workers of batch {local_batch}",
                key="run.B_loc",
            )
        self.cursors = [0] * workers
        self.epochs = [0] * workers
        self._permutations = {}

    def permutation(self, epoch):
        """Shared permutation of epoch e, drawn from the (seed, "epoch", e) stream."""
        if epoch not in self._permutations:
            self._permutations[epoch] = self.streams.generator("epoch", epoch).permutation(self.dataset_size)
            oldest = min(self.epochs)
            for stale in [e for e in self._permutations if e < oldest]:
                del self._permutations[stale]
        return self._permutations[epoch]

    def _apply_augment(self, batch):
        return self.augment(batch) if self.augment else batch


def _check_worker(state, worker):
    if not 0 <= worker < state.workers:
        raise DomainError(f"worker index {worker} outside 0..{state.workers - 1}")


def sample_with_replacement(state: SamplerState, worker, rng):
    """B_loc i.i.d. uniform indices from the worker's own stream."""
    _check_worker(state, worker)
    batch = rng.integers(0, state.dataset_size, size=state.local_batch)
    return state._apply_augment(batch)


def sample_without_replacement(state: SamplerState, worker, rng=None):
    """Next batch from the worker's shard of the current epoch permutation."""
    _check_worker(state, worker)
    if state.cursors[worker] == state.local_batches:
        # Synchronization point: the worker moves on to the next shared permutation
        new_epoch = state.epochs[worker] + 1
        if new_epoch - min(state.epochs) > 1:
            raise SamplerSkewError(
                f"worker {worker} would start epoch {new_epoch} while another worker is in epoch {min(state.epochs)}"
            )
        state.epochs[worker] = new_epoch
        state.cursors[worker] = 0
        logger.debug(f"Worker {worker} entered epoch {new_epoch}")

    shard = state.local_batches * state.local_batch
    start = worker * shard + state.cursors[worker] * state.local_batch
    batch = state.permutation(state.epochs[worker])[start:start + state.local_batch].copy()
    state.cursors[worker] += 1
    return state._apply_augment(batch)


def draw_batch(state: SamplerState, worker, rng):
    """Dispatch on the sampler kind."""
    if state.kind == "with_replacement":
        return sample_with_replacement(state, worker, rng)
    return sample_without_replacement(state, worker, rng)
