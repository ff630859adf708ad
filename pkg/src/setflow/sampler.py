"""Bag generation: sample a bag shape, then integrate the learned velocity
field from noise to data with fixed-step midpoint RK2."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingBag, Instance, Stream
from .net import BatchedBags, velocity_forward


class IntegrationError(RuntimeError):
    pass


@dataclass
class SampleRequest:
    label: int
    count: int
    steps: int = 200
    seed: int = 0

    def validate(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def sample_bag_shape(stats, rng):
    """Draw (n_global, n_local): global count from the empirical histogram,
    local count from the fitted ratio Gaussian truncated at 0 and rounded
    half away from zero."""
    stats.validate()
    rng = np.random.default_rng(rng)
    counts = sorted(stats.global_count_hist)
    probs = np.array([stats.global_count_hist[c] for c in counts])
    u = rng.random()
    n_global = counts[int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(counts) - 1))]
    if stats.ratio_std == 0:
        r = stats.ratio_mean
    else:
        r = max(rng.normal(stats.ratio_mean, stats.ratio_std), 0.0)
    n_local = max(int(np.floor(r * n_global + 0.5)), 0)
    return int(n_global), int(n_local)


def integrate_field(x0, field, steps):
    """Midpoint RK2 over t in [0,1] for dx/dt = field(x, t)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    for i in range(steps):
        t = i * h
        k1 = field(x, t)
        k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
        x = x + h * k2
        if not np.isfinite(x).all():
            raise IntegrationError(f"non-finite state at step {i}")
    return x


def _batched_field(mask, streams, labels, params):
    def field(x, t):
        batch = BatchedBags(tokens=x * mask[:, :, None], mask=mask,
                            streams=streams, labels=labels,
                            t=np.full(x.shape[0], t))
        return velocity_forward(batch, params) * mask[:, :, None]
    return field


def rk2_integrate(x0_tokens, label, streams, params, steps):
    """Transport one bag's noise tokens to data space; conditioning is fixed
    throughout the trajectory."""
    x0 = np.asarray(x0_tokens, dtype=np.float64)
    n = x0.shape[0]
    mask = np.ones((1, n), dtype=bool)
    streams = np.asarray(streams, dtype=np.int64).reshape(1, n)
    labels = np.array([label], dtype=np.int64)
    field = _batched_field(mask, streams, labels, params)
    return integrate_field(x0[None], field, steps)[0]


def generate_bags(req, stats, params):
    """Generate bags for one label; per-bag RNG streams keep results
    independent of batching."""
    req.validate()
    if req.count == 0:
        return []
    d = params.config.d_in
    shapes = []
    noises = []
    for i in range(req.count):
        rng = np.random.default_rng([req.seed, i])
        n_global, n_local = sample_bag_shape(stats, rng)
        n_global = max(n_global, 1)  # every bag carries a global instance
        shapes.append((n_global, n_local))
        noises.append(rng.standard_normal((n_global + n_local, d)))

    t_max = max(x.shape[0] for x in noises)
    b = len(noises)
    x0 = np.zeros((b, t_max, d))
    mask = np.zeros((b, t_max), dtype=bool)
    streams = np.zeros((b, t_max), dtype=np.int64)
    for i, ((n_g, n_l), noise) in enumerate(zip(shapes, noises)):
        n_tok = n_g + n_l
        x0[i, :n_tok] = noise
        mask[i, :n_tok] = True
        streams[i, n_g:n_tok] = int(Stream.LOCAL)
    labels = np.full(b, req.label, dtype=np.int64)

    field = _batched_field(mask, streams, labels, params)
    x1 = integrate_field(x0, field, req.steps)

    bags = []
    for i, (n_g, n_l) in enumerate(shapes):
        instances = [Instance(x1[i, j].copy(), Stream.GLOBAL) for j in range(n_g)]
        instances += [Instance(x1[i, n_g + j].copy(), Stream.LOCAL) for j in range(n_l)]
        bags.append(EmbeddingBag(instances, req.label))
    return bags
