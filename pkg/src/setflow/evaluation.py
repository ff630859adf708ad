"""Distribution comparison between original and generated corpora: latent
Fréchet distances over instance pools, and nearest-neighbour spread/replication
analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import Stream


@dataclass
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def fit_moments(vectors):
    """Sample mean and 1/(N-1) covariance of pooled vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"fit_moments: need an [N>=2, d] matrix, got {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianMoments(mean, cov, x.shape[0])


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """Squared mean gap plus the covariance transport term, computed through
    symmetric eigendecompositions with negative eigenvalues clamped to 0."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"moment dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sq_a = _psd_sqrt(a.cov)
    inner = sq_a @ b.cov @ sq_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_cross)
    return max(fid, 0.0)


@dataclass
class FidReport:
    internal_original: float
    internal_synthetic: float
    interstream_original: float
    interstream_synthetic: float
    interclass_original: float
    interclass_synthetic: float
    wrt_original: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class NnReport:
    internal_original: float
    internal_synthetic: float
    original_to_synthetic: float
    synthetic_to_original: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _pool(ds, name):
    x = ds.instance_matrix()
    if x.shape[0] < 4:
        raise ValueError(f"{name}: needs at least 4 instances, has {x.shape[0]}")
    return x


def _internal_fid(pool, rng):
    perm = rng.permutation(pool.shape[0])
    half = pool.shape[0] // 2
    return frechet_distance(fit_moments(pool[perm[:half]]),
                            fit_moments(pool[perm[half:]]))


def _subgroup(ds, name, stream=None, label=None):
    x = ds.instance_matrix(stream=stream, label=label)
    if x.shape[0] < 2:
        raise ValueError(f"subgroup {name!r} has {x.shape[0]} instances, needs >= 2")
    return x


def fid_report(original, synthetic, seed):
    """Fréchet distances within and across the two corpora.

    internal: random halves of each pooled corpus; interstream: global vs
    local tokens; interclass: global tokens of positive vs negative bags;
    wrt_original: all synthetic vs all original instances.
    """
    if original.dim != synthetic.dim:
        raise ValueError("corpora dims differ")
    pool_orig = _pool(original, "original corpus")
    pool_syn = _pool(synthetic, "synthetic corpus")
    rows = {}
    for tag, ds, rng_key in (("original", original, 0), ("synthetic", synthetic, 1)):
        rng = np.random.default_rng([seed, rng_key])
        rows[f"internal_{tag}"] = _internal_fid(ds.instance_matrix(), rng)
        rows[f"interstream_{tag}"] = frechet_distance(
            fit_moments(_subgroup(ds, f"{tag} global instances", stream=Stream.GLOBAL)),
            fit_moments(_subgroup(ds, f"{tag} local instances", stream=Stream.LOCAL)),
        )
        rows[f"interclass_{tag}"] = frechet_distance(
            fit_moments(_subgroup(ds, f"{tag} positive global instances",
                                  stream=Stream.GLOBAL, label=1)),
            fit_moments(_subgroup(ds, f"{tag} negative global instances",
                                  stream=Stream.GLOBAL, label=0)),
        )
    rows["wrt_original"] = frechet_distance(fit_moments(pool_syn),
                                            fit_moments(pool_orig))
    return FidReport(**rows)


def nn_report(original, synthetic):
    """Mean nearest-neighbour Euclidean distances, exhaustively computed.

    Internal metrics exclude self-pairs; cross metrics search the full other
    corpus."""
    a = original.instance_matrix()
    b = synthetic.instance_matrix()
    for name, x in (("original", a), ("synthetic", b)):
        if x.shape[0] < 2:
            raise ValueError(f"{name} corpus needs >= 2 instances")
    return NnReport(
        internal_original=float(kernels.nn_min_dists(a, a, True).mean()),
        internal_synthetic=float(kernels.nn_min_dists(b, b, True).mean()),
        original_to_synthetic=float(kernels.nn_min_dists(a, b, False).mean()),
        synthetic_to_original=float(kernels.nn_min_dists(b, a, False).mean()),
    )


def format_fid_table(report):
    rows = [
        ("Internal", report.internal_original, report.internal_synthetic),
        ("Interstream", report.interstream_original, report.interstream_synthetic),
        ("Interclass", report.interclass_original, report.interclass_synthetic),
        ("W.r.t. original", None, report.wrt_original),
    ]
    lines = [f"{'FID':<18}{'Original':>12}  {'Synthetic':>12}"]
    for name, orig, syn in rows:
        left = f"{orig:.4g}" if orig is not None else "--"
        lines.append(f"{name:<18}{left:>12}  {syn:>12.4g}")
    return "\n".join(lines)


def format_nn_table(report):
    rows = [
        ("Internal (original)", report.internal_original),
        ("Internal (synthetic)", report.internal_synthetic),
        ("Original -> Synthetic", report.original_to_synthetic),
        ("Synthetic -> Original", report.synthetic_to_original),
    ]
    lines = [f"{'Metric':<24}{'Mean NN distance':>18}"]
    for name, value in rows:
        lines.append(f"{name:<24}{value:>18.4g}")
    return "\n".join(lines)
