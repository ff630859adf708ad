"""Velocity-regression training on whole-dataset batches.

Each iteration draws fresh per-bag noise endpoints and times, regresses the
network output onto the straight-line displacement, and takes one Adam
step. Sample quality is monitored periodically by generating bags and
measuring their Fréchet distance to the validation pool; the best
checkpoint wins and training stops once that signal stops improving.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sampler as smp
from .data import fit_bag_shape_stats, pad_bags
from .evaluation import fit_moments, frechet_distance
from .net import BatchedBags, init_params, make_param_tensors, collect_grads, velocity_graph
from .optim import init_adam, adam_step

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_iters: int = 2000
    fid_eval_interval: int = 500
    patience: int = 3
    seed: int = 0
    rk2_steps: int = 200
    fid_monitor_sample_count: int = 100

    def validate(self):
        if self.fid_eval_interval < 1 or self.patience < 1:
            raise ValueError("fid_eval_interval and patience must be >= 1")
        if self.max_iters < 0 or self.rk2_steps < 1:
            raise ValueError("max_iters must be >= 0 and rk2_steps >= 1")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)       # loss at iterations 1..n
    evals: list = field(default_factory=list)        # dicts per FID evaluation
    best_iteration: int = 0
    status: str = "ok"

    def best_fid(self):
        return min((e["fid_wrt_val"] for e in self.evals), default=None)

    def fid_at_start(self):
        return self.evals[0]["fid_wrt_val"] if self.evals else None


def sample_path(x1, t, rng):
    """Linear bridge from fresh standard-normal noise to the data tokens.

    Returns (x_t, target) where the target is the constant displacement the
    network regresses onto.
    """
    rng = np.random.default_rng(rng)
    x1 = np.asarray(x1, dtype=np.float64)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t={t} outside [0,1]")
    x0 = rng.standard_normal(x1.shape)
    return (1.0 - t) * x0 + t * x1, x1 - x0


def _loss_graph(batch, targets, ptensors, cfg, tape):
    b, t_max, d = batch.tokens.shape
    n = b * t_max
    v = velocity_graph(batch, ptensors, cfg, tape)
    v_flat = ad.reshape(v, (n, d))
    tgt = tape.constant(np.asarray(targets, dtype=np.float64).reshape(n, d))
    diff = ad.sub(v_flat, tgt)
    sq = ad.mul(diff, diff)
    weights = tape.constant(
        np.repeat(batch.mask.reshape(n, 1).astype(np.float64), d, axis=1))
    masked = ad.mul(sq, weights)
    denom = float(batch.mask.sum()) * d
    return ad.scale(ad.sum_all(masked), 1.0 / denom)


def fm_loss(batch, targets, params):
    """Mean squared velocity error over unmasked token coordinates."""
    tape = ad.GradTape()
    pt = make_param_tensors(params, tape, requires_grad=False)
    loss = _loss_graph(batch, targets, pt, params.config, tape)
    return float(loss.data[0])


def _monitor_fid(params, stats, val_pool, pos_fraction, cfg, eval_index):
    """Generate a monitoring sample and score it against the validation pool."""
    count = cfg.fid_monitor_sample_count
    n_pos = int(round(count * pos_fraction))
    bags = []
    for label, n in ((1, n_pos), (0, count - n_pos)):
        if n == 0:
            continue
        req = smp.SampleRequest(label=label, count=n, steps=cfg.rk2_steps,
                                seed=cfg.seed * 100003 + 7919 * eval_index + label)
        bags.extend(smp.generate_bags(req, stats, params))
    gen_pool = np.concatenate([bag.vectors() for bag in bags], axis=0)
    fid_wrt = frechet_distance(fit_moments(gen_pool), fit_moments(val_pool))
    half_rng = np.random.default_rng([cfg.seed, eval_index])
    perm = half_rng.permutation(gen_pool.shape[0])
    half = gen_pool.shape[0] // 2
    fid_internal = frechet_distance(
        fit_moments(gen_pool[perm[:half]]), fit_moments(gen_pool[perm[half:]]))
    return fid_wrt, fid_internal


def train(ds_train, ds_val, net_cfg, cfg):
    """Full training run; returns (best-FID parameters, log)."""
    cfg.validate()
    if not ds_train.bags or not ds_val.bags:
        raise ValueError("train/val datasets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(net_cfg, rng)
    log = TrainLog()
    if cfg.max_iters == 0:
        return params, log

    tokens, mask, streams, labels = pad_bags(ds_train.bags, ds_train.dim)
    b = tokens.shape[0]
    stats = fit_bag_shape_stats(ds_train)
    val_pool = ds_val.instance_matrix()
    pos_fraction = ds_val.labels().mean() if len(ds_val) else 0.5

    state = init_adam(params.arrays, lr=cfg.lr)
    best = params.copy()
    best_fid = np.inf
    evals_since_best = 0

    def run_eval(iteration):
        nonlocal best, best_fid, evals_since_best
        fid_wrt, fid_internal = _monitor_fid(
            params, stats, val_pool, pos_fraction, cfg, len(log.evals))
        log.evals.append({"iteration": iteration, "fid_wrt_val": fid_wrt,
                          "fid_internal_synthetic": fid_internal})
        if fid_wrt < best_fid:
            best_fid = fid_wrt
            best = params.copy()
            log.best_iteration = iteration
            evals_since_best = 0
        else:
            evals_since_best += 1
        return evals_since_best >= cfg.patience

    run_eval(0)
    for it in range(1, cfg.max_iters + 1):
        t_bag = rng.uniform(0.0, 1.0, size=b)
        x0 = rng.standard_normal(tokens.shape) * mask[:, :, None]
        x_t = (1.0 - t_bag)[:, None, None] * x0 + t_bag[:, None, None] * tokens
        targets = tokens - x0
        batch = BatchedBags(tokens=x_t, mask=mask, streams=streams,
                            labels=labels, t=t_bag)
        tape = ad.GradTape()
        pt = make_param_tensors(params, tape, requires_grad=True)
        try:
            loss = _loss_graph(batch, targets, pt, net_cfg, tape)
        except ad.NonFiniteError:
            log.status = "diverged"
            return best, log
        loss_val = float(loss.data[0])
        log.losses.append(loss_val)
        if not np.isfinite(loss_val) or loss_val > DIVERGENCE_LIMIT:
            log.status = "diverged"
            return best, log
        ad.backward(tape, loss)
        params.arrays, state = adam_step(params.arrays, collect_grads(pt), state)
        if it % cfg.fid_eval_interval == 0:
            if run_eval(it):
                break
    return best, log


def write_loss_csv(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(log.losses, start=1):
            fh.write(f"{i},{loss!r}\n")


def write_fid_csv(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("evaluation,iteration,fid_wrt_val,fid_internal_synthetic\n")
        for k, e in enumerate(log.evals):
            fh.write(f"{k},{e['iteration']},{e['fid_wrt_val']!r},"
                     f"{e['fid_internal_synthetic']!r}\n")
