"""Gated-attention bag classifier used for the downstream augmentation
protocol: train on original / original+synthetic / synthetic-only bags and
compare AUC, balanced accuracy and specificity at high sensitivity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import BagDataset, pad_bags
from .optim import init_adam, adam_step


@dataclass
class MilConfig:
    d_encode: int = 32
    d_attn: int = 16
    lr: float = 2e-3
    max_iters: int = 1500
    eval_interval: int = 50
    patience: int = 8
    seed: int = 0


@dataclass
class MilClassifierParams:
    config: MilConfig
    dim: int
    arrays: dict = field(default_factory=dict)

    def copy(self):
        return MilClassifierParams(self.config, self.dim,
                                   {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class ClassifierMetrics:
    auc: float
    bacc: float
    spec_at_sens90: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _param_shapes(dim, cfg):
    shapes = {}
    for s in (0, 1):
        shapes[f"enc{s}_w"] = (dim, cfg.d_encode)
        shapes[f"enc{s}_b"] = (cfg.d_encode,)
        shapes[f"att{s}_v_w"] = (cfg.d_encode, cfg.d_attn)
        shapes[f"att{s}_v_b"] = (cfg.d_attn,)
        shapes[f"att{s}_u_w"] = (cfg.d_encode, cfg.d_attn)
        shapes[f"att{s}_u_b"] = (cfg.d_attn,)
        shapes[f"att{s}_s_w"] = (cfg.d_attn, 1)
        shapes[f"att{s}_s_b"] = (1,)
    shapes["head_w"] = (2 * cfg.d_encode, 1)
    shapes["head_b"] = (1,)
    return shapes


def init_mil_params(dim, cfg, rng):
    arrays = {}
    for name, shape in _param_shapes(dim, cfg).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, shape)
    return MilClassifierParams(cfg, dim, arrays)


def _stream_pool(flat, logits_mask, pt, s, b, t_max):
    """Gated attention over one stream's tokens in every bag.

    Empty streams fall out as all-zero weight rows, i.e. a zero pooled vector.
    """
    h = ad.tanh(ad.linear(flat, pt[f"enc{s}_w"], pt[f"enc{s}_b"]))
    gate = ad.mul(
        ad.tanh(ad.linear(h, pt[f"att{s}_v_w"], pt[f"att{s}_v_b"])),
        ad.sigmoid(ad.linear(h, pt[f"att{s}_u_w"], pt[f"att{s}_u_b"])),
    )
    scores = ad.linear(gate, pt[f"att{s}_s_w"], pt[f"att{s}_s_b"])
    weights = ad.masked_softmax(ad.reshape(scores, (b, t_max)), logits_mask,
                                allow_empty=True)
    h3 = ad.reshape(h, (b, t_max, h.data.shape[1]))
    pooled = ad.bmm(ad.reshape(weights, (b, 1, t_max)), h3)
    return ad.reshape(pooled, (b, h.data.shape[1]))


def _logit_graph(pt, cfg, tokens, mask, streams, tape):
    b, t_max, dim = tokens.shape
    flat = tape.leaf(tokens.reshape(b * t_max, dim))
    pooled = [
        _stream_pool(flat, mask & (streams == s), pt, s, b, t_max)
        for s in (0, 1)
    ]
    return ad.linear(ad.concat_cols(pooled), pt["head_w"], pt["head_b"])


def attention_pool(vectors, params, stream):
    """Pooled representation of one bag's instances from a single stream."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] == 0:
        return np.zeros(params.config.d_encode)
    tape = ad.GradTape()
    pt = {k: tape.leaf(v) for k, v in params.arrays.items()}
    n = vectors.shape[0]
    mask = np.ones((1, n), dtype=bool)
    pooled = _stream_pool(tape.leaf(vectors), mask, pt, int(stream), 1, n)
    return pooled.data[0]


def bag_logits(params, tokens, mask, streams):
    tape = ad.GradTape()
    pt = {k: tape.leaf(v) for k, v in params.arrays.items()}
    logit = _logit_graph(pt, params.config, tokens, mask, streams, tape)
    return logit.data[:, 0]


def bag_scores(params, ds):
    tokens, mask, streams, _ = pad_bags(ds.bags, ds.dim)
    z = bag_logits(params, tokens, mask, streams)
    return 1.0 / (1.0 + np.exp(-z))


# --- metrics -------------------------------------------------------------------

def auc_score(scores, labels):
    """Rank-statistic AUC with tied scores averaged."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_accuracy(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    pos = labels == 1
    sens = pred[pos].mean()
    spec = (~pred[~pos]).mean()
    return float(0.5 * (sens + spec))


def specificity_at_sensitivity(scores, labels, target=0.9):
    """Specificity at the largest score threshold reaching the target
    sensitivity (prediction rule: positive when score >= threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise ValueError("needs both classes present")
    for tau in np.unique(scores)[::-1]:
        if (pos_scores >= tau).mean() >= target:
            return float((neg_scores < tau).mean())
    return 0.0  # unreachable: the smallest threshold gives sensitivity 1


def evaluate(params, ds_test):
    labels = ds_test.labels()
    if len(set(labels.tolist())) < 2:
        raise ValueError("test set must contain both classes")
    scores = bag_scores(params, ds_test)
    return ClassifierMetrics(
        auc=auc_score(scores, labels),
        bacc=balanced_accuracy(scores, labels),
        spec_at_sens90=specificity_at_sensitivity(scores, labels, 0.9),
    )


# --- training --------------------------------------------------------------------

def train_classifier(ds_train, ds_val, cfg):
    """Bag-level cross-entropy with Adam and AUC-based early stopping."""
    labels = ds_train.labels()
    if len(set(labels.tolist())) < 2:
        raise ValueError("training set must contain both classes")
    rng = np.random.default_rng(cfg.seed)
    params = init_mil_params(ds_train.dim, cfg, rng)
    tokens, mask, streams, y = pad_bags(ds_train.bags, ds_train.dim)
    b = tokens.shape[0]
    y_col = y.astype(np.float64).reshape(b, 1)
    val_labels = ds_val.labels()

    state = init_adam(params.arrays, lr=cfg.lr)
    best = params.copy()
    best_auc = -np.inf
    evals_since_best = 0
    for it in range(1, cfg.max_iters + 1):
        tape = ad.GradTape()
        pt = {k: tape.leaf(v, requires_grad=True) for k, v in params.arrays.items()}
        z = _logit_graph(pt, cfg, tokens, mask, streams, tape)
        yt = tape.constant(y_col)
        # bce(z, y) = softplus(z) - z*y, summed then averaged
        loss = ad.scale(ad.sum_all(ad.sub(ad.softplus(z), ad.mul(z, yt))), 1.0 / b)
        ad.backward(tape, loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in pt.items()}
        params.arrays, state = adam_step(params.arrays, grads, state)
        if it % cfg.eval_interval == 0:
            val_auc = auc_score(bag_scores(params, ds_val), val_labels)
            if val_auc > best_auc:
                best_auc = val_auc
                best = params.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    break
    return best


def run_protocol(splits, generate_fn, cfg, augment_fraction=0.2):
    """Train/evaluate the three arms: original, original + extra synthetic
    bags per class, and synthetic-only with matched per-class counts.

    ``generate_fn(label, count, seed)`` must return bags in the same space
    as the originals. Validation and test splits are shared by all arms.
    """
    ds_train, ds_val, ds_test = splits
    counts = ds_train.class_counts()

    def synth(count_for, seed_offset):
        bags = []
        for label in (0, 1):
            n = count_for(label)
            if n > 0:
                bags.extend(generate_fn(label, n, cfg.seed * 1000 + seed_offset + label))
        return bags

    arms = {}
    arms["original"] = evaluate(train_classifier(ds_train, ds_val, cfg), ds_test)

    extra = synth(lambda label: int(round(augment_fraction * counts[label])), 10)
    combined = BagDataset(list(ds_train.bags) + extra, dim=ds_train.dim,
                          split="train", meta=dict(ds_train.meta))
    arms["combined"] = evaluate(train_classifier(combined, ds_val, cfg), ds_test)

    only = synth(lambda label: counts[label], 20)
    synthetic = BagDataset(only, dim=ds_train.dim, split="train",
                           meta={"source": "synthetic"})
    arms["synthetic"] = evaluate(train_classifier(synthetic, ds_val, cfg), ds_test)
    return arms


def format_metrics_table(arms):
    names = ("original", "combined", "synthetic")
    lines = [f"{'Metric':<16}{'Orig.':>8}{'Comb.':>8}{'Synth.':>8}"]
    for metric in ("auc", "bacc", "spec_at_sens90"):
        label = {"auc": "AUC", "bacc": "bACC",
                 "spec_at_sens90": "Spec@Sens=0.9"}[metric]
        vals = "".join(f"{getattr(arms[a], metric):>8.3f}" for a in names)
        lines.append(f"{label:<16}{vals}")
    return "\n".join(lines)
