"""Bags of embedding vectors: dataset types, JSONL persistence, splitting,
synthetic desk-scale generation, and bag-shape statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

SCHEMA = "setflow-bags-v1"


class DataFormatError(ValueError):
    pass


class Stream(IntEnum):
    GLOBAL = 0
    LOCAL = 1

    @classmethod
    def from_name(cls, name):
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise DataFormatError(f"unknown stream {name!r}") from None

    @property
    def json_name(self):
        return self.name.lower()


@dataclass
class Instance:
    """One embedding vector inside a bag, tagged with its stream."""

    vector: np.ndarray
    stream: Stream

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.stream = Stream(self.stream)
        if self.vector.ndim != 1:
            raise DataFormatError(f"instance vector must be 1-D, got {self.vector.shape}")
        if not np.isfinite(self.vector).all():
            raise DataFormatError("instance vector contains non-finite values")


@dataclass
class EmbeddingBag:
    """A variable-size set of instances sharing one bag-level binary label."""

    instances: list
    label: int

    def __post_init__(self):
        if not self.instances:
            raise DataFormatError("bag has no instances")
        if self.label not in (0, 1):
            raise DataFormatError(f"bag label must be 0 or 1, got {self.label!r}")
        if not any(inst.stream == Stream.GLOBAL for inst in self.instances):
            raise DataFormatError("bag has no global instance")

    @property
    def dim(self):
        return self.instances[0].vector.shape[0]

    def count(self, stream):
        return sum(1 for inst in self.instances if inst.stream == stream)

    def vectors(self, stream=None):
        rows = [inst.vector for inst in self.instances
                if stream is None or inst.stream == stream]
        if not rows:
            return np.empty((0, self.dim))
        return np.stack(rows)


@dataclass
class BagDataset:
    bags: list
    dim: int
    split: str = "full"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, bag in enumerate(self.bags):
            for inst in bag.instances:
                if inst.vector.shape[0] != self.dim:
                    raise DataFormatError(
                        f"bag {k} has dim {inst.vector.shape[0]}, expected {self.dim}"
                    )

    def __len__(self):
        return len(self.bags)

    def labels(self):
        return np.array([bag.label for bag in self.bags], dtype=np.int64)

    def class_counts(self):
        labels = self.labels()
        return {0: int((labels == 0).sum()), 1: int((labels == 1).sum())}

    def instance_matrix(self, stream=None, label=None):
        """Pool instance vectors, optionally filtered by stream and bag label."""
        mats = [bag.vectors(stream) for bag in self.bags
                if label is None or bag.label == label]
        mats = [m for m in mats if m.shape[0]]
        if not mats:
            return np.empty((0, self.dim))
        return np.concatenate(mats, axis=0)


# --- persistence -----------------------------------------------------------

def save_dataset(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema": SCHEMA, "dim": ds.dim,
                  "meta": {**ds.meta, "split": ds.split}}
        fh.write(json.dumps(header) + "\n")
        for bag in ds.bags:
            rec = {
                "label": int(bag.label),
                "instances": [
                    {"stream": inst.stream.json_name, "v": inst.vector.tolist()}
                    for inst in bag.instances
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path):
    bags = []
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: line 1: bad header: {exc}") from None
        if header.get("schema") != SCHEMA:
            raise DataFormatError(f"{path}: expected schema {SCHEMA!r}, "
                                  f"got {header.get('schema')!r}")
        dim = int(header["dim"])
        meta = dict(header.get("meta", {}))
        split = meta.pop("split", "full")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            bag_index = len(bags)
            try:
                instances = [
                    Instance(np.asarray(item["v"], dtype=np.float64),
                             Stream.from_name(item["stream"]))
                    for item in rec["instances"]
                ]
                bag = EmbeddingBag(instances, int(rec["label"]))
            except (KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: bad record: {exc}") from None
            if bag.dim != dim:
                raise DataFormatError(
                    f"{path}: bag {bag_index} has dim {bag.dim}, expected {dim}"
                )
            for inst in bag.instances:
                if inst.vector.shape[0] != dim:
                    raise DataFormatError(
                        f"{path}: bag {bag_index} has dim {inst.vector.shape[0]}, "
                        f"expected {dim}"
                    )
            bags.append(bag)
    return BagDataset(bags, dim=dim, split=split, meta=meta)


# --- splitting ---------------------------------------------------------------

def split_dataset(ds, fractions, seed):
    """Label-stratified partition into (train, val, test).

    Deterministic for a given seed; per-class counts follow the largest
    remainder rule so the partition is exact.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be 3 positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    labels = ds.labels()
    parts = [[], [], []]
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 3:
            raise ValueError(f"class {cls} has only {idx.size} bags, need >= 3")
        idx = idx[rng.permutation(idx.size)]
        quota = [int(np.floor(f * idx.size)) for f in fractions]
        rem = [f * idx.size - q for f, q in zip(fractions, quota)]
        for _ in range(idx.size - sum(quota)):
            j = int(np.argmax(rem))
            quota[j] += 1
            rem[j] = -1.0
        start = 0
        for j, q in enumerate(quota):
            parts[j].extend(idx[start:start + q].tolist())
            start += q
    names = ("train", "val", "test")
    out = []
    for j, name in enumerate(names):
        order = sorted(parts[j])
        out.append(BagDataset([ds.bags[i] for i in order], dim=ds.dim,
                              split=name, meta=dict(ds.meta)))
    return tuple(out)


# --- synthetic desk-scale data -------------------------------------------------

@dataclass
class ToySpec:
    """Controlled generator for desk-scale bags with known moments.

    Global instances of positive bags are mean-shifted along a recorded
    direction; local instances cluster around a per-bag anchor (within-bag
    correlation ``local_anchor_corr``) and, in positive bags, a few "signal"
    locals get an extra shift along a third direction. The class, stream and
    signal directions are mutually orthogonal unit vectors drawn from the
    seed, so the generating moments are exactly known.
    """

    n_bags: int = 200
    dim: int = 8
    pos_fraction: float = 0.5
    global_count_min: int = 1
    global_count_max: int = 3
    ratio_mean: float = 1.5
    ratio_std: float = 0.5
    class_shift: float = 2.0
    stream_shift: float = 4.0
    local_anchor_corr: float = 0.7
    signal_instances: int = 2
    signal_shift: float = 2.0
    noise_std: float = 1.0

    def validate(self):
        if self.n_bags < 1 or self.dim < 3:
            raise ValueError("need n_bags >= 1 and dim >= 3")
        if not (0 < self.pos_fraction < 1):
            raise ValueError("pos_fraction must be in (0,1)")
        if self.global_count_min < 1 or self.global_count_max < self.global_count_min:
            raise ValueError("bad global count range")
        if not (0 <= self.local_anchor_corr < 1):
            raise ValueError("local_anchor_corr must be in [0,1)")
        if self.ratio_mean < 0 or self.ratio_std < 0 or self.noise_std <= 0:
            raise ValueError("ratio moments must be >= 0 and noise_std > 0")


def _orthonormal_triple(rng, dim):
    basis = []
    while len(basis) < 3:
        v = rng.standard_normal(dim)
        for u in basis:
            v = v - (v @ u) * u
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
    return basis


def make_toy_dataset(spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    u_class, u_stream, u_signal = _orthonormal_triple(rng, spec.dim)

    n_pos = int(round(spec.n_bags * spec.pos_fraction))
    labels = np.zeros(spec.n_bags, dtype=np.int64)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(spec.n_bags)]

    rho = spec.local_anchor_corr
    bags = []
    for label in labels:
        n_global = int(rng.integers(spec.global_count_min, spec.global_count_max + 1))
        r = spec.ratio_mean if spec.ratio_std == 0 else max(
            rng.normal(spec.ratio_mean, spec.ratio_std), 0.0)
        n_local = max(int(np.floor(r * n_global + 0.5)), 0)
        instances = []
        g_mean = label * spec.class_shift * u_class
        for _ in range(n_global):
            v = g_mean + spec.noise_std * rng.standard_normal(spec.dim)
            instances.append(Instance(v, Stream.GLOBAL))
        anchor = np.sqrt(rho) * spec.noise_std * rng.standard_normal(spec.dim)
        n_signal = min(spec.signal_instances, n_local) if label == 1 else 0
        signal_at = set(rng.choice(n_local, size=n_signal, replace=False).tolist()) \
            if n_signal else set()
        for k in range(n_local):
            v = (spec.stream_shift * u_stream + anchor
                 + np.sqrt(1.0 - rho) * spec.noise_std * rng.standard_normal(spec.dim))
            if k in signal_at:
                v = v + spec.signal_shift * u_signal
            instances.append(Instance(v, Stream.LOCAL))
        bags.append(EmbeddingBag(instances, int(label)))

    meta = {
        "generator": "toy-v1",
        "seed": int(seed),
        "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "class_direction": u_class.tolist(),
        "stream_direction": u_stream.tolist(),
        "signal_direction": u_signal.tolist(),
    }
    return BagDataset(bags, dim=spec.dim, split="full", meta=meta)


# --- bag-shape statistics -------------------------------------------------------

@dataclass
class BagShapeStats:
    """Empirical histogram of global counts plus local/global ratio moments."""

    global_count_hist: dict
    ratio_mean: float
    ratio_std: float

    def validate(self):
        if self.ratio_mean < 0 or self.ratio_std < 0:
            raise ValueError("ratio moments must be nonnegative")
        total = sum(self.global_count_hist.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"histogram mass {total} != 1")

    def to_dict(self):
        return {
            "global_count_hist": {str(k): v for k, v in self.global_count_hist.items()},
            "ratio_mean": self.ratio_mean,
            "ratio_std": self.ratio_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): float(v) for k, v in d["global_count_hist"].items()},
                   float(d["ratio_mean"]), float(d["ratio_std"]))


def fit_bag_shape_stats(ds):
    if not ds.bags:
        raise ValueError("cannot fit shape stats on an empty dataset")
    globals_per_bag = np.array([bag.count(Stream.GLOBAL) for bag in ds.bags])
    locals_per_bag = np.array([bag.count(Stream.LOCAL) for bag in ds.bags])
    counts, freq = np.unique(globals_per_bag, return_counts=True)
    hist = {int(c): float(f) / len(ds.bags) for c, f in zip(counts, freq)}
    ratios = locals_per_bag / globals_per_bag
    # population std: a single bag gives sigma = 0 by convention
    return BagShapeStats(hist, float(ratios.mean()), float(ratios.std()))


# --- batching helper --------------------------------------------------------------

def pad_bags(bags, dim):
    """Pad a list of bags to a dense [B, T_max, dim] block.

    Returns (tokens, mask, streams, labels); padded positions carry zeros
    and stream id 0.
    """
    if not bags:
        raise ValueError("pad_bags: empty bag list")
    sizes = [len(bag.instances) for bag in bags]
    t_max = max(sizes)
    b = len(bags)
    tokens = np.zeros((b, t_max, dim))
    mask = np.zeros((b, t_max), dtype=bool)
    streams = np.zeros((b, t_max), dtype=np.int64)
    labels = np.array([bag.label for bag in bags], dtype=np.int64)
    for i, bag in enumerate(bags):
        for j, inst in enumerate(bag.instances):
            tokens[i, j] = inst.vector
            streams[i, j] = int(inst.stream)
            mask[i, j] = True
    return tokens, mask, streams, labels
