"""The conditional velocity network over bags of tokens.

Each token is lifted to a hidden width, modulated by a per-token condition
(time, bag label, stream id) through feature-wise scale/shift, then run
through two branches: a token-wise MLP for marginal structure, and an
induced-attention branch in which a small set of learned inducing points
summarizes the bag and every token queries that summary back. Branch sums
are re-modulated and projected to a per-token velocity. All cross-token
interaction is masked attention, so the map is permutation-equivariant and
padding-invariant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class SetFlowConfig:
    d_in: int = 128
    d_hidden: int = 512
    d_isab: int = 32
    num_inducing: int = 4
    num_heads: int = 4
    d_cond_part: int = 16
    d_cond: int = 48
    mlp_depth: int = 3
    num_classes: int = 2

    def validate(self):
        dims = (self.d_in, self.d_hidden, self.d_isab, self.num_inducing,
                self.num_heads, self.d_cond_part, self.d_cond,
                self.mlp_depth, self.num_classes)
        if any(v < 1 for v in dims):
            raise ValueError("all config dimensions must be positive")
        if self.d_isab % self.num_heads != 0:
            raise ValueError(
                f"d_isab {self.d_isab} not divisible by num_heads {self.num_heads}"
            )
        if self.d_cond_part % 2 != 0:
            raise ValueError("d_cond_part must be even for sin/cos pairs")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


def _mab_shapes(prefix, di):
    return {
        f"{prefix}_q_w": (di, di), f"{prefix}_q_b": (di,),
        f"{prefix}_k_w": (di, di), f"{prefix}_k_b": (di,),
        f"{prefix}_v_w": (di, di), f"{prefix}_v_b": (di,),
        f"{prefix}_o_w": (di, di), f"{prefix}_o_b": (di,),
        f"{prefix}_f_w": (di, di), f"{prefix}_f_b": (di,),
        f"{prefix}_na_g": (di,), f"{prefix}_na_b": (di,),
        f"{prefix}_nb_g": (di,), f"{prefix}_nb_b": (di,),
    }


def param_shapes(cfg):
    """Ordered name -> shape map for every learnable array."""
    cfg.validate()
    dh, di, dc = cfg.d_hidden, cfg.d_isab, cfg.d_cond
    concat = 3 * cfg.d_cond_part
    shapes = {
        "label_table": (cfg.num_classes, cfg.d_cond_part),
        "stream_table": (2, cfg.d_cond_part),
        "cond_w": (concat, dc), "cond_b": (dc,),
        "in_w": (cfg.d_in, dh), "in_b": (dh,),
        "film1_w": (dc, 2 * dh), "film1_b": (2 * dh,),
        "ln1_g": (dh,), "ln1_b": (dh,),
    }
    for i in range(cfg.mlp_depth):
        shapes[f"mlp{i}_w"] = (dh, dh)
        shapes[f"mlp{i}_b"] = (dh,)
    shapes["isab_down_w"] = (dh, di)
    shapes["isab_down_b"] = (di,)
    shapes["isab_inducing"] = (cfg.num_inducing, di)
    shapes.update(_mab_shapes("mab0", di))
    shapes.update(_mab_shapes("mab1", di))
    shapes["isab_up_w"] = (di, dh)
    shapes["isab_up_b"] = (dh,)
    shapes["film2_w"] = (dc, 2 * dh)
    shapes["film2_b"] = (2 * dh,)
    shapes["ln2_g"] = (dh,)
    shapes["ln2_b"] = (dh,)
    shapes["out_w"] = (dh, cfg.d_in)
    shapes["out_b"] = (cfg.d_in,)
    return shapes


@dataclass
class SetFlowParams:
    config: SetFlowConfig
    arrays: dict = field(default_factory=dict)

    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return SetFlowParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


def init_params(cfg, rng):
    """Fresh parameters: fan-in scaled uniform linears, small-normal embedding
    tables, unit-normal inducing points, identity norms. Modulation generators
    start near zero (weights in +-0.01, bias zero), so the network begins as an
    almost-unconditioned map while the condition path stays non-degenerate."""
    shapes = param_shapes(cfg)
    arrays = {}
    for name, shape in shapes.items():
        if name in ("label_table", "stream_table"):
            arrays[name] = rng.normal(0.0, 0.02, shape)
        elif name == "isab_inducing":
            arrays[name] = rng.standard_normal(shape)
        elif name.startswith("film") and name.endswith("_w"):
            arrays[name] = rng.uniform(-0.01, 0.01, shape)
        elif name.startswith("film"):
            arrays[name] = np.zeros(shape)
        elif name.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif name.endswith(("_b",)) and len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, shape)
    return SetFlowParams(cfg, arrays)


@dataclass
class BatchedBags:
    """Padded batch: [B,T,d] tokens with mask, stream ids, labels and times."""

    tokens: np.ndarray
    mask: np.ndarray
    streams: np.ndarray
    labels: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.streams = np.asarray(self.streams, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.float64)
        b, t_max, _ = self.tokens.shape
        if self.mask.shape != (b, t_max) or self.streams.shape != (b, t_max):
            raise ValueError("mask/stream shape mismatch with tokens")
        if self.labels.shape != (b,) or self.t.shape != (b,):
            raise ValueError("labels/t must have one entry per bag")
        if not self.mask.any(axis=1).all():
            raise ValueError("every bag needs at least one unmasked token")
        if ((self.t < 0) | (self.t > 1)).any():
            raise ValueError("t must lie in [0,1]")
        if np.abs(self.tokens[~self.mask]).sum() != 0.0:
            raise ValueError("masked positions must carry zeros")


def time_embedding(t, dim):
    """Sinusoidal features of a continuous time in [0,1].

    Pairs (sin, cos) of t*1000 scaled by geometric frequencies, so nearby
    times stay distinguishable over the whole unit interval.
    """
    if dim % 2 != 0:
        raise ValueError("time embedding dim must be even")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(dim // 2)
    omega = 10000.0 ** (-2.0 * k / dim)
    ang = (t_arr * 1000.0)[:, None] * omega[None, :]
    out = np.empty((t_arr.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    if np.asarray(t).ndim == 0:
        return out[0]
    return out


def make_param_tensors(params, tape, requires_grad=True):
    return {name: tape.leaf(arr, requires_grad=requires_grad)
            for name, arr in params.arrays.items()}


def collect_grads(ptensors):
    """Gradient array per parameter; parameters untouched by the loss get zeros."""
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in ptensors.items()}


def make_condition(t, y, s, ptensors, cfg, tape):
    """Per-token condition vector from time, bag label and stream id."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    s = np.atleast_1d(np.asarray(s, dtype=np.int64))
    if ((y < 0) | (y >= cfg.num_classes)).any():
        raise ValueError(f"label id outside [0,{cfg.num_classes})")
    if ((s < 0) | (s > 1)).any():
        raise ValueError("stream id must be 0 or 1")
    te = tape.constant(time_embedding(t, cfg.d_cond_part))
    le = ad.embed_rows(ptensors["label_table"], y)
    se = ad.embed_rows(ptensors["stream_table"], s)
    joint = ad.concat_cols([te, le, se])
    return ad.linear(joint, ptensors["cond_w"], ptensors["cond_b"])


def film(h, c, w, b):
    """Feature-wise (1+scale, shift) modulation of h by a condition projection."""
    d = h.data.shape[1]
    gb = ad.linear(c, w, b)
    gamma = ad.slice_cols(gb, 0, d)
    beta = ad.slice_cols(gb, d, 2 * d)
    return ad.add(ad.add(h, ad.mul(gamma, h)), beta)


def _mab(a3, b3, key_mask, pt, prefix, cfg):
    """Attention block: A attends into B, residual + norm, feed-forward + norm."""
    nb, p, di = a3.data.shape
    q_len = b3.data.shape[1]
    heads = cfg.num_heads
    a_flat = ad.reshape(a3, (nb * p, di))
    b_flat = ad.reshape(b3, (nb * q_len, di))
    q = ad.reshape(ad.linear(a_flat, pt[f"{prefix}_q_w"], pt[f"{prefix}_q_b"]), (nb, p, di))
    k = ad.reshape(ad.linear(b_flat, pt[f"{prefix}_k_w"], pt[f"{prefix}_k_b"]), (nb, q_len, di))
    v = ad.reshape(ad.linear(b_flat, pt[f"{prefix}_v_w"], pt[f"{prefix}_v_b"]), (nb, q_len, di))
    qh = ad.split_heads(q, heads)
    kh = ad.split_heads(k, heads)
    vh = ad.split_heads(v, heads)
    logits = ad.scale(ad.bmm(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(di))
    flat_logits = ad.reshape(logits, (nb * heads * p, q_len))
    if key_mask is None:
        mask_flat = np.ones((nb * heads * p, q_len), dtype=bool)
    else:
        mask_flat = np.broadcast_to(
            key_mask[:, None, None, :], (nb, heads, p, q_len)
        ).reshape(nb * heads * p, q_len)
    probs = ad.masked_softmax(flat_logits, mask_flat)
    att = ad.bmm(ad.reshape(probs, (nb * heads, p, q_len)), vh)
    merged = ad.reshape(ad.merge_heads(att, heads), (nb * p, di))
    proj = ad.linear(merged, pt[f"{prefix}_o_w"], pt[f"{prefix}_o_b"])
    z = ad.layer_norm(ad.add(a_flat, proj), pt[f"{prefix}_na_g"], pt[f"{prefix}_na_b"])
    ff = ad.relu(ad.linear(z, pt[f"{prefix}_f_w"], pt[f"{prefix}_f_b"]))
    out = ad.layer_norm(ad.add(z, ff), pt[f"{prefix}_nb_g"], pt[f"{prefix}_nb_b"])
    return ad.reshape(out, (nb, p, di))


def isab_branch(h_flat, mask, pt, cfg):
    """Induced-attention branch over a padded batch.

    Tokens are down-projected, summarized into the learned inducing points
    (padded tokens masked out of the keys), queried back per token, and
    up-projected. h_flat is [B*T, d_hidden]; mask is [B, T].
    """
    b, t_max = mask.shape
    di = cfg.d_isab
    xd = ad.linear(h_flat, pt["isab_down_w"], pt["isab_down_b"])
    xd3 = ad.reshape(xd, (b, t_max, di))
    ind = ad.tile_batch(pt["isab_inducing"], b)
    summary = _mab(ind, xd3, mask, pt, "mab0", cfg)
    queried = _mab(xd3, summary, None, pt, "mab1", cfg)
    q_flat = ad.reshape(queried, (b * t_max, di))
    return ad.linear(q_flat, pt["isab_up_w"], pt["isab_up_b"])


def velocity_graph(batch, ptensors, cfg, tape):
    """Build the full forward graph; returns the [B,T,d_in] velocity tensor."""
    b, t_max, d = batch.tokens.shape
    if d != cfg.d_in:
        raise ValueError(f"token dim {d} != configured d_in {cfg.d_in}")
    n = b * t_max
    c = make_condition(
        np.repeat(batch.t, t_max),
        np.repeat(batch.labels, t_max),
        batch.streams.reshape(-1),
        ptensors, cfg, tape,
    )
    x = tape.leaf(batch.tokens.reshape(n, d))
    h = ad.linear(x, ptensors["in_w"], ptensors["in_b"])
    h = film(h, c, ptensors["film1_w"], ptensors["film1_b"])
    h = ad.layer_norm(h, ptensors["ln1_g"], ptensors["ln1_b"])
    h = ad.silu(h)

    m = h
    for i in range(cfg.mlp_depth):
        m = ad.linear(m, ptensors[f"mlp{i}_w"], ptensors[f"mlp{i}_b"])
        if i < cfg.mlp_depth - 1:
            m = ad.elu(m)

    s = isab_branch(h, batch.mask, ptensors, cfg)

    out = ad.add(m, s)
    out = film(out, c, ptensors["film2_w"], ptensors["film2_b"])
    out = ad.layer_norm(out, ptensors["ln2_g"], ptensors["ln2_b"])
    out = ad.silu(out)
    out = ad.linear(out, ptensors["out_w"], ptensors["out_b"])
    return ad.reshape(out, (b, t_max, d))


def velocity_forward(batch, params):
    """Inference-only forward pass; returns a plain [B,T,d_in] array."""
    tape = ad.GradTape()
    pt = make_param_tensors(params, tape, requires_grad=False)
    return velocity_graph(batch, pt, params.config, tape).data


# --- checkpoint io ------------------------------------------------------------

def save_checkpoint(params, path):
    blob = np.frombuffer(json.dumps(params.config.to_dict()).encode("utf-8"),
                         dtype=np.uint8)
    np.savez(path, __config__=blob, **params.arrays)


def load_checkpoint(path):
    with np.load(path) as archive:
        cfg = SetFlowConfig.from_dict(
            json.loads(archive["__config__"].tobytes().decode("utf-8")))
        arrays = {name: archive[name].astype(np.float64)
                  for name in archive.files if name != "__config__"}
    expected = param_shapes(cfg)
    if set(arrays) != set(expected):
        missing = set(expected) ^ set(arrays)
        raise ValueError(f"checkpoint arrays do not match config: {sorted(missing)}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ValueError(f"checkpoint array {name} has shape "
                             f"{arrays[name].shape}, expected {shape}")
    return SetFlowParams(cfg, arrays)
