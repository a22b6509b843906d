"""Actor-critic network with exact analytic gradients, in plain numpy.

The model embeds each state of a recent-state window through a shared
fully-connected trunk, adds learned positional embeddings, runs the window
through gated attention blocks, and reads policy logits and a state value
off the final position. Double precision throughout; gradients are derived
by hand and validated against central finite differences.

Each attention block follows the gated-transformer recipe: normalization is
applied before each sublayer, and the usual residual additions are replaced
by a GRU-style gate

    r = sigmoid(y Wr + x Ur)
    z = sigmoid(y Wz + x Uz - bg)
    h = tanh(y Wh + (r * x) Uh)
    out = (1 - z) * x + z * h

where x is the residual stream, y the rectified sublayer output, and the
gate bias bg starts at 2 so freshly initialized blocks mostly pass the
residual stream through.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError

GATE_BIAS_INIT = 2.0
LN_EPS = 1e-5

CHECKPOINT_MAGIC = b"DSCKPT01"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    action_count: int
    fc_units: tuple[int, ...] = (256, 256, 128)
    tf_units: int = 2
    heads: int = 4
    head_dim: int = 32
    mlp_dim: int = 32
    context_window: int = 8

    def __post_init__(self):
        if self.input_dim < 1 or self.action_count < 1:
            raise ValidationError("input_dim and action_count must be >= 1")
        if not self.fc_units or any(u < 1 for u in self.fc_units):
            raise ValidationError("fc_units must be a non-empty tuple of positive ints")
        if self.tf_units < 0 or self.heads < 1 or self.head_dim < 1 or self.mlp_dim < 1:
            raise ValidationError("transformer dimensions must be positive")
        if self.context_window < 1:
            raise ValidationError("context_window must be >= 1")
        object.__setattr__(self, "fc_units", tuple(self.fc_units))

    @property
    def model_dim(self) -> int:
        return self.fc_units[-1]

    @property
    def attention_width(self) -> int:
        return self.heads * self.head_dim

    def digest(self) -> str:
        doc = json.dumps(self.__dict__, sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()

    @classmethod
    def desk_scale(cls, input_dim: int, action_count: int,
                   context_window: int = 8) -> "NetworkConfig":
        return cls(input_dim=input_dim, action_count=action_count,
                   fc_units=(32, 32, 16), tf_units=1, heads=2, head_dim=8,
                   mlp_dim=16, context_window=context_window)

    @classmethod
    def tiny(cls, input_dim: int = 5, action_count: int = 3) -> "NetworkConfig":
        return cls(input_dim=input_dim, action_count=action_count,
                   fc_units=(8,), tf_units=1, heads=1, head_dim=4,
                   mlp_dim=8, context_window=3)

    @classmethod
    def feedforward(cls, input_dim: int, action_count: int,
                    fc_units=(32, 32, 16)) -> "NetworkConfig":
        """Trunk-only ablation: no attention blocks."""
        return cls(input_dim=input_dim, action_count=action_count,
                   fc_units=tuple(fc_units), tf_units=0, heads=1, head_dim=1,
                   mlp_dim=1, context_window=1)


def layout(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) segments of the flat parameter vector."""
    d = config.model_dim
    aw = config.attention_width
    segs: list[tuple[str, tuple[int, ...]]] = []
    prev = config.input_dim
    for i, units in enumerate(config.fc_units):
        segs.append((f"fc{i}_w", (prev, units)))
        segs.append((f"fc{i}_b", (units,)))
        prev = units
    if config.tf_units > 0:
        segs.append(("pos_emb", (config.context_window, d)))
    for b in range(config.tf_units):
        p = f"blk{b}"
        segs += [(f"{p}_ln1_g", (d,)), (f"{p}_ln1_b", (d,))]
        segs += [(f"{p}_attn_wq", (d, aw)), (f"{p}_attn_bq", (aw,)),
                 (f"{p}_attn_wk", (d, aw)), (f"{p}_attn_bk", (aw,)),
                 (f"{p}_attn_wv", (d, aw)), (f"{p}_attn_bv", (aw,)),
                 (f"{p}_attn_wo", (aw, d)), (f"{p}_attn_bo", (d,))]
        for g in (f"{p}_gate1", f"{p}_gate2"):
            segs += [(f"{g}_wr", (d, d)), (f"{g}_ur", (d, d)),
                     (f"{g}_wz", (d, d)), (f"{g}_uz", (d, d)),
                     (f"{g}_wh", (d, d)), (f"{g}_uh", (d, d)),
                     (f"{g}_bg", (d,))]
        segs += [(f"{p}_ln2_g", (d,)), (f"{p}_ln2_b", (d,))]
        segs += [(f"{p}_mlp_w1", (d, config.mlp_dim)), (f"{p}_mlp_b1", (config.mlp_dim,)),
                 (f"{p}_mlp_w2", (config.mlp_dim, d)), (f"{p}_mlp_b2", (d,))]
    segs.append(("policy_w", (d, config.action_count)))
    segs.append(("policy_b", (config.action_count,)))
    segs.append(("value_w", (d, 1)))
    segs.append(("value_b", (1,)))
    return segs


def parameter_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout(config))


def param_views(values: np.ndarray, config: NetworkConfig) -> dict[str, np.ndarray]:
    """Named views into the flat vector; writes through to the vector."""
    views = {}
    offset = 0
    for name, shape in layout(config):
        size = int(np.prod(shape))
        views[name] = values[offset:offset + size].reshape(shape)
        offset += size
    if offset != values.size:
        raise ValidationError(
            f"parameter vector has {values.size} entries, layout expects {offset}"
        )
    return views


@dataclass
class ParameterSet:
    """Versioned flat parameter vector plus the config that shapes it."""

    config: NetworkConfig
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.size != parameter_count(self.config):
            raise ValidationError("parameter vector does not match the config layout")

    def views(self) -> dict[str, np.ndarray]:
        return param_views(self.values, self.config)

    def copy(self, version: int | None = None) -> "ParameterSet":
        return ParameterSet(self.config, self.values.copy(),
                            self.version if version is None else version)


def init_params(config: NetworkConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    values = np.zeros(parameter_count(config))
    views = param_views(values, config)
    for name, shape in layout(config):
        v = views[name]
        if name.endswith("_bg"):
            v[...] = GATE_BIAS_INIT
        elif name.endswith(("ln1_g", "ln2_g")):
            v[...] = 1.0
        elif name == "pos_emb":
            v[...] = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            v[...] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        # remaining biases stay zero
    return ParameterSet(config=config, values=values, version=0)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def pad_window(states, context_window: int) -> np.ndarray:
    """Left-pad a (<=K, D) state stack with zero rows up to exactly K rows."""
    arr = np.atleast_2d(np.asarray(states, dtype=np.float64))
    k = arr.shape[0]
    if k > context_window:
        arr = arr[-context_window:]
        k = context_window
    if k == context_window:
        return arr
    pad = np.zeros((context_window - k, arr.shape[1]))
    return np.vstack([pad, arr])


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def _softmax_last(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_finite(arr, layer: str):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite values", layer=layer)


def forward_batch(params: ParameterSet, windows: np.ndarray,
                  want_cache: bool = False):
    """Run the network on (B, K, D) windows.

    Returns (logits (B, A), values (B,), memory, cache). ``memory`` holds the
    per-block attention keys/values; ``cache`` the intermediates backward
    needs (None unless requested).
    """
    cfg = params.config
    if not np.isfinite(params.values).all():
        raise NumericError("non-finite values", layer="parameters")
    w = params.views()
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != cfg.context_window or x.shape[2] != cfg.input_dim:
        raise ValidationError(
            f"windows must be (B, {cfg.context_window}, {cfg.input_dim}), got {x.shape}"
        )

    cache: dict = {"windows": x} if want_cache else None
    trunk_pre = []
    h = x
    for i in range(len(cfg.fc_units)):
        pre = h @ w[f"fc{i}_w"] + w[f"fc{i}_b"]
        trunk_pre.append(pre)
        h = np.maximum(pre, 0.0)
    _check_finite(h, "trunk")
    if want_cache:
        cache["trunk_pre"] = trunk_pre

    if cfg.tf_units > 0:
        h = h + w["pos_emb"]

    memory = []
    blocks = []
    scale = 1.0 / np.sqrt(cfg.head_dim)
    B, K = h.shape[0], cfg.context_window
    for b in range(cfg.tf_units):
        p = f"blk{b}"
        blk: dict = {"h_in": h}

        a_in, ln1_cache = _layer_norm(h, w[f"{p}_ln1_g"], w[f"{p}_ln1_b"])
        q = a_in @ w[f"{p}_attn_wq"] + w[f"{p}_attn_bq"]
        k = a_in @ w[f"{p}_attn_wk"] + w[f"{p}_attn_bk"]
        v = a_in @ w[f"{p}_attn_wv"] + w[f"{p}_attn_bv"]
        qh = q.reshape(B, K, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        kh = k.reshape(B, K, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        vh = v.reshape(B, K, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)
        scores = np.einsum("bhqd,bhkd->bhqk", qh, kh) * scale
        att = _softmax_last(scores)
        ctx = np.einsum("bhqk,bhkd->bhqd", att, vh)
        ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(B, K, cfg.attention_width)
        attn_out = ctx_flat @ w[f"{p}_attn_wo"] + w[f"{p}_attn_bo"]
        y1 = np.maximum(attn_out, 0.0)
        h1, gate1_cache = _gate_forward(w, f"{p}_gate1", h, y1)
        memory.append((kh, vh))

        m_in, ln2_cache = _layer_norm(h1, w[f"{p}_ln2_g"], w[f"{p}_ln2_b"])
        mlp_pre1 = m_in @ w[f"{p}_mlp_w1"] + w[f"{p}_mlp_b1"]
        mlp_h = np.maximum(mlp_pre1, 0.0)
        mlp_out = mlp_h @ w[f"{p}_mlp_w2"] + w[f"{p}_mlp_b2"]
        y2 = np.maximum(mlp_out, 0.0)
        h2, gate2_cache = _gate_forward(w, f"{p}_gate2", h1, y2)
        _check_finite(h2, f"block{b}")

        if want_cache:
            blk.update(ln1=ln1_cache, a_in=a_in, qh=qh, kh=kh, vh=vh, att=att,
                       ctx_flat=ctx_flat, attn_out=attn_out, y1=y1,
                       gate1=gate1_cache, h1=h1, ln2=ln2_cache, m_in=m_in,
                       mlp_pre1=mlp_pre1, mlp_h=mlp_h, mlp_out=mlp_out, y2=y2,
                       gate2=gate2_cache)
            blocks.append(blk)
        h = h2

    if want_cache:
        cache["blocks"] = blocks
        cache["h_final"] = h

    last = h[:, -1, :]
    logits = last @ w["policy_w"] + w["policy_b"]
    values = (last @ w["value_w"])[:, 0] + w["value_b"][0]
    _check_finite(logits, "policy_head")
    _check_finite(values, "value_head")
    return logits, values, memory, cache


def _gate_forward(w, prefix, x, y):
    pre_r = y @ w[f"{prefix}_wr"] + x @ w[f"{prefix}_ur"]
    r = 1.0 / (1.0 + np.exp(-pre_r))
    pre_z = y @ w[f"{prefix}_wz"] + x @ w[f"{prefix}_uz"] - w[f"{prefix}_bg"]
    z = 1.0 / (1.0 + np.exp(-pre_z))
    rx = r * x
    pre_h = y @ w[f"{prefix}_wh"] + rx @ w[f"{prefix}_uh"]
    hbar = np.tanh(pre_h)
    out = (1.0 - z) * x + z * hbar
    return out, {"x": x, "y": y, "r": r, "z": z, "rx": rx, "hbar": hbar}


def _gate_backward(w, g, prefix, cache, dout):
    x, y, r, z, rx, hbar = (cache["x"], cache["y"], cache["r"], cache["z"],
                            cache["rx"], cache["hbar"])
    dz = dout * (hbar - x)
    dhbar = dout * z
    dx = dout * (1.0 - z)

    dpre_h = dhbar * (1.0 - hbar * hbar)
    g[f"{prefix}_wh"] += np.einsum("bki,bkj->ij", y, dpre_h)
    g[f"{prefix}_uh"] += np.einsum("bki,bkj->ij", rx, dpre_h)
    dy = dpre_h @ w[f"{prefix}_wh"].T
    drx = dpre_h @ w[f"{prefix}_uh"].T
    dr = drx * x
    dx += drx * r

    dpre_z = dz * z * (1.0 - z)
    g[f"{prefix}_wz"] += np.einsum("bki,bkj->ij", y, dpre_z)
    g[f"{prefix}_uz"] += np.einsum("bki,bkj->ij", x, dpre_z)
    g[f"{prefix}_bg"] += -dpre_z.sum(axis=(0, 1))
    dy += dpre_z @ w[f"{prefix}_wz"].T
    dx += dpre_z @ w[f"{prefix}_uz"].T

    dpre_r = dr * r * (1.0 - r)
    g[f"{prefix}_wr"] += np.einsum("bki,bkj->ij", y, dpre_r)
    g[f"{prefix}_ur"] += np.einsum("bki,bkj->ij", x, dpre_r)
    dy += dpre_r @ w[f"{prefix}_wr"].T
    dx += dpre_r @ w[f"{prefix}_ur"].T
    return dx, dy


def _layer_norm_backward(dy, gain, ln_cache, g, gname, bname):
    xhat, inv = ln_cache
    g[gname] += (dy * xhat).sum(axis=(0, 1))
    g[bname] += dy.sum(axis=(0, 1))
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)


def backward_batch(params: ParameterSet, cache: dict, d_logits: np.ndarray,
                   d_values: np.ndarray) -> np.ndarray:
    """Exact gradients of any scalar loss with the given head sensitivities."""
    cfg = params.config
    w = params.views()
    grads = np.zeros_like(params.values)
    g = param_views(grads, cfg)

    h_final = cache["h_final"] if cfg.tf_units > 0 else None
    if h_final is None:
        # Trunk-only model: rebuild the trunk output from cached
        # pre-activations of the last layer.
        h_final = np.maximum(cache["trunk_pre"][-1], 0.0)
    last = h_final[:, -1, :]

    g["policy_w"] += last.T @ d_logits
    g["policy_b"] += d_logits.sum(axis=0)
    g["value_w"] += (last.T @ d_values)[:, None]
    g["value_b"] += np.array([d_values.sum()])

    d_last = d_logits @ w["policy_w"].T + d_values[:, None] * w["value_w"][:, 0][None, :]
    dh = np.zeros_like(h_final)
    dh[:, -1, :] = d_last

    scale = 1.0 / np.sqrt(cfg.head_dim)
    B, K = dh.shape[0], cfg.context_window
    for b in range(cfg.tf_units - 1, -1, -1):
        p = f"blk{b}"
        blk = cache["blocks"][b]

        dh1, dy2 = _gate_backward(w, g, f"{p}_gate2", blk["gate2"], dh)
        dmlp_out = dy2 * (blk["mlp_out"] > 0.0)
        g[f"{p}_mlp_w2"] += np.einsum("bki,bkj->ij", blk["mlp_h"], dmlp_out)
        g[f"{p}_mlp_b2"] += dmlp_out.sum(axis=(0, 1))
        dmlp_h = dmlp_out @ w[f"{p}_mlp_w2"].T
        dmlp_pre1 = dmlp_h * (blk["mlp_pre1"] > 0.0)
        g[f"{p}_mlp_w1"] += np.einsum("bki,bkj->ij", blk["m_in"], dmlp_pre1)
        g[f"{p}_mlp_b1"] += dmlp_pre1.sum(axis=(0, 1))
        dm_in = dmlp_pre1 @ w[f"{p}_mlp_w1"].T
        dh1 += _layer_norm_backward(dm_in, w[f"{p}_ln2_g"], blk["ln2"], g,
                                    f"{p}_ln2_g", f"{p}_ln2_b")

        dh_in, dy1 = _gate_backward(w, g, f"{p}_gate1", blk["gate1"], dh1)
        dattn_out = dy1 * (blk["attn_out"] > 0.0)
        g[f"{p}_attn_wo"] += np.einsum("bka,bkd->ad", blk["ctx_flat"], dattn_out)
        g[f"{p}_attn_bo"] += dattn_out.sum(axis=(0, 1))
        dctx_flat = dattn_out @ w[f"{p}_attn_wo"].T
        dctx = dctx_flat.reshape(B, K, cfg.heads, cfg.head_dim).transpose(0, 2, 1, 3)

        att, qh, kh, vh = blk["att"], blk["qh"], blk["kh"], blk["vh"]
        datt = np.einsum("bhqd,bhkd->bhqk", dctx, vh)
        dvh = np.einsum("bhqk,bhqd->bhkd", att, dctx)
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqh = np.einsum("bhqk,bhkd->bhqd", dscores, kh) * scale
        dkh = np.einsum("bhqk,bhqd->bhkd", dscores, qh) * scale

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, K, cfg.attention_width)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, K, cfg.attention_width)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, K, cfg.attention_width)
        a_in = blk["a_in"]
        g[f"{p}_attn_wq"] += np.einsum("bki,bkj->ij", a_in, dq)
        g[f"{p}_attn_bq"] += dq.sum(axis=(0, 1))
        g[f"{p}_attn_wk"] += np.einsum("bki,bkj->ij", a_in, dk)
        g[f"{p}_attn_bk"] += dk.sum(axis=(0, 1))
        g[f"{p}_attn_wv"] += np.einsum("bki,bkj->ij", a_in, dv)
        g[f"{p}_attn_bv"] += dv.sum(axis=(0, 1))
        da_in = (dq @ w[f"{p}_attn_wq"].T + dk @ w[f"{p}_attn_wk"].T
                 + dv @ w[f"{p}_attn_wv"].T)
        dh_in += _layer_norm_backward(da_in, w[f"{p}_ln1_g"], blk["ln1"], g,
                                      f"{p}_ln1_g", f"{p}_ln1_b")
        dh = dh_in

    if cfg.tf_units > 0:
        g["pos_emb"] += dh.sum(axis=0)

    x = cache["windows"]
    trunk_pre = cache["trunk_pre"]
    d = dh
    for i in range(len(cfg.fc_units) - 1, -1, -1):
        d = d * (trunk_pre[i] > 0.0)
        inp = x if i == 0 else np.maximum(trunk_pre[i - 1], 0.0)
        g[f"fc{i}_w"] += np.einsum("bki,bkj->ij", inp, d)
        g[f"fc{i}_b"] += d.sum(axis=(0, 1))
        d = d @ w[f"fc{i}_w"].T
    return grads


# ---------------------------------------------------------------------------
# Policy heads
# ---------------------------------------------------------------------------

def masked_policy(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over unmasked actions; masked actions get probability exactly
    0. An all-false mask falls back to the unmasked softmax, so callers on
    the failure branch still see a valid distribution."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        mask = np.ones_like(mask)
    shifted = logits - logits[mask].max()
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum()


@dataclass(frozen=True)
class ForwardOutput:
    logits: np.ndarray
    value: float
    probs: np.ndarray
    attention_memory: list


def forward(params: ParameterSet, state_window, mask) -> ForwardOutput:
    """Single-sample forward pass; the window may hold fewer than K states
    and is zero-padded on the old side."""
    window = pad_window(state_window, params.config.context_window)
    logits, values, memory, _ = forward_batch(params, window[None, :, :])
    probs = masked_policy(logits[0], mask)
    return ForwardOutput(logits=logits[0], value=float(values[0]), probs=probs,
                         attention_memory=memory)


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

@dataclass
class LossBatch:
    """Inputs for one gradient evaluation.

    ``vhat`` are corrected value targets and ``pg_coeff`` the constant
    rho * advantage factors; both are treated as constants under
    differentiation. ``is_weights`` scale each sample's contribution.
    """

    windows: np.ndarray          # (B, K, D)
    actions: np.ndarray          # (B,)
    masks: np.ndarray            # (B, A) bool
    vhat: np.ndarray             # (B,)
    pg_coeff: np.ndarray         # (B,)
    is_weights: np.ndarray       # (B,)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=bool)
        self.vhat = np.asarray(self.vhat, dtype=np.float64)
        self.pg_coeff = np.asarray(self.pg_coeff, dtype=np.float64)
        self.is_weights = np.asarray(self.is_weights, dtype=np.float64)
        b = self.windows.shape[0]
        if b == 0:
            raise ValidationError("loss batch must be non-empty")
        for name in ("actions", "masks", "vhat", "pg_coeff", "is_weights"):
            if getattr(self, name).shape[0] != b:
                raise ValidationError(f"{name} length does not match batch size {b}")

    def __len__(self):
        return self.windows.shape[0]


@dataclass(frozen=True)
class LossReport:
    """is_weight-scaled sums over the batch."""

    loss_value: float
    loss_policy: float
    loss_entropy: float
    loss_total: float
    batch_size: int
    mean_entropy: float


def loss_and_gradients(params: ParameterSet, batch: LossBatch,
                       loss_weights, compute_grads: bool = True):
    """Evaluate the combined loss and, optionally, its exact gradient.

    loss_total = sum_b w_b * ( a_v (vhat_b - V_b)^2
                               - a_p pg_coeff_b log pi_b(a_b)
                               + a_e sum_a pi_b log pi_b )
    """
    a_v, a_p, a_e = loss_weights.a_v, loss_weights.a_p, loss_weights.a_e
    logits, values, _, cache = forward_batch(params, batch.windows,
                                             want_cache=compute_grads)
    B, A = logits.shape

    masks = batch.masks.copy()
    dead = ~masks.any(axis=1)
    masks[dead] = True

    shifted = logits - np.where(masks, logits, -np.inf).max(axis=1, keepdims=True)
    exp = np.where(masks, np.exp(shifted), 0.0)
    z = exp.sum(axis=1, keepdims=True)
    probs = exp / z
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(probs > 0, np.log(probs), 0.0)

    idx = np.arange(B)
    taken_p = probs[idx, batch.actions]
    if (taken_p <= 0).any():
        raise ValidationError("a batch action has zero probability under its mask")
    log_taken = np.log(taken_p)
    entropy_sum = (probs * logp).sum(axis=1)          # sum_a pi log pi  (= -H)

    per_value = (batch.vhat - values) ** 2
    per_policy = -batch.pg_coeff * log_taken
    per_entropy = entropy_sum
    wgt = batch.is_weights
    loss_value = float((wgt * per_value).sum())
    loss_policy = float((wgt * per_policy).sum())
    loss_entropy = float((wgt * per_entropy).sum())
    loss_total = a_v * loss_value + a_p * loss_policy + a_e * loss_entropy
    report = LossReport(loss_value=loss_value, loss_policy=loss_policy,
                        loss_entropy=loss_entropy, loss_total=loss_total,
                        batch_size=B, mean_entropy=float(-entropy_sum.mean()))
    if not compute_grads:
        return report, None

    one_hot = np.zeros((B, A))
    one_hot[idx, batch.actions] = 1.0
    d_logits = wgt[:, None] * (
        a_p * (-batch.pg_coeff[:, None]) * (one_hot - probs)
        + a_e * probs * (logp - entropy_sum[:, None])
    )
    d_values = wgt * a_v * 2.0 * (values - batch.vhat)
    grads = backward_batch(params, cache, d_logits, d_values)
    _check_finite(grads, "gradients")
    return report, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def adam_step(params: ParameterSet, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if grads.shape != params.values.shape or state.m.shape != grads.shape:
        raise ValidationError("gradient/state shapes do not match parameters")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return (ParameterSet(params.config, new_values, params.version),
            AdamState(m=m, v=v, step=t))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    worst_param: str
    param_count: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def grad_check(config: NetworkConfig | None = None, seed: int = 0,
               batch_size: int = 2, step: float = 1e-5,
               corrupt_segment: str | None = None) -> GradCheckReport:
    """Exhaustive per-parameter comparison of analytic gradients against
    central finite differences of the loss.

    ``corrupt_segment`` deliberately perturbs one named gradient segment so
    tests can confirm the checker fails when gradients are wrong.
    """
    from .agent import LossWeights  # local import avoids a module cycle

    cfg = config or NetworkConfig.tiny()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    lw = LossWeights()

    windows = rng.uniform(0.0, 1.0, size=(batch_size, cfg.context_window, cfg.input_dim))
    masks = np.ones((batch_size, cfg.action_count), dtype=bool)
    if cfg.action_count > 1:
        masks[0, rng.integers(cfg.action_count)] = False
    actions = np.array([int(rng.choice(np.flatnonzero(m))) for m in masks])
    batch = LossBatch(
        windows=windows,
        actions=actions,
        masks=masks,
        vhat=rng.normal(size=batch_size),
        pg_coeff=rng.normal(size=batch_size),
        is_weights=rng.uniform(0.2, 1.0, size=batch_size),
    )

    _, analytic = loss_and_gradients(params, batch, lw, compute_grads=True)
    if corrupt_segment is not None:
        views = param_views(analytic, cfg)
        views[corrupt_segment] += 1e-2

    def loss_at(values: np.ndarray) -> float:
        p = ParameterSet(cfg, values, params.version)
        report, _ = loss_and_gradients(p, batch, lw, compute_grads=False)
        return report.loss_total

    names = []
    for name, shape in layout(cfg):
        names.extend([name] * int(np.prod(shape)))

    base = params.values
    errs = np.zeros(base.size)
    for i in range(base.size):
        h = step * max(1.0, abs(base[i]))
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-5)
        errs[i] = abs(analytic[i] - numeric) / denom

    worst = int(np.argmax(errs))
    return GradCheckReport(
        max_rel_err=float(errs[worst]),
        mean_rel_err=float(errs.mean()),
        worst_param=names[worst],
        param_count=base.size,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, path):
    payload = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    header = json.dumps({
        "format": 1,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in params.config.__dict__.items()},
        "digest": params.config.digest(),
        "version": params.version,
        "count": params.values.size,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> ParameterSet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a parameter checkpoint")
        (hlen,) = struct.unpack(">I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ValidationError(f"{path}: checkpoint payload checksum mismatch")
    cfg_doc = dict(header["config"])
    cfg_doc["fc_units"] = tuple(cfg_doc["fc_units"])
    config = NetworkConfig(**cfg_doc)
    if config.digest() != header["digest"]:
        raise ValidationError(f"{path}: config digest mismatch")
    if expected_config is not None and expected_config.digest() != header["digest"]:
        raise ValidationError(f"{path}: checkpoint was built for a different config")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["count"]:
        raise ValidationError(f"{path}: parameter count mismatch")
    return ParameterSet(config=config, values=values, version=int(header["version"]))
