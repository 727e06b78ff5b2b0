"""Decoder-only causal Transformer over univariate patch sequences.

All batched routines take patches shaped (B, N_p, L_p) and a granularity index per
sample, and return (B, H) forecasts in normalized space. ``forward`` wraps them for
a whole multivariate window, including normalization, padding and denormalization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core_series import (
    Granularity,
    PatchGrid,
    TimeSeriesWindow,
    classify_granularity,
    denormalize,
    from_model_domain,
    row_split,
    series_to_grid,
    to_model_domain,
)

MASK_SENTINEL = -1e9
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

ModelParams = dict  # canonical name -> np.ndarray


@dataclass
class ModelConfig:
    patch_len: int = 4
    d_model: int = 64
    num_layers: int = 4
    num_heads: int = 4
    d_k: int = 0  # 0 -> d_model // num_heads
    d_v: int = 0
    ffn_hidden: int = 0  # 0 -> 4 * d_model
    horizon: int = 4
    max_patches: int = 16
    embed_blocks: int = 2
    output_blocks: int = 2
    use_positional_encoding: bool = True
    use_granularity_encoding: bool = True

    def __post_init__(self) -> None:
        if self.d_k == 0:
            self.d_k = max(1, self.d_model // self.num_heads)
        if self.d_v == 0:
            self.d_v = max(1, self.d_model // self.num_heads)
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.d_model
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if v < 0 or (v == 0 and f.name not in ("embed_blocks", "output_blocks")):
                raise ValueError(f"ModelConfig.{f.name} must be positive, got {v}")
        if self.use_positional_encoding and self.d_model % 2:
            raise ValueError("positional encoding needs an even d_model")

    @property
    def max_history(self) -> int:
        return self.max_patches * self.patch_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.num_heads
    shapes: dict[str, tuple[int, ...]] = {
        "embed.in.weight": (cfg.patch_len, d),
        "embed.in.bias": (d,),
    }
    for k in range(cfg.embed_blocks):
        shapes[f"embed.blocks.{k}.weight"] = (d, d)
        shapes[f"embed.blocks.{k}.bias"] = (d,)
    shapes["granularity.table"] = (len(Granularity), d)
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        shapes[p + "norm1.gain"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "attn.w_q"] = (h, d, cfg.d_k)
        shapes[p + "attn.w_k"] = (h, d, cfg.d_k)
        shapes[p + "attn.w_v"] = (h, d, cfg.d_v)
        shapes[p + "attn.w_o"] = (h * cfg.d_v, d)
        shapes[p + "norm2.gain"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, cfg.ffn_hidden)
        shapes[p + "ffn.b1"] = (cfg.ffn_hidden,)
        shapes[p + "ffn.w2"] = (cfg.ffn_hidden, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    for k in range(cfg.output_blocks):
        shapes[f"head.blocks.{k}.weight"] = (d, d)
        shapes[f"head.blocks.{k}.bias"] = (d,)
    shapes["head.out.weight"] = (d, cfg.horizon)
    shapes["head.out.bias"] = (cfg.horizon,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(("w_q", "w_k", "w_v")):
        return shape[1]
    return shape[0]


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform weights; zero biases and granularity table; unit norm gains."""
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("gain"):
            arr = np.ones(shape)
        elif name.endswith(("bias", "b1", "b2")) or name == "granularity.table":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    missing = set(shapes) - set(params)
    extra = set(params) - set(shapes)
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------- primitives

def gelu(x):
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_grad(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)


def layer_norm(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(lead), dy.sum(lead)


def softmax(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _sum_lead(x):
    return x.reshape(-1, x.shape[-1]).sum(0)


def _matmul_grad(x, dy):
    """Gradient of (x @ W) w.r.t. W, summed over every leading axis."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---------------------------------------------------------------- embedding

def _resnet_blocks(h, params, prefix, count, cache=None):
    for k in range(count):
        a = h @ params[f"{prefix}.{k}.weight"] + params[f"{prefix}.{k}.bias"]
        if cache is not None:
            cache.append((h, a))
        h = h + gelu(a)
    return h


def _resnet_blocks_backward(dh, params, prefix, count, cache, grads):
    for k in reversed(range(count)):
        h, a = cache[k]
        da = dh * gelu_grad(a)
        grads[f"{prefix}.{k}.weight"] = _matmul_grad(h, da)
        grads[f"{prefix}.{k}.bias"] = _sum_lead(da)
        dh = dh + da @ params[f"{prefix}.{k}.weight"].T
    return dh


def embed_patches(patches, params: ModelParams, cfg: ModelConfig):
    """Residual MLP applied to each patch row: (..., N_p, L_p) -> (..., N_p, d_m)."""
    patches = np.asarray(patches)
    if patches.shape[-1] != cfg.patch_len:
        raise ValueError(f"patch length {patches.shape[-1]} != configured {cfg.patch_len}")
    h = patches.astype(params["embed.in.weight"].dtype) @ params["embed.in.weight"] + params["embed.in.bias"]
    return _resnet_blocks(h, params, "embed.blocks", cfg.embed_blocks)


def positional_encoding(num_patches: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError("positional encoding needs an even d_model")
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    pos = np.arange(num_patches)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2) / d_model)
    pe = np.empty((num_patches, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def granularity_encoding(g: Granularity, num_patches: int, params: ModelParams) -> np.ndarray:
    row = params["granularity.table"][int(g)]
    return np.broadcast_to(row, (num_patches, row.shape[0])).copy()


def compose_input(e_pat, e_pos, e_gra):
    e_pat, e_pos, e_gra = np.asarray(e_pat), np.asarray(e_pos), np.asarray(e_gra)
    if not (e_pat.shape == e_pos.shape == e_gra.shape):
        raise ValueError(f"shape mismatch: {e_pat.shape}, {e_pos.shape}, {e_gra.shape}")
    return e_pat + e_pos + e_gra


# ---------------------------------------------------------------- attention

def causal_mask(num_patches: int) -> np.ndarray:
    """0 on and below the diagonal, a large negative sentinel above it."""
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    return np.triu(np.full((num_patches, num_patches), MASK_SENTINEL), k=1)


def attention_head(e, w_q, w_k, w_v, mask):
    q, k, v = e @ w_q, e @ w_k, e @ w_v
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(w_q.shape[-1]) + mask
    return softmax(s) @ v


def _split_heads(x, h):
    b, n, _ = x.shape
    return x.reshape(b, n, h, -1).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def _flat_heads(w):
    h, d, k = w.shape
    return w.transpose(1, 0, 2).reshape(d, h * k)


def _attn_forward(x, params, p, mask, cache=None):
    """All heads at once; x is (B, N, d_m)."""
    w_q = params[p + "attn.w_q"]
    h, _, d_k = w_q.shape
    q = _split_heads(x @ _flat_heads(w_q), h)
    k = _split_heads(x @ _flat_heads(params[p + "attn.w_k"]), h)
    v = _split_heads(x @ _flat_heads(params[p + "attn.w_v"]), h)
    scale = 1.0 / math.sqrt(d_k)
    probs = softmax(q @ k.transpose(0, 1, 3, 2) * scale + mask)
    heads = _merge_heads(probs @ v)
    if cache is not None:
        cache.update(attn_in=x, q=q, k=k, v=v, probs=probs, heads=heads, scale=scale)
    return heads @ params[p + "attn.w_o"]


def _attn_backward(d_o, params, p, c, grads):
    h = c["q"].shape[1]
    grads[p + "attn.w_o"] = _matmul_grad(c["heads"], d_o)
    d_heads = _split_heads(d_o @ params[p + "attn.w_o"].T, h)
    probs, q, k, v, scale = c["probs"], c["q"], c["k"], c["v"], c["scale"]
    d_v = probs.transpose(0, 1, 3, 2) @ d_heads
    d_p = d_heads @ v.transpose(0, 1, 3, 2)
    d_s = probs * (d_p - (d_p * probs).sum(-1, keepdims=True))
    d_q = d_s @ k * scale
    d_k = d_s.transpose(0, 1, 3, 2) @ q * scale
    x = c["attn_in"]
    d_x = 0.0
    for name, dz in (("w_q", d_q), ("w_k", d_k), ("w_v", d_v)):
        w = params[p + "attn." + name]
        dzm = _merge_heads(dz)
        gw = _matmul_grad(x, dzm)  # (d, h*k)
        grads[p + "attn." + name] = gw.reshape(w.shape[1], h, -1).transpose(1, 0, 2)
        d_x = d_x + dzm @ _flat_heads(w).T
    return d_x


def multi_head(e, params: ModelParams, layer: int, mask):
    """Concatenated causal heads projected back to d_m."""
    squeeze = e.ndim == 2
    x = e[None] if squeeze else e
    out = _attn_forward(x, params, f"layers.{layer}.", mask)
    return out[0] if squeeze else out


def _layer_forward(x, params, l, mask, cache=None):
    p = f"layers.{l}."
    n1, ln1 = layer_norm(x, params[p + "norm1.gain"], params[p + "norm1.bias"])
    x1 = x + _attn_forward(n1, params, p, mask, cache)
    n2, ln2 = layer_norm(x1, params[p + "norm2.gain"], params[p + "norm2.bias"])
    a = n2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
    f = gelu(a)
    x2 = x1 + f @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
    if cache is not None:
        cache.update(ln1=ln1, ln2=ln2, n2=n2, a=a, f=f)
    return x2


def _layer_backward(d_x2, params, l, c, grads):
    p = f"layers.{l}."
    grads[p + "ffn.w2"] = _matmul_grad(c["f"], d_x2)
    grads[p + "ffn.b2"] = _sum_lead(d_x2)
    d_a = (d_x2 @ params[p + "ffn.w2"].T) * gelu_grad(c["a"])
    grads[p + "ffn.w1"] = _matmul_grad(c["n2"], d_a)
    grads[p + "ffn.b1"] = _sum_lead(d_a)
    d_n2 = d_a @ params[p + "ffn.w1"].T
    d_x1, grads[p + "norm2.gain"], grads[p + "norm2.bias"] = layer_norm_backward(
        d_n2, params[p + "norm2.gain"], c["ln2"])
    d_x1 = d_x1 + d_x2
    d_n1 = _attn_backward(d_x1, params, p, c, grads)
    d_x, grads[p + "norm1.gain"], grads[p + "norm1.bias"] = layer_norm_backward(
        d_n1, params[p + "norm1.gain"], c["ln1"])
    return d_x + d_x1


def transformer_layer(e_in, params: ModelParams, layer: int, mask):
    """Pre-norm layer: causal multi-head attention then a GELU feed-forward, both residual."""
    squeeze = e_in.ndim == 2
    x = e_in[None] if squeeze else e_in
    out = _layer_forward(x, params, layer, mask)
    return out[0] if squeeze else out


def backbone(e, params: ModelParams, cfg: ModelConfig):
    """Stacked layers plus the final norm: (..., N_p, d_m) -> Z of the same shape."""
    squeeze = e.ndim == 2
    x = e[None] if squeeze else e
    mask = causal_mask(x.shape[1]).astype(x.dtype)
    for l in range(cfg.num_layers):
        x = _layer_forward(x, params, l, mask)
    z, _ = layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    return z[0] if squeeze else z


def project_output(z, params: ModelParams, cfg: ModelConfig):
    """One-shot H-step forecast from the last patch representation only."""
    last = np.asarray(z)[..., -1, :]
    h = _resnet_blocks(last, params, "head.blocks", cfg.output_blocks)
    return h @ params["head.out.weight"] + params["head.out.bias"]


# ---------------------------------------------------------------- batched passes

def forward_batch(params: ModelParams, cfg: ModelConfig, patches, gran, keep_cache: bool = False):
    """Normalized-space forecasts for a batch of equally sized grids.

    patches: (B, N_p, L_p) already masked; gran: (B,) granularity indices.
    Returns (B, H) and, with ``keep_cache``, the activations needed by ``backward_batch``.
    """
    dtype = params["embed.in.weight"].dtype
    x_in = np.asarray(patches, dtype=dtype)
    if x_in.ndim != 3 or x_in.shape[2] != cfg.patch_len:
        raise ValueError(f"expected (B, N_p, {cfg.patch_len}) patches, got {x_in.shape}")
    b, n, _ = x_in.shape
    gran = np.asarray(gran, dtype=np.intp).reshape(b)
    cache = {"embed": [], "layers": [], "head": []} if keep_cache else None

    h = x_in @ params["embed.in.weight"] + params["embed.in.bias"]
    h = _resnet_blocks(h, params, "embed.blocks", cfg.embed_blocks,
                       cache["embed"] if keep_cache else None)
    if cfg.use_positional_encoding:
        h = h + positional_encoding(n, cfg.d_model).astype(dtype)
    if cfg.use_granularity_encoding:
        h = h + params["granularity.table"][gran][:, None, :]

    mask = causal_mask(n).astype(dtype)
    x = h
    for l in range(cfg.num_layers):
        lc = {} if keep_cache else None
        x = _layer_forward(x, params, l, mask, lc)
        if keep_cache:
            cache["layers"].append(lc)
    last, ln_f = layer_norm(x[:, -1, :], params["final_norm.gain"], params["final_norm.bias"])
    z = _resnet_blocks(last, params, "head.blocks", cfg.output_blocks,
                       cache["head"] if keep_cache else None)
    out = z @ params["head.out.weight"] + params["head.out.bias"]
    if keep_cache:
        cache.update(x_in=x_in, gran=gran, ln_f=ln_f, z=z, n=n)
        return out, cache
    return out


def backward_batch(params: ModelParams, cfg: ModelConfig, cache, d_out) -> ModelParams:
    """Gradients of sum(d_out * forward_batch(...)) w.r.t. every parameter."""
    grads: ModelParams = {}
    d_out = np.asarray(d_out, dtype=cache["z"].dtype)
    grads["head.out.weight"] = cache["z"].T @ d_out
    grads["head.out.bias"] = d_out.sum(0)
    d_z = d_out @ params["head.out.weight"].T
    d_last = _resnet_blocks_backward(d_z, params, "head.blocks", cfg.output_blocks, cache["head"], grads)
    d_last, grads["final_norm.gain"], grads["final_norm.bias"] = layer_norm_backward(
        d_last, params["final_norm.gain"], cache["ln_f"])
    b, n = d_last.shape[0], cache["n"]
    d_x = np.zeros((b, n, cfg.d_model), dtype=d_last.dtype)
    d_x[:, -1, :] = d_last
    for l in reversed(range(cfg.num_layers)):
        d_x = _layer_backward(d_x, params, l, cache["layers"][l], grads)

    table = np.zeros_like(params["granularity.table"])
    if cfg.use_granularity_encoding:
        np.add.at(table, cache["gran"], d_x.sum(1))
    grads["granularity.table"] = table

    d_h = _resnet_blocks_backward(d_x, params, "embed.blocks", cfg.embed_blocks, cache["embed"], grads)
    grads["embed.in.weight"] = _matmul_grad(cache["x_in"], d_h)
    grads["embed.in.bias"] = _sum_lead(d_h)
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------- window API

def grids_to_batch(grids: list[PatchGrid]) -> tuple[np.ndarray, np.ndarray]:
    patches = np.stack([g.patches * g.mask for g in grids])
    gran = np.array([int(g.granularity) for g in grids])
    return patches, gran


def forward(window: TimeSeriesWindow, params: ModelParams, cfg: ModelConfig,
            mask_override=None) -> np.ndarray:
    """Forecast an M x H matrix for one window; each variable is an independent pass.

    ``mask_override`` (N_p x L_p, or M x N_p x L_p) multiplies the inference mask.
    """
    if window.history_len > cfg.max_history:
        raise ValueError(f"history length {window.history_len} exceeds the model maximum {cfg.max_history}")
    g = classify_granularity(window.delta_t_seconds)
    grids = [series_to_grid(row, cfg.patch_len, g) for row in row_split(to_model_domain(window))]
    if mask_override is not None:
        mo = np.asarray(mask_override, dtype=np.float64)
        if mo.ndim == 2:
            mo = np.broadcast_to(mo, (len(grids),) + mo.shape)
        for grid, m in zip(grids, mo):
            grid.mask = grid.mask * m
    patches, gran = grids_to_batch(grids)
    pred = forward_batch(params, cfg, patches, gran).astype(np.float64)
    return from_model_domain(np.stack([denormalize(p, grid.stats) for p, grid in zip(pred, grids)]), window)


def layer_activations(window_row, g: Granularity, params: ModelParams, cfg: ModelConfig) -> dict:
    """Intermediate matrices for one univariate series (inspection and tests)."""
    grid = series_to_grid(window_row, cfg.patch_len, g)
    n = grid.num_patches
    e_pat = embed_patches(grid.patches * grid.mask, params, cfg)
    e_pos = positional_encoding(n, cfg.d_model) if cfg.use_positional_encoding else np.zeros_like(e_pat)
    e_gra = granularity_encoding(g, n, params) if cfg.use_granularity_encoding else np.zeros_like(e_pat)
    e = compose_input(e_pat, e_pos, e_gra)
    mask = causal_mask(n)
    layers = []
    x = e
    for l in range(cfg.num_layers):
        c: dict = {}
        x = _layer_forward(x[None], params, l, mask, c)[0]
        layers.append({"Q": c["q"][0], "K": c["k"][0], "V": c["v"][0],
                       "heads": c["heads"][0], "out": x})
    z = backbone(e, params, cfg)
    return {"E": e, "layers": layers, "Z": z}
