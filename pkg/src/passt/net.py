"""The spectrogram transformer: attention blocks, classifier head, parameter
bookkeeping and weight I/O.

Parameters live in a plain ``dict`` mapping canonical names to numpy arrays.
Linear layers store their weight as ``(in, out)`` and compute ``x @ W + b``.
"""

from dataclasses import asdict, dataclass, field, replace
import math

import numpy as np

from passt import autograd as ag
from passt import tensorbin
from passt.frontend import MelSpectrogram
from passt.tokenizer import (
    PatchGeometry,
    PatchoutSpec,
    PositionalTables,
    add_positional,
    append_special,
    apply_patchout,
    crop_time_table,
    extract_patch_grid,
    project_patches,
)

# Blocks kept when thinning a 12-block model to 7: every even index plus the last.
REDUCED_DEPTH_BLOCKS = (0, 2, 4, 6, 8, 10, 11)
LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 768
    heads: int = 12
    depth: int = 12
    n_classes: int = 527
    mlp_ratio: int = 4
    geometry: PatchGeometry = field(default_factory=PatchGeometry)
    has_dist_token: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.depth < 1 or self.n_classes < 1 or self.mlp_ratio < 1:
            raise ValueError("depth, n_classes and mlp_ratio must be positive")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return self.mlp_ratio * self.embed_dim

    @property
    def n_special(self):
        return 2 if self.has_dist_token else 1

    def to_dict(self):
        d = asdict(self)
        geom = d.pop("geometry")
        d.update({f"geometry.{k}": v for k, v in geom.items()})
        return d


@dataclass
class LayerTrace:
    b: int
    h: int
    n: int
    head_dim: int
    qk_flops: int
    av_flops: int
    attn_matrix_elems: int
    activation_bytes: int


class AttentionTrace(list):
    """Per-layer attention accounting, appended to by :func:`mha_forward`."""

    @property
    def total_attn_elems(self):
        return sum(r.attn_matrix_elems for r in self)


def block_names(i):
    p = f"blocks.{i}."
    return [p + s for s in (
        "norm1.weight", "norm1.bias",
        "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
        "attn.v.weight", "attn.v.bias", "attn.proj.weight", "attn.proj.bias",
        "norm2.weight", "norm2.bias",
        "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
    )]


def param_shapes(config):
    """Canonical name -> shape for every trainable tensor, in canonical order."""
    E, H, g = config.embed_dim, config.hidden_dim, config.geometry
    shapes = {
        "patch_embed.weight": (g.patch_dim, E),
        "patch_embed.bias": (E,),
        "cls_token": (E,),
    }
    if config.has_dist_token:
        shapes["dist_token"] = (E,)
    shapes["freq_pos"] = (g.f_patches, E)
    shapes["time_pos"] = (g.t_patches, E)
    for i in range(config.depth):
        names = iter(block_names(i))
        for shape in [(E,), (E,)] + [(E, E), (E,)] * 4 + [(E,), (E,), (E, H), (H,), (H, E), (E,)]:
            shapes[next(names)] = shape
    shapes["norm.weight"] = (E,)
    shapes["norm.bias"] = (E,)
    shapes["head.weight"] = (E, config.n_classes)
    shapes["head.bias"] = (config.n_classes,)
    return shapes


def param_count(config):
    """Closed-form trainable parameter count.

    patch embedding 256E + E, C (and D) tokens E each, positional tables
    (F_p + T_p)E, per block 12E^2 + 13E when mlp_ratio is 4 (generally
    4E^2 + 2rE^2 + (9 + r)E), final norm 2E and head E*C + C.
    """
    E, r, g = config.embed_dim, config.mlp_ratio, config.geometry
    per_block = (4 + 2 * r) * E * E + (9 + r) * E
    return (
        g.patch_dim * E + E
        + config.n_special * E
        + (g.f_patches + g.t_patches) * E
        + config.depth * per_block
        + 2 * E
        + E * config.n_classes + config.n_classes
    )


def _trunc_normal(rng, shape, std, dtype):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def init_params(config, seed=0, dtype=np.float32):
    """Truncated-normal (std 0.02) weights, zero biases and positional tables, unit LN gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("norm1.weight", "norm2.weight")) or name == "norm.weight":
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bias") or name in ("freq_pos", "time_pos"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = _trunc_normal(rng, shape, INIT_STD, dtype)
    return params


def check_params(params, config):
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise KeyError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"tensor {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
    extra = set(params) - set(param_shapes(config))
    if extra:
        raise ValueError(f"unexpected tensors: {sorted(extra)}")


def as_leaves(params, requires_grad=True):
    return {k: ag.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _linear(x, p, prefix):
    return ag.matmul(x, p[prefix + ".weight"]) + p[prefix + ".bias"]


def mha_forward(x, p, heads, trace=None, prefix="attn"):
    """Multi-head self-attention on ``x`` of shape (b, n, E).

    Q, K and V are reshaped to (b, h, n, E/h); the attention matrix is
    ``softmax(Q K^T / sqrt(E/h))`` over the last axis, shape (b, h, n, n).
    """
    x = ag.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("non-finite input to attention")
    b, n, E = x.shape
    if E % heads:
        raise ValueError(f"embed dim {E} not divisible by {heads} heads")
    dh = E // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, p, prefix + ".q") * (1.0 / math.sqrt(dh)))
    k = split(_linear(x, p, prefix + ".k"))
    v = split(_linear(x, p, prefix + ".v"))
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2))
    attn = ag.softmax(scores, axis=-1)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, E)
    if trace is not None:
        itemsize = x.data.dtype.itemsize
        trace.append(LayerTrace(
            b=b, h=heads, n=n, head_dim=dh,
            qk_flops=2 * b * heads * n * n * dh,
            av_flops=2 * b * heads * n * n * dh,
            attn_matrix_elems=b * heads * n * n,
            activation_bytes=itemsize * (4 * b * n * E + 2 * b * heads * n * n),
        ))
    return _linear(out, p, prefix + ".proj")


def block_forward(x, p, heads, trace=None, prefix=""):
    """Pre-norm residual block: attention then GELU MLP, both with skip connections."""
    def P(name):
        return prefix + name

    h = ag.layer_norm(x, p[P("norm1.weight")], p[P("norm1.bias")], LN_EPS)
    x = x + mha_forward(h, p, heads, trace, prefix=P("attn"))
    h = ag.layer_norm(x, p[P("norm2.weight")], p[P("norm2.bias")], LN_EPS)
    h = ag.gelu(_linear(h, p, P("mlp.fc1")))
    return x + _linear(h, p, P("mlp.fc2"))


def _spectrogram_values(spec):
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    if values.ndim == 2:
        return values[None], True
    if values.ndim == 3:
        return values, False
    raise ValueError(f"expected (F, T) or (b, F, T) spectrogram, got shape {values.shape}")


def forward_graph(values, p, config, patchout=PatchoutSpec(), training=False, trace=None):
    """Build the differentiable forward pass for a batch ``values`` (b, F, T).

    ``p`` maps names to Tensors (or arrays). Returns logits as a (b, C) Tensor.
    """
    geom = config.geometry.for_frames(values.shape[-1])
    grid = extract_patch_grid(values, geom)
    tokens = project_patches(grid, p["patch_embed.weight"], p["patch_embed.bias"])
    tokens = add_positional(tokens, p["freq_pos"], p["time_pos"])
    tokens = apply_patchout(tokens, geom, patchout, training)
    dist = p["dist_token"] if config.has_dist_token else None
    tokens = append_special(tokens, p["cls_token"], dist)

    x = tokens.embeddings
    for i in range(config.depth):
        x = block_forward(x, p, config.heads, trace, prefix=f"blocks.{i}.")
    x = ag.layer_norm(x, p["norm.weight"], p["norm.bias"], LN_EPS)
    pooled = ag.take(x, np.arange(config.n_special), axis=1).mean(axis=1)
    return _linear(pooled, p, "head")


def model_forward(spec, params, config, patchout=PatchoutSpec(), training=False, trace=None):
    """Raw logits for one spectrogram (shape (C,)) or a batch (shape (b, C))."""
    values, single = _spectrogram_values(spec)
    dtype = params["patch_embed.weight"].dtype
    logits = forward_graph(values.astype(dtype, copy=False), as_leaves(params, False),
                           config, patchout, training, trace).data
    return logits[0] if single else logits


def value_and_grad(params, values, targets, config, patchout=PatchoutSpec(), training=True, trace=None):
    """Mean BCE loss of a batch and its gradient w.r.t. every parameter tensor."""
    values, _ = _spectrogram_values(values)
    leaves = as_leaves(params, True)
    dtype = params["patch_embed.weight"].dtype
    logits = forward_graph(values.astype(dtype, copy=False), leaves, config, patchout, training, trace)
    loss = ag.bce_with_logits(logits, np.asarray(targets, dtype=dtype).reshape(logits.shape))
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {float(loss.data)}")
    ag.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads, logits.data


def reduce_depth(params, config):
    """Thin a 12-block model to 7 blocks, keeping indices 0, 2, 4, 6, 8, 10 and 11."""
    if config.depth != 12:
        raise ValueError(f"depth reduction expects 12 blocks, model has {config.depth}")
    out = {k: v for k, v in params.items() if not k.startswith("blocks.")}
    for new, old in enumerate(REDUCED_DEPTH_BLOCKS):
        for src, dst in zip(block_names(old), block_names(new)):
            out[dst] = params[src]
    new_config = replace(config, depth=len(REDUCED_DEPTH_BLOCKS))
    return {k: out[k] for k in param_shapes(new_config)}, new_config


def crop_time_positions(params, config, new_t):
    """Shorten the time positional table for shorter clips; frequency table untouched."""
    tables = crop_time_table(PositionalTables(params["freq_pos"], params["time_pos"]), new_t)
    g = config.geometry
    n_frames = (new_t - 1) * g.stride_t + g.patch_size
    new_config = replace(config, geometry=g.for_frames(n_frames))
    out = dict(params)
    out["time_pos"] = tables.time_table
    return out, new_config


def save_weights(params, path):
    tensorbin.save(path, params)


def load_weights(path, config=None):
    """Load a TENSORBIN weight file, validating names and shapes when ``config`` is given."""
    params = tensorbin.load(path)
    if config is not None:
        check_params(params, config)
    return params


def infer_config(params, heads, stride_f=10, stride_t=10, n_mels=128):
    """Recover a ModelConfig from tensor shapes; heads and strides are not stored in weights."""
    for name in ("patch_embed.weight", "time_pos", "freq_pos", "head.weight", "blocks.0.mlp.fc1.weight"):
        if name not in params:
            raise KeyError(f"missing tensor {name!r}")
    E = params["patch_embed.weight"].shape[1]
    depth = len({k.split(".")[1] for k in params if k.startswith("blocks.")})
    t_p = params["time_pos"].shape[0]
    geom = PatchGeometry(stride_f, stride_t, n_mels, (t_p - 1) * stride_t + 16)
    config = ModelConfig(
        embed_dim=E, heads=heads, depth=depth,
        n_classes=params["head.weight"].shape[1],
        mlp_ratio=params["blocks.0.mlp.fc1.weight"].shape[1] // E,
        geometry=geom, has_dist_token="dist_token" in params,
    )
    check_params(params, config)
    return config
