"""Spectrogram tokenization: patches, disentangled positions, Patchout, special tokens.

Token provenance is an ``(n, 2)`` int array of ``(freq_idx, time_idx)``.
Special tokens use the sentinel rows ``CLS_TAG`` and ``DIST_TAG``. Patch
tokens are laid out frequency-major: all time positions for frequency row 0,
then row 1, and so on.
"""

from dataclasses import dataclass, replace
import re

import numpy as np

from passt import autograd as ag

PATCH_SIZE = 16
CLS_TAG = (-1, -1)
DIST_TAG = (-2, -2)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    """Square-patch grid over an (n_mels, n_frames) spectrogram."""

    stride_f: int = 10
    stride_t: int = 10
    n_mels: int = 128
    n_frames: int = 1001
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        for s in (self.stride_f, self.stride_t):
            if not 1 <= s <= self.patch_size:
                raise GeometryError(f"stride must be in [1, {self.patch_size}], got {s}")
        if self.n_mels < self.patch_size or self.n_frames < self.patch_size:
            raise GeometryError(
                f"spectrogram {self.n_mels}x{self.n_frames} is smaller than one "
                f"{self.patch_size}x{self.patch_size} patch")

    @property
    def f_patches(self):
        return (self.n_mels - self.patch_size) // self.stride_f + 1

    @property
    def t_patches(self):
        return (self.n_frames - self.patch_size) // self.stride_t + 1

    @property
    def n_patches(self):
        return self.f_patches * self.t_patches

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size

    def for_frames(self, n_frames):
        return replace(self, n_frames=n_frames)

    def provenance(self):
        f, t = np.meshgrid(np.arange(self.f_patches), np.arange(self.t_patches), indexing="ij")
        return np.stack([f.ravel(), t.ravel()], axis=1)


@dataclass
class TokenSequence:
    """Token embeddings ``(n, E)`` or batched ``(b, n, E)`` plus per-token provenance."""

    embeddings: ag.Tensor
    provenance: np.ndarray

    def __len__(self):
        return self.provenance.shape[0]

    @property
    def values(self):
        return self.embeddings.data

    @property
    def n_special(self):
        return int(np.count_nonzero(self.provenance[:, 0] < 0))

    def with_embeddings(self, emb):
        return TokenSequence(ag.as_tensor(emb), self.provenance)


@dataclass(frozen=True)
class PatchoutSpec:
    """Sequence reduction policy.

    mode is ``"none"``, ``"unstructured"`` (drop ``k`` tokens) or
    ``"structured"`` (drop ``f_drop`` frequency rows and ``t_drop`` time columns).
    """

    mode: str = "none"
    k: int = 0
    f_drop: int = 0
    t_drop: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "unstructured", "structured"):
            raise ValueError(f"unknown patchout mode {self.mode!r}")
        if min(self.k, self.f_drop, self.t_drop) < 0:
            raise ValueError("patchout counts must be non-negative")

    @classmethod
    def parse(cls, text, seed=0):
        """Parse ``none``, ``unstructured:K`` or ``structured:F,T``."""
        text = text.strip().lower()
        if text == "none":
            return cls(seed=seed)
        m = re.fullmatch(r"unstructured:(\d+)", text)
        if m:
            return cls("unstructured", k=int(m.group(1)), seed=seed)
        m = re.fullmatch(r"structured:(\d+),(\d+)", text)
        if m:
            return cls("structured", f_drop=int(m.group(1)), t_drop=int(m.group(2)), seed=seed)
        raise ValueError(f"bad patchout spec {text!r}; expected none | unstructured:K | structured:F,T")

    def __str__(self):
        if self.mode == "unstructured":
            return f"unstructured:{self.k}"
        if self.mode == "structured":
            return f"structured:{self.f_drop},{self.t_drop}"
        return "none"

    def validate(self, geom):
        if self.mode == "unstructured" and not self.k < geom.n_patches:
            raise ValueError(f"cannot drop {self.k} of {geom.n_patches} patches")
        if self.mode == "structured":
            if not self.f_drop < geom.f_patches:
                raise ValueError(f"f_drop={self.f_drop} must be < {geom.f_patches} frequency rows")
            if not self.t_drop < geom.t_patches:
                raise ValueError(f"t_drop={self.t_drop} must be < {geom.t_patches} time columns")


@dataclass
class PositionalTables:
    freq_table: np.ndarray
    time_table: np.ndarray


def extract_patch_grid(values, geom):
    """Cut a spectrogram into overlapping patches.

    ``values`` is ``(F, T)`` or ``(b, F, T)``. Returns ``(..., F_p, T_p, 256)``
    where patch (i, j) covers rows ``[i*stride_f, i*stride_f+16)`` and frames
    ``[j*stride_t, j*stride_t+16)``; leftover cells are dropped.
    """
    values = np.asarray(values)
    F, T = values.shape[-2:]
    if (F, T) != (geom.n_mels, geom.n_frames):
        raise GeometryError(f"spectrogram is {F}x{T}, geometry expects {geom.n_mels}x{geom.n_frames}")
    p = geom.patch_size
    win = np.lib.stride_tricks.sliding_window_view(values, (p, p), axis=(-2, -1))
    win = win[..., ::geom.stride_f, ::geom.stride_t, :, :]
    win = win[..., :geom.f_patches, :geom.t_patches, :, :]
    return win.reshape(win.shape[:-2] + (p * p,))


def project_patches(grid, weight, bias):
    """Linear patch embedding: ``token = patch @ weight + bias`` (weight is 256 x E)."""
    grid = np.asarray(grid)
    weight, bias = ag.as_tensor(weight), ag.as_tensor(bias)
    if grid.size == 0:
        raise GeometryError("empty patch grid")
    if grid.shape[-1] != weight.shape[0] or weight.shape[1] != bias.shape[-1]:
        raise GeometryError(f"patch dim {grid.shape[-1]} vs projection {weight.shape}, bias {bias.shape}")
    f_p, t_p = grid.shape[-3:-1]
    flat = grid.reshape(grid.shape[:-3] + (f_p * t_p, grid.shape[-1]))
    flat = flat.astype(weight.data.dtype, copy=False)
    emb = ag.matmul(flat, weight) + bias
    f, t = np.meshgrid(np.arange(f_p), np.arange(t_p), indexing="ij")
    return TokenSequence(emb, np.stack([f.ravel(), t.ravel()], axis=1))


def add_positional(tokens, freq_table, time_table):
    """Add ``freq_table[f] + time_table[t]`` to every patch token; specials untouched."""
    freq_table, time_table = ag.as_tensor(freq_table), ag.as_tensor(time_table)
    prov = tokens.provenance
    is_patch = prov[:, 0] >= 0
    if not is_patch.all():
        raise ValueError("add positional encodings before inserting special tokens")
    f_idx, t_idx = prov[:, 0], prov[:, 1]
    if len(prov) and (f_idx.max() >= freq_table.shape[0] or t_idx.max() >= time_table.shape[0]):
        raise IndexError(
            f"token grid up to ({f_idx.max()}, {t_idx.max()}) exceeds positional tables "
            f"({freq_table.shape[0]}, {time_table.shape[0]})")
    pos = ag.take(freq_table, f_idx, axis=0) + ag.take(time_table, t_idx, axis=0)
    return TokenSequence(tokens.embeddings + pos, prov)


def crop_time_table(tables, new_t):
    """Keep the first ``new_t`` rows of the time table; the frequency table is untouched."""
    current = tables.time_table.shape[0]
    if not 1 <= new_t <= current:
        raise ValueError(f"cannot crop time table of {current} rows to {new_t}")
    return PositionalTables(tables.freq_table, tables.time_table[:new_t].copy())


def patchout_keep(geom, spec):
    """Indices (frequency-major order) of patch tokens surviving ``spec``.

    Uses a Philox counter-based generator seeded from ``spec.seed``.
    """
    spec.validate(geom)
    n = geom.n_patches
    if spec.mode == "none":
        return np.arange(n)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    if spec.mode == "unstructured":
        dropped = rng.choice(n, size=spec.k, replace=False)
        keep = np.ones(n, dtype=bool)
        keep[dropped] = False
        return np.flatnonzero(keep)
    f_dropped = rng.choice(geom.f_patches, size=spec.f_drop, replace=False)
    t_dropped = rng.choice(geom.t_patches, size=spec.t_drop, replace=False)
    f_keep = np.setdiff1d(np.arange(geom.f_patches), f_dropped)
    t_keep = np.setdiff1d(np.arange(geom.t_patches), t_dropped)
    return (f_keep[:, None] * geom.t_patches + t_keep[None, :]).ravel()


def apply_patchout(tokens, geom, spec, training):
    """Drop patch tokens during training; identity at inference.

    ``tokens`` must hold the full patch grid of ``geom`` and no special tokens.
    """
    if not training or spec.mode == "none":
        spec.validate(geom)
        return tokens
    if tokens.n_special:
        raise ValueError("patchout must run before special tokens are appended")
    if len(tokens) != geom.n_patches:
        raise ValueError(f"expected {geom.n_patches} patch tokens, got {len(tokens)}")
    keep = patchout_keep(geom, spec)
    axis = tokens.embeddings.ndim - 2
    return TokenSequence(ag.take(tokens.embeddings, keep, axis=axis), tokens.provenance[keep])


def append_special(tokens, cls_embed, dist_embed=None):
    """Prepend C (position 0) and optionally D (position 1)."""
    if tokens.n_special:
        raise ValueError("special tokens already present")
    emb = tokens.embeddings
    specials = [ag.as_tensor(cls_embed)]
    tags = [CLS_TAG]
    if dist_embed is not None:
        specials.append(ag.as_tensor(dist_embed))
        tags.append(DIST_TAG)
    lead = emb.shape[:-2]
    dim = emb.shape[-1]
    parts = [ag.broadcast_to(ag.reshape(s, (1,) * len(lead) + (1, dim)), lead + (1, dim)) for s in specials]
    out = ag.concat(parts + [emb], axis=len(lead))
    prov = np.concatenate([np.array(tags, dtype=tokens.provenance.dtype).reshape(-1, 2), tokens.provenance])
    return TokenSequence(out, prov)


def sequence_length(geom, spec, training=True, n_special=2):
    """Transformer input length for a geometry and Patchout policy (no tensors touched)."""
    spec.validate(geom)
    if not training or spec.mode == "none":
        return geom.n_patches + n_special
    if spec.mode == "unstructured":
        return geom.n_patches - spec.k + n_special
    return (geom.f_patches - spec.f_drop) * (geom.t_patches - spec.t_drop) + n_special
