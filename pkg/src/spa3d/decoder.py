"""Query-conditioned trajectory decoder with strided-window up-projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, point_encoding, sinusoidal_encode
from .numkit import (
    LayerNorm,
    Linear,
    Module,
    SelfAttentionBlock,
    Tensor,
    add,
    broadcast_to,
    concat,
    get_dtype,
    matmul,
    mul,
    sigmoid_array,
    tensor,
    tlog,
    tsum,
)
from .trackio import QueryPoint


@dataclass(frozen=True)
class TemporalWindowLayout:
    code: np.ndarray  # temporal code vector
    starts: np.ndarray  # [L] window offsets
    width: int
    stride: int

    def windows(self) -> np.ndarray:
        """[L, width] slices of the code."""
        idx = self.starts[:, None] + np.arange(self.width)
        return self.code[idx]


@dataclass
class ReconstructedTrack:
    positions: np.ndarray  # [T, 3]
    logits: np.ndarray  # [T]

    @property
    def occluded(self) -> np.ndarray:
        return occlusion_prediction(self.logits)


def build_temporal_windows(T: int, config: ModelConfig) -> TemporalWindowLayout:
    """Per-latent-token windows into a code built from sinusoids of t/T.

    The per-frame codes are concatenated, then tiled cyclically until every
    window fits; windows are spread uniformly with a constant stride.
    """
    if T < 2:
        raise ValueError("need at least 2 frames")
    L, W = config.latent_tokens, config.window
    base = sinusoidal_encode((np.arange(T) / T)[:, None], config.pe_frequencies).reshape(-1)
    length = max(base.size, W + L - 1)
    code = np.resize(base, length)
    stride = (length - W) // max(L - 1, 1)
    starts = np.arange(L) * stride
    return TemporalWindowLayout(code, starts, W, int(stride))


def output_basis(T: int, size: int) -> np.ndarray:
    """Cosine basis [T, size]: B[t, k] = cos(pi k (t + 0.5) / T)."""
    t = np.arange(T)[:, None] + 0.5
    k = np.arange(size)[None, :]
    return np.cos(np.pi * k * t / T)


def occlusion_prediction(logits) -> np.ndarray:
    """sigmoid(logit) > 0.5 means occluded; a logit of exactly 0 is visible."""
    z = np.asarray(logits, dtype=np.float64)
    return sigmoid_array(z) > 0.5


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        self.config = c
        D = c.up_dim
        self.up_in = Linear(c.latent_channels, D, rng)
        self.up_out = Linear(D + c.window, D, rng)
        self.up_blocks = [SelfAttentionBlock(D, c.up_sa_qkv, c.up_sa_heads, c.up_sa_mlp, rng)
                          for _ in range(c.up_sa_layers)]
        self.query_proj = Linear(8 * c.pe_frequencies, D, rng)
        self.blocks = [SelfAttentionBlock(D, c.readout_qkv, c.readout_heads, c.readout_mlp, rng)
                       for _ in range(c.readout_layers)]
        self.norm = LayerNorm(D)
        self.head = Linear(D, 4 * c.basis_size, rng)

    def up_project(self, latents: Tensor, layout: TemporalWindowLayout) -> Tensor:
        """[B, L, c] latents -> [B, L, D] tokens."""
        B, L = latents.shape[:2]
        h = self.up_in(latents)
        win = np.broadcast_to(layout.windows().astype(get_dtype()), (B, L, layout.width))
        return self.up_out(concat([h, tensor(win)], axis=-1))

    def __call__(self, latents: Tensor, query_pe: np.ndarray, T: int,
                 query_pos: np.ndarray | None = None) -> Tensor:
        """latents [B, L, c], query_pe [B, Q, 8F] -> outputs [B, Q, T, 4] (x, y, z, logit)."""
        c = self.config
        B, L = latents.shape[:2]
        Q = query_pe.shape[1]
        D = c.up_dim
        x = self.up_project(latents, build_temporal_windows(T, c))
        for blk in self.up_blocks:
            x = blk(x)
        ctx = broadcast_to(x.reshape(B, 1, L, D), (B, Q, L, D))
        q = self.query_proj(tensor(query_pe.astype(get_dtype()))).reshape(B, Q, 1, D)
        h = concat([ctx, q], axis=2)
        for blk in self.blocks:
            h = blk(h)
        coeff = self.head(self.norm(h[:, :, L, :])).reshape(B, Q, c.basis_size, 4)
        out = matmul(tensor(output_basis(T, c.basis_size).astype(get_dtype())), coeff)
        if c.query_residual:
            if query_pos is None:
                raise ValueError("query positions required with query_residual")
            offset = np.zeros((B, Q, 1, 4), dtype=get_dtype())
            offset[..., :3] = np.asarray(query_pos)[:, :, None, :]
            out = add(out, tensor(offset))
        return out


def query_encoding(points: np.ndarray, times: np.ndarray, T: int, config: ModelConfig) -> np.ndarray:
    """Query points [..., 3] at frames [...] -> [..., 8F]."""
    return point_encoding(points, times, T, config)


def up_project(decoder: Decoder, latent: Tensor, T: int) -> Tensor:
    """Single latent [L, c] -> [L, D]."""
    L, c = latent.shape
    return decoder.up_project(latent.reshape(1, L, c), build_temporal_windows(T, decoder.config))[0]


def decode(decoder: Decoder, latent: Tensor, q: QueryPoint, T: int) -> ReconstructedTrack:
    if not 0 <= q.t < T:
        raise ValueError(f"query time {q.t} outside [0, {T})")
    c = decoder.config
    pos = np.array([[[q.x, q.y, q.z]]])
    pe = query_encoding(pos, np.array([[q.t]]), T, c)
    L, lc = latent.shape
    out = decoder(latent.reshape(1, L, lc), pe, T, pos).data[0, 0]
    return ReconstructedTrack(out[:, :3].copy(), out[:, 3].copy())


def silog(pred_z: Tensor, gt_z: np.ndarray, mask: np.ndarray, lam: float = 0.5) -> Tensor:
    """Scale-invariant log depth penalty over masked cells."""
    m = np.asarray(mask, dtype=get_dtype())
    n = max(float(m.sum()), 1.0)
    d = add(tlog(pred_z), tensor(-np.log(np.maximum(gt_z, 1e-6)).astype(get_dtype())))
    d = mul(d, tensor(m))
    first = tsum(mul(d, d)) * tensor(np.array(1.0 / n, dtype=get_dtype()))
    mean = tsum(d) * tensor(np.array(1.0 / n, dtype=get_dtype()))
    return add(first, mul(mean, mean) * tensor(np.array(-lam, dtype=get_dtype())))
