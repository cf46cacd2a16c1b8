"""Track encoder: per-track masked attention with a readout token, then
Perceiver-style aggregation of track descriptors into a fixed latent."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .numkit import (
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    Module,
    SelfAttentionBlock,
    Tensor,
    broadcast_to,
    concat,
    get_dtype,
    parameter,
    tensor,
)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 384
    pe_frequencies: int = 32
    feature_dim: int = 768  # width of the incoming semantic features
    dino_proj_dim: int = 768
    depth_proj_dim: int = 256
    use_depth_stream: bool = False
    latent_tokens: int = 128
    latent_channels: int = 64
    compression_dim: int = 96
    track_sa_layers: int = 3
    track_sa_heads: int = 8
    track_sa_mlp: int = 1536
    track_sa_qkv: int = 768
    perceiver_layers: int = 4
    perceiver_heads: int = 8
    perceiver_mlp: int = 2048
    perceiver_qkv: int = 768
    up_dim: int = 1280
    window: int = 128
    up_sa_layers: int = 4
    up_sa_heads: int = 8
    up_sa_mlp: int = 2048
    up_sa_qkv: int = 768
    readout_layers: int = 4
    readout_heads: int = 8
    readout_mlp: int = 1536
    readout_qkv: int = 768
    basis_size: int = 64  # cosine basis functions per output channel
    z_scale: float = 0.1
    query_residual: bool = False
    use_3d: bool = True
    use_semantics: bool = True
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("channels", "pe_frequencies", "feature_dim", "latent_tokens",
                     "latent_channels", "compression_dim", "up_dim", "window", "basis_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for block in ("track_sa", "perceiver", "up_sa", "readout"):
            qkv, heads = getattr(self, f"{block}_qkv"), getattr(self, f"{block}_heads")
            if qkv % heads:
                raise ValueError(f"{block}: qkv {qkv} not divisible by {heads} heads")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {unknown}")
        return ModelConfig(**d).validate()

    def override(self, **kw) -> "ModelConfig":
        return ModelConfig.from_dict({**asdict(self), **kw})


PRESETS = {
    "paper": ModelConfig(),
    "tiny": ModelConfig(
        channels=32, pe_frequencies=8, feature_dim=32, dino_proj_dim=16, depth_proj_dim=8,
        latent_tokens=8, latent_channels=8, compression_dim=16,
        track_sa_layers=1, track_sa_heads=2, track_sa_mlp=128, track_sa_qkv=32,
        perceiver_layers=1, perceiver_heads=2, perceiver_mlp=128, perceiver_qkv=32,
        up_dim=64, window=16, up_sa_layers=0, up_sa_heads=2, up_sa_mlp=64, up_sa_qkv=32,
        readout_layers=1, readout_heads=2, readout_mlp=128, readout_qkv=64, basis_size=24,
    ),
    "small": ModelConfig(
        channels=64, pe_frequencies=8, feature_dim=32, dino_proj_dim=32, depth_proj_dim=16,
        latent_tokens=16, latent_channels=64, compression_dim=32,
        track_sa_layers=2, track_sa_heads=4, track_sa_mlp=128, track_sa_qkv=64,
        perceiver_layers=2, perceiver_heads=4, perceiver_mlp=128, perceiver_qkv=64,
        up_dim=64, window=32, up_sa_layers=1, up_sa_heads=4, up_sa_mlp=128, up_sa_qkv=64,
        readout_layers=2, readout_heads=4, readout_mlp=128, readout_qkv=64, basis_size=24,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name].override(**overrides) if overrides else PRESETS[name]


def sinusoidal_encode(values, frequencies: int) -> np.ndarray:
    """[..., S] -> [..., S * 2 * frequencies]: per scalar sin(2^k pi v), cos(2^k pi v)."""
    v = np.asarray(values, dtype=np.float64)
    scales = np.pi * (2.0 ** np.arange(frequencies))
    ang = v[..., None] * scales  # [..., S, F]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return out.reshape(v.shape[:-1] + (v.shape[-1] * 2 * frequencies,))


def point_encoding(positions: np.ndarray, times: np.ndarray, frames: int,
                   config: ModelConfig) -> np.ndarray:
    """Encode (x, y, z, t) points; positions [..., 3], times [...] -> [..., 8F].

    With use_3d off the z block is zeroed so depth cannot reach the model.
    """
    p = np.asarray(positions, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64) / frames
    scal = np.stack([p[..., 0], p[..., 1], p[..., 2] * config.z_scale, t], axis=-1)
    pe = sinusoidal_encode(scal, config.pe_frequencies)
    if not config.use_3d:
        k = 2 * config.pe_frequencies
        pe[..., 2 * k:3 * k] = 0.0
    return pe


@dataclass
class TrackBatch:
    """Padded support tracks for B scenes sharing a frame count.

    pe: [B, N, T, 8F] point encodings (zero at occluded frames);
    features: [B, N, T, F] or None; visible: [B, N, T]; valid: [B, N].
    """
    pe: np.ndarray
    features: np.ndarray | None
    visible: np.ndarray
    valid: np.ndarray

    @property
    def frames(self) -> int:
        return self.pe.shape[2]


def canonical_order(pe: np.ndarray, features: np.ndarray | None, visible: np.ndarray) -> np.ndarray:
    """Order tracks by the bytes of their masked inputs.

    Sorting makes the encoder independent of the order tracks arrive in,
    bit for bit, because every downstream array is then identical.
    """
    keys = []
    for j in range(pe.shape[0]):
        parts = [visible[j].tobytes(), pe[j].tobytes()]
        if features is not None:
            parts.append(features[j].tobytes())
        keys.append(b"".join(parts))
    return np.array(sorted(range(len(keys)), key=lambda j: keys[j]), dtype=np.intp)


def prepare_tracks(positions: np.ndarray, occluded: np.ndarray, features: np.ndarray | None,
                   config: ModelConfig) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Single scene -> (pe [N, T, 8F], features [N, T, F] | None, visible [N, T]), canonically ordered."""
    positions = np.asarray(positions)
    N, T = positions.shape[:2]
    if N < 1:
        raise ValueError("support set is empty")
    visible = ~np.asarray(occluded, dtype=bool)
    pe = point_encoding(positions, np.broadcast_to(np.arange(T), (N, T)), T, config)
    pe = np.where(visible[..., None], pe, 0.0).astype(get_dtype())
    if config.use_semantics:
        if features is None:
            raise ValueError("semantic features required when use_semantics is on")
        features = np.asarray(features)
        if features.shape != (N, T, config.feature_dim):
            raise ValueError(f"feature shape {features.shape} != {(N, T, config.feature_dim)}")
        features = np.where(visible[..., None], features, 0.0).astype(get_dtype())
    else:
        features = None
    order = canonical_order(pe, features, visible)
    return pe[order], (None if features is None else features[order]), visible[order]


def batch_tracks(items: list[tuple[np.ndarray, np.ndarray | None, np.ndarray]]) -> TrackBatch:
    B = len(items)
    N = max(it[0].shape[0] for it in items)
    T, E = items[0][0].shape[1:]
    pe = np.zeros((B, N, T, E), dtype=get_dtype())
    vis = np.zeros((B, N, T), dtype=bool)
    valid = np.zeros((B, N), dtype=bool)
    feats = None
    if items[0][1] is not None:
        feats = np.zeros((B, N, T, items[0][1].shape[-1]), dtype=get_dtype())
    for b, (p, f, v) in enumerate(items):
        if p.shape[1] != T:
            raise ValueError("all scenes in a batch must share the frame count")
        n = p.shape[0]
        pe[b, :n], vis[b, :n], valid[b, :n] = p, v, True
        if feats is not None:
            feats[b, :n] = f
    return TrackBatch(pe, feats, vis, valid)


class TrackEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        self.config = c
        pe_dim = 8 * c.pe_frequencies
        in_dim = pe_dim + c.dino_proj_dim + (c.depth_proj_dim if c.use_depth_stream else 0)
        self.feature_proj = Linear(c.feature_dim, c.dino_proj_dim, rng)
        if c.use_depth_stream:
            self.depth_proj = Linear(2 * c.pe_frequencies, c.depth_proj_dim, rng)
        self.input_proj = Linear(in_dim, c.channels, rng)
        self.readout = parameter(rng.normal(0.0, 0.02, size=(c.channels,)))
        self.blocks = [SelfAttentionBlock(c.channels, c.track_sa_qkv, c.track_sa_heads,
                                          c.track_sa_mlp, rng) for _ in range(c.track_sa_layers)]
        self.norm = LayerNorm(c.channels)

    def embed(self, batch: TrackBatch) -> tuple[Tensor, np.ndarray]:
        """Tokens [B, N, T+1, C] (readout last) and key mask [B, N, 1, T+1]."""
        c = self.config
        B, N, T, _ = batch.pe.shape
        pe = tensor(batch.pe)
        feats = batch.features
        if feats is None:
            feats = np.zeros((B, N, T, c.feature_dim), dtype=get_dtype())
        parts = [pe, self.feature_proj(tensor(feats))]
        if c.use_depth_stream:
            k = 2 * c.pe_frequencies
            parts.append(self.depth_proj(tensor(batch.pe[..., 2 * k:3 * k])))
        tokens = self.input_proj(concat(parts, axis=-1))
        readout = broadcast_to(self.readout.reshape(1, 1, 1, c.channels), (B, N, 1, c.channels))
        tokens = concat([tokens, readout], axis=2)
        mask = np.concatenate([batch.visible, np.ones((B, N, 1), dtype=bool)], axis=-1)
        return tokens, mask[:, :, None, :]

    def describe(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        """Masked self-attention over each track's tokens; returns readouts [B, N, C]."""
        x = tokens
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x[:, :, -1, :])


class LatentAggregator(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.latents = parameter(rng.normal(0.0, 0.02, size=(c.latent_tokens, c.channels)))
        self.cross = [CrossAttentionBlock(c.channels, c.channels, c.perceiver_qkv, c.perceiver_heads,
                                          c.perceiver_mlp, rng) for _ in range(c.perceiver_layers)]
        self.selfs = [SelfAttentionBlock(c.channels, c.perceiver_qkv, c.perceiver_heads,
                                         c.perceiver_mlp, rng) for _ in range(c.perceiver_layers)]
        self.norm = LayerNorm(c.channels)
        self.compress = Linear(c.channels, c.compression_dim, rng)
        self.to_latent = Linear(c.compression_dim, c.latent_channels, rng)

    def __call__(self, descriptors: Tensor, valid: np.ndarray) -> Tensor:
        c = self.config
        B = descriptors.shape[0]
        x = broadcast_to(self.latents.reshape(1, c.latent_tokens, c.channels),
                         (B, c.latent_tokens, c.channels))
        mask = valid[:, None, :]
        for ca, sa in zip(self.cross, self.selfs):
            x = ca(x, descriptors, mask)
            x = sa(x)
        return self.to_latent(self.compress(self.norm(x)))


class Encoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.tracks = TrackEncoder(config, rng)
        self.aggregate = LatentAggregator(config, rng)

    def __call__(self, batch: TrackBatch) -> Tensor:
        """Motion latents [B, L, c]."""
        tokens, mask = self.tracks.embed(batch)
        return self.aggregate(self.tracks.describe(tokens, mask), batch.valid)


def embed_track(encoder: Encoder, positions, occluded, features=None) -> tuple[Tensor, np.ndarray]:
    """Tokens [T+1, C] and key mask [T+1] for one track (no reordering needed)."""
    c = encoder.config
    pe, f, vis = prepare_tracks(np.asarray(positions)[None], np.asarray(occluded)[None],
                                None if features is None else np.asarray(features)[None], c)
    tokens, mask = encoder.tracks.embed(batch_tracks([(pe, f, vis)]))
    return tokens[0, 0], mask[0, 0, 0]


def encode_track_descriptor(encoder: Encoder, positions, occluded, features=None) -> Tensor:
    """Readout descriptor [C] of one track."""
    c = encoder.config
    pe, f, vis = prepare_tracks(np.asarray(positions)[None], np.asarray(occluded)[None],
                                None if features is None else np.asarray(features)[None], c)
    tokens, mask = encoder.tracks.embed(batch_tracks([(pe, f, vis)]))
    return encoder.tracks.describe(tokens, mask)[0, 0]


def encode(encoder: Encoder, positions, occluded, features=None) -> Tensor:
    """Motion latent [L, c] for one support set: positions [N, T, 3], occluded [N, T]."""
    prepared = prepare_tracks(positions, occluded, features, encoder.config)
    return encoder(batch_tracks([prepared]))[0]


__all__ = [
    "ModelConfig", "PRESETS", "preset", "sinusoidal_encode", "point_encoding", "TrackBatch",
    "canonical_order", "prepare_tracks", "batch_tracks", "TrackEncoder", "LatentAggregator",
    "Encoder", "embed_track", "encode_track_descriptor", "encode",
]
