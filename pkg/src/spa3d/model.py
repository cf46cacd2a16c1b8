"""Encoder + decoder wrapper and scene-to-batch preparation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import Decoder, query_encoding
from .encoder import Encoder, ModelConfig, TrackBatch, batch_tracks, prepare_tracks
from .numkit import Module, Tensor, get_dtype
from .trackio import FeatureProvider, SceneTracks, track_features


class SPA3DModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)

    def __call__(self, batch: "SceneBatch") -> Tensor:
        latents = self.encoder(batch.support)
        return self.decoder(latents, batch.query_pe, batch.frames, batch.query_pos)


@dataclass
class PreparedScene:
    """One scene split into encoder inputs and decoder targets."""
    support: tuple[np.ndarray, np.ndarray | None, np.ndarray]
    query_pos: np.ndarray  # [Q, 3] query point positions
    query_t: np.ndarray  # [Q] query frames
    query_pe: np.ndarray  # [Q, 8F]
    gt_positions: np.ndarray  # [Q, T, 3]
    gt_occluded: np.ndarray  # [Q, T]

    @property
    def frames(self) -> int:
        return self.gt_positions.shape[1]


@dataclass
class SceneBatch:
    support: TrackBatch
    query_pe: np.ndarray  # [B, Q, 8F]
    query_pos: np.ndarray  # [B, Q, 3]
    query_valid: np.ndarray  # [B, Q]
    gt_positions: np.ndarray  # [B, Q, T, 3]
    gt_occluded: np.ndarray  # [B, Q, T]

    @property
    def frames(self) -> int:
        return self.gt_positions.shape[2]


def choose_query_frames(occluded: np.ndarray, mode: str = "first",
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Per query track: the first visible frame, or a random visible one.

    Tracks that are never visible fall back to frame 0.
    """
    occluded = np.asarray(occluded, dtype=bool)
    out = np.zeros(occluded.shape[0], dtype=np.int64)
    for j, occ in enumerate(occluded):
        vis = np.flatnonzero(~occ)
        if vis.size == 0:
            continue
        if mode == "first":
            out[j] = vis[0]
        elif mode == "random":
            out[j] = vis[rng.integers(vis.size)]
        else:
            raise ValueError(f"unknown query mode {mode!r}")
    return out


def scene_track_features(scene: SceneTracks, config: ModelConfig,
                         provider: FeatureProvider | None = None) -> np.ndarray | None:
    if not config.use_semantics:
        return None
    field = provider(scene) if provider is not None else scene.features
    if field is None:
        raise ValueError("scene has no semantic feature field and no provider supplied one")
    if field.dim != config.feature_dim:
        raise ValueError(f"feature dimension {field.dim} != configured {config.feature_dim}")
    return track_features(field, scene.positions)


def prepare_scene(scene: SceneTracks, support_idx, query_idx, config: ModelConfig,
                  features: np.ndarray | None = None, query_mode: str = "first",
                  rng: np.random.Generator | None = None) -> PreparedScene:
    support_idx = np.asarray(support_idx, dtype=np.intp)
    query_idx = np.asarray(query_idx, dtype=np.intp)
    pos, occ = scene.positions, scene.occluded
    sup = prepare_tracks(pos[support_idx], occ[support_idx],
                         None if features is None else features[support_idx], config)
    gt_pos = pos[query_idx]
    gt_occ = occ[query_idx]
    qt = choose_query_frames(gt_occ, query_mode, rng)
    qpos = gt_pos[np.arange(len(query_idx)), qt].astype(np.float64)
    qpe = query_encoding(qpos, qt, scene.frames, config)
    return PreparedScene(sup, qpos, qt, qpe, gt_pos, gt_occ)


def collate(items: Sequence[PreparedScene]) -> SceneBatch:
    B = len(items)
    T = items[0].frames
    if any(it.frames != T for it in items):
        raise ValueError("all scenes in a batch must share the frame count")
    Q = max(len(it.query_t) for it in items)
    E = items[0].query_pe.shape[-1]
    dt = get_dtype()
    qpe = np.zeros((B, Q, E), dtype=dt)
    qpos = np.zeros((B, Q, 3), dtype=dt)
    qvalid = np.zeros((B, Q), dtype=bool)
    gpos = np.zeros((B, Q, T, 3), dtype=dt)
    gocc = np.ones((B, Q, T), dtype=bool)
    for b, it in enumerate(items):
        q = len(it.query_t)
        qpe[b, :q] = it.query_pe
        qpos[b, :q] = it.query_pos
        qvalid[b, :q] = True
        gpos[b, :q] = it.gt_positions
        gocc[b, :q] = it.gt_occluded
    return SceneBatch(batch_tracks([it.support for it in items]), qpe, qpos, qvalid, gpos, gocc)
