"""Support/query splitting, the reconstruction objective, optimization loop and checkpoints."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import ModelConfig
from .model import SPA3DModel, SceneBatch, collate, prepare_scene, scene_track_features
from .numkit import (
    OptimizerState,
    Tensor,
    adamw_step,
    bce_with_logits,
    get_dtype,
    lr_at,
    mul,
    tabs,
    tensor,
    tsum,
)
from .decoder import silog
from .trackio import FeatureProvider, SceneTracks

CHECKPOINT_MAGIC = b"SPA3DCK\0"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 5000.0
    w_bce: float = 1e-8
    w_silog: float = 0.0
    mask_occluded_l1: bool = True
    xy_scale: float = 1.0  # image-plane x, y multiplied by this before the L1 (5.0 = metric units)

    def __post_init__(self):
        if min(self.w_l1, self.w_bce, self.w_silog) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.xy_scale <= 0:
            raise ValueError("xy_scale must be positive")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_scenes: int = 8
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    steps: int | None = None  # overrides epochs when set
    weight_decay: float = 0.01
    seed: int = 0
    support_fraction: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    # Pin every scene to the split and query frames used for scoring (overfit runs).
    fixed_split_seed: int | None = None

    def __post_init__(self):
        if not 0 < self.support_fraction < 1:
            raise ValueError("support fraction must lie in (0, 1)")
        if self.batch_scenes < 1:
            raise ValueError("batch size must be positive")

    def total_steps(self, n_scenes: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_scenes / self.batch_scenes)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return TrainConfig(**d)


def split_support_query(scene_or_count, fraction: float = 0.5, seed: int = 0):
    """Random disjoint partition of track indices into (support, query).

    When fraction * N is fractional the seed decides whether it rounds up or down.
    """
    n = scene_or_count.num_tracks if isinstance(scene_or_count, SceneTracks) else int(scene_or_count)
    if n < 2:
        raise ValueError("need at least 2 tracks to split")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5EED])
    exact = fraction * n
    k = int(math.floor(exact))
    if exact - k > 0 and rng.random() < exact - k:
        k += 1
    k = min(max(k, 1), n - 1)
    perm = rng.permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def compute_loss(pred: Tensor, gt_positions, gt_occluded, weights: LossWeights = LossWeights(),
                 valid=None, use_3d: bool = True, scenes: int = 1):
    """Weighted L1 + BCE summed over (query, frame), divided by the scene count.

    pred: [..., T, 4] (x, y, z, occlusion logit). Returns (total, {"l1", "bce", "silog"}).
    """
    gt_positions = np.asarray(gt_positions)
    gt_occluded = np.asarray(gt_occluded, dtype=bool)
    if pred.has_nonfinite() or not np.all(np.isfinite(gt_positions)):
        raise FloatingPointError("NaN or Inf in loss inputs")
    dt = get_dtype()
    cell = np.ones(gt_occluded.shape, dtype=bool) if valid is None else \
        np.broadcast_to(np.asarray(valid, dtype=bool)[..., None], gt_occluded.shape)
    pos_mask = cell & ~gt_occluded if weights.mask_occluded_l1 else cell
    coord = np.array([weights.xy_scale, weights.xy_scale, 1.0 if use_3d else 0.0])
    w_pos = (pos_mask[..., None] * coord).astype(dt)
    p_hat = pred[..., :3]
    diff = p_hat - tensor(gt_positions.astype(dt))
    l1 = tsum(mul(tabs(diff), tensor(w_pos)))
    bce = tsum(mul(bce_with_logits(pred[..., 3], gt_occluded.astype(dt)), tensor(cell.astype(dt))))
    inv = np.array(1.0 / scenes, dtype=dt)
    total = (l1 * tensor(np.array(weights.w_l1, dtype=dt)) + bce * tensor(np.array(weights.w_bce, dtype=dt)))
    parts = {"l1": float(l1.data) / scenes, "bce": float(bce.data) / scenes, "silog": 0.0}
    if weights.w_silog > 0 and use_3d:
        s = silog(pred[..., 2], gt_positions[..., 2], pos_mask)
        parts["silog"] = float(s.data)
        total = total + s * tensor(np.array(weights.w_silog * scenes, dtype=dt))
    total = total * tensor(inv)
    return total, parts


def batch_loss(model: SPA3DModel, batch: SceneBatch, weights: LossWeights):
    out = model(batch)
    return compute_loss(out, batch.gt_positions, batch.gt_occluded, weights,
                        valid=batch.query_valid, use_3d=model.config.use_3d,
                        scenes=batch.query_pe.shape[0])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<Q", a.nbytes)
    return head + a.tobytes()


def save_checkpoint(path, model: SPA3DModel, opt: OptimizerState | None = None,
                    train_config: TrainConfig | None = None, rng_state: dict | None = None) -> None:
    header = {
        "model": json.loads(model.config.to_json()),
        "train": None if train_config is None else train_config.to_dict(),
        "optimizer": None if opt is None else {**opt.hyperparameters(), "step": opt.step},
        "rng": rng_state,
    }
    blobs = [(name, p.data) for name, p in model.named_parameters()]
    if opt is not None:
        for name in sorted(opt.m):
            blobs.append((f"opt.m.{name}", opt.m[name]))
            blobs.append((f"opt.v.{name}", opt.v[name]))
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(hj)), hj,
           struct.pack("<I", len(blobs))]
    out += [_pack_blob(n, a) for n, a in blobs]
    Path(path).write_bytes(b"".join(out))


@dataclass
class Checkpoint:
    model: SPA3DModel
    optimizer: OptimizerState | None
    train_config: TrainConfig | None
    rng: dict | None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if n < 0 or pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    (count,) = struct.unpack("<I", take(4, "blob count"))
    blobs = {}
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2, "name length"))
        name = take(nl, "name").decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        (nbytes,) = struct.unpack("<Q", take(8, "blob length"))
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"blob {name!r}: length {nbytes} does not match shape {shape}")
        blobs[name] = np.frombuffer(take(nbytes, f"blob {name!r}"), dtype="<f4").reshape(shape)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last blob")
    model = SPA3DModel(ModelConfig.from_dict(header["model"]))
    params = {k: v for k, v in blobs.items() if not k.startswith("opt.")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from None
    opt = None
    if header.get("optimizer") is not None:
        h = dict(header["optimizer"])
        step = h.pop("step")
        h["betas"] = tuple(h["betas"])
        opt = OptimizerState(**h, step=step)
        for k, v in blobs.items():
            if k.startswith("opt.m."):
                opt.m[k[6:]] = v.astype(get_dtype())
            elif k.startswith("opt.v."):
                opt.v[k[6:]] = v.astype(get_dtype())
    tc = None if header.get("train") is None else TrainConfig.from_dict(header["train"])
    return Checkpoint(model, opt, tc, header.get("rng"))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("step", "loss", "l1", "bce", "lr")


@dataclass
class TrainResult:
    model: SPA3DModel
    optimizer: OptimizerState
    history: list[dict]


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def _step_batch(step: int, n: int, config: TrainConfig) -> np.ndarray:
    """Scene indices for a 1-based step; a fresh seeded shuffle every epoch."""
    per_epoch = math.ceil(n / config.batch_scenes)
    epoch, k = divmod(step - 1, per_epoch)
    perm = np.random.default_rng([config.seed & 0xFFFFFFFF, 1, epoch]).permutation(n)
    return perm[k * config.batch_scenes:(k + 1) * config.batch_scenes]


def make_batch(scenes: Sequence[SceneTracks], feats: Sequence[np.ndarray | None], idx,
               model_config: ModelConfig, config: TrainConfig, step: int) -> SceneBatch:
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 2, step])
    items = []
    for i in idx:
        split_seed = int(rng.integers(2**31))
        if config.fixed_split_seed is not None:
            sup, qry = split_support_query(scenes[i], config.support_fraction, config.fixed_split_seed)
            items.append(prepare_scene(scenes[i], sup, qry, model_config, feats[i], "first"))
            continue
        sup, qry = split_support_query(scenes[i], config.support_fraction, split_seed)
        items.append(prepare_scene(scenes[i], sup, qry, model_config, feats[i], "random", rng))
    return collate(items)


def train(scenes: Sequence[SceneTracks], model: SPA3DModel, config: TrainConfig,
          provider: FeatureProvider | None = None, checkpoint_path=None,
          optimizer: OptimizerState | None = None, stop_at: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize ``model`` in place. Resumes when ``optimizer.step`` > 0.

    Each step draws its batch and splits from (seed, step) alone, so a resumed
    run repeats the uninterrupted loss trace exactly.
    """
    if not scenes:
        raise ValueError("empty training corpus")
    frames = {s.frames for s in scenes}
    if len(frames) != 1:
        raise ValueError(f"training scenes must share one frame count, got {sorted(frames)}")
    total = config.total_steps(len(scenes))
    if optimizer is None:
        optimizer = OptimizerState(peak_lr=config.peak_lr, weight_decay=config.weight_decay,
                                   warmup_steps=min(config.warmup_steps, total), total_steps=total)
    feats = [scene_track_features(s, model.config, provider) for s in scenes]
    params = dict(model.named_parameters())
    history: list[dict] = []
    end = total if stop_at is None else min(stop_at, total)
    while optimizer.step < end:
        step = optimizer.step + 1
        batch = make_batch(scenes, feats, _step_batch(step, len(scenes), config), model.config, config, step)
        model.zero_grad()
        try:
            loss, parts = batch_loss(model, batch, config.weights)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at step {step}")
            loss.backward()
            snapshot = {k: p.data.copy() for k, p in params.items()}
            lr = adamw_step(params, optimizer)
        except FloatingPointError as e:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, optimizer, config,
                                {"seed": config.seed, "step": optimizer.step})
            raise TrainingDiverged(f"{e}; last good checkpoint kept at step {optimizer.step}") from None
        bad = [k for k, p in params.items() if not np.all(np.isfinite(p.data))]
        if bad:
            for k, v in snapshot.items():
                params[k].data = v
            optimizer.step -= 1
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, None, config, {"seed": config.seed, "step": step - 1})
            raise TrainingDiverged(f"parameters {bad[:3]} became non-finite at step {step}")
        row = {"step": step, "loss": float(loss.data), "l1": parts["l1"], "bce": parts["bce"], "lr": lr}
        history.append(row)
        if on_step is not None:
            on_step(row)
        if checkpoint_path is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, optimizer, config, {"seed": config.seed, "step": step})
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, config, {"seed": config.seed, "step": optimizer.step})
    return TrainResult(model, optimizer, history)


def lr_trace(history: Sequence[dict], optimizer: OptimizerState) -> list[tuple[float, float]]:
    """(recorded lr, schedule lr) pairs for auditing the schedule."""
    return [(row["lr"], lr_at(row["step"], optimizer)) for row in history]
