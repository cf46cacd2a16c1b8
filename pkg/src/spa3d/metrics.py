"""Track reconstruction metrics, the realism score, win rates and rank correlation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .decoder import occlusion_prediction
from .model import SPA3DModel, collate, prepare_scene, scene_track_features
from .trackio import FeatureProvider, SceneTracks

DEFAULT_DELTAS = (0.05, 0.1, 0.2, 0.4, 0.8)
DEFAULT_XY_SCALE = 5.0
CATEGORIES = ("permanence", "immutability", "continuity", "solidity")


@dataclass(frozen=True)
class MetricThresholds:
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    xy_scale: float = DEFAULT_XY_SCALE

    def __post_init__(self):
        d = tuple(float(x) for x in self.deltas)
        if not d or any(x <= 0 for x in d) or list(d) != sorted(d):
            raise ValueError("thresholds must be positive, sorted and non-empty")
        object.__setattr__(self, "deltas", d)


def point_distances(pred_pos, gt_pos, xy_scale: float = DEFAULT_XY_SCALE, use_3d: bool = True) -> np.ndarray:
    """Euclidean error per cell with x, y mapped to meters by ``xy_scale``."""
    pred_pos = np.asarray(pred_pos, dtype=np.float64)
    gt_pos = np.asarray(gt_pos, dtype=np.float64)
    if pred_pos.shape != gt_pos.shape:
        raise ValueError(f"shape mismatch: {pred_pos.shape} vs {gt_pos.shape}")
    d = pred_pos - gt_pos
    sq = (xy_scale * d[..., 0]) ** 2 + (xy_scale * d[..., 1]) ** 2
    if use_3d:
        sq = sq + d[..., 2] ** 2
    return np.sqrt(sq)


def _check(pred_occ, gt_occ, dist=None):
    pred_occ = np.asarray(pred_occ, dtype=bool)
    gt_occ = np.asarray(gt_occ, dtype=bool)
    if pred_occ.shape != gt_occ.shape or (dist is not None and dist.shape != gt_occ.shape):
        raise ValueError("prediction and ground truth shapes differ")
    return pred_occ, gt_occ


def jaccard_per_threshold(pred_pos, pred_occ, gt_pos, gt_occ,
                          thresholds: MetricThresholds = MetricThresholds(), use_3d: bool = True) -> np.ndarray:
    dist = point_distances(pred_pos, gt_pos, thresholds.xy_scale, use_3d)
    pred_occ, gt_occ = _check(pred_occ, gt_occ, dist)
    gt_vis, pr_vis = ~gt_occ, ~pred_occ
    out = []
    for delta in thresholds.deltas:
        close = dist <= delta
        tp = np.sum(gt_vis & pr_vis & close)
        fp = np.sum(pr_vis & (gt_occ | ~close))
        fn = np.sum(gt_vis & (pred_occ | ~close))
        denom = tp + fp + fn
        if denom == 0:
            out.append(1.0 if np.all(gt_occ & pred_occ) else 0.0)
        else:
            out.append(tp / denom)
    return np.array(out, dtype=np.float64)


def average_jaccard(pred_pos, pred_occ, gt_pos, gt_occ,
                    thresholds: MetricThresholds = MetricThresholds(), use_3d: bool = True) -> float:
    return float(np.mean(jaccard_per_threshold(pred_pos, pred_occ, gt_pos, gt_occ, thresholds, use_3d)))


def apd(pred_pos, gt_pos, gt_occ, thresholds: MetricThresholds = MetricThresholds(),
        use_3d: bool = True) -> float:
    dist = point_distances(pred_pos, gt_pos, thresholds.xy_scale, use_3d)
    gt_vis = ~np.asarray(gt_occ, dtype=bool)
    if gt_vis.shape != dist.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if not gt_vis.any():
        raise ValueError("undefined APD: no ground-truth visible points")
    d = dist[gt_vis]
    return float(np.mean([np.mean(d <= delta) for delta in thresholds.deltas]))


def occlusion_accuracy(pred_occ, gt_occ) -> float:
    pred_occ, gt_occ = _check(pred_occ, gt_occ)
    if gt_occ.size == 0:
        raise ValueError("no cells to compare")
    return float(np.mean(pred_occ == gt_occ))


# ---------------------------------------------------------------------------
# Realism score
# ---------------------------------------------------------------------------

@dataclass
class SceneScore:
    aj: float
    apd: float | None
    oa: float
    pred_positions: np.ndarray  # [Q, T, 3]
    pred_occluded: np.ndarray  # [Q, T]
    query_index: np.ndarray
    per_track_aj: np.ndarray  # [Q]


def reconstruct(scene: SceneTracks, model: SPA3DModel, seed: int = 0,
                provider: FeatureProvider | None = None, fraction: float = 0.5):
    """Encode half of the tracks, decode the other half from their first visible point."""
    from .trainer import split_support_query

    sup, qry = split_support_query(scene, fraction, seed)
    feats = scene_track_features(scene, model.config, provider)
    prepared = prepare_scene(scene, sup, qry, model.config, feats, "first")
    out = model(collate([prepared])).data[0].astype(np.float64)
    return qry, out[..., :3], occlusion_prediction(out[..., 3])


def score_scene(scene: SceneTracks, model: SPA3DModel, seed: int = 0,
                provider: FeatureProvider | None = None,
                thresholds: MetricThresholds = MetricThresholds()) -> SceneScore:
    qry, pos, occ = reconstruct(scene, model, seed, provider)
    use_3d = model.config.use_3d
    gt_pos, gt_occ = scene.positions[qry], scene.occluded[qry]
    aj = average_jaccard(pos, occ, gt_pos, gt_occ, thresholds, use_3d)
    try:
        ap = apd(pos, gt_pos, gt_occ, thresholds, use_3d)
    except ValueError:
        ap = None
    per_track = np.array([average_jaccard(pos[i], occ[i], gt_pos[i], gt_occ[i], thresholds, use_3d)
                          for i in range(len(qry))])
    return SceneScore(aj, ap, occlusion_accuracy(occ, gt_occ), pos, occ, qry, per_track)


def realism_score(scene: SceneTracks, model: SPA3DModel, seed: int = 0,
                  provider: FeatureProvider | None = None,
                  thresholds: MetricThresholds = MetricThresholds()) -> float:
    """AJ of the held-out half reconstructed from the other half; higher is more plausible."""
    return score_scene(scene, model, seed, provider, thresholds).aj


# ---------------------------------------------------------------------------
# Corpus-level protocols
# ---------------------------------------------------------------------------

@dataclass
class ScoredQuadruplet:
    possible: tuple[float, float]
    impossible: tuple[tuple[str, float], tuple[str, float]]


@dataclass
class WinRateTable:
    wins: dict[str, float] = field(default_factory=dict)
    pairs: dict[str, int] = field(default_factory=dict)

    def rate(self, kind: str) -> float:
        if not self.pairs.get(kind):
            return float("nan")
        return 100.0 * self.wins[kind] / self.pairs[kind]

    @property
    def overall(self) -> float:
        n = sum(self.pairs.values())
        return float("nan") if n == 0 else 100.0 * sum(self.wins.values()) / n

    def rows(self) -> list[tuple[str, float, int]]:
        return [(k, self.rate(k), self.pairs.get(k, 0)) for k in CATEGORIES] + \
            [("overall", self.overall, sum(self.pairs.values()))]


def win_rate(quads: Iterable[ScoredQuadruplet]) -> WinRateTable:
    """Every possible x impossible pair in a quadruplet: a win when the possible
    member scores strictly higher, half a win on a tie. Pairs are tallied under
    the impossible member's violation kind."""
    table = WinRateTable({k: 0.0 for k in CATEGORIES}, {k: 0 for k in CATEGORIES})
    for q in quads:
        for p in q.possible:
            for kind, s in q.impossible:
                table.wins.setdefault(kind, 0.0)
                table.pairs.setdefault(kind, 0)
                table.pairs[kind] += 1
                table.wins[kind] += 1.0 if p > s else (0.5 if p == s else 0.0)
    return table


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if xs.size < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("undefined correlation: constant input")
    # One square root of the product keeps exact +-1 for (anti)monotone pairs.
    return float(np.clip(float(dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def path_length(scene: SceneTracks, xy_scale: float = DEFAULT_XY_SCALE) -> float:
    """Mean over tracks of the summed frame-to-frame 3D displacement."""
    p = scene.positions.astype(np.float64)
    step = point_distances(p[:, 1:], p[:, :-1], xy_scale)
    return float(step.sum(axis=1).mean())


def motion_filter(scenes: Sequence[SceneTracks], keep: float = 0.5,
                  xy_scale: float = DEFAULT_XY_SCALE) -> list[int]:
    """Indices of the most dynamic scenes, most motion first."""
    if not 0 < keep <= 1:
        raise ValueError("keep fraction must lie in (0, 1]")
    n = len(scenes)
    k = n if keep == 1 else min(max(1, int(math.floor(keep * n))), max(n - 1, 1))
    lengths = [path_length(s, xy_scale) for s in scenes]
    order = sorted(range(n), key=lambda i: (-lengths[i], i))
    return order[:k]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    scene_ids: list[str]
    aj: list[float]
    apd: list[float | None]
    oa: list[float]
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)
    win_rates: WinRateTable | None = None
    spearman: dict[str, float] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        apds = [a for a in self.apd if a is not None]
        return {"aj": float(np.mean(self.aj)) if self.aj else float("nan"),
                "apd": float(np.mean(apds)) if apds else float("nan"),
                "oa": float(np.mean(self.oa)) if self.oa else float("nan")}

    def header(self) -> str:
        return (f"# deltas_m={','.join(repr(d) for d in self.thresholds.deltas)} "
                f"xy_scale_m={self.thresholds.xy_scale!r}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.header() + "\n")
            w = csv.writer(f)
            w.writerow(["scene_id", "aj", "apd", "oa"])
            for sid, a, p, o in sorted(zip(self.scene_ids, self.aj, self.apd, self.oa)):
                w.writerow([sid, repr(a), "" if p is None else repr(p), repr(o)])

    def to_dict(self) -> dict:
        d = {
            "thresholds": list(self.thresholds.deltas),
            "xy_scale": self.thresholds.xy_scale,
            "scenes": {sid: {"aj": a, "apd": p, "oa": o}
                       for sid, a, p, o in sorted(zip(self.scene_ids, self.aj, self.apd, self.oa))},
            "means": self.means(),
            "spearman": dict(self.spearman),
        }
        if self.win_rates is not None:
            d["win_rates"] = {k: {"rate": r, "pairs": n} for k, r, n in self.win_rates.rows()}
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def ratings_alignment(scores: Mapping[str, float], ratings: Mapping[str, float]) -> float:
    """Spearman between realism scores and quality ratings (higher = better for both)."""
    missing = sorted(set(scores) - set(ratings))
    if missing:
        raise KeyError(f"missing ratings for: {', '.join(missing)}")
    ids = sorted(scores)
    return spearman([scores[i] for i in ids], [ratings[i] for i in ids])
