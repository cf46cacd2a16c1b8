"""End-to-end acceptance checks; each test prints one pass/fail line in the summary.

Run alone with `pytest tests/test_acceptance.py -v`. The discrimination and
correlation checks share one trained small model, built once per session.
"""

import itertools
import time

import numpy as np
import pytest
from scipy import stats

from spa3d import synthlab as sl
from spa3d.cli import grad_check_problem, main
from spa3d.encoder import encode, preset
from spa3d.metrics import (
    MetricThresholds,
    ScoredQuadruplet,
    apd,
    average_jaccard,
    jaccard_per_threshold,
    occlusion_accuracy,
    realism_score,
    reconstruct,
    score_scene,
    spearman,
    win_rate,
)
from spa3d.model import SPA3DModel, scene_track_features
from spa3d.numkit import gradient_check, verification_mode
from spa3d.trainer import LossWeights, TrainConfig, load_checkpoint, save_checkpoint, train

from oracles import ref_apd, ref_jaccards, ref_oa, ref_spearman, ref_win_rate

# overfit recipe for the tiny preset
OVERFIT = TrainConfig(steps=2000, batch_scenes=8, warmup_steps=100, peak_lr=1e-2,
                      weights=LossWeights(w_bce=3000.0, xy_scale=5.0), fixed_split_seed=0)
# possible-only training recipe for the small preset
SMALL = TrainConfig(steps=6000, batch_scenes=8, warmup_steps=300, peak_lr=6e-3,
                    weights=LossWeights(w_bce=3000.0, xy_scale=5.0))
TRAIN_SEEDS = range(512)
QUAD_SEED0, GRADED_SEED0 = 100_000, 200_000


def note(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="session")
def provider():
    return sl.SynthFeatureProvider()


@pytest.fixture(scope="session")
def small_model(provider):
    scenes = [sl.generate_scene(s) for s in TRAIN_SEEDS]
    model = SPA3DModel(preset("small"))
    t0 = time.perf_counter()
    train(scenes, model, SMALL, provider)
    return model, time.perf_counter() - t0


# -- 1 -------------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient fidelity, tiny preset, 64-bit")
def test_gradient_fidelity(request):
    t0 = time.perf_counter()
    with verification_mode():
        model, loss_fn = grad_check_problem(preset("tiny"), tracks=2, frames=4, seed=0)
        report = gradient_check(dict(model.named_parameters()), loss_fn, tolerance=1e-4, max_entries=64)
    dt = time.perf_counter() - t0
    worst = report.worst
    note(request, f"{len(report.params)} tensors, worst {worst.name} rel={worst.max_rel_error:.2e}, {dt:.1f}s")
    assert report.passed
    assert dt < 60


# -- 2 -------------------------------------------------------------------------------

@pytest.mark.criterion(2, "metric oracle equivalence, 200 instances")
def test_metric_oracles(request):
    rng = np.random.default_rng(2)
    th = MetricThresholds()
    t0 = time.perf_counter()
    worst_rho = 0.0
    for _ in range(200):
        q, t = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        gt = rng.uniform(0, 1, size=(q, t, 3))
        pred = gt + rng.normal(0, 0.03, size=gt.shape) * rng.choice([0.1, 1, 4], size=(q, t, 1))
        pocc, gocc = rng.random((q, t)) < 0.3, rng.random((q, t)) < 0.3
        js = ref_jaccards(pred, pocc, gt, gocc, th.deltas)
        assert jaccard_per_threshold(pred, pocc, gt, gocc, th).tolist() == js
        assert average_jaccard(pred, pocc, gt, gocc, th) == pytest.approx(sum(js) / len(js), abs=1e-15)
        assert occlusion_accuracy(pocc, gocc) == ref_oa(pocc, gocc)
        if (~gocc).any():
            assert apd(pred, gt, gocc, th) == pytest.approx(ref_apd(pred, gt, gocc, th.deltas), abs=1e-15)

        n = int(rng.integers(3, 30))
        xs, ys = rng.integers(0, 6, n).astype(float), rng.normal(size=n).round(1)
        if np.ptp(xs) > 0 and np.ptp(ys) > 0:
            rho = spearman(xs, ys)
            worst_rho = max(worst_rho, abs(rho - ref_spearman(xs, ys)))
            assert rho == pytest.approx(stats.spearmanr(xs, ys).statistic, abs=1e-12)

        quads = []
        for _ in range(int(rng.integers(1, 5))):
            kinds = rng.choice(sl.VIOLATION_KINDS, size=2, replace=False)
            s = rng.integers(0, 3, 4).astype(float)  # small range forces ties
            quads.append(((s[0], s[1]), ((str(kinds[0]), s[2]), (str(kinds[1]), s[3]))))
        table = win_rate([ScoredQuadruplet(p, i) for p, i in quads])
        for kind, (wins, pairs) in ref_win_rate(quads).items():
            assert table.wins[kind] == wins and table.pairs[kind] == pairs
    dt = time.perf_counter() - t0
    note(request, f"max |spearman - oracle| = {worst_rho:.1e}, {dt:.1f}s")
    assert worst_rho <= 1e-12
    assert dt < 30


# -- 3 -------------------------------------------------------------------------------

def _invariance_errors(scene, provider, rng, config):
    model = SPA3DModel(config)
    feats = scene_track_features(scene, config, provider)
    pos, occ = scene.positions.astype(np.float64), scene.occluded
    base = encode(model.encoder, pos, occ, feats).data
    perm_err = pert_err = 0.0
    for _ in range(10):
        perm = rng.permutation(len(pos))
        out = encode(model.encoder, pos[perm], occ[perm], feats[perm]).data
        perm_err = max(perm_err, float(np.abs(out - base).max()))
        p2, f2 = pos.copy(), feats.copy()
        p2[occ] += rng.normal(0, 0.5, size=(int(occ.sum()), 3))
        f2[occ] = rng.normal(size=(int(occ.sum()), f2.shape[-1]))
        out = encode(model.encoder, p2, occ, f2).data
        pert_err = max(pert_err, float(np.abs(out - base).max()))
    return perm_err, pert_err


@pytest.mark.criterion(3, "structural invariants, 20 scenes x 10 perturbations")
def test_structural_invariants(request, provider):
    rng = np.random.default_rng(3)
    cfg = preset("tiny")
    worst32 = [0.0, 0.0]
    # occluded-input invariance is vacuous without occluded cells
    scenes = (sl.generate_scene(300 + k) for k in range(200))
    for i, scene in enumerate(itertools.islice((s for s in scenes if s.occluded.any()), 20)):
        with verification_mode():
            e64 = _invariance_errors(scene, provider, rng, cfg)
        assert e64 == (0.0, 0.0), f"scene {i}: 64-bit errors {e64}"
        e32 = _invariance_errors(scene, provider, rng, cfg)
        worst32 = [max(a, b) for a, b in zip(worst32, e32)]
    note(request, f"64-bit exact; 32-bit max error permutation={worst32[0]:.1e} occluded={worst32[1]:.1e}")
    assert max(worst32) <= 1e-5


# -- 4 -------------------------------------------------------------------------------

class NoiseFeatures:
    """Feature provider returning an unrelated random field."""

    def __init__(self, base, seed):
        self.base, self.seed = base, seed

    def __call__(self, scene):
        field = self.base(scene)
        rng = np.random.default_rng(self.seed)
        return type(field)(rng.normal(size=field.grid.shape).astype(field.grid.dtype))


@pytest.mark.criterion(4, "ablation contracts are bit-identical")
def test_ablation_contracts(request, provider):
    no_sem = SPA3DModel(preset("tiny", use_semantics=False))
    no_3d = SPA3DModel(preset("tiny", use_3d=False))
    rng = np.random.default_rng(4)
    for i in range(10):
        scene = sl.generate_scene(400 + i)
        a = realism_score(scene, no_sem, 0, provider)
        b = realism_score(scene, no_sem, 0, NoiseFeatures(provider, i))
        assert a == b
        pos = scene.positions.copy()
        pos[..., 2] = rng.uniform(0.5, 40.0, size=pos.shape[:2])
        moved = scene.replace(positions=pos)
        assert realism_score(scene, no_3d, 0, provider) == realism_score(moved, no_3d, 0, provider)
        _, p1, o1 = reconstruct(scene, no_3d, 0, provider)
        _, p2, o2 = reconstruct(moved, no_3d, 0, provider)
        assert p1[..., :2].tobytes() == p2[..., :2].tobytes() and o1.tobytes() == o2.tobytes()
    note(request, "10 scenes, feature-field and z replacement leave scores and x,y outputs unchanged")


# -- 5 -------------------------------------------------------------------------------

@pytest.mark.criterion(5, "overfit sanity, tiny preset, 8 scenes, 2000 steps")
def test_overfit(request, provider):
    scenes = [sl.generate_scene(i) for i in range(8)]
    model = SPA3DModel(preset("tiny"))
    t0 = time.perf_counter()
    res = train(scenes, model, OVERFIT, provider)
    dt = time.perf_counter() - t0
    ratio = res.history[-1]["loss"] / res.history[0]["loss"]
    aj = float(np.mean([score_scene(s, model, 0, provider).aj for s in scenes]))
    note(request, f"loss ratio {ratio:.4f}, mean AJ {aj:.3f}, {dt:.0f}s")
    assert ratio <= 0.10
    assert aj >= 0.9
    assert dt < 600


# -- 6 -------------------------------------------------------------------------------

@pytest.mark.criterion(6, "violation discrimination, 64 held-out quadruplets")
def test_violation_discrimination(request, small_model, provider):
    model, train_time = small_model
    quads = []
    for i in range(64):
        q = sl.generate_quadruplet(QUAD_SEED0 + i, kinds=sl.quadruplet_kinds(i))
        s = [realism_score(scene, model, 0, provider) for _, _, scene in q.members]
        quads.append(ScoredQuadruplet((s[0], s[1]), ((q.kinds[0], s[2]), (q.kinds[1], s[3]))))
    table = win_rate(quads)
    cats = {k: r for k, r, n in table.rows() if k != "overall"}
    note(request, f"overall {table.overall:.1f}%, " + ", ".join(f"{k} {r:.1f}%" for k, r in cats.items())
         + f", train {train_time:.0f}s")
    assert table.overall >= 70.0
    assert all(r >= 60.0 for r in cats.values())
    assert train_time < 2 * 3600


# -- 7 -------------------------------------------------------------------------------

@pytest.mark.criterion(7, "correlation with graded corruption, 100 scenes x 5 levels")
def test_graded_correlation(request, small_model, provider):
    model, _ = small_model
    severity, scores = [], []
    for i in range(100):
        for level, scene in enumerate(sl.graded_corruption(sl.generate_scene(GRADED_SEED0 + i), seed=i)):
            severity.append(-level)
            scores.append(realism_score(scene, model, 0, provider))
    rho = spearman(severity, scores)
    note(request, f"spearman {rho:.3f}")
    assert rho >= 0.6


# -- 8 -------------------------------------------------------------------------------

@pytest.mark.criterion(8, "AJ decreases with position noise, 50 seeds x 5 levels")
def test_noise_monotonicity(request):
    th = MetricThresholds()
    sigmas = [0.02, 0.05, 0.1, 0.2, 0.4]  # meters
    scenes = [sl.generate_scene(500 + s) for s in range(50)]
    means = []
    for k, sigma in enumerate(sigmas):
        ajs = []
        for s, scene in enumerate(scenes):
            rng = np.random.default_rng([s, k])
            gt = scene.positions.astype(np.float64)
            noise = rng.normal(0, sigma, size=gt.shape)
            noise[..., :2] /= th.xy_scale
            ajs.append(average_jaccard(gt + noise, scene.occluded, gt, scene.occluded, th))
        means.append(float(np.mean(ajs)))
    note(request, "mean AJ " + " > ".join(f"{m:.3f}" for m in means))
    assert all(a > b for a, b in zip(means, means[1:]))


# -- 9 -------------------------------------------------------------------------------

def _tree(root):
    return {p.name: p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(9, "reproducibility of gen-data, train, score and checkpoints")
def test_reproducibility(request, tmp_path, provider, monkeypatch):
    monkeypatch.delenv("SPA3D_SEED", raising=False)
    runs = []
    for r in ("a", "b"):
        d = tmp_path / r
        assert main(["gen-data", "--preset", "quads:2", "--out", str(d / "corpus"), "--seed", "9"]) == 0
        assert main(["--threads", "1", "train", "--corpus", str(d / "corpus"), "--out", str(d / "m.ck"),
                     "--history", str(d / "h.csv"), "--seed", "9", "--steps", "6", "--batch", "4",
                     "--warmup", "2", "--lr", "1e-3"]) == 0
        assert main(["score", "--checkpoint", str(d / "m.ck"), "--manifest", str(d / "corpus"),
                     "--csv", str(d / "s.csv")]) == 0
        runs.append(_tree(d))
    assert runs[0].keys() == runs[1].keys()
    differing = [k for k in runs[0] if runs[0][k] != runs[1][k]]
    assert not differing, differing

    scenes = [sl.generate_scene(i) for i in range(2)]
    model = SPA3DModel(preset("tiny"))
    train(scenes, model, TrainConfig(steps=3, batch_scenes=2, warmup_steps=1, peak_lr=1e-3), provider)
    save_checkpoint(tmp_path / "rt.ck", model)
    loaded = load_checkpoint(tmp_path / "rt.ck").model
    for scene in scenes:
        _, p1, o1 = reconstruct(scene, model, 0, provider)
        _, p2, o2 = reconstruct(scene, loaded, 0, provider)
        assert p1.tobytes() == p2.tobytes() and o1.tobytes() == o2.tobytes()
    note(request, f"{len(runs[0])} output files byte-identical across runs; checkpoint forward bitwise equal")
