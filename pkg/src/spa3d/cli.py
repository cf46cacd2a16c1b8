"""spa3d command line: data generation, training, scoring and evaluation."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import synthlab as sl
from .encoder import ModelConfig, PRESETS, preset
from .metrics import (
    CATEGORIES,
    MetricReport,
    MetricThresholds,
    ScoredQuadruplet,
    average_jaccard,
    motion_filter,
    occlusion_accuracy,
    score_scene,
    spearman,
    win_rate,
)
from .model import SPA3DModel, collate, prepare_scene, scene_track_features
from .numkit import gradient_check, verification_mode
from .trackio import SceneFormatError, describe_scene, load_ratings, load_scene, save_scene, write_ratings
from .trainer import (
    LossWeights,
    TrainConfig,
    TrainingDiverged,
    CheckpointError,
    batch_loss,
    load_checkpoint,
    split_support_query,
    train,
    write_history,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_seed(args, required: bool = True) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SPA3D_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SPA3D_SEED must be an integer, got {env!r}") from None
    if required:
        raise UsageError("a seed is required (--seed or SPA3D_SEED)")
    return 0


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        return type(current)(value)
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {type(current).__name__}") from None


def parse_overrides(pairs, base: dict) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        if k not in base:
            raise UsageError(f"unknown config key {k!r}")
        out[k] = _coerce(v, base[k])
    return out


def model_config_from_args(args) -> ModelConfig:
    if getattr(args, "config", None):
        try:
            base = ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise UsageError(f"bad config file: {e}") from None
    else:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}")
        base = preset(args.preset)
    over = parse_overrides(args.set, asdict(base))
    try:
        return base.override(**over)
    except ValueError as e:
        raise UsageError(str(e)) from None


def read_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return path.parent, json.loads(path.read_text())


def load_corpus(manifest_path, label: str | None = None):
    root, man = read_manifest(manifest_path)
    ids = sorted(k for k, v in man.items() if label is None or v.get("label") == label)
    return ids, [load_scene(root / man[i]["file"]) for i in ids], man


def open_checkpoint(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path).model
    except CheckpointError as e:
        raise UsageError(f"cannot load checkpoint: {e}") from None


def thresholds_from_args(args) -> MetricThresholds:
    deltas = tuple(float(x) for x in args.deltas.split(",")) if args.deltas else MetricThresholds().deltas
    try:
        return MetricThresholds(deltas, args.xy_scale)
    except ValueError as e:
        raise UsageError(str(e)) from None


def score_many(scenes, model, seed, provider, thresholds, threads: int):
    def one(s):
        return score_scene(s, model, seed, provider, thresholds)
    if threads <= 1:
        return [one(s) for s in scenes]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(one, scenes))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def parse_preset(text: str) -> tuple[str, int, int]:
    parts = text.split(":")
    if parts[0] not in ("quads", "possible", "graded") or len(parts) not in (2, 3):
        raise UsageError(f"invalid preset {text!r}; use quads:N, possible:N or graded:N[:LEVELS]")
    if len(parts) == 3 and parts[0] != "graded":
        raise UsageError(f"invalid preset {text!r}")
    try:
        n = int(parts[1])
        levels = int(parts[2]) if len(parts) == 3 else 5
    except ValueError:
        raise UsageError(f"invalid preset {text!r}") from None
    if n < 1 or levels < 2:
        raise UsageError(f"invalid preset {text!r}")
    return parts[0], n, levels


def _child_seed(master: int, *keys: int) -> int:
    return int(np.random.default_rng([master & 0xFFFFFFFF, *keys]).integers(2**31 - 1))


def cmd_gen_data(args) -> int:
    seed = resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, dict] = {}

    def emit(sid: str, scene, **info):
        fname = f"{sid}.spa3d"
        save_scene(scene, out / fname)
        manifest[sid] = {"file": fname, **info}

    if args.spec:
        try:
            spec = sl.SceneSpec.from_json(Path(args.spec).read_text())
            scene = sl.simulate(spec)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise UsageError(f"bad scene spec: {e}") from None
        emit("scene_0000", scene, label="possible", violation=None, level=None)
    else:
        kind, n, levels = parse_preset(args.preset)
        if kind == "quads":
            for i in range(n):
                q = sl.generate_quadruplet(_child_seed(seed, 1, i), kinds=sl.quadruplet_kinds(i),
                                           frames=args.frames)
                for j, s in enumerate(q.possible):
                    emit(f"q{i:04d}_p{j}", s, label="possible", violation=None, level=None, quad=i)
                for j, (s, k) in enumerate(zip(q.impossible, q.kinds)):
                    emit(f"q{i:04d}_i{j}", s, label="impossible", violation=k, level=None, quad=i)
        elif kind == "possible":
            for i in range(n):
                emit(f"s{i:05d}", sl.generate_scene(_child_seed(seed, 2, i), frames=args.frames),
                     label="possible", violation=None, level=None)
        else:
            ratings = {}
            for i in range(n):
                base = sl.generate_scene(_child_seed(seed, 3, i), frames=args.frames)
                for lvl, s in enumerate(sl.graded_corruption(base, levels, seed=_child_seed(seed, 4, i))):
                    sid = f"g{i:04d}_l{lvl}"
                    emit(sid, s, label="possible" if lvl == 0 else "corrupted", violation=None,
                         level=lvl, base=i)
                    ratings[sid] = float(levels - 1 - lvl)
            write_ratings(ratings, out / "ratings.csv")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest)} scenes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    seed = resolve_seed(args)
    mc = model_config_from_args(args).override(seed=seed)
    ids, scenes, _ = load_corpus(args.corpus, None if args.label == "all" else args.label)
    if not scenes:
        raise UsageError("no training scenes matched")
    weights = LossWeights(w_l1=args.w_l1, w_bce=args.w_bce, w_silog=args.w_silog,
                          mask_occluded_l1=not args.unmasked_l1, xy_scale=args.loss_xy_scale)
    tc = TrainConfig(epochs=args.epochs, batch_scenes=args.batch, peak_lr=args.lr,
                     warmup_steps=args.warmup, steps=args.steps, weight_decay=args.weight_decay,
                     seed=seed, weights=weights, checkpoint_every=args.checkpoint_every,
                     fixed_split_seed=args.fixed_split)
    provider = sl.SynthFeatureProvider(dim=mc.feature_dim)
    model, opt = SPA3DModel(mc), None
    if args.resume:
        ck = load_checkpoint(args.resume)
        model, opt = ck.model, ck.optimizer
    history: list[dict] = []

    def log(row):
        history.append(row)
        if args.log_every and row["step"] % args.log_every == 0:
            print(f"step {row['step']}\tloss {row['loss']:.6g}\tlr {row['lr']:.3g}", flush=True)

    try:
        train(scenes, model, tc, provider, checkpoint_path=args.out, optimizer=opt, on_step=log)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        if args.history:
            write_history(history, args.history)
        return EXIT_DIVERGED
    if args.history:
        write_history(history, args.history)
    print(f"trained {len(history)} steps on {len(scenes)} scenes; checkpoint {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# score / eval
# ---------------------------------------------------------------------------

def _scene_inputs(args):
    if args.manifest:
        ids, scenes, _ = load_corpus(args.manifest)
        return ids, scenes
    if not args.scenes:
        raise UsageError("give scene files or --manifest")
    ids, scenes = [], []
    for p in args.scenes:
        if not Path(p).exists():
            raise UsageError(f"scene not found: {p}")
        ids.append(Path(p).stem)
        scenes.append(load_scene(p))
    return ids, scenes


def cmd_score(args) -> int:
    model = open_checkpoint(args.checkpoint)
    seed = resolve_seed(args, required=False)
    ids, scenes = _scene_inputs(args)
    th = thresholds_from_args(args)
    provider = sl.SynthFeatureProvider(dim=model.config.feature_dim)
    scores = score_many(scenes, model, seed, provider, th, args.threads)
    report = MetricReport(ids, [s.aj for s in scores], [s.apd for s in scores], [s.oa for s in scores], th)
    for sid, s in sorted(zip(ids, scores)):
        print(f"{sid}\t{s.aj!r}")
    if args.csv:
        report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    return EXIT_OK


def cmd_eval_pairs(args) -> int:
    model = open_checkpoint(args.checkpoint)
    seed = resolve_seed(args, required=False)
    ids, scenes, man = load_corpus(args.manifest)
    th = thresholds_from_args(args)
    provider = sl.SynthFeatureProvider(dim=model.config.feature_dim)
    aj = dict(zip(ids, (s.aj for s in score_many(scenes, model, seed, provider, th, args.threads))))
    quads: dict[int, dict] = {}
    for sid in ids:
        info = man[sid]
        if "quad" not in info:
            continue
        q = quads.setdefault(info["quad"], {"p": [], "i": []})
        if info["label"] == "possible":
            q["p"].append(aj[sid])
        else:
            q["i"].append((info["violation"], aj[sid]))
    scored = [ScoredQuadruplet(tuple(q["p"]), tuple(q["i"])) for _, q in sorted(quads.items())
              if len(q["p"]) == 2 and len(q["i"]) == 2]
    if not scored:
        raise UsageError("manifest contains no complete quadruplets")
    table = win_rate(scored)
    print("\t".join(("category",) + CATEGORIES + ("overall",)))
    print("\t".join(["win_rate_%"] + [f"{r:.2f}" for _, r, _ in table.rows()]))
    print("\t".join(["pairs"] + [str(n) for _, _, n in table.rows()]))
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["category", "win_rate", "pairs"])
            for k, r, n in table.rows():
                w.writerow([k, repr(r), n])
    return EXIT_OK


def cmd_eval_corr(args) -> int:
    model = open_checkpoint(args.checkpoint)
    seed = resolve_seed(args, required=False)
    ids, scenes, _ = load_corpus(args.manifest)
    if not Path(args.ratings).exists():
        raise UsageError(f"ratings file not found: {args.ratings}")
    ratings = load_ratings(args.ratings)
    missing = [i for i in ids if i not in ratings]
    if missing:
        raise UsageError(f"missing ratings for scene_ids: {', '.join(missing)}")
    keep = list(range(len(scenes)))
    if args.motion_filter < 1:
        keep = sorted(motion_filter(scenes, args.motion_filter))
    th = thresholds_from_args(args)
    provider = sl.SynthFeatureProvider(dim=model.config.feature_dim)
    sel = [scenes[i] for i in keep]
    aj = [s.aj for s in score_many(sel, model, seed, provider, th, args.threads)]
    try:
        rho = spearman(aj, [ratings[ids[i]] for i in keep])
    except ValueError as e:
        raise UsageError(str(e)) from None
    print("metric\tn\tspearman")
    print(f"realism_aj\t{len(keep)}\t{rho:.6f}")
    print("# sign convention: rho(AJ, quality rating); positive means higher AJ for better-rated scenes")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def aj_color(aj: float) -> str:
    """Red at 0, white at 0.5, blue at 1."""
    a = min(max(float(aj), 0.0), 1.0)
    if a < 0.5:
        r, g, b = 255, round(510 * a), round(510 * a)
    else:
        r = g = round(510 * (1.0 - a))
        b = 255
    return f"#{r:02x}{g:02x}{b:02x}"


def render_svg(scene, track_aj: dict[int, float], size: int = 512, title: str = "") -> str:
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#202020"/>',
    ]
    for j in range(scene.num_tracks):
        p = scene.positions[j].astype(np.float64)
        pts = " ".join(f"{x * size:.2f},{y * size:.2f}" for x, y in p[:, :2])
        color = aj_color(track_aj[j]) if j in track_aj else "#808080"
        lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args) -> int:
    if not Path(args.scene).exists():
        raise UsageError(f"scene not found: {args.scene}")
    scene = load_scene(args.scene)
    track_aj: dict[int, float] = {}
    if args.scores:
        with open(args.scores, newline="") as f:
            for row in csv.DictReader(f):
                track_aj[int(row["track"])] = float(row["aj"])
    elif args.checkpoint:
        model = open_checkpoint(args.checkpoint)
        provider = sl.SynthFeatureProvider(dim=model.config.feature_dim)
        s = score_scene(scene, model, resolve_seed(args, required=False), provider, thresholds_from_args(args))
        track_aj = {int(j): float(a) for j, a in zip(s.query_index, s.per_track_aj)}
    else:
        raise UsageError("plot needs --checkpoint or --scores")
    Path(args.out).write_text(render_svg(scene, track_aj, title=Path(args.scene).stem))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / grad-check / dump / config
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    model = open_checkpoint(args.checkpoint)
    ids, scenes, _ = load_corpus(args.manifest)
    scenes = scenes[: args.scenes + 1]
    if len(scenes) < 2:
        raise UsageError("bench needs at least 2 scenes (one is a warm-up)")
    provider = sl.SynthFeatureProvider(dim=model.config.feature_dim)
    th = thresholds_from_args(args)
    rows = []
    for i, scene in enumerate(scenes):
        t0 = time.perf_counter()
        sup, qry = split_support_query(scene, 0.5, 0)
        feats = scene_track_features(scene, model.config, provider)
        batch = collate([prepare_scene(scene, sup, qry, model.config, feats, "first")])
        t1 = time.perf_counter()
        latents = model.encoder(batch.support)
        t2 = time.perf_counter()
        out = model.decoder(latents, batch.query_pe, batch.frames, batch.query_pos).data[0]
        t3 = time.perf_counter()
        occ = out[..., 3] > 0
        average_jaccard(out[..., :3], occ, scene.positions[qry], scene.occluded[qry], th, model.config.use_3d)
        occlusion_accuracy(occ, scene.occluded[qry])
        t4 = time.perf_counter()
        if i > 0:
            rows.append((ids[i], t1 - t0, t2 - t1, t3 - t2, t4 - t3, t4 - t0))
    cols = ("scene_id", "split", "encode", "decode", "metrics", "total")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[0]] + [f"{x:.6f}" for x in r[1:]])
        means = np.mean([r[1:] for r in rows], axis=0)
        w.writerow(["mean"] + [f"{x:.6f}" for x in means])
    print(f"mean seconds per scene over {len(rows)} scenes: " +
          ", ".join(f"{c}={m:.4f}" for c, m in zip(cols[1:], means)))
    return EXIT_OK


def grad_check_problem(config: ModelConfig, tracks: int = 2, frames: int = 4, seed: int = 0):
    """Tiny random scene and unit-weight loss closure for finite-difference checks."""
    from .trackio import SceneTracks

    rng = np.random.default_rng(seed)
    pos = np.concatenate([rng.uniform(0.2, 0.8, (tracks, frames, 2)), rng.uniform(1.0, 3.0, (tracks, frames, 1))], -1)
    occ = np.zeros((tracks, frames), dtype=bool)
    occ[0, 1] = True
    scene = SceneTracks(pos, occ)
    feats = rng.normal(size=(tracks, frames, config.feature_dim))
    model = SPA3DModel(config)
    sup, qry = np.arange(tracks // 2), np.arange(tracks // 2, tracks)
    batch = collate([prepare_scene(scene, sup, qry, config, feats if config.use_semantics else None, "first")])
    weights = LossWeights(w_l1=1.0, w_bce=1.0)

    def loss_fn():
        return batch_loss(model, batch, weights)[0]

    return model, loss_fn


def cmd_grad_check(args) -> int:
    with verification_mode():
        mc = model_config_from_args(args)
        model, loss_fn = grad_check_problem(mc, args.tracks, args.frames, resolve_seed(args, required=False))
        report = gradient_check(dict(model.named_parameters()), loss_fn, tolerance=args.tolerance,
                                max_entries=args.max_entries)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_dump(args) -> int:
    if not Path(args.scene).exists():
        raise UsageError(f"scene not found: {args.scene}")
    print(describe_scene(load_scene(args.scene)))
    return EXIT_OK


def cmd_config(args) -> int:
    text = json.dumps(asdict(model_config_from_args(args)), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _model_args(p):
    p.add_argument("--preset", default="tiny", help="model preset: " + ", ".join(sorted(PRESETS)))
    p.add_argument("--config", help="model config JSON (replaces --preset)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="model config override")


def _metric_args(p):
    p.add_argument("--deltas", help="comma-separated distance thresholds in meters")
    p.add_argument("--xy-scale", type=float, default=MetricThresholds().xy_scale,
                   help="meters per unit of normalized image coordinate")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spa3d", description=__doc__)
    ap.add_argument("--threads", type=int, default=1, help="scene-level worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--preset", default="quads:64", help="quads:N | possible:N | graded:N[:LEVELS]")
    p.add_argument("--spec", help="scene spec JSON instead of a preset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, default=24)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True, help="manifest.json or corpus directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV path")
    p.add_argument("--label", default="possible", help="train on scenes with this label ('all' for every scene)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--w-l1", type=float, default=5000.0)
    p.add_argument("--w-bce", type=float, default=1e-8)
    p.add_argument("--w-silog", type=float, default=0.0)
    p.add_argument("--unmasked-l1", action="store_true", help="apply L1 at occluded frames too")
    p.add_argument("--loss-xy-scale", type=float, default=1.0,
                   help="multiply image-plane x, y by this inside the L1 (5.0 puts them in meters)")
    p.add_argument("--fixed-split", type=int, metavar="SEED",
                   help="always use the scoring split of this seed and first-visible queries (overfit runs)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=100)
    _model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="per-scene realism scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("scenes", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--csv")
    p.add_argument("--json")
    _metric_args(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-pairs", help="possible/impossible win rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _metric_args(p)
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("eval-corr", help="rank correlation against ratings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--motion-filter", type=float, default=1.0, help="keep this fraction of most dynamic scenes")
    p.add_argument("--seed", type=int)
    _metric_args(p)
    p.set_defaults(func=cmd_eval_corr)

    p = sub.add_parser("plot", help="SVG of tracks colored by per-track AJ")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--scores", help="CSV with columns track, aj")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _metric_args(p)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bench", help="per-stage inference timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--out", required=True)
    _metric_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--tracks", type=int, default=2)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=24)
    p.add_argument("--seed", type=int)
    _model_args(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump", help="print a scene file in readable form")
    p.add_argument("scene")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("config", help="print the resolved model config as JSON")
    p.add_argument("--out")
    _model_args(p)
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"spa3d: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneFormatError, FileNotFoundError, KeyError) as e:
        print(f"spa3d: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
