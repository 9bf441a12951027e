"""Command-line interface: ``shgreg synth|train|register|eval|ablate``.

Exit codes: 0 success, 1 a requested quality check failed, 2 usage or
configuration error, 3 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, load_config
from .contrastive import TinyEncoder, load_encoder, save_encoder, train_encoder
from .core import AffineTransform2D, compose, invert, tre, warp_affine, warp_landmarks
from .pipeline import initialise, optimise_from, register_pair
from .similarity import DegenerateClusteringError, fidelity_terms
from .synth import generate_pair

log = logging.getLogger("shgreg")

EXIT_OK, EXIT_QUALITY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _map_cases(fn, items, threads):
    """``fn`` over ``items`` on ``threads`` workers; results keep input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _read_image(path):
    try:
        return io.read_png(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read image {path}: {e}") from None


def _read_landmarks(path):
    try:
        return io.read_landmarks(path)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read landmarks {path}: {e}") from None


def _gray(img):
    a = np.asarray(img, dtype=np.float64)
    return a.mean(axis=2) if a.ndim == 3 else a


def _load_encoder(args, cfg):
    path = args.encoder or cfg.pipeline.encoder
    if not path:
        raise UsageError("no encoder: pass --encoder or set [pipeline] encoder")
    try:
        return load_encoder(path)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load encoder {path}: {e}") from None


def _case_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "fixed.png").exists())


def _matrix(t):
    return [[float(v) for v in row] for row in t.matrix]


# ---------------------------------------------------------------- synth

def cmd_synth(args, cfg):
    base = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    out = Path(args.out)
    seeds = [base.seed + i for i in range(args.count)]

    def one(i_seed):
        i, seed = i_seed
        pair = generate_pair(replace(base, seed=seed))
        d = out / f"case_{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        io.write_png(d / "fixed.png", pair.fixed)
        io.write_png(d / "moving.png", pair.moving)
        io.write_transform(d / "truth.json", pair.truth)
        io.write_landmarks(d / "landmarks_fixed.csv", pair.landmarks_fixed)
        io.write_landmarks(d / "landmarks_moving.csv", pair.landmarks_moving)
        return d

    dirs = _map_cases(one, list(enumerate(seeds)), args.threads)
    print(f"wrote {len(dirs)} cases to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _training_pairs(root):
    pairs = []
    for d in _case_dirs(root):
        fixed = _read_image(d / "fixed.png")
        moving_path = d / "moving.png"
        if not moving_path.exists():
            log.warning("skipping %s: no moving.png", d.name)
            continue
        moving = _read_image(moving_path)
        if (d / "truth.json").exists():
            moving = warp_affine(moving, io.read_transform(d / "truth.json"),
                                 out_shape=fixed.shape[:2])
        if fixed.shape[:2] != moving.shape[:2]:
            log.warning("skipping %s: size mismatch %s vs %s", d.name, fixed.shape, moving.shape)
            continue
        pairs.append((_gray(fixed), _gray(moving)))
    return pairs


def cmd_train(args, cfg):
    bcfg = cfg.bnce if args.seed is None else replace(cfg.bnce, seed=args.seed)
    if args.steps is not None:
        bcfg = replace(bcfg, steps=args.steps)
    per_modality = args.per_modality_encoders or cfg.pipeline.per_modality_encoders
    pairs = _training_pairs(args.pairs_dir)
    if not pairs:
        raise InputError(f"no usable training pairs in {args.pairs_dir}")
    rows = []
    val = {}

    def record(step, loss, vloss):
        rows.append((step, loss))
        if vloss is not None:
            val["initial" if step == 0 else "final"] = vloss

    try:
        enc = train_encoder(pairs, bcfg, per_modality=per_modality, callback=record)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(out, enc)
    csv_path = out.with_suffix(".loss.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in rows:
            w.writerow([step, repr(float(loss))])
    io.write_json(out.with_suffix(".train.json"), {
        "version": io.VERSION, "pairs": len(pairs), "steps": bcfg.steps,
        "per_modality": per_modality, "validation_loss": val})
    print(f"trained on {len(pairs)} pairs for {bcfg.steps} steps: "
          f"validation loss {val.get('initial', float('nan')):.4f} -> "
          f"{val.get('final', val.get('initial', float('nan'))):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- register

def _fidelity(fixed, moving, t, fcfg):
    warped = warp_affine(moving, t, out_shape=fixed.shape[:2])
    try:
        terms = fidelity_terms(_gray(fixed), _gray(warped), fcfg)
    except DegenerateClusteringError:
        terms = fidelity_terms(_gray(fixed), _gray(warped), replace(fcfg, cmif_weight=0.0))
    return {k: (None if v is None else float(v)) for k, v in terms.items()}


def overlay_rgb(fixed, warped):
    """Fixed image through viridis under the warped moving image at 50% alpha."""
    from matplotlib import colormaps

    base = colormaps["viridis"](np.clip(_gray(fixed), 0.0, 1.0))[..., :3]
    top = np.clip(_gray(warped), 0.0, 1.0)[..., None]
    return 0.5 * base + 0.5 * top


def _write_matches(out, fixed, moving, pre):
    from PIL import Image, ImageDraw

    km, kf = pre.keypoints_moving, pre.keypoints_fixed
    inl = set(pre.inliers)
    with open(out / "matches.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["xa", "ya", "xb", "yb", "dist"])
        for m in pre.matches:
            a, b = km[m.index_a], kf[m.index_b]
            w.writerow([repr(a.x), repr(a.y), repr(b.x), repr(b.y), repr(m.distance)])
    # moving on the left, fixed on the right, lines from moving to fixed keypoints
    left = (np.clip(_gray(moving), 0, 1) * 255).astype(np.uint8)
    right = (np.clip(_gray(fixed), 0, 1) * 255).astype(np.uint8)
    h = max(left.shape[0], right.shape[0])
    canvas = np.zeros((h, left.shape[1] + right.shape[1]), dtype=np.uint8)
    canvas[:left.shape[0], :left.shape[1]] = left
    canvas[:right.shape[0], left.shape[1]:] = right
    im = Image.fromarray(canvas).convert("RGB")
    draw = ImageDraw.Draw(im)
    dx = left.shape[1]
    for i, m in enumerate(pre.matches):
        a, b = km[m.index_a], kf[m.index_b]
        color = (40, 220, 40) if i in inl else (220, 60, 60)
        draw.line([(a.x, a.y), (b.x + dx, b.y)], fill=color, width=1)
    im.save(out / "matches.png")


def run_registration(fixed, moving, enc, cfg, case_id, lm_fixed=None, lm_moving=None,
                     phi_init=None):
    """Register one pair and build the report dictionary (without writing files)."""
    t_start = time.perf_counter()
    outcome = register_pair(fixed, moving, enc, cfg.prealign, cfg.instopt, phi_init=phi_init)
    fid0 = _fidelity(fixed, moving, outcome.phi_init, cfg.fidelity)
    fid1 = _fidelity(fixed, moving, outcome.phi_final, cfg.fidelity)
    pre = outcome.prealign
    report = {
        "version": io.VERSION,
        "case_id": case_id,
        "phi_init": _matrix(outcome.phi_init),
        "phi_final": _matrix(outcome.phi_final),
        "prealign": {
            "status": "ok" if pre is not None else ("given" if phi_init is not None else "fallback"),
            "error": outcome.prealign_error,
            "keypoints_fixed": len(pre.keypoints_fixed) if pre else 0,
            "keypoints_moving": len(pre.keypoints_moving) if pre else 0,
            "matches": len(pre.matches) if pre else 0,
            "inliers": len(pre.inliers) if pre else 0,
            "fallback_starts": outcome.starts,
        },
        "fidelity_before": fid0,
        "fidelity_after": fid1,
        "levels": outcome.instopt.levels,
        "n_samples": outcome.instopt.n_samples,
        "flags": [],
    }
    if fid1["fidelity"] > fid0["fidelity"]:
        report["flags"].append("fidelity_increased")
    if outcome.fallback and phi_init is None:
        report["flags"].append("prealign_fallback")
    if lm_fixed is not None and lm_moving is not None:
        r0 = tre(lm_fixed, warp_landmarks(lm_moving, outcome.phi_init))
        r1 = tre(lm_fixed, warp_landmarks(lm_moving, outcome.phi_final))
        report["tre_init"] = {"mean": r0.mean, "std": r0.std}
        report["tre_final"] = {"mean": r1.mean, "std": r1.std}
    timings = dict(outcome.timings_ms)
    timings["total"] = round((time.perf_counter() - t_start) * 1000.0, 3)
    report["timings_ms"] = timings
    return report, outcome


def cmd_register(args, cfg):
    if args.seed is not None:
        cfg.prealign.seed = args.seed
    if args.fail_above is not None:
        cfg.report.fail_above_tre = args.fail_above
    if args.dump_field:
        cfg.report.dump_field = True
    if args.dump_matches:
        cfg.report.matches_csv = True
    if (args.landmarks_fixed is None) != (args.landmarks_moving is None):
        raise UsageError("--landmarks-fixed and --landmarks-moving go together")
    enc = _load_encoder(args, cfg)
    fixed = _gray(_read_image(args.fixed))
    moving = _gray(_read_image(args.moving))
    lmf = _read_landmarks(args.landmarks_fixed) if args.landmarks_fixed else None
    lmm = _read_landmarks(args.landmarks_moving) if args.landmarks_moving else None
    case_id = args.case_id or Path(args.fixed).resolve().parent.name

    report, outcome = run_registration(fixed, moving, enc, cfg, case_id, lmf, lmm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_transform(out / "transform.json", outcome.phi_final)
    warped = warp_affine(moving, outcome.phi_final, out_shape=fixed.shape[:2])
    if cfg.report.warped:
        io.write_png(out / "warped.png", warped)
    if cfg.report.overlay:
        io.write_png(out / "overlay.png", overlay_rgb(fixed, warped), bits=8)
    if cfg.report.dump_field:
        io.write_df32(out / "field.df32", outcome.instopt.field)
    if cfg.report.matches_csv and outcome.prealign is not None:
        _write_matches(out, fixed, moving, outcome.prealign)
    io.write_json(out / "report.json", report)

    line = f"{case_id}: prealign {report['prealign']['status']}"
    if "tre_final" in report:
        line += (f", TRE {report['tre_init']['mean']:.3f} -> "
                 f"{report['tre_final']['mean']:.3f} px")
    print(line)
    limit = cfg.report.fail_above_tre
    if limit > 0 and "tre_final" in report and report["tre_final"]["mean"] > limit:
        log.error("final TRE %.3f px exceeds %.3f px", report["tre_final"]["mean"], limit)
        return EXIT_QUALITY
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args, cfg):
    try:
        t = io.read_transform(args.transform)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot read transform {args.transform}: {e}") from None
    lmf = _read_landmarks(args.lm_fixed)
    lmm = _read_landmarks(args.lm_moving)
    try:
        res = tre(lmf, warp_landmarks(lmm, t), spacing=args.spacing)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"TRE {res.mean:.6f} ± {res.std:.6f} px over {len(res.per_point)} landmarks")
    payload = {"version": io.VERSION, **res.to_dict()}
    if args.json:
        io.write_json(args.json, payload)
    else:
        sys.stdout.write(io.dumps_json(payload))
    limit = cfg.report.fail_above_tre if args.fail_above is None else args.fail_above
    if limit > 0 and res.mean > limit:
        return EXIT_QUALITY
    return EXIT_OK


# ---------------------------------------------------------------- ablate

ARM_ORDER = ("prealign_only", "cmif_only", "lncc_only", "combined")
SWEEP_ITERS = (15, 30, 50)


def _arm_config(cfg, arm, iters):
    fid = cfg.fidelity
    if arm == "lncc_only":
        fid = replace(fid, cmif_weight=0.0)
    elif arm == "cmif_only":
        fid = replace(fid, lncc_weight=0.0)
    return replace(cfg.instopt, adam_iters=iters, fidelity=fid)


def ablation_runs(cfg):
    """(arm, iters) combinations, arm rows first then the iteration sweep."""
    iters = cfg.instopt.adam_iters
    runs = [(arm, 0 if arm == "prealign_only" else iters) for arm in ARM_ORDER]
    runs += [("sweep", n) for n in SWEEP_ITERS]
    return runs


def ablate_case(case, enc, cfg):
    """Per-case mean TRE for every ablation run; the initialisation is shared by all."""
    fixed, moving, lmf, lmm = case
    init = initialise(fixed, moving, enc, cfg.prealign)
    cache = {}
    out = {}
    for arm, iters in ablation_runs(cfg):
        if arm == "prealign_only":
            t = init.transforms[0]
        else:
            key = ("combined" if arm == "sweep" else arm, iters)
            if key not in cache:
                _, res, _ = optimise_from(fixed, moving, enc, init, _arm_config(cfg, key[0], iters))
                cache[key] = res.transform
            t = cache[key]
        out[(arm, iters)] = tre(lmf, warp_landmarks(lmm, t)).mean
    return out


def _load_suite(root):
    cases = []
    for d in _case_dirs(root):
        lf, lm = d / "landmarks_fixed.csv", d / "landmarks_moving.csv"
        if not (lf.exists() and lm.exists() and (d / "moving.png").exists()):
            log.warning("skipping %s: incomplete case", d.name)
            continue
        cases.append((_gray(_read_image(d / "fixed.png")), _gray(_read_image(d / "moving.png")),
                      _read_landmarks(lf), _read_landmarks(lm)))
    return cases


def ablation_table(per_case, cfg):
    rows = []
    for arm, iters in ablation_runs(cfg):
        vals = np.array([c[(arm, iters)] for c in per_case])
        rows.append({"arm": arm, "iters": iters, "mean_tre": float(vals.mean()),
                     "std_tre": float(vals.std()), "n": len(vals)})
    return rows


def cmd_ablate(args, cfg):
    if args.seed is not None:
        cfg.prealign.seed = args.seed
    enc = _load_encoder(args, cfg)
    cases = _load_suite(args.suite_dir)
    if not cases:
        raise InputError(f"empty suite: no complete cases in {args.suite_dir}")
    per_case = _map_cases(lambda c: ablate_case(c, enc, cfg), cases, args.threads)
    rows = ablation_table(per_case, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "iters", "mean_tre", "std_tre", "n"])
        for r in rows:
            w.writerow([r["arm"], r["iters"], repr(r["mean_tre"]), repr(r["std_tre"]), r["n"]])
    for r in rows:
        print(f"{r['arm']:>14} {r['iters']:>3}  {r['mean_tre']:.3f} ± {r['std_tre']:.3f} px  (n={r['n']})")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _global_flags(defaults):
    # SUPPRESS lets the same flags appear before or after the subcommand
    # without the subparser resetting values given earlier
    p = argparse.ArgumentParser(add_help=False)
    d = None if defaults else argparse.SUPPRESS
    p.add_argument("--config", default=d, help="INI configuration file")
    p.add_argument("--seed", type=int, default=d, help="override the command's random seed")
    p.add_argument("--threads", type=int, default=1 if defaults else argparse.SUPPRESS,
                   help="worker threads over cases (results do not depend on it)")
    p.add_argument("--verbose", "-v", action="store_true",
                   default=False if defaults else argparse.SUPPRESS)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="shgreg", parents=[_global_flags(True)],
                                     description="Multimodal SHG / bright-field affine registration.")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _global_flags(False)

    p = sub.add_parser("synth", parents=[g], help="write a synthetic suite with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[g], help="train the feature encoder")
    p.add_argument("pairs_dir")
    p.add_argument("--out", required=True, help="checkpoint path (.json)")
    p.add_argument("--steps", type=int)
    p.add_argument("--per-modality-encoders", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", parents=[g], help="register a moving image onto a fixed image")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--encoder")
    p.add_argument("--landmarks-fixed")
    p.add_argument("--landmarks-moving")
    p.add_argument("--case-id")
    p.add_argument("--fail-above", type=float, metavar="PX",
                   help="exit 1 when the final TRE exceeds PX")
    p.add_argument("--dump-field", action="store_true")
    p.add_argument("--dump-matches", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", parents=[g], help="TRE of a transform on landmark files")
    p.add_argument("transform")
    p.add_argument("lm_fixed")
    p.add_argument("lm_moving")
    p.add_argument("--json", help="write the JSON summary here instead of standard output")
    p.add_argument("--spacing", type=float, default=1.0, help="pixel size for physical TRE")
    p.add_argument("--fail-above", type=float, metavar="PX")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[g], help="fidelity-term ablation and iteration sweep")
    p.add_argument("suite_dir")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--encoder")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    for name in ("encoder", "landmarks_fixed", "landmarks_moving", "case_id",
                 "fail_above", "dump_field", "dump_matches", "steps",
                 "per_modality_encoders", "json"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"shgreg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as e:
        print(f"shgreg: error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
