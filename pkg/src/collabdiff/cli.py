"""Command-line front end.

Every command writes into ``--out`` (refusing to touch a non-empty directory
unless ``--force``) and leaves a ``manifest.json`` recording the resolved
arguments and seed; ``collabdiff replay manifest.json --out DIR`` re-runs it.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .collab_sampler import STRATEGIES, SamplerConfig, StepRecord, run
from .data_prep import (
    DEFAULT_SCALES,
    augment_clip,
    fold_sequence,
    format_pose_file,
    interpolate_controls,
    parse_pose_file,
    sample_controls,
)
from .geometry import CoincidentCameras, GeometryError, epipolar_mask, fundamental_matrix, pseudo_epipolar_mask
from .noise_schedule import NoiseSchedule, ScheduleError, StepPlan
from .reports import CorrespondenceSet, epipolar_errors, plot_sweep, summarize_errors, write_rows
from .toy_scores import GaussianToyWorld, PairDenoiser, covariance_error, flatten_videos, sample_reference

log = logging.getLogger("collabdiff")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _size(text: str) -> tuple[int, int]:
    """'WxH' -> (height, width)."""
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# -- output handling -------------------------------------------------------


def prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonable(args: argparse.Namespace) -> dict:
    skip = {"out", "force", "config", "func", "manifest", "verbose"}
    d = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        if isinstance(v, Path):
            v = str(v.resolve())
        elif isinstance(v, tuple):
            v = list(v)
        d[k] = v
    return d


def write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    manifest = {"tool": "collabdiff", "version": __version__, "command": args.command, "args": _jsonable(args)}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _read_poses(path: Path, size):
    h, w = size
    records = parse_pose_file(Path(path).read_text())
    return [r.to_pose(w, h) for r in records], records


def _need_seed(args):
    if args.seed is None:
        raise ValidationError(f"{args.command} is stochastic and needs --seed")


# -- commands --------------------------------------------------------------


def cmd_masks(args) -> None:
    _need_seed(args)
    poses_a, _ = _read_poses(args.poses_a, args.image_size)
    poses_b, _ = _read_poses(args.poses_b, args.image_size)
    if len(poses_a) != len(poses_b):
        raise ValidationError(f"pose files differ in length ({len(poses_a)} vs {len(poses_b)})")
    out = prepare_out(args.out, args.force)
    rng = np.random.default_rng(args.seed)
    feat = tuple(args.feature_size)
    frames = []
    for k, (a, b) in enumerate(zip(poses_a, poses_b)):
        try:
            F = fundamental_matrix(a, b)
            mask = epipolar_mask(F, feat, feat, tuple(args.image_size), args.tau)
            kind = "epipolar"
        except CoincidentCameras:
            mask = pseudo_epipolar_mask(feat, args.tau, rng, image_res=tuple(args.image_size))
            kind = "pseudo"
        stem = f"frame_{k:03d}"
        mask.to_pgm(out / f"{stem}.pgm")
        mask.to_csv(out / f"{stem}.csv")
        frames.append({"frame": k, "kind": kind, "pgm": f"{stem}.pgm", "csv": f"{stem}.csv", "set_bits": int(mask.bits.sum())})
    write_manifest(out, args, {"frames": frames})
    log.info("wrote %d masks to %s", len(frames), out)


def _toy_run(args, rho, seq):
    """One sampler run + reference floor for a given rho; returns dict of results."""
    sampler_seed, ref_seed = seq.spawn(2)
    world = GaussianToyWorld(args.M, args.d, rho, seed=args.seed)
    schedule = NoiseSchedule.create(args.T, args.schedule)
    plan = StepPlan.uniform(schedule, args.steps, args.eta)
    config = SamplerConfig(args.M, args.strategy, args.R, args.Q, plan, args.seed, args.weight_scale)
    trace: list[StepRecord] = []
    samples = run(
        config,
        PairDenoiser(world, schedule),
        schedule,
        (args.n, args.d),
        rng=np.random.default_rng(sampler_seed),
        trace=trace,
        workers=args.workers,
    )
    ref = sample_reference(world, args.n, np.random.default_rng(ref_seed))
    return {
        "world": world,
        "samples": samples,
        "trace": trace,
        "error": covariance_error(samples, world.sigma),
        "floor": covariance_error(ref, world.sigma),
        "variance": float(flatten_videos(samples).var(axis=0, ddof=1).mean()),
    }


def cmd_toy_sample(args) -> None:
    _need_seed(args)
    if args.n < 2:
        raise ValidationError("--n must be at least 2")
    out = prepare_out(args.out, args.force)
    seq = np.random.SeedSequence(args.seed)
    main_seq, sweep_seq = seq.spawn(2)
    res = _toy_run(args, args.rho, main_seq)

    samples = res["samples"]
    M, n, d = samples.shape
    with open(out / "samples.csv", "w") as fh:
        fh.write("video," + ",".join(f"s{i}_c{c}" for i in range(n) for c in range(d)) + "\n")
        for k in range(M):
            fh.write(f"{k}," + ",".join(repr(float(x)) for x in samples[k].ravel()) + "\n")

    slots = sorted({len(r.pairs) for r in res["trace"]})
    rows = [
        {"metric": "covariance_error", "value": res["error"], "unit": "relative_frobenius"},
        {"metric": "reference_floor", "value": res["floor"], "unit": "relative_frobenius"},
        {"metric": "error_over_floor", "value": res["error"] / res["floor"], "unit": "ratio"},
        {"metric": "mean_variance", "value": res["variance"], "unit": "per_coordinate"},
        {"metric": "pair_slots_per_iteration", "value": ";".join(map(str, slots)), "unit": "count"},
        {"metric": "iterations", "value": len(res["trace"]), "unit": "count"},
    ]
    write_rows(out / "report.csv", rows, ["metric", "value", "unit"])

    extra = {
        "world": res["world"].to_config(),
        "selections": [{"t": r.t, "t_prev": r.t_prev, "r": r.r, "pairs": [list(p) for p in r.pairs]} for r in res["trace"]],
    }
    if args.sweep_rho:
        sweep = []
        for rho, s in zip(args.sweep_rho, sweep_seq.spawn(len(args.sweep_rho))):
            r = _toy_run(args, rho, s)
            sweep.append({"rho": rho, "covariance_error": r["error"], "reference_floor": r["floor"]})
        write_rows(out / "sweep.csv", sweep, ["rho", "covariance_error", "reference_floor"])
        if args.plot:
            plot_sweep(
                out / "sweep.png",
                [r["rho"] for r in sweep],
                {
                    "sampler": [r["covariance_error"] for r in sweep],
                    "reference floor": [r["reference_floor"] for r in sweep],
                },
                "rho",
                "relative covariance error",
                f"M={args.M}, {args.strategy}",
            )
    write_manifest(out, args, extra)
    print(f"covariance_error={res['error']:.5f} floor={res['floor']:.5f}")


def cmd_epi_error(args) -> None:
    corr = CorrespondenceSet.read_csv(args.correspondences)
    poses_a, _ = _read_poses(args.poses_a, args.image_size)
    poses_b, _ = _read_poses(args.poses_b, args.image_size)
    try:
        errors = epipolar_errors(corr, poses_a, poses_b)
    except IndexError as exc:
        raise ValidationError(str(exc)) from None
    out = prepare_out(args.out, args.force)
    rows = summarize_errors(corr.frame, errors)
    write_rows(out / "summary.csv", rows, ["frame", "count", "mean_px", "median_px"])
    write_manifest(out, args)
    if rows:
        print(f"mean epipolar error {rows[-1]['mean_px']:.6g} px over {rows[-1]['count']} matches")


def _list_frames(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    frames = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not frames:
        raise ValidationError(f"no PNG frames in {directory}")
    return frames


def cmd_fold(args) -> None:
    frames = _list_frames(args.frames)
    records = parse_pose_file(Path(args.poses).read_text()) if args.poses else None
    try:
        folded = fold_sequence(frames, records)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = prepare_out(args.out, args.force)
    for name, clip in (("clip_a", folded.clip_a), ("clip_b", folded.clip_b)):
        (out / name).mkdir(exist_ok=True)
        for pos, idx in enumerate(clip):
            shutil.copyfile(frames[idx], out / name / f"{pos:03d}.png")
    if records is not None:
        (out / "poses_a.txt").write_text(format_pose_file(folded.poses_a))
        (out / "poses_b.txt").write_text(format_pose_file(folded.poses_b))
    write_manifest(
        out,
        args,
        {
            "source_frames": [str(p.resolve()) for p in frames],
            "clip_a": list(folded.clip_a),
            "clip_b": list(folded.clip_b),
            "pose_lines_a": [r.to_line() for r in folded.poses_a],
            "pose_lines_b": [r.to_line() for r in folded.poses_b],
        },
    )


def cmd_homog(args) -> None:
    from PIL import Image

    _need_seed(args)
    frames = _list_frames(args.frames)
    if len(frames) < 2:
        raise ValidationError("homography augmentation needs at least two frames")
    images = [Image.open(p) for p in frames]
    mode = images[0].mode
    arrays = [np.asarray(im.convert(mode), dtype=float) for im in images]
    h, w = arrays[0].shape[:2]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValidationError("frames differ in size")
    scales = {"t": args.t_scale, "theta": args.theta_scale, "s": args.s_scale, "sh": args.sh_scale, "p": args.p_scale}
    rng = np.random.default_rng(args.seed)
    c_final = sample_controls(rng, scales, image_size=(h, w))
    out = prepare_out(args.out, args.force)
    (out / "frames").mkdir(exist_ok=True)
    (out / "valid").mkdir(exist_ok=True)
    per_frame = []
    for k, (warped, valid) in enumerate(augment_clip(arrays, c_final)):
        img = np.clip(np.rint(warped), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode=mode).save(out / "frames" / f"{k:03d}.png")
        Image.fromarray(valid.astype(np.uint8) * 255, mode="L").save(out / "valid" / f"{k:03d}.png")
        per_frame.append(interpolate_controls(c_final, k, len(arrays)).to_dict())
    write_manifest(
        out,
        args,
        {
            "source_frames": [str(p.resolve()) for p in frames],
            "final_controls": c_final.to_dict(),
            "frame_controls": per_frame,
        },
    )


def cmd_schedule_dump(args) -> None:
    schedule = NoiseSchedule.create(args.T, args.style, args.beta_start, args.beta_end)
    out = prepare_out(args.out, args.force)
    schedule.to_csv(out / "schedule.csv")
    write_manifest(out, args)


def cmd_replay(args) -> None:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("command") not in COMMANDS or manifest["command"] == "replay":
        raise ValidationError(f"{args.manifest} is not a replayable manifest")
    ns = argparse.Namespace(**manifest["args"])
    for k, v in manifest["args"].items():
        if isinstance(v, list) and k.endswith("_size"):
            setattr(ns, k, tuple(v))
    ns.out, ns.force, ns.command = args.out, args.force, manifest["command"]
    for k in ("poses_a", "poses_b", "frames", "correspondences", "poses"):
        if getattr(ns, k, None):
            setattr(ns, k, Path(getattr(ns, k)))
    COMMANDS[manifest["command"]](ns)


COMMANDS = {
    "masks": cmd_masks,
    "toy-sample": cmd_toy_sample,
    "epi-error": cmd_epi_error,
    "fold": cmd_fold,
    "homog": cmd_homog,
    "schedule-dump": cmd_schedule_dump,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (required for stochastic commands)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("--config", type=Path, default=None, help="JSON file of option defaults; flags win")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="collabdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("masks", parents=[common], help="epipolar attention masks per frame pair")
    p.add_argument("--poses-a", type=Path, required=True)
    p.add_argument("--poses-b", type=Path, required=True)
    p.add_argument("--image-size", type=_size, required=True, help="WxH pixels")
    p.add_argument("--feature-size", type=_size, default=(16, 16), help="WxH feature grid")
    p.add_argument("--tau", type=float, default=3.0, help="threshold in image pixels")

    p = subs.add_parser("toy-sample", parents=[common], help="collaborative sampling on the Gaussian toy world")
    p.add_argument("--M", type=int, default=2)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--strategy", choices=STRATEGIES, default="partition")
    p.add_argument("--R", type=int, default=1)
    p.add_argument("--Q", type=int, default=1)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--schedule", choices=("scaled_linear", "linear"), default="scaled_linear")
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--n", type=int, default=10000, help="number of independent runs")
    p.add_argument("--weight-scale", type=float, default=1.0, help="multiply aggregation weights (1 = compliant)")
    p.add_argument("--sweep-rho", type=_floats, default=None, help="comma-separated rho values")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = subs.add_parser("epi-error", parents=[common], help="symmetric epipolar error of correspondences")
    p.add_argument("--correspondences", type=Path, required=True)
    p.add_argument("--poses-a", type=Path, required=True)
    p.add_argument("--poses-b", type=Path, required=True)
    p.add_argument("--image-size", type=_size, required=True)

    p = subs.add_parser("fold", parents=[common], help="fold 2N-1 frames into two N-frame clips")
    p.add_argument("--frames", type=Path, required=True, help="directory of PNG frames")
    p.add_argument("--poses", type=Path, default=None)

    p = subs.add_parser("homog", parents=[common], help="homography-augmented clone of a clip")
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--t-scale", type=float, default=DEFAULT_SCALES["t"])
    p.add_argument("--theta-scale", type=float, default=DEFAULT_SCALES["theta"])
    p.add_argument("--s-scale", type=float, default=DEFAULT_SCALES["s"])
    p.add_argument("--sh-scale", type=float, default=DEFAULT_SCALES["sh"])
    p.add_argument("--p-scale", type=float, default=DEFAULT_SCALES["p"])

    p = subs.add_parser("schedule-dump", parents=[common], help="write t,beta,alpha_bar")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--style", choices=("scaled_linear", "linear"), default="scaled_linear")
    p.add_argument("--beta-start", type=float, default=8.5e-4)
    p.add_argument("--beta-end", type=float, default=1.2e-2)

    p = subs.add_parser("replay", parents=[common], help="re-run a command from its manifest")
    p.add_argument("manifest", type=Path)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, ValueError, GeometryError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
