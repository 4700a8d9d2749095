"""Command line entry point: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 input or validation error, 1 runtime error.
Errors are emitted as a single JSON object on stderr. A JSON file passed
via --config may replace any flag of the subcommand; explicit flags win
over config values, and unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import formats
from .audio2param import (A2PConfig, A2PTrainConfig, A2PTrainItem, animate, train)
from .errors import HeadSplatError, InputError, ParameterError
from .fitter import FitConfig, TrainingFrame, fit, loss_curve_csv
from .head_model import HeadParams, synthetic_head, TemplateMesh
from .stability import (StabilityConfig, stability_score, track_centroid)
from . import synth as synth_mod

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2


class _CliInputError(Exception):
    """Argument/validation failure destined for exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliInputError(message)


def _emit_error(exit_code: int, kind: str, message: str) -> None:
    doc = {"error": {"exit_code": exit_code, "type": kind, "message": message}}
    print(json.dumps(doc), file=sys.stderr)


def _parse_triplet(text: str, name: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise _CliInputError("%s must be 'r,g,b'" % name)
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise _CliInputError("%s must be numeric 'r,g,b'" % name)


def _parse_roi(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 4:
        raise _CliInputError("--roi must be 'x,y,w,h'")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise _CliInputError("--roi must be integer 'x,y,w,h'")


# ---------------------------------------------------------------------------
# Parser construction. Each subcommand declares its flags once; a second
# pass with suppressed defaults identifies which flags were given
# explicitly so --config can fill in the rest.


def _add_common(p: argparse.ArgumentParser, d) -> None:
    p.add_argument("--seed", type=int, default=d(0),
                   help="seed for all randomness in this subcommand")
    p.add_argument("--threads", type=int, default=d(1),
                   help="worker threads; outputs do not depend on this")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file whose keys replace flags")


def _build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}

    def d(value):
        return argparse.SUPPRESS if suppress else value
    top = _Parser(prog="headsplat", description=__doc__, **kw)
    sub = top.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate synthetic inputs", **kw)
    p.add_argument("--case", choices=["identity", "head", "features", "wobble"],
                   required=not suppress)
    p.add_argument("--out", type=str, required=not suppress)
    p.add_argument("--num-frames", type=int, default=d(48))
    p.add_argument("--amplitude", type=float, default=d(0.0))
    p.add_argument("--views", type=int, default=d(8))
    p.add_argument("--image-size", type=int, default=d(64))
    p.add_argument("--audio-dim", type=int, default=d(29))
    p.add_argument("--head-kind", choices=["sphere", "box"], default=d("sphere"))
    _add_common(p, d)

    p = sub.add_parser("fit", help="fit an avatar to posed training frames", **kw)
    p.add_argument("--frames", type=str, required=not suppress,
                   help="directory of NAME.png / NAME.camera.json pairs")
    p.add_argument("--template", type=str, required=not suppress)
    p.add_argument("--basis", type=str, required=not suppress)
    p.add_argument("--params", type=str, default=d(None),
                   help="per-frame head parameter sequence (default: neutral)")
    p.add_argument("--out", type=str, required=not suppress)
    p.add_argument("--iterations", type=int, default=d(2000))
    p.add_argument("--lambda-l1", type=float, default=d(0.8))
    p.add_argument("--lambda-ssim", type=float, default=d(0.2))
    p.add_argument("--densify-start", type=int, default=d(500))
    p.add_argument("--densify-stop", type=int, default=d(5000))
    p.add_argument("--densify-interval", type=int, default=d(200))
    p.add_argument("--prune-alpha-min", type=float, default=d(0.005))
    p.add_argument("--no-head-param-opt", action="store_true", default=d(False))
    p.add_argument("--background", type=str, default=d("0,0,0"))
    p.add_argument("--loss-csv", type=str, default=d(None))
    _add_common(p, d)

    p = sub.add_parser("render", help="render an avatar PLY from a camera", **kw)
    p.add_argument("--avatar", type=str, required=not suppress)
    p.add_argument("--camera", type=str, required=not suppress)
    p.add_argument("--out", type=str, required=not suppress)
    p.add_argument("--background", type=str, default=d("0,0,0"))
    _add_common(p, d)

    p = sub.add_parser("train-a2p", help="train the audio-to-parameter model", **kw)
    p.add_argument("--features", type=str, required=not suppress)
    p.add_argument("--gt-params", type=str, required=not suppress)
    p.add_argument("--template", type=str, required=not suppress)
    p.add_argument("--basis", type=str, required=not suppress)
    p.add_argument("--out", type=str, required=not suppress)
    p.add_argument("--steps", type=int, default=d(5000))
    p.add_argument("--lr", type=float, default=d(1e-4))
    p.add_argument("--model-dim", type=int, default=d(64))
    p.add_argument("--layers", type=int, default=d(4))
    p.add_argument("--heads", type=int, default=d(4))
    p.add_argument("--period", type=int, default=d(30))
    p.add_argument("--loss-csv", type=str, default=d(None))
    _add_common(p, d)

    p = sub.add_parser("animate", help="drive an avatar from audio features", **kw)
    p.add_argument("--weights", type=str, required=not suppress)
    p.add_argument("--avatar", type=str, required=not suppress,
                   help="avatar PLY with its .bind.json sidecar")
    p.add_argument("--audio-features", type=str, required=not suppress)
    p.add_argument("--ref-motion", type=str, required=not suppress)
    p.add_argument("--camera", type=str, required=not suppress)
    p.add_argument("--out", type=str, required=not suppress)
    p.add_argument("--lip-only", action="store_true", default=d(False))
    p.add_argument("--background", type=str, default=d("0,0,0"))
    _add_common(p, d)

    p = sub.add_parser("stability", help="score keypoint trajectory stability", **kw)
    p.add_argument("--gen", type=str, default=d(None), help="generated trajectory CSV")
    p.add_argument("--gen-frames", type=str, default=d(None),
                   help="directory of frames to track instead of --gen")
    p.add_argument("--roi", type=str, default=d(None),
                   help="x,y,w,h tracker window (with --gen-frames)")
    p.add_argument("--gt", type=str, default=d(None), help="ground-truth trajectory CSV")
    p.add_argument("--no-gt", action="store_true", default=d(False))
    p.add_argument("--cutoff", type=float, default=d(0.4))
    p.add_argument("--out", type=str, default=d(None))
    _add_common(p, d)

    return top


def _merge_config(args: argparse.Namespace, explicit: argparse.Namespace) -> argparse.Namespace:
    """defaults < config file < explicitly passed flags."""
    config_path = getattr(args, "config", None)
    if config_path is None:
        return args
    try:
        with open(config_path, "r") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise _CliInputError("config file not found: %s" % config_path)
    except json.JSONDecodeError as exc:
        raise _CliInputError("config %s: bad JSON at line %d" % (config_path, exc.lineno))
    if not isinstance(doc, dict):
        raise _CliInputError("config %s: top level must be an object" % config_path)
    known = set(vars(args)) - {"subcommand", "config"}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise _CliInputError("config %s: unknown key '%s'" % (config_path, key))
        if not hasattr(explicit, dest):  # flag not given on the command line
            setattr(args, dest, value)
    return args


# ---------------------------------------------------------------------------
# Subcommands


def _load_frames_dir(frames_dir: str, params_path: Optional[str],
                     num_shape: int, num_expression: int) -> List[TrainingFrame]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise InputError("frames directory not found: %s" % frames_dir)
    pngs = sorted(d.glob("*.png"))
    if not pngs:
        raise InputError("%s: no .png frames found" % frames_dir)
    if params_path is not None:
        params, _ = formats.read_params_sequence(params_path)
        if len(params) < len(pngs):
            raise InputError("%s: %d params for %d frames"
                             % (params_path, len(params), len(pngs)))
    else:
        params = [HeadParams.zeros(num_shape, num_expression) for _ in pngs]
    frames = []
    for i, png in enumerate(pngs):
        cam_path = png.with_name(png.stem + ".camera.json")
        if not cam_path.exists():
            raise InputError("missing camera file %s" % cam_path)
        frames.append(TrainingFrame(target=formats.read_image(png),
                                    camera=formats.read_camera(cam_path),
                                    params=params[i]))
    return frames


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.case == "head":
        template, basis = synthetic_head(seed=args.seed, kind=args.head_kind)
        formats.write_obj(out / "template.obj", template.vertices, template.triangles)
        formats.write_basis(out / "basis.bin", basis)
    elif args.case == "features":
        feats = synth_mod.synthetic_features(args.num_frames, audio_dim=args.audio_dim,
                                             seed=args.seed)
        formats.write_features(out / "features.bin", feats)
    elif args.case == "wobble":
        frames, gt = synth_mod.blob_clip(num_frames=args.num_frames,
                                         size=args.image_size,
                                         amplitude=args.amplitude, seed=args.seed)
        for i, img in enumerate(frames):
            formats.write_image(out / ("frame_%03d.png" % i), img)
        formats.write_trajectory(out / "gt.csv", gt)
        with open(out / "meta.json", "w") as fh:
            json.dump({"amplitude": args.amplitude,
                       "roi": [4, args.image_size // 4,
                               args.image_size - 8, args.image_size // 2]}, fh)
    elif args.case == "identity":
        template, basis, bound, cameras, features, gt_motion, ref_motion = \
            synth_mod.identity_bundle(seed=args.seed, kind=args.head_kind,
                                      num_frames=args.num_frames)
        cameras = synth_mod.camera_ring(num_views=args.views,
                                        width=args.image_size, height=args.image_size)
        formats.write_obj(out / "template.obj", template.vertices, template.triangles)
        formats.write_basis(out / "basis.bin", basis)
        formats.write_features(out / "features.bin", features)
        formats.write_params_sequence(out / "gt_params.bin", gt_motion)
        formats.write_params_sequence(out / "ref_motion.bin", ref_motion)
        formats.write_camera(out / "camera.json", cameras[0])
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        images = synth_mod.render_ground_truth(bound, template, basis, cameras)
        for i, (img, cam) in enumerate(zip(images, cameras)):
            formats.write_image(frames_dir / ("view_%03d.png" % i), img)
            formats.write_camera(frames_dir / ("view_%03d.camera.json" % i), cam)
        formats.write_avatar(out / "avatar_gt.ply", bound, template, basis,
                             HeadParams.zeros(basis.shape_basis.shape[2],
                                              basis.expression_basis.shape[2]))
    return EXIT_OK


def _cmd_fit(args) -> int:
    verts, tris = formats.read_obj(args.template)
    template = TemplateMesh(vertices=verts, triangles=tris)
    basis = formats.read_basis(args.basis)
    frames = _load_frames_dir(args.frames, args.params,
                              basis.shape_basis.shape[2],
                              basis.expression_basis.shape[2])
    config = FitConfig(
        iterations=args.iterations,
        lambda_l1=args.lambda_l1,
        lambda_ssim=args.lambda_ssim,
        densify_start=args.densify_start,
        densify_stop=args.densify_stop,
        densify_interval=args.densify_interval,
        prune_alpha_min=args.prune_alpha_min,
        optimize_head_params=not args.no_head_param_opt,
        seed=args.seed,
        threads=args.threads,
    )
    background = _parse_triplet(args.background, "--background")
    result = fit(frames, template, basis, config, background=background)
    formats.write_avatar(args.out, result.scene, template, basis,
                         HeadParams.zeros(basis.shape_basis.shape[2],
                                          basis.expression_basis.shape[2]))
    if args.loss_csv:
        with open(args.loss_csv, "w") as fh:
            fh.write(loss_curve_csv(result.loss_curve))
    return EXIT_OK


def _cmd_render(args) -> int:
    from .rasterizer import render
    scene = formats.read_ply(args.avatar)
    camera = formats.read_camera(args.camera)
    background = _parse_triplet(args.background, "--background")
    formats.write_image(args.out, render(scene, camera, background=background))
    return EXIT_OK


def _cmd_train_a2p(args) -> int:
    features = formats.read_features(args.features)
    gt_params, _ = formats.read_params_sequence(args.gt_params)
    verts, tris = formats.read_obj(args.template)
    template = TemplateMesh(vertices=verts, triangles=tris)
    basis = formats.read_basis(args.basis)
    if len(gt_params) != features.num_frames:
        raise InputError("features have %d frames but gt-params %d"
                         % (features.num_frames, len(gt_params)))
    model_config = A2PConfig(
        audio_dim=features.dim, model_dim=args.model_dim, layers=args.layers,
        heads=args.heads, period=args.period,
        num_expression=basis.expression_basis.shape[2],
        num_vertices=template.vertices.shape[0])
    item = A2PTrainItem(audio=features, gt_params=gt_params,
                        template=template, basis=basis)
    weights, curve = train([item],
                           A2PTrainConfig(steps=args.steps,
                                          learning_rate=args.lr, seed=args.seed),
                           model_config=model_config)
    formats.write_weights(args.out, weights)
    if args.loss_csv:
        with open(args.loss_csv, "w") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(curve):
                fh.write("%d,%.10g\n" % (i, v))
    return EXIT_OK


def _cmd_animate(args) -> int:
    weights = formats.read_weights(args.weights)
    bound, template, basis, _ = formats.read_avatar(args.avatar)
    features = formats.read_features(args.audio_features)
    ref_motion, _ = formats.read_params_sequence(args.ref_motion)
    camera = formats.read_camera(args.camera)
    background = _parse_triplet(args.background, "--background")
    frames, params_used = animate(features, template, basis, bound, weights,
                                  ref_motion, camera, background=background,
                                  lip_only=args.lip_only)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(frames):
        formats.write_image(out / ("frame_%03d.png" % i), img)
    formats.write_params_sequence(out / "params_used.bin", params_used,
                                  frame_rate=features.frame_rate)
    return EXIT_OK


def _cmd_stability(args) -> int:
    if (args.gen is None) == (args.gen_frames is None):
        raise _CliInputError("need exactly one of --gen or --gen-frames")
    if args.gen_frames is not None:
        if args.roi is None:
            raise _CliInputError("--gen-frames requires --roi x,y,w,h")
        d = Path(args.gen_frames)
        pngs = sorted(d.glob("*.png"))
        if not pngs:
            raise InputError("%s: no .png frames found" % args.gen_frames)
        gen = track_centroid([formats.read_image(p) for p in pngs],
                             roi=_parse_roi(args.roi))
    else:
        gen = formats.read_trajectory(args.gen)
    if args.no_gt:
        gt = None
    elif args.gt is not None:
        gt = formats.read_trajectory(args.gt)
    else:
        raise _CliInputError("need --gt or --no-gt")
    report = stability_score(gen, gt, StabilityConfig(cutoff_fraction=args.cutoff))
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


_DISPATCH = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "render": _cmd_render,
    "train-a2p": _cmd_train_a2p,
    "animate": _cmd_animate,
    "stability": _cmd_stability,
}


def main(argv: Optional[List[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = _build_parser().parse_args(argv)
        explicit = _build_parser(suppress=True).parse_args(argv)
        args = _merge_config(args, explicit)
        return _DISPATCH[args.subcommand](args)
    except _CliInputError as exc:
        _emit_error(EXIT_INPUT, "input", str(exc))
        return EXIT_INPUT
    except (InputError, ParameterError, FileNotFoundError, ValueError) as exc:
        _emit_error(EXIT_INPUT, "input", str(exc))
        return EXIT_INPUT
    except HeadSplatError as exc:
        _emit_error(EXIT_RUNTIME, "runtime", str(exc))
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - last-resort guard
        _emit_error(EXIT_RUNTIME, "runtime", "%s: %s" % (type(exc).__name__, exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
