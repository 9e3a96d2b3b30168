"""Single executable for the whole pipeline.

Subcommands: synth, pattern, encode, train, render, eval, gradcheck,
serve. Every run first prints its effective configuration (flags plus
defaults) as one JSON line. Exit codes: 0 success, 2 usage/config error,
3 runtime error. CODEDLF_THREADS caps BLAS parallelism and must be
applied before numpy loads, so the heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


def _cap_threads() -> None:
    cap = os.environ.get("CODEDLF_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _apply_override(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# subcommands (heavy imports are local so CODEDLF_THREADS can act first)

def cmd_synth(args) -> int:
    from .lightfield import load_scene_spec, save_lightfield, synth_lightfield

    spec = load_scene_spec(_require_file(args.spec, "scene spec"))
    lf = synth_lightfield(spec, args.grid[0], args.grid[1], args.size[0],
                          args.size[1], seed=args.seed)
    save_lightfield(lf, args.out, bit_depth=args.bit_depth)
    print(json.dumps({"event": "synthesized", "out": args.out,
                      "views": list(lf.grid), "size": list(lf.image_size)}))
    return 0


def cmd_pattern(args) -> int:
    from .coding import make_default_pattern, save_pattern

    pat = make_default_pattern(args.k, args.grid[0], args.grid[1], args.size[0],
                               args.size[1], tile=args.tile, seed=args.seed)
    save_pattern(pat, args.out)
    print(json.dumps({"event": "pattern_written", "out": args.out, "k": pat.k}))
    return 0


def cmd_encode(args) -> int:
    from . import coding
    from .imgfile import CODED_MAGIC, write_f32_map, write_unit_png16
    from .lightfield import load_lightfield

    lf = load_lightfield(_require_file(args.lf, "light-field directory"))
    pattern = None
    if args.mode == "joint":
        if not args.pattern:
            raise UsageError("--pattern is required for joint mode")
        pattern = coding.load_pattern(_require_file(args.pattern, "pattern file"))
        pattern = pattern.with_size(*lf.image_size)
    image = coding.normalize(coding.encode(lf, args.mode, pattern))
    write_unit_png16(args.out, image)
    write_f32_map(_sidecar(args.out), image, CODED_MAGIC)
    print(json.dumps({"event": "encoded", "out": args.out,
                      "sidecar": _sidecar(args.out), "mode": args.mode}))
    return 0


def _sidecar(png_path: str) -> str:
    base = png_path[:-4] if png_path.endswith(".png") else png_path
    return base + ".f32"


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    with open(_require_file(args.config, "train config"), "r", encoding="utf-8") as f:
        doc = json.load(f)
    for item in args.override or []:
        key, value = _parse_override(item)
        _apply_override(doc, key, value)
    config = TrainConfig.from_json_dict(doc)
    config.validate()
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    ckpt = train(config, out_dir=out_dir, resume_from=args.resume)
    log_path = os.path.join(out_dir, "losslog.csv")
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("step,loss,lr,wall_ms\n")
        for step, loss, lr, wall_ms in ckpt.meta["loss_history"]:
            f.write(f"{step},{loss!r},{lr!r},{wall_ms:.3f}\n")
    final_loss = ckpt.meta["loss_history"][-1][1] if ckpt.meta["loss_history"] else None
    print(json.dumps({"event": "trained", "checkpoint": os.path.join(out_dir, "final.ckpt"),
                      "steps": ckpt.meta["steps_done"], "final_loss": final_loss,
                      "losslog": log_path}))
    return 0


def _load_observation(args, ckpt):
    import numpy as np

    from . import coding
    from .imgfile import CODED_MAGIC, read_f32_map
    from .lightfield import load_lightfield

    if args.lf:
        lf = load_lightfield(_require_file(args.lf, "light-field directory"))
        pattern = (ckpt.pattern.with_size(*lf.image_size)
                   if ckpt.pattern is not None else None)
        return coding.normalize(coding.encode(lf, ckpt.input_mode, pattern))
    if args.coded:
        return read_f32_map(_require_file(args.coded, "coded image"),
                            CODED_MAGIC).astype(np.float64)
    raise UsageError("one of --lf or --coded is required")


def cmd_render(args) -> int:
    from .imgfile import DEPTH_MAGIC, write_f32_map, write_unit_png16
    from .rendering import pseudo_depth_to_unit, render_view
    from .training import checkpoint_feature_volume, load_checkpoint

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    image = _load_observation(args, ckpt)
    dtype = "float32" if ckpt.meta.get("dtype", "float32") == "float32" else "float64"
    volume, store = checkpoint_feature_volume(ckpt, image.astype(dtype))
    h, w = image.shape
    view, depth = render_view(volume, store, ckpt.nerfnet, (args.u, args.v),
                              w, h, ckpt.render)
    write_unit_png16(args.out, view)
    outputs = {"event": "rendered", "out": args.out, "u": args.u, "v": args.v}
    if args.depth:
        write_unit_png16(args.depth, pseudo_depth_to_unit(depth, ckpt.render))
        write_f32_map(args.depth + ".lfdm", depth, DEPTH_MAGIC)
        outputs["depth"] = args.depth
        outputs["depth_raw"] = args.depth + ".lfdm"
    print(json.dumps(outputs))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import eval_grid, save_heatmap
    from .lightfield import load_scene_spec
    from .training import load_checkpoint

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    scene = load_scene_spec(_require_file(args.scene, "scene spec"))
    report = eval_grid(ckpt, scene, m=args.grid, step=args.step,
                       height=args.size[0], width=args.size[1],
                       checkpoint_id=args.ckpt, scene_id=args.scene)
    report.save(args.out)
    if args.heatmap:
        save_heatmap(report.psnr_grid, args.heatmap)
    print(json.dumps({"event": "evaluated", "report": args.out,
                      "mean_psnr": report.mean_psnr if report.mean_psnr != float("inf")
                      else "inf", "mean_ssim": report.mean_ssim,
                      "warnings": report.warnings}))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite

    result = run_gradcheck_suite(seed=args.seed, eps=args.eps)
    if args.json:
        print(json.dumps(result))
    else:
        for name, err in sorted(result["ops"].items()):
            print(f"op {name:<18} max_rel_err {err:.3e}")
        print(f"worst op: {result['worst_op']} ({result['worst_op_error']:.3e}, "
              f"tolerance {result['op_tolerance']:.0e})")
        print(f"pipeline max_rel_err {result['pipeline']:.3e} "
              f"(tolerance {result['pipeline_tolerance']:.0e})")
        print("PASS" if result["passed"] else "FAIL")
    if not result["passed"]:
        raise RuntimeError("gradient check failed")
    return 0


def cmd_serve(args) -> int:
    from .server import RenderService, make_server
    from .training import load_checkpoint

    ckpt = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    image = _load_observation(args, ckpt)
    service = RenderService(ckpt, image, u_range=tuple(args.u_range),
                            v_range=tuple(args.v_range))
    web = args.web if args.web and os.path.isdir(args.web) else None
    httpd = make_server(service, host=args.host, port=args.port, web_dir=web)
    print(json.dumps({"event": "serving", "host": args.host,
                      "port": httpd.server_address[1], "web": web}))
    sys.stdout.flush()
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codedlf",
                                     description="continuous light fields from one coded image")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a light field from a scene spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", nargs=2, type=int, default=[5, 5], metavar=("U", "V"))
    p.add_argument("--size", nargs=2, type=int, default=[48, 48], metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bit-depth", type=int, default=16, choices=(8, 16))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pattern", help="generate a default coding pattern")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--grid", nargs=2, type=int, default=[5, 5], metavar=("U", "V"))
    p.add_argument("--size", nargs=2, type=int, default=[48, 48], metavar=("H", "W"))
    p.add_argument("--tile", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pattern)

    p = sub.add_parser("encode", help="simulate the coded observation")
    p.add_argument("--lf", required=True)
    p.add_argument("--mode", required=True, choices=("joint", "uncoded", "center"))
    p.add_argument("--pattern")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train FeatNet + NeRFNet end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one continuous viewpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lf")
    p.add_argument("--coded")
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--v", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="viewpoint-grid evaluation against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--grid", type=int, default=13)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--size", nargs=2, type=int, default=[48, 48], metavar=("H", "W"))
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="HTTP render service for the viewer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lf")
    p.add_argument("--coded")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--web", default="web")
    p.add_argument("--u-range", nargs=2, type=float, default=[-3.0, 3.0])
    p.add_argument("--v-range", nargs=2, type=float, default=[-3.0, 3.0])
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    effective = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"effective_config": effective}, sort_keys=True, default=str))
    try:
        return args.func(args)
    except UsageError as e:
        print(json.dumps({"error": str(e), "kind": "usage"}), file=sys.stderr)
        return 2
    except Exception as e:  # config errors -> 2, anything else -> 3
        from .coding import CodingError
        from .imgfile import FileFormatError
        from .lightfield import LightFieldError
        from .models import ModelConfigError
        from .rendering import RenderError
        from .training import CheckpointError, TrainError

        config_errors = (CodingError, LightFieldError, ModelConfigError,
                         TrainError, FileNotFoundError, ValueError,
                         CheckpointError, FileFormatError, RenderError)
        kind = "config" if isinstance(e, config_errors) else "runtime"
        print(json.dumps({"error": str(e), "kind": kind}), file=sys.stderr)
        return 2 if kind == "config" else 3


if __name__ == "__main__":
    sys.exit(main())
