"""Command-line entry point: ``s2neck <command> [flags]``.

Every command resolves a ``RunConfig`` (defaults < ``--config`` file <
``--set key=value`` < dedicated flags), prints it, writes it under ``--out``
and then does its work.  Exit status: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import os

# must happen before numpy loads its BLAS
_THREADS = os.environ.get("S2NECK_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

log = logging.getLogger("s2neck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON file of flat dotted keys")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key; VALUE is parsed as JSON when possible")
    p.add_argument("--seed", type=int, help="master seed (config key 'seed')")
    p.add_argument("--data", metavar="DIR", help="dataset directory (config key 'data.path')")
    p.add_argument("--out", metavar="DIR", default=out_default, help=f"output directory (default {out_default})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="s2neck", description="Scale-sequence feature neck: toy detection experiments.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render the synthetic shapes dataset")
    _common(p, "data/default")
    p.add_argument("--n-train", type=int, help="training images (config key 'data.n_train')")
    p.add_argument("--n-val", type=int, help="validation images (config key 'data.n_val')")

    p = sub.add_parser("train", help="train one detector and evaluate it on the val split")
    _common(p, "runs/train")
    p.add_argument("--s2", type=_on_off, metavar="on|off", help="attach the S2 module (config key 'model.s2')")
    p.add_argument("--neck", choices=("pan", "fpn"), help="neck type (config key 'model.neck')")
    p.add_argument("--epochs", type=int, help="config key 'train.epochs'")
    p.add_argument("--max-iters", type=int, help="stop after this many iterations (config key 'train.max_iters')")
    p.add_argument("--no-eval", action="store_true", help="skip validation after training")

    p = sub.add_parser("eval", help="evaluate a checkpoint: report.json and a PR-curve SVG")
    _common(p, "runs/eval")
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint file or a train run directory")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")

    p = sub.add_parser("ablate", help="train every variant of one ablation axis over several seeds")
    _common(p, "runs/ablate")
    p.add_argument("--axis", choices=("concat-position", "neck", "s2"), required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed (default 3)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")

    p = sub.add_parser("bench", help="forward-pass wallclock with and without S2")
    _common(p, "runs/bench")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)

    p = sub.add_parser("scalespace", help="blur one image over a range of sigmas")
    _common(p, "runs/scalespace")
    p.add_argument("--image", metavar="PPM", help="input image (default: first image of the dataset)")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p, "runs/gradcheck")
    p.add_argument("--module", default="all", help="check name or 'all'")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace):
    from .config import RunConfig

    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    flags = {
        "seed": args.seed, "data.path": args.data,
        "model.s2": getattr(args, "s2", None), "model.neck": getattr(args, "neck", None),
        "train.epochs": getattr(args, "epochs", None), "train.max_iters": getattr(args, "max_iters", None),
        "data.n_train": getattr(args, "n_train", None), "data.n_val": getattr(args, "n_val", None),
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    if args.command == "gen-data":
        overrides["data.path"] = args.out
    return cfg.with_overrides(overrides)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg, args) -> None:
    from .data import generate_dataset

    out = generate_dataset(cfg.manifest(), cfg["data.path"])
    (out / "config.json").write_text(cfg.to_json())
    print(f"wrote {cfg.manifest().n_images} images to {out}")


def cmd_train(cfg, args) -> None:
    from .runner import run_training

    result = run_training(cfg, Path(args.out), evaluate=not args.no_eval)
    print(f"params {result['params']}  loss {result['initial_loss']:.4f} -> {result['final_loss']:.4f}")
    if "report" in result:
        r = result["report"]
        print("  ".join(f"{k} {r[k]:.4f}" for k in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")))


def _checkpoint_path(path: Path) -> Path:
    return path / "checkpoint.s2ckpt" if path.is_dir() else path


def cmd_eval(cfg, args) -> None:
    from .config import RunConfig
    from .data import load_dataset
    from .detector import Detector, predict
    from .metrics import RECALL_POINTS, detections_from_predictions, evaluate_ap, pr_curves
    from .plots import pr_curves as plot_pr
    from .runner import ensure_dataset
    from .serialize import load_checkpoint

    state, manifest = load_checkpoint(_checkpoint_path(Path(args.checkpoint)))
    model_cfg = RunConfig(manifest.get("config") or {})
    model = Detector(model_cfg.detector(), seed=model_cfg.model_seed())
    model.load_state_dict(state)
    ds = ensure_dataset(cfg, args.split) if args.split != "all" else load_dataset(cfg["data.path"], "all")
    preds = []
    for start in range(0, len(ds), 32):
        idx = range(start, min(start + 32, len(ds)))
        preds += predict(model, ds.batch(idx), cfg["eval.score_threshold"], cfg["eval.nms_iou"])
    dets = detections_from_predictions(ds.ids, preds)
    report = evaluate_ap(dets, ds.gts, bucket_thresholds=ds.manifest.bucket_thresholds)
    out = Path(args.out)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    names = ds.manifest.class_names
    curves = {names[k]: q for k, q in sorted(pr_curves(dets, ds.gts, 0.5).items())}
    plot_pr(out / "pr_curve.svg", RECALL_POINTS, curves, "precision-recall at IoU 0.5")
    print("  ".join(f"{k} {getattr(report, k):.4f}" for k in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")))


def cmd_ablate(cfg, args) -> None:
    from .evaluation import run_ablation

    if args.seeds < 1 or args.workers < 1:
        raise UsageError("--seeds and --workers must be positive")
    seeds = [cfg["seed"] + i for i in range(args.seeds)]
    table = run_ablation(args.axis, cfg, seeds, args.out, workers=args.workers)
    for row in table:
        if row["seed"] == "mean":
            print(f"{row['variant']:<14} AP {row['AP']:.4f}  AP_S {row['AP_S']:.4f}  "
                  f"delta_AP_S {row['delta_AP_S']:+.4f}  params {row['params']}")


def cmd_bench(cfg, args) -> None:
    from .detector import Detector
    from .evaluation import bench_runtime, count_params, write_bench_csv

    results = []
    for label, s2 in (("baseline", False), ("s2", True)):
        model = Detector(cfg.with_overrides({"model.s2": s2}).detector(), seed=cfg.model_seed())
        r = bench_runtime(model, args.batch, args.iterations, args.warmup, cfg["data.image_size"], label,
                          cfg["seed"])
        results.append(r)
        print(f"{label:<9} params {count_params(model)[0]:>7}  median {r.median_ms:.3f} ms/img  "
              f"p95 {r.p95_ms:.3f} ms/img")
    write_bench_csv(Path(args.out) / "bench.csv", results)
    print(f"S2 overhead {results[1].median_ms - results[0].median_ms:+.3f} ms/img")


def cmd_scalespace(cfg, args) -> None:
    import numpy as np

    from .data import decode_ppm, encode_pgm
    from .runner import ensure_dataset
    from .scalespace import build_scale_space, total_variation
    from .tensor import Tensor

    if args.image:
        rgb = decode_ppm(Path(args.image).read_bytes(), args.image)
    else:
        rgb = ensure_dataset(cfg, "train").pixels[0]
    gray = Tensor(rgb.astype(np.float64).mean(axis=2) / 255.0)
    space = build_scale_space(gray, sorted(args.sigmas))
    out = Path(args.out)
    summary = []
    for sigma, s in zip(space.sigmas, space.slices):
        name = f"sigma_{sigma:g}.pgm"
        (out / name).write_bytes(encode_pgm(np.clip(np.round(s.data * 255.0), 0, 255).astype(np.uint8)))
        summary.append({"sigma": sigma, "file": name, "mean": float(s.data.mean()),
                        "total_variation": total_variation(s)})
        print(f"sigma {sigma:g}: mean {s.data.mean():.6f}  total variation {total_variation(s):.3f}")
    (out / "scalespace.json").write_text(json.dumps(summary, indent=1) + "\n")


def cmd_gradcheck(cfg, args) -> int:
    from .checks import CHECKS, run_check

    names = CHECKS if args.module == "all" else (args.module,)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown check {unknown[0]!r}; choose from all, {', '.join(CHECKS)}")
    failed = 0
    rows = []
    for name in names:
        err = run_check(name, cfg["seed"], args.epsilon)
        ok = bool(err < args.tolerance)
        failed += not ok
        rows.append({"check": name, "max_rel_err": err, "pass": ok})
        print(f"{name:<16} max rel-err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    (Path(args.out) / "gradcheck.json").write_text(json.dumps(rows, indent=1) + "\n")
    return 2 if failed else 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "scalespace": cmd_scalespace, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .config import ConfigError

    try:
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as err:
        parser.print_usage(sys.stderr)
        print(f"s2neck: error: {err}", file=sys.stderr)
        return 1
    print(cfg.to_json(), end="")
    out = Path(args.out)
    try:
        if args.command != "gen-data":
            from .runner import write_run_stamp
            write_run_stamp(cfg, out)
        code = COMMANDS[args.command](cfg, args)
    except UsageError as err:
        print(f"s2neck: error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # any runtime failure maps to exit status 2
        log.debug("failure", exc_info=True)
        print(f"s2neck: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
