"""Command-line entry point orchestrating every subsystem.

Each subcommand writes a run-manifest JSON (flags, seeds, version, input
hashes) next to its outputs so any result can be traced back to the exact
invocation. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__


def _hash_file(path) -> str | None:
    try:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    except OSError:
        return None


def write_run_manifest(out_dir, args: argparse.Namespace, inputs: list = ()) -> None:
    doc = {
        "tool": "dipaoi",
        "version": __version__,
        "command": sys.argv[1:],
        "flags": {k: v for k, v in vars(args).items() if k != "func"},
        "input_hashes": {str(p): _hash_file(p) for p in inputs},
        "timestamp": time.time(),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(Path(out_dir) / "run-manifest.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, default=str)


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import synth

    if args.profile == "paper":
        spec = synth.paper_spec(size=args.size, normal_count=args.normals)
    else:
        spec = synth.desk_spec(args.count, normal_count=args.normals, size=args.size)
    man = synth.generate_dataset(spec, args.out, seed=args.seed)
    write_run_manifest(args.out, args)
    print(json.dumps({"images": len(man.images), "out": args.out,
                      "manifest": str(Path(args.out) / "manifest.json")}))
    return 0


def cmd_split(args) -> int:
    from . import synth

    man = synth.Manifest.load(args.manifest)
    train, val, test = synth.split_dataset(man, ratios=tuple(args.ratios), seed=args.seed)
    base = Path(args.manifest).parent
    for name, part in (("train", train), ("val", val), ("test", test)):
        part.save(base / f"manifest.{name}.json")
    print(json.dumps({"train": len(train.images), "val": len(val.images),
                      "test": len(test.images)}))
    return 0


def cmd_augment(args) -> int:
    from . import augment, synth

    man = synth.Manifest.load(args.manifest)
    ops = args.ops.split(",")
    out = augment.augment_manifest(man, ops, args.out, seed=args.seed)
    write_run_manifest(args.out, args, inputs=[args.manifest])
    print(json.dumps({"inputs": len(man.images), "ops": ops, "outputs": len(out.images)}))
    return 0


def cmd_gan_train(args) -> int:
    from . import consingan as cg, synth
    from .imaging import load_image

    if not args.manifest and not args.image:
        raise CliError("gan train needs --image or --manifest")
    if args.manifest:
        man = synth.Manifest.load(args.manifest)
        metas = [m for m in man.images if m.boxes]
        if args.index >= len(metas):
            raise CliError(f"--index {args.index} out of range ({len(metas)} defect samples)")
        meta = metas[args.index]
        img = load_image(man.resolve(meta))
        source_meta = {"side": meta.side.value, "boxes": [b.as_dict() for b in meta.boxes],
                       "subject": meta.subject(), "path": meta.path}
    else:
        img = load_image(args.image)
        source_meta = {"side": "front", "boxes": [], "subject": "cli", "path": args.image}

    cfg = cg.paper_config(seed=args.seed) if args.profile == "paper" else cg.desk_config(seed=args.seed)
    if args.iters:
        cfg.iters_per_stage = args.iters
    if args.max_res:
        cfg.max_res = args.max_res
    if args.stages:
        cfg.num_stages = args.stages
    if args.jitter != "none":
        img, boxes = cg.jitter_source(img, [synth.Box.from_dict(b) for b in source_meta["boxes"]],
                                      args.jitter, args.seed)
        source_meta["boxes"] = [b.as_dict() for b in boxes]
        cfg.jitter = args.jitter
    pyramid, critic, reports = cg.train_pyramid(img, cfg, source_meta)
    cg.save_pyramid(pyramid, critic, args.out)
    write_run_manifest(args.out, args, inputs=[p for p in (args.manifest, args.image) if p])
    print(json.dumps({
        "out": args.out,
        "resolutions": pyramid.resolutions,
        "recon": [{"stage": r.stage, "start": r.recon_start, "end": r.recon_end}
                   for r in reports],
        "profile_lr": cfg.lr,
    }))
    return 0


def cmd_gan_sample(args) -> int:
    from . import consingan as cg

    pyramid = cg.load_pyramid(args.model)
    man = cg.sample_dataset(pyramid, args.count, seed=args.seed, out_dir=args.out)
    write_run_manifest(args.out, args)
    print(json.dumps({"samples": len(man.images), "out": args.out}))
    return 0


def cmd_detector_train(args) -> int:
    from . import detector as dt, synth

    man = synth.Manifest.load(args.manifest)
    cfg = dt.paper_config(seed=args.seed) if args.profile == "paper" else dt.desk_config(seed=args.seed)
    if args.max_batches is not None:
        cfg.max_batches = args.max_batches
    if args.input_res:
        cfg.input_res = args.input_res
    model, report = dt.train(man, cfg, out_dir=args.out)
    dt.save_model(model, args.out)
    write_run_manifest(args.out, args, inputs=[args.manifest])
    print(json.dumps({"out": args.out, "batches": report.batches,
                      "final_loss": report.losses[-1] if report.losses else None,
                      "aborted": report.aborted,
                      "hyperparameters": {"batch_size": cfg.batch_size, "input_res": cfg.input_res,
                                          "lr": cfg.lr, "max_batches": cfg.max_batches}}))
    return 0


def cmd_detector_eval(args) -> int:
    from . import detector as dt, synth
    from .evalkit import model_report_row, MetricsReport

    man = synth.Manifest.load(args.manifest)
    model = dt.load_model(args.model)
    res = dt.evaluate(model, man, iou_threshold=args.iou, conf_threshold=args.conf)
    rep = MetricsReport(map50=res["map50"], detection_time_ms=res["detection_time_ms"])
    row = model_report_row("grid_detector", rep)
    row["per_class_ap"] = res["per_class_ap"]
    print(json.dumps(row))
    return 0


def cmd_baseline_tune(args) -> int:
    from . import baseline, synth

    man = synth.Manifest.load(args.manifest)
    configs = baseline.tune_all_sides(man)
    baseline.save_configs(configs, args.config)
    print(json.dumps({"config": args.config, "sides": [c.side.value for c in configs]}))
    return 0


def cmd_baseline_run(args) -> int:
    from . import baseline, synth
    from .evalkit import side_report_row
    from .imaging import load_image

    man = synth.Manifest.load(args.manifest)
    configs = {c.side: c for c in baseline.load_configs(args.config)}
    rows = []
    total = errors_total = 0
    time_total = 0.0
    for side, cfg in configs.items():
        samples = [m for m in man.images if m.side == side]
        if not samples:
            continue
        errors = 0
        elapsed = 0.0
        for m in samples:
            img = load_image(man.resolve(m))
            t0 = time.perf_counter()
            verdict = baseline.classify(img, cfg).verdict
            elapsed += (time.perf_counter() - t0) * 1000.0
            truth = "defective" if m.boxes else "normal"
            errors += verdict != truth
        mean_ms = elapsed / len(samples)
        rows.append(side_report_row(side.value, len(samples), errors, mean_ms))
        total += len(samples)
        errors_total += errors
        time_total += mean_ms
    out = {"per_side": rows,
           "total": {"test_number": total,
                     "accuracy": (total - errors_total) / total * 100.0 if total else None,
                     "sum_of_sides_ms": time_total}}
    print(json.dumps(out))
    return 0


def cmd_simulate(args) -> int:
    from . import linesim as ls, synth

    if args.line:
        stations = ls.load_line_config(args.line)
    else:
        stations = ls.default_stations(nominal=args.timing == "nominal")
    line = ls.Line(stations, timing=args.timing)
    if args.manifest:
        man = synth.Manifest.load(args.manifest)
        wps = ls.workpieces_from_manifest(man, count=args.count)
    else:
        wps = ls.workpieces_from_renders(args.count or 20, size=args.size, seed=args.seed)
    summary = ls.run(line, wps, report_path=args.report, log_path=args.log)
    print(json.dumps(summary))
    return 0


def cmd_serve(args) -> int:
    from . import linesim as ls, synth
    from .service import ScadaService

    log_dir = os.environ.get("AOI_LOG_DIR", args.log)
    if args.line:
        stations = ls.load_line_config(args.line)
    else:
        stations = ls.default_stations(nominal=args.timing == "nominal")
    line = ls.Line(stations, timing=args.timing)
    feed = None
    if args.manifest:
        man = synth.Manifest.load(args.manifest)
        feed = ls.workpieces_from_manifest(man, count=args.feed_count)
    elif args.feed_count:
        feed = ls.workpieces_from_renders(args.feed_count, size=args.size, seed=args.seed)
    service = ScadaService(line, log_dir, tick_ms=args.tick_ms, feed=feed,
                           loop_feed=args.loop)
    service.start(args.port)
    print(json.dumps({"port": service.port, "log_dir": str(log_dir)}), flush=True)
    if args.autostart:
        service.owner.submit("start")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.shutdown()
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import nnkit_gradcheck_report

    report = nnkit_gradcheck_report(trials=args.trials, seed=args.seed)
    print(json.dumps(report, indent=1))
    return 0 if report["ok"] else 2


def cmd_experiment(args) -> int:
    from . import experiments as ex

    if args.name == "gan-fixture":
        res = ex.gan_fixture(seed=args.seed, iters=args.iters or 300)
        print(json.dumps(res.as_dict(), indent=1))
        return 0
    if args.name == "augmentation-benefit":
        res = ex.augmentation_benefit(args.out or "exp-augben", seeds=(1, 2, 3))
        print(json.dumps(res.as_dict(), indent=1))
        return 0
    if args.name == "baseline-separability":
        res = ex.baseline_separability(args.out or "exp-baseline", seed=args.seed)
        print(json.dumps(res.as_dict(), indent=1))
        return 0
    raise CliError(f"unknown experiment {args.name!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dipaoi",
                                description="Six-sided DIP optical inspection toolkit")
    p.add_argument("--json", action="store_true",
                   help="emit machine-readable errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=60)
    s.add_argument("--normals", type=int, default=12)
    s.add_argument("--size", type=int, default=416)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="stratified train/val/test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("augment", help="classical augmentation over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ops", default="flip,mirror",
                   help="comma list: flip,mirror,brightness,median,noise,blur")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment)

    gan = sub.add_parser("gan", help="single-image GAN augmentation")
    gsub = gan.add_subparsers(dest="gan_command", required=True)
    s = gsub.add_parser("train")
    s.add_argument("--image", help="source PPM path")
    s.add_argument("--manifest", help="pick source from a manifest instead")
    s.add_argument("--index", type=int, default=0, help="defect-sample index in manifest")
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--iters", type=int)
    s.add_argument("--stages", type=int)
    s.add_argument("--max-res", type=int, dest="max_res")
    s.add_argument("--jitter", default="none", choices=("none", "mirror", "flip", "rot90",
                                                         "translate", "scale", "noise"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gan_train)
    s = gsub.add_parser("sample")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gan_sample)

    det = sub.add_parser("detector", help="grid detector training and evaluation")
    dsub = det.add_subparsers(dest="detector_command", required=True)
    s = dsub.add_parser("train")
    s.add_argument("--manifest", required=True)
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--max-batches", type=int, dest="max_batches")
    s.add_argument("--input-res", type=int, dest="input_res")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_detector_train)
    s = dsub.add_parser("eval")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--conf", type=float, default=0.02)
    s.set_defaults(func=cmd_detector_eval)

    bl = sub.add_parser("baseline", help="threshold baseline tuning and runs")
    bsub = bl.add_subparsers(dest="baseline_command", required=True)
    s = bsub.add_parser("tune")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True, help="output config path")
    s.set_defaults(func=cmd_baseline_tune)
    s = bsub.add_parser("run")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_baseline_run)

    s = sub.add_parser("simulate", help="run the six-station line simulator")
    s.add_argument("--line", help="line config JSON")
    s.add_argument("--manifest", help="feed workpieces from a manifest")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--timing", choices=("nominal", "measured"), default="nominal")
    s.add_argument("--report", help="summary JSON path")
    s.add_argument("--log", help="records JSONL path")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("serve", help="run the SCADA supervision service")
    s.add_argument("--port", type=int, default=8787)
    s.add_argument("--line", help="line config JSON")
    s.add_argument("--log", default="aoi-logs", help="log directory (AOI_LOG_DIR overrides)")
    s.add_argument("--tick-ms", type=float, default=200.0, dest="tick_ms")
    s.add_argument("--timing", choices=("nominal", "measured"), default="nominal")
    s.add_argument("--manifest", help="feed workpieces from a manifest")
    s.add_argument("--feed-count", type=int, dest="feed_count")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loop", action="store_true", help="refeed when drained")
    s.add_argument("--autostart", action="store_true")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("gradcheck", help="finite-difference verification of nnkit")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="run a named acceptance experiment")
    s.add_argument("name", choices=("gan-fixture", "augmentation-benefit",
                                    "baseline-separability"))
    s.add_argument("--out")
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(func=cmd_experiment)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, KeyError) as e:
        if getattr(args, "json", False):
            print(json.dumps({"error": {"type": type(e).__name__, "message": str(e)}}),
                  file=sys.stderr)
        else:
            print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        if getattr(args, "json", False):
            print(json.dumps({"error": {"type": type(e).__name__, "message": str(e)}}),
                  file=sys.stderr)
        else:
            print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
