"""Command-line entry points.

Thin wrappers over the library: generate scenes, train a base checkpoint,
run the offline benchmark grid, simulate the random labeler, serve the
interactive API, and export a label-density surface. Every run writes a
key=value manifest next to its outputs so it can be reproduced from the
recorded seeds. Flags can be preloaded from a key=value config file via
--config.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, metrics, model, synthdata
from .finetune import FineTuneConfig
from .points import LabelPoint


def _read_config_file(path):
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config_defaults(subparsers, args_list):
    if "--config" not in args_list:
        return
    values = _read_config_file(args_list[args_list.index("--config") + 1])
    for sub in subparsers.values():
        for action in sub._actions:
            if action.dest in values:
                raw = values[action.dest]
                action.default = action.type(raw) if action.type else raw


def _load_scenes(scene_dir):
    scenes = {}
    for path in sorted(Path(scene_dir).glob("*.glrs")):
        scenes[path.stem] = synthdata.import_raster(path)
    if not scenes:
        raise SystemExit(f"no .glrs scenes found in {scene_dir}")
    return scenes


def cmd_gen_scenes(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count, dtype=np.uint64)
    for i, s in enumerate(seeds):
        scene = synthdata.generate_scene(synthdata.SceneConfig(
            width=args.size, height=args.size, seed=int(s),
            shift_delta=args.shift_delta))
        synthdata.export_raster(scene, out / f"area-{i}.glrs")
    harness.write_manifest(out / "manifest.txt", {
        "command": "gen-scenes", "seed": args.seed, "count": args.count,
        "size": args.size, "shift_delta": args.shift_delta})
    print(f"wrote {args.count} scenes to {out}")


def cmd_train_base(args):
    spec = model.ModelSpec.desk() if args.profile == "desk" else model.ModelSpec.paper()
    patches = harness.training_patches(args.patches, args.patch_size, args.seed)
    t0 = time.time()
    params = model.train_base(spec, patches, epochs=args.epochs, seed=args.seed)
    model.save_checkpoint(params, args.out,
                          provenance={"seed": args.seed, "epochs": args.epochs,
                                      "patches": args.patches})
    harness.write_manifest(str(args.out) + ".manifest.txt", {
        "command": "train-base", "seed": args.seed, "epochs": args.epochs,
        "patches": args.patches, "patch_size": args.patch_size,
        "profile": args.profile, "train_seconds": f"{time.time() - t0:.1f}"})
    print(f"trained base model -> {args.out} ({time.time() - t0:.1f}s)")


def cmd_offline_grid(args):
    scenes = _load_scenes(args.scenes)
    base = model.load_checkpoint(args.base).params
    schedule = [int(x) for x in str(args.schedule).split(",")]
    seeds = [int(x) for x in str(args.seeds).split(",")]
    ft_methods = str(args.methods).split(",")
    query_methods = str(args.queries).split(",")
    rows = harness.run_offline_grid(scenes, base, ft_methods, query_methods,
                                    schedule, seeds, workers=args.workers)
    Path(args.out).write_text(harness.rows_to_csv(rows))
    agg = harness.aggregate_at_checkpoint(rows, args.table_at)
    if agg:
        print(harness.format_aggregate_table(agg, args.table_at))
    harness.write_manifest(str(args.out) + ".manifest.txt", {
        "command": "offline-grid", "scenes": args.scenes, "base": args.base,
        "methods": args.methods, "queries": args.queries,
        "schedule": args.schedule, "seeds": args.seeds})
    print(f"wrote {len(rows)} rows -> {args.out}")


def cmd_sim_random(args):
    scenes = _load_scenes(args.scenes)
    base = model.load_checkpoint(args.base).params
    seeds = [int(x) for x in str(args.seeds).split(",")]
    config = FineTuneConfig(method=args.method)
    rows = []
    for name in sorted(scenes):
        for seed in seeds:
            series = harness.simulate_random_labeler(
                scenes[name], base, config, seed=seed,
                session_seconds=args.seconds,
                seconds_per_label=args.seconds_per_label,
                retrain_interval=args.retrain_interval)
            rows += harness.sim_to_rows(name, seed, series)
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(harness.CSV_HEADER + ["elapsed_seconds"])
        writer.writerows(rows)
    harness.write_manifest(str(args.out) + ".manifest.txt", {
        "command": "sim-random", "scenes": args.scenes, "base": args.base,
        "seeds": args.seeds, "seconds": args.seconds,
        "seconds_per_label": args.seconds_per_label,
        "retrain_interval": args.retrain_interval, "method": args.method})
    print(f"wrote {len(rows)} rows -> {args.out}")


def cmd_serve(args):
    import uvicorn

    from .service import create_app
    from .sessions import Registry

    ckpt = model.load_checkpoint(args.base)
    registry = Registry(ckpt.params, palette=ckpt.palette or None)
    scenes = _load_scenes(args.scenes)
    for i, name in enumerate(sorted(scenes)):
        registry.add_scene(name, scenes[name], eval_seed=i)
    app = create_app(registry, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port)


def cmd_export_density(args):
    points = []
    with open(args.points) as f:
        for row in csv.reader(f):
            if not row:
                continue
            try:
                r, c = int(row[0]), int(row[1])
            except ValueError:
                continue  # header line
            points.append(LabelPoint(r, c, int(row[2]) if len(row) > 2 else 0))
    surface = metrics.label_density_surface(points, (args.height, args.width),
                                            args.bandwidth)
    scene = synthdata.Scene(image=surface[None].astype(np.float32), labels=None,
                            palette=[("density", "#ffffff")])
    synthdata.export_raster(scene, args.out)
    print(f"KDE surface over {len(points)} points -> {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="landloop")
    parser.add_argument("--config", help="key=value file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def add_parser(name, **kw):
        p = sub.add_parser(name, **kw)
        registry[name] = p
        return p

    p = add_parser("gen-scenes", help="generate synthetic labeled areas")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--shift-delta", type=float,
                   default=synthdata.DEFAULT_TARGET_DELTA)
    p.set_defaults(func=cmd_gen_scenes)

    p = add_parser("train-base", help="train the base checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--patches", type=int, default=200)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_base)

    p = add_parser("offline-grid", help="run the offline benchmark grid")
    p.add_argument("--scenes", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default="last-1,last-2")
    p.add_argument("--queries", default="random,entropy,min-margin,mistakes")
    p.add_argument("--schedule", default="10,40,100,200,400,1000,2000")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--table-at", type=int, default=400)
    p.set_defaults(func=cmd_offline_grid)

    p = add_parser("sim-random", help="simulate the random labeler baseline")
    p.add_argument("--scenes", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="last-1")
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--seconds", type=int, default=900)
    p.add_argument("--seconds-per-label", type=int, default=3)
    p.add_argument("--retrain-interval", type=int, default=45)
    p.set_defaults(func=cmd_sim_random)

    p = add_parser("serve", help="serve the interactive fine-tuning API")
    p.add_argument("--scenes", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--ui", default=str(Path(__file__).resolve().parents[2] / "frontend" / "dist"))
    p.set_defaults(func=cmd_serve)

    p = add_parser("export-density", help="KDE surface of label locations")
    p.add_argument("--points", required=True, help="CSV of row,col[,class]")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--bandwidth", type=float, default=8.0)
    p.set_defaults(func=cmd_export_density)
    return parser, registry


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    _apply_config_defaults(subparsers, argv)
    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
