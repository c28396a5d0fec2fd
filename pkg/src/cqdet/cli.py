"""Command-line entry point.

Subcommands: gen-scenes, train, infer, eval, gradcheck, bench-attention,
bench-kernels. Every command is deterministic given (config, seed, inputs).
Exit codes: 0 success, 1 input error, 2 numerical failure (NaN loss or a
failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench, cpn, evaluation, geom, gradsuite, kernels, scenes
from .config import RunConfig, config_to_text, load_config
from .diffgrid import load_checkpoint, save_checkpoint
from .fusion import MemoryBank
from .losses import TrainingDiverged
from .pipeline import Detector, postprocess
from .transformer import AttentionTrace, write_attention_dump

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2


class InputError(RuntimeError):
    pass


def _scene_paths(arg) -> list:
    p = Path(arg)
    if p.is_dir():
        paths = sorted(p.glob("*.cqsc"))
        if not paths:
            raise InputError(f"no *.cqsc scene files in {p}")
        return paths
    if not p.exists():
        raise InputError(f"scene path {p} does not exist")
    return [p]


def _load_scenes(arg) -> list:
    return [scenes.read_scene(p) for p in _scene_paths(arg)]


def _split_overrides(rest) -> list:
    overrides = []
    for item in rest:
        body = item.lstrip("-")
        if not item.startswith("--") or "=" not in body:
            raise InputError(f"unrecognized argument {item!r} "
                             "(overrides look like --section.key=value)")
        overrides.append(body)
    return overrides


def _config(args, rest) -> RunConfig:
    return load_config(getattr(args, "config", None), _split_overrides(rest))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scenes(args, rest):
    cfg = _config(args, rest)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scenes
    scene_cfg = scenes.SceneConfig(
        n_frames=sc.n_frames, frame_dt=sc.frame_dt,
        n_objects_min=sc.n_objects_min, n_objects_max=sc.n_objects_max,
        speed_modes=sc.speed_modes(), spawn_radius=sc.spawn_radius,
        sensor_range=sc.sensor_range, point_density=sc.point_density,
        clutter_points=sc.clutter_points, ego_speed=sc.ego_speed)
    class_counts = np.zeros(3, dtype=np.int64)
    total_points = 0
    for i in range(args.count):
        seq = scenes.generate_sequence(scene_cfg, seed + i)
        scenes.write_scene(out / f"scene_{i:04d}.cqsc", seq)
        for fr in seq.frames:
            total_points += len(fr.cloud)
            for a in fr.annotations:
                class_counts[a.class_id] += 1
    names = scenes.CLASS_NAMES
    stats = " ".join(f"{names[k]}={class_counts[k]}" for k in range(3))
    print(f"wrote {args.count} scenes to {out}: {stats} points={total_points}")
    return EXIT_OK


def _optimizer_state_entries(optimizer, next_step):
    state = {f"_opt.m.{n}": m for n, m in optimizer.m.items()}
    state.update({f"_opt.v.{n}": v for n, v in optimizer.v.items()})
    state["_opt.t"] = np.array(float(optimizer.t))
    state["_sched.next_step"] = np.array(float(next_step))
    return state


def cmd_train(args, rest):
    cfg = _config(args, rest)
    seqs = _load_scenes(args.scenes)
    model = Detector(cfg)
    start_step = 0
    resume_state = None
    if args.resume:
        resume_state = load_checkpoint(args.resume)
        model.load_state({k: v for k, v in resume_state.items()
                          if not k.startswith(("_opt.", "_sched."))})
        start_step = int(resume_state.get("_sched.next_step", np.array(0.0)))

    log_path = Path(args.out_checkpoint).with_suffix(".log")
    records = []

    from .losses import AdamW, OneCycle, fit   # noqa: PLC0415
    optimizer = AdamW(model.named_parameters(), weight_decay=cfg.train.weight_decay)
    schedule = OneCycle(base_lr=cfg.train.base_lr, total_steps=cfg.train.steps,
                        warmup_frac=cfg.train.warmup_frac,
                        start_div=cfg.train.start_div,
                        final_div=cfg.train.final_div)
    if resume_state is not None:
        optimizer.t = int(resume_state.get("_opt.t", np.array(0.0)))
        for n in optimizer.m:
            if f"_opt.m.{n}" in resume_state:
                optimizer.m[n][...] = resume_state[f"_opt.m.{n}"]
                optimizer.v[n][...] = resume_state[f"_opt.v.{n}"]

    def save(step):
        entries = dict(model.named_parameters())
        entries.update(_optimizer_state_entries(optimizer, step))
        save_checkpoint(args.out_checkpoint, entries)

    with open(log_path, "w", encoding="ascii") as log:
        def log_record(rec):
            records.append(rec)
            log.write(rec.line() + "\n")
            if rec.step % 25 == 0 or rec.step == cfg.train.steps - 1:
                print(rec.line())

        try:
            fit(model, seqs, cfg, log_fn=log_record, checkpoint_fn=save,
                optimizer=optimizer, schedule=schedule, start_step=start_step)
        except TrainingDiverged as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save(cfg.train.steps)
    if records and not np.isfinite(records[-1].total):
        print("final loss is not finite", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoint written to {args.out_checkpoint}")
    return EXIT_OK


def _load_model(cfg, checkpoint_path) -> Detector:
    model = Detector(cfg)
    state = load_checkpoint(checkpoint_path)
    state = {k: v for k, v in state.items()
             if not k.startswith(("_opt.", "_sched."))}
    try:
        model.load_state(state)
    except (KeyError, ValueError) as exc:
        raise InputError(f"checkpoint {checkpoint_path} is incompatible with "
                         f"this config: {exc}") from None
    return model


def _infer_sequence(model, seq, cfg, frame_offset, dump_prefix=None,
                    heatmap_prefix=None):
    out = []
    bank = MemoryBank(capacity=max(cfg.model.frames - 1, 1))
    for i, frame in enumerate(seq.frames):
        frame_id = frame_offset + i
        trace = AttentionTrace() if dump_prefix else None
        if model.pointconcat:
            window = seq.frames[max(0, i + 1 - cfg.model.frames):i + 1]
            prepared = model.extract(window)
        else:
            prepared = model.extract_online(frame, bank)
        result = model.forward([frame], mode="eval", prepared=prepared, trace=trace)
        dets = postprocess(result, cfg.eval)
        out.extend((frame_id, d) for d in dets)
        if dump_prefix:
            write_attention_dump(f"{dump_prefix}_f{frame_id:04d}.txt", trace)
        if heatmap_prefix:
            cpn.write_heatmap_pgm(result.center, f"{heatmap_prefix}_f{frame_id:04d}")
    return out


def _infer_worker(packed):
    cfg_text, checkpoint, scene_path = packed
    from .config import parse_config_text   # noqa: PLC0415
    cfg = parse_config_text(cfg_text)
    model = _load_model(cfg, checkpoint)
    seq = scenes.read_scene(scene_path)
    return scene_path, _infer_sequence(model, seq, cfg, 0)


def cmd_infer(args, rest):
    cfg = _config(args, rest)
    paths = _scene_paths(args.scenes)
    records = []
    if args.jobs > 1:
        payload = [(config_to_text(cfg), args.checkpoint, str(p)) for p in paths]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_infer_worker, payload))
        offset = 0
        for p in paths:
            seq_records = results[str(p)]
            records.extend((offset + fid, det) for fid, det in seq_records)
            offset += len(scenes.read_scene(p).frames)
    else:
        model = _load_model(cfg, args.checkpoint)
        offset = 0
        for p in paths:
            seq = scenes.read_scene(p)
            records.extend(_infer_sequence(model, seq, cfg, offset,
                                           dump_prefix=args.dump_attention,
                                           heatmap_prefix=args.dump_heatmaps))
            offset += len(seq.frames)
    geom.write_detections(args.out_detections, records)
    print(f"wrote {len(records)} detections to {args.out_detections}")
    return EXIT_OK


def cmd_eval(args, rest):
    cfg = _config(args, rest)
    det_records = geom.read_detections(args.detections)
    seqs = [scenes.read_scene(p) for p in _scene_paths(args.scenes)]
    frames = [fr for seq in seqs for fr in seq.frames]
    per_frame = [[] for _ in frames]
    for frame_id, det in det_records:
        if not 0 <= frame_id < len(frames):
            raise InputError(f"detection frame_id {frame_id} out of range "
                             f"(scenes provide {len(frames)} frames)")
        per_frame[frame_id].append(det)
    gts = [fr.annotations for fr in frames]
    report = evaluation.evaluate_detections(per_frame, gts, cfg.eval)
    table = evaluation.report_table(report)
    base = Path(args.out_report)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".txt").write_text(table + "\n", encoding="ascii")
    base.with_suffix(".json").write_text(evaluation.report_json(report),
                                         encoding="ascii")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args, rest):
    _split_overrides(rest)
    names = None
    if args.module:
        names = [n for n in gradsuite.CHECKS if args.module in n]
        if not names:
            raise InputError(f"no gradcheck module matches {args.module!r}")
    results = gradsuite.run_suite(names=names, instances=args.instances,
                                  log=print)
    failed = [n for n, r in results.items() if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_bench_attention(args, rest):
    _split_overrides(rest)
    n_list = [int(x) for x in args.n_range.split(",")]
    rows, r2, gather_ok = bench.bench_attention(variant=args.variant,
                                                n_list=n_list, seed=args.seed)
    for n, ms in rows:
        print(f"N={n:<6d} {ms:8.2f} ms")
    print(f"linear fit R^2 = {r2:.5f}")
    if args.variant == "windowed":
        print(f"gather count = 9*S*N: {'ok' if gather_ok else 'MISMATCH'}")
    return EXIT_OK if (gather_ok or args.variant != "windowed") else EXIT_NUMERIC


def cmd_bench_kernels(args, rest):
    _split_overrides(rest)
    backends = kernels.available_backends()
    print(f"backends available: {', '.join(backends)} (default {kernels.backend_name()})")
    rows = bench.bench_kernels(n_pairs=tuple(int(x) for x in args.sizes.split(",")))
    for n, timings in rows:
        cols = "  ".join(f"{b}={t:8.2f} ms" for b, t in timings.items())
        line = f"iou_pairs n={n:<7d} {cols}"
        if len(timings) == 2:
            line += f"  speedup x{timings['pure'] / timings['compiled']:.1f}"
        print(line)
    return EXIT_OK


def cmd_dump_config(args, rest):
    cfg = _config(args, rest)
    print(config_to_text(cfg), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="cqdet",
        description="Center-query transformer detector on synthetic LiDAR "
                    "scenes. Any command accepts --section.key=value config "
                    "overrides; see dump-config for every key and default.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="generate synthetic scene containers")
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=4, help="number of scenes")
    g.add_argument("--seed", type=int, default=None,
                   help="base seed (default: config seed)")
    g.set_defaults(fn=cmd_gen_scenes)

    t = sub.add_parser("train", help="train a detector on scene files")
    t.add_argument("--config")
    t.add_argument("--scenes", required=True, help="scene file or directory")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run detection on scene files")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scenes", required=True)
    i.add_argument("--out-detections", required=True)
    i.add_argument("--dump-attention", metavar="PREFIX",
                   help="write per-frame attention dumps to PREFIX_fNNNN.txt")
    i.add_argument("--dump-heatmaps", metavar="PREFIX",
                   help="write per-frame 16-bit PGM center heatmaps")
    i.add_argument("--jobs", type=int, default=1,
                   help="scene-level parallelism (deterministic merge order)")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="evaluate detections against scene ground truth")
    e.add_argument("--config")
    e.add_argument("--detections", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out-report", required=True,
                   help="report base path (.txt and .json are written)")
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--module", help="substring filter on check names")
    gc.add_argument("--instances", type=int, default=100)
    gc.set_defaults(fn=cmd_gradcheck)

    ba = sub.add_parser("bench-attention",
                        help="cross-attention wall-time scaling vs query count")
    ba.add_argument("--variant", default="windowed",
                    choices=("windowed", "deformable"))
    ba.add_argument("--n-range", default="100,200,400,800,1600")
    ba.add_argument("--seed", type=int, default=0)
    ba.set_defaults(fn=cmd_bench_attention)

    bk = sub.add_parser("bench-kernels",
                        help="compare compiled vs pure geometry kernels")
    bk.add_argument("--sizes", default="1000,10000,50000")
    bk.set_defaults(fn=cmd_bench_kernels)

    d = sub.add_parser("dump-config", help="print the effective configuration")
    d.add_argument("--config")
    d.set_defaults(fn=cmd_dump_config)
    return p


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return args.fn(args, rest)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
