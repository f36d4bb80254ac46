"""``lrpnet`` command line: synth, train, eval, ablate, erf, oracle-check, params, bench."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import pathlib
import sys

import numpy as np

from .config import ExperimentConfig, format_config, load_config, resolved_header

log = logging.getLogger("lrpnet")


def atomic_write(path, data) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, default: str) -> pathlib.Path:
    out = pathlib.Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: pathlib.Path, cfg: ExperimentConfig) -> list[str]:
    header = resolved_header(cfg)
    atomic_write(out / "config.txt", format_config(cfg, header))
    return header


def _load_data(cfg: ExperimentConfig, data_dir):
    from .dataset import generate_scenes, read_split

    data_dir = data_dir or cfg.data.dataset
    if data_dir:
        return read_split(data_dir, "train")[1], read_split(data_dir, "val")[1]
    return generate_scenes(cfg.data.scene, cfg.seed, cfg.data.num_train, cfg.data.num_val)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .dataset import write_dataset

    cfg = _config(args)
    n_train = cfg.data.num_train if args.num_train is None else args.num_train
    n_val = cfg.data.num_val if args.num_val is None else args.num_val
    out = _out(args, "data")
    header = _echo_config(out, cfg)
    write_dataset(out, cfg.data.scene, cfg.seed, n_train, n_val, header)
    print(f"wrote {n_train} train and {n_val} val scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from .network import save_checkpoint
    from .train import format_log, train

    cfg = _config(args)
    out = _out(args, "run")
    header = _echo_config(out, cfg)
    train_clouds, val_clouds = _load_data(cfg, args.data)
    result = train(cfg.network, cfg.train, train_clouds, val_clouds)
    csv = "".join(f"# {h}\n" for h in header) + format_log(result.log)
    atomic_write(out / "metrics.csv", csv)
    save_checkpoint(out / "checkpoint.lrpn", result.model,
                    {"build": header[0].split()[1], "seed": cfg.seed})
    print(result.report.summary())
    return 0


def _eval_csv(report, class_names, header) -> str:
    lines = [f"# {h}" for h in header] + ["class,iou,acc"]
    for k, name in enumerate(class_names):
        lines.append(f"{name},{report.iou[k] * 100:.4f},{report.acc[k] * 100:.4f}")
    lines += [f"miou,{report.miou:.4f},", f"oa,{report.oa:.4f},", f"macc,{report.macc:.4f},"]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    from .config import build_id
    from .dataset import read_split
    from .network import load_checkpoint
    from .synth import CLASS_NAMES
    from .train import evaluate, predict
    from .voxel import read_predictions

    if bool(args.checkpoint) == bool(args.predictions):
        raise ValueError("give exactly one of --checkpoint or --predictions")
    names, clouds = read_split(args.data, args.split)
    if not clouds:
        raise ValueError(f"no {args.split} scenes in {args.data}")
    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        cfg = _config(args)
        preds = [predict(model, pc, cfg.train.voxel_size) for pc in clouds]
        num_classes = model.cfg.num_classes
        header = [f"build {build_id()}", f"checkpoint {args.checkpoint}",
                  f"checkpoint build {meta.get('build', '?')}", f"seed {meta.get('seed', '?')}"]
    else:
        pred_dir = pathlib.Path(args.predictions)
        preds = [read_predictions(pred_dir / (pathlib.Path(n).stem + ".pred")) for n in names]
        num_classes = max(int(pc.labels.max()) for pc in clouds) + 1
        num_classes = max(num_classes, max(int(p.max(initial=-1)) for p in preds) + 1)
        header = [f"build {build_id()}", f"predictions {args.predictions}"]
    for n, p, pc in zip(names, preds, clouds):
        if len(p) != len(pc):
            raise ValueError(f"{n}: {len(p)} predictions for {len(pc)} points")
    report = evaluate(np.concatenate(preds), np.concatenate([pc.labels for pc in clouds]), num_classes)
    print(report.summary())
    class_names = [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}" for k in range(num_classes)]
    if args.out:
        atomic_write(_out(args, ".") / "eval.csv", _eval_csv(report, class_names, header))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_rows, run_ablation

    cfg = _config(args)
    out = _out(args, "ablate")
    header = _echo_config(out, cfg)
    train_clouds, val_clouds = _load_data(cfg, args.data)

    def progress(row):
        print(f"{row['variant']}: params {row['params']} runtime {row['runtime_ms']:.1f} ms "
              f"mIoU {row['miou']:.2f}", flush=True)

    rows = run_ablation(args.axis, cfg.network, cfg.train, train_clouds, val_clouds, progress)
    atomic_write(out / f"ablate_{args.axis}.csv", format_rows(rows, header_lines=header))
    return 0


def cmd_erf(args) -> int:
    from .config import build_id
    from .erf import erf_compute, erf_export
    from .network import forward, load_checkpoint
    from .voxel import read_point_cloud, voxelize

    model, meta = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    pc = read_point_cloud(args.scene)
    tensor, _, _ = voxelize(pc, cfg.train.voxel_size)
    focus = tuple(int(v) for v in args.focus.split(","))
    net = lambda x, params: forward(x, model, training=False)
    erf = erf_compute(net, model.params, tensor, focus)
    out = _out(args, ".")
    lines = [f"build {build_id()}", f"checkpoint {args.checkpoint}", f"scene {args.scene}",
             f"voxel_size {cfg.train.voxel_size!r}", f"seed {meta.get('seed', '?')}"]
    erf_export(erf, out / "erf.csv", lines)
    print(f"{int(np.count_nonzero(erf.magnitude))} of {len(erf)} voxels influence {erf.focus}")
    return 0


def cmd_oracle_check(args) -> int:
    from .selfcheck import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_params(args) -> int:
    from .network import baseline_param_count, lrp_overhead

    cfg = _config(args).network
    base, extra = baseline_param_count(cfg), lrp_overhead(cfg)
    print(base + extra)
    if args.breakdown:
        print(f"baseline {base}")
        print(f"lrp {extra} ({100.0 * extra / base:.2f}% of baseline)")
    return 0


def cmd_bench(args) -> int:
    from .ablation import format_rows
    from .bench import BENCH_COLUMNS, bench_ops

    cfg = _config(args)
    grids = tuple(int(g) for g in args.grids.split(","))
    rows = bench_ops(grids=grids, occupancy=args.occupancy, channels=args.channels,
                     reps=args.reps, warmup=3, seed=cfg.seed)
    text = format_rows(rows, BENCH_COLUMNS, resolved_header(cfg))
    if args.out:
        atomic_write(_out(args, ".") / "bench.csv", text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lrpnet", description="sparse voxel segmentation with long range pooling")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory (default: generate from [data])")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or prediction files")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of <scene>.pred files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and score an ablation grid")
    p.add_argument("--axis", required=True, choices=("position", "op", "range", "component"))
    p.add_argument("--data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("erf", parents=[common], help="effective receptive field of one voxel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--focus", required=True, help="voxel as x,y,z or batch,x,y,z")
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("oracle-check", parents=[common], help="compare sparse ops with dense references")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("params", parents=[common], help="parameter count of the configured network")
    p.add_argument("--breakdown", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", parents=[common], help="time sparse ops on random grids")
    p.add_argument("--grids", default="16,32")
    p.add_argument("--occupancy", type=float, default=0.3)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--reps", type=int, default=20)
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ValueError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"lrpnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
