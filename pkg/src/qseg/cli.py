"""Command-line entry point.

Subcommands: gen-data, train-float, qat, eval, infer, export, inspect,
bench. Configuration precedence is CLI flags > config file (plain
``key = value`` lines) > built-in defaults; every run starts by printing the
effective configuration as JSON. All RNG streams derive from the run seed
plus a per-consumer label, and nothing is written outside the output
directory.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

from . import dataset, inference, metrics, store, training
from .errors import ConfigurationError, QsegError
from .model import ModelConfig, PromptSegModel


def rng_for(seed: int, consumer: str) -> np.random.Generator:
    """Deterministic per-consumer stream derived from the run seed."""
    key = zlib.crc32(consumer.encode())
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def thread_count(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("QSEG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"QSEG_THREADS={env!r} is not an integer")
    return os.cpu_count() or 1


def read_config_file(path) -> dict:
    """`key = value` lines; '#' comments; values parsed as JSON scalars when
    possible, strings otherwise."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value.strip('"')
    return out


def apply_config_file(args: argparse.Namespace, parser_defaults: dict):
    """Config-file values fill in any option the user left at its default."""
    if not getattr(args, "config", None):
        return args
    overrides = read_config_file(args.config)
    for key, value in overrides.items():
        if not hasattr(args, key):
            raise ConfigurationError(f"unknown config key {key!r}")
        if getattr(args, key) == parser_defaults.get(key):
            setattr(args, key, value)
    return args


def effective_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in ("func",) and not k.startswith("_")}
    cfg["threads"] = thread_count(args)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig()
    for field in ("embed_dim", "encoder_depth", "num_heads", "decoder_dim",
                  "mlp_ratio"):
        if getattr(args, field, None) is not None:
            setattr(cfg, field, getattr(args, field))
    return cfg.validate()


def _schedule(args) -> training.ScheduleConfig:
    return training.ScheduleConfig(
        initial_lr=args.initial_lr,
        warmup_epochs=args.warmup_epochs,
        anneal_epochs=args.anneal_epochs,
        epoch_mode=args.epoch_mode).validate()


def _write_png(path, mask: np.ndarray):
    """Minimal 8-bit grayscale PNG writer (values scaled to 0/255)."""
    h, w = mask.shape
    img = (mask.astype(np.uint8) * 255)
    raw = b"".join(b"\x00" + img[y].tobytes() for y in range(h))

    def chunk(tag, data):
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data)))

    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)))
        f.write(chunk(b"IDAT", zlib.compress(raw)))
        f.write(chunk(b"IEND", b""))


# --------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    out = _out_dir(args)
    if args.spec == "default":
        specs = dataset.default_dataset_spec()
    elif args.spec == "imbalanced":
        specs = dataset.imbalanced_dataset_spec(args.ratio, args.minority)
    else:
        raise ConfigurationError(f"unknown dataset spec {args.spec!r}")
    path = dataset.generate_synthetic(specs, out / args.name, seed=args.seed)
    print(f"wrote {path}")
    return 0


def cmd_train_float(args):
    out = _out_dir(args)
    with_store = dataset.VolumeStore(args.data)
    try:
        model = PromptSegModel(_model_config(args), seed=args.seed)
        index = dataset.build_index(with_store)
        res = training.run_stage(
            model, training.stage_plan(0), with_store, index, _schedule(args),
            rng_for(args.seed, "train"), eval_limit=args.eval_limit)
        training.write_training_log(res.history, out / "train_log.csv")
        store.export(model, out / "float.qsmf", mode="float")
        print(f"stage 0 best epoch {res.best_epoch}: eval DSC {res.best_dsc:.4f}")
        print(f"wrote {out / 'float.qsmf'} and {out / 'train_log.csv'}")
    finally:
        with_store.close()
    return 0


def cmd_qat(args):
    out = _out_dir(args)
    vs = dataset.VolumeStore(args.data)
    try:
        index = dataset.build_index(vs)
        schedule = _schedule(args)
        rng = rng_for(args.seed, "train")
        if args.stage is None:
            model = store.load(args.float_model) if args.float_model else None
            if model is None:
                raise ConfigurationError("qat needs --float-model (stage-0 checkpoint)")
            model.config.quantize_encoder = False
            model.config.quantize_decoder = False
            res = training.run_pipeline(model, vs, schedule=schedule,
                                        seed=args.seed, stage0=False,
                                        eval_limit=args.eval_limit,
                                        log_path=out / "train_log.csv")
            for r in res.stages:
                store.export(model if r is res.stages[-1] else _restored(model, r),
                             out / f"stage{r.stage}.qsmf", mode="quantized")
            store.export(model, out / "quantized.qsmf", mode="quantized")
            print(f"final eval DSC {res.final_dsc:.4f}; wrote {out / 'quantized.qsmf'}")
            return 0
        # single stage
        plan = training.stage_plan(args.stage)
        if args.stage == 0:
            raise ConfigurationError("stage 0 runs through train-float")
        source = args.checkpoint if args.stage > 1 else args.float_model
        if source is None:
            need = "--checkpoint (previous stage)" if args.stage > 1 else "--float-model"
            raise ConfigurationError(f"qat --stage {args.stage} needs {need}")
        model = store.load(source)
        teacher = None
        if plan.distill:
            teacher = store.load(args.float_model)
            teacher.config.quantize_encoder = False
            teacher.config.quantize_decoder = False
        if args.stage == 1:
            model.config.quantize_encoder = False
            model.config.quantize_decoder = False
        res = training.run_stage(model, plan, vs, index, schedule, rng,
                                 teacher=teacher, eval_limit=args.eval_limit)
        training.write_training_log(res.history, out / f"stage{args.stage}_log.csv")
        store.export(model, out / f"stage{args.stage}.qsmf", mode="quantized")
        print(f"stage {args.stage} best epoch {res.best_epoch}: "
              f"eval DSC {res.best_dsc:.4f}")
    finally:
        vs.close()
    return 0


def _restored(model, stage_result):
    clone = model.clone()
    clone.restore(stage_result.best_snapshot)
    return clone


def cmd_eval(args):
    out = _out_dir(args)
    vs = dataset.VolumeStore(args.data)
    try:
        model = store.load(args.model)

        def run_fn(s, v):
            return inference.run_case(model, s, v, mode=args.mode).masks

        scores = [metrics.evaluate_case(run_fn, vs, v) for v in range(len(vs))]
        rows = metrics.aggregate(scores)
        metrics.write_report(rows, out / "eval_report.csv")
        print(metrics.format_table(rows))
        print(f"wrote {out / 'eval_report.csv'}")
    finally:
        vs.close()
    return 0


def cmd_infer(args):
    out = _out_dir(args)
    vs = dataset.VolumeStore(args.data)
    try:
        model = store.load(args.model)
        limits = inference.BatchLimits(args.max_box_batch)
        res = inference.run_case(model, vs, args.case, limits, mode=args.mode)
        entry = vs.entries[args.case]
        if entry.kind == 0:
            np.savez_compressed(out / f"case{args.case}_masks.npz",
                                **{f"box{i}": m for i, m in enumerate(res.masks)})
        else:
            for i, m in enumerate(res.masks):
                _write_png(out / f"case{args.case}_box{i}.png", m)
        timing = {"case": args.case, "encoder_calls": res.encoder_calls,
                  "decoder_calls": res.decoder_calls,
                  "encoder_s": res.encoder_s, "decoder_s": res.decoder_s,
                  "wall_s": res.wall_s, "max_batch": res.max_batch}
        (out / f"case{args.case}_timing.json").write_text(json.dumps(timing, indent=2))
        print(json.dumps(timing, indent=2))
    finally:
        vs.close()
    return 0


def cmd_export(args):
    out = _out_dir(args)
    model = store.load(args.model)
    path = store.export(model, out / args.name, mode=args.mode)
    print(f"wrote {path}")
    return 0


def cmd_inspect(args):
    info = store.inspect(args.model)
    print(store.format_inspect(info))
    if args.out:
        out = _out_dir(args)
        (out / "inspect.json").write_text(json.dumps(info, indent=2))
    return 0


def cmd_bench(args):
    out = _out_dir(args)
    vs = dataset.VolumeStore(args.data)
    try:
        model = store.load(args.model)
        cases = args.cases or list(range(min(len(vs), 3)))
        rows = inference.bench(model, vs, cases,
                               inference.BatchLimits(args.max_box_batch),
                               repetitions=args.repetitions)
        (out / "bench.json").write_text(json.dumps(rows, indent=2))
        print(json.dumps(rows, indent=2))
    finally:
        vs.close()
    return 0


# -------------------------------------------------------------------- parser


def _add_common(p, out_required=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded reductions")


def _add_schedule(p):
    p.add_argument("--initial-lr", type=float, default=0.01)
    p.add_argument("--warmup-epochs", type=int, default=5)
    p.add_argument("--anneal-epochs", type=int, default=10)
    p.add_argument("--epoch-mode", choices=("separate", "overlap"),
                   default="separate")
    p.add_argument("--eval-limit", type=int, default=64,
                   help="max eval slices per epoch checkpoint")


def _add_model(p):
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--encoder-depth", type=int, default=None)
    p.add_argument("--num-heads", type=int, default=None)
    p.add_argument("--decoder-dim", type=int, default=None)
    p.add_argument("--mlp-ratio", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qseg",
                                     description="QAT + integer inference for "
                                                 "promptable segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic QSEG container")
    _add_common(p)
    p.add_argument("--spec", choices=("default", "imbalanced"), default="default")
    p.add_argument("--name", default="dataset.qseg")
    p.add_argument("--ratio", type=int, default=50)
    p.add_argument("--minority", type=int, default=20)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-float", help="stage-0 float pre-training")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_schedule(p)
    _add_model(p)
    p.set_defaults(func=cmd_train_float)

    p = sub.add_parser("qat", help="three-stage QAT (or one stage with --stage)")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--float-model", help="stage-0 checkpoint (.qsmf)")
    p.add_argument("--checkpoint", help="previous-stage checkpoint (.qsmf)")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=None)
    _add_schedule(p)
    p.set_defaults(func=cmd_qat)

    p = sub.add_parser("eval", help="full evaluation table over a container")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("float", "qat", "int"), default="int")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run one case, write masks + timing")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--case", type=int, required=True)
    p.add_argument("--mode", choices=("float", "qat", "int"), default="int")
    p.add_argument("--max-box-batch", type=int, default=64)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export", help="re-export a model file")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("float", "quantized"), default="quantized")
    p.add_argument("--name", default="model.qsmf")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("inspect", help="summarize a model file")
    _add_common(p, out_required=False)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="float vs int timing per case")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--cases", type=int, nargs="*", default=None)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--max-box-batch", type=int, default=64)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default
                for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        args = apply_config_file(args, defaults)
        print(json.dumps(effective_config(args), indent=2, default=str))
        return args.func(args)
    except QsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
