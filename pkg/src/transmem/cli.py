"""``transmem`` command-line interface.

Exit codes: 0 success, 1 usage/configuration error, 2 data or file-format
error, 3 numeric failure.
"""
import argparse
import json
import os
import sys

from . import kernels
from .checkpoint import Checkpoint, file_digest
from .datasets import atomic_write, gen_advecting_blobs, gen_moving_glyphs, read_dataset, write_dataset
from .errors import ConfigError, FormatError, NumericError, ShapeError, TransMemError, UsageError
from .network import NetworkConfig
from .profiles import FULL, PROFILES, TINY
from .train import SourceModel, TrainConfig, evaluate_params, format_record, gate_table, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _profile(args):
    return TINY if getattr(args, "tiny", False) else FULL


def _print_config(command, resolved):
    print(f"{command} config: {json.dumps(resolved, sort_keys=True)}")


# -- gen-data ---------------------------------------------------------------------

def cmd_gen_data(args):
    prof = _profile(args)
    size = args.size or prof.size
    count = args.count or {"train": prof.train_count, "val": prof.val_count, "test": prof.test_count}[args.split]
    seq_len = args.input_len + args.predict_len
    resolved = {"generator": args.generator, "seed": args.seed, "split": args.split, "count": count,
                "size": size, "input_len": args.input_len, "predict_len": args.predict_len}
    if args.generator == "glyphs":
        resolved["num_glyphs"] = args.num_glyphs
        _print_config("gen-data", resolved)
        ds = gen_moving_glyphs(args.seed, args.num_glyphs, count, size=size, seq_len=seq_len,
                               input_len=args.input_len, split=args.split)
    else:
        resolved["aridity"] = args.aridity
        _print_config("gen-data", resolved)
        ds = gen_advecting_blobs(args.seed, count, size=size, seq_len=seq_len, input_len=args.input_len,
                                 aridity=args.aridity, split=args.split)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} sequences of shape {ds.frames.shape[1:]} to {args.out}")
    return EXIT_OK


# -- training ---------------------------------------------------------------------------

def _network_from_args(args, dataset):
    prof = _profile(args)
    _, p, h, w = dataset.frames.shape[1:]
    return NetworkConfig(
        num_layers=args.layers or prof.num_layers,
        channels=args.channels or prof.channels,
        filter_size=args.filter_size or prof.filter_size,
        subscale_factor=args.subscale or prof.subscale_factor,
        input_len=dataset.input_len, predict_len=dataset.predict_len,
        frame_channels=p, frame_height=h, frame_width=w,
        source_bank_mode=args.source_bank_mode)


def _load_training_data(args):
    ds = read_dataset(args.dataset)
    if args.subset_fraction is not None:
        ds = ds.subset(args.subset_fraction)
    val = read_dataset(args.val_dataset) if args.val_dataset else None
    return ds, val


def _run_training(args, mode, source_paths):
    prof = _profile(args)
    ds, val = _load_training_data(args)
    net = _network_from_args(args, ds)
    tcfg = TrainConfig(mode=mode, lr=args.lr, batch_size=args.batch_size or prof.batch_size,
                       max_iters=args.iters if args.iters is not None else
                       (prof.source_iters if args.command == "pretrain" else prof.target_iters),
                       beta=args.beta, seed=args.seed, sources=list(source_paths),
                       val_every=args.val_every or prof.val_every, patience=args.patience or prof.patience)
    before = [file_digest(p) for p in source_paths]
    sources = [SourceModel.from_checkpoint(Checkpoint.load(p), p) for p in source_paths]
    resume = Checkpoint.load(args.resume) if getattr(args, "resume", None) else None
    _print_config(args.command, {"network": net.to_dict(), "train": tcfg.__dict__, "dataset": args.dataset,
                                 "val_dataset": args.val_dataset, "subset_fraction": args.subset_fraction,
                                 "resume": getattr(args, "resume", None)})

    log_path = args.log or f"{args.out}.log"
    lines = []
    if resume is not None and os.path.exists(log_path):
        with open(log_path) as fh:
            lines = fh.read().splitlines()

    def on_record(rec):
        if "val_mse" in rec:
            print(format_record(rec), flush=True)

    result = train(tcfg, net, ds, val, sources, resume=resume, stop_after=getattr(args, "stop_after", None),
                   on_record=on_record)
    after = [file_digest(p) for p in source_paths]
    if before != after:
        raise TransMemError("a source checkpoint file changed during training")
    result.checkpoint.save(args.out)
    lines.extend(result.log_lines())
    atomic_write(log_path, ("\n".join(lines) + "\n").encode())
    state = result.checkpoint.config["state"]
    print(f"wrote checkpoint {args.out} (iteration {state['iteration']}, best_val={state['best_val']}) "
          f"and metric log {log_path}")
    return EXIT_OK


def cmd_pretrain(args):
    return _run_training(args, "scratch", [])


def cmd_train(args):
    if args.mode == "scratch" and args.source:
        raise UsageError("--mode scratch takes no --source")
    return _run_training(args, args.mode, args.source or [])


# -- evaluation -----------------------------------------------------------------------------

def _load_model(path):
    ckpt = Checkpoint.load(path)
    return ckpt, NetworkConfig.from_dict(ckpt.config["network"])


def cmd_evaluate(args):
    ckpt, net = _load_model(args.checkpoint)
    ds = read_dataset(args.dataset)
    if args.subset_fraction is not None:
        ds = ds.subset(args.subset_fraction)
    _print_config("evaluate", {"checkpoint": args.checkpoint, "dataset": args.dataset,
                               "csi_threshold": args.csi_threshold, "subset_fraction": args.subset_fraction,
                               "network": net.to_dict()})
    if ds.frames.shape[1:] != (net.seq_len, net.frame_channels, net.frame_height, net.frame_width):
        raise ShapeError("dataset (T, P, H, W) vs checkpoint network",
                         (net.seq_len, net.frame_channels, net.frame_height, net.frame_width), ds.frames.shape[1:])
    report = evaluate_params(ckpt.model_params(), net, ds, args.csi_threshold)
    print(report.table())
    for line in report.kv_lines()[:1]:
        print(line)
    if args.out:
        atomic_write(args.out, ("\n".join(report.kv_lines()) + "\n").encode())
    if args.csv:
        atomic_write(args.csv, report.csv().encode())
    return EXIT_OK


def cmd_inspect_gates(args):
    ckpt, net = _load_model(args.checkpoint)
    if net.num_sources == 0:
        raise UsageError(f"{args.checkpoint} was not trained in transfer mode; it has no transfer gates")
    ds = read_dataset(args.dataset)
    _print_config("inspect-gates", {"checkpoint": args.checkpoint, "dataset": args.dataset})
    per_layer, pooled = gate_table(ckpt.model_params(), net, ds.frames)
    names = ckpt.config.get("train", {}).get("sources") or [f"source{m + 1}" for m in range(net.num_sources)]
    width = max(len("source"), *(len(os.path.basename(n)) for n in names))
    header = f"{'source':<{width}}  {'mean a_t':>8}"
    if args.per_layer:
        header += "".join(f"  {'layer' + str(k + 1):>8}" for k in range(net.num_layers))
    print(header)
    for m, name in enumerate(names):
        row = f"{os.path.basename(name):<{width}}  {pooled[m]:>8.2f}"
        if args.per_layer:
            row += "".join(f"  {per_layer[k, m]:>8.2f}" for k in range(net.num_layers))
        print(row)
    return EXIT_OK


def cmd_info(args):
    print(f"transmem kernels backend: {kernels.BACKEND}")
    for name, prof in PROFILES.items():
        print(f"profile {name}: {prof}")
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        print(f"checkpoint {args.checkpoint}: kind={ckpt.kind} state={json.dumps(ckpt.config.get('state'))}")
        print(f"  network: {json.dumps(ckpt.config['network'], sort_keys=True)}")
        print(f"  tensors: {len(ckpt.tensors)} ({sum(t.size for t in ckpt.tensors.values())} values)")
    if args.dataset:
        ds = read_dataset(args.dataset)
        print(f"dataset {args.dataset}: generator={ds.generator} seed={ds.seed} shape={ds.frames.shape} "
              f"config={json.dumps(ds.config, sort_keys=True)}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def _add_network_flags(p):
    p.add_argument("--layers", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--filter-size", type=int)
    p.add_argument("--subscale", type=int)
    p.add_argument("--source-bank-mode", choices=["closed_loop", "teacher_forced"], default="closed_loop")


def _add_training_flags(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="metric log path (default: <out>.log)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--val-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--subset-fraction", type=float)
    p.add_argument("--tiny", action="store_true", help="use the tiny profile defaults")
    _add_network_flags(p)


def build_parser():
    parser = _Parser(prog="transmem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a procedural dataset split")
    g.add_argument("--generator", choices=["glyphs", "blobs"], default="glyphs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-glyphs", type=int, choices=[1, 2, 3], default=1)
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--aridity", type=float, default=0.5)
    g.add_argument("--split", choices=["train", "val", "test"], default="train")
    g.add_argument("--input-len", type=int, default=10)
    g.add_argument("--predict-len", type=int, default=10)
    g.add_argument("--tiny", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a ConvLSTM source model")
    _add_training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train a target model (scratch, finetune or transfer)")
    t.add_argument("--mode", choices=["scratch", "finetune", "transfer"], default="transfer")
    t.add_argument("--source", action="append", help="source checkpoint; repeat for more (order = m)")
    t.add_argument("--resume", help="continue from a checkpoint written with --stop-after")
    t.add_argument("--stop-after", type=int, help="halt after this many iterations (resumable)")
    _add_training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="MSE/MAE/SSIM (and CSI) report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--csi-threshold", type=float)
    e.add_argument("--subset-fraction", type=float)
    e.add_argument("--out", help="write key=value report here")
    e.add_argument("--csv", help="write per-frame curves as CSV here")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect-gates", help="mean transfer-gate value per source")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--per-layer", action="store_true")
    i.set_defaults(func=cmd_inspect_gates)

    n = sub.add_parser("info", help="backend, profiles, and file summaries")
    n.add_argument("--checkpoint")
    n.add_argument("--dataset")
    n.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
