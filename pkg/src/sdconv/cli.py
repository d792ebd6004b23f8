"""Command-line entry point (``sdconv <command> ...``)."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sdconv import analysis, experiments, zoo
from sdconv import checkpoint as ckpt_io
from sdconv.config import parse_config
from sdconv.errors import SDConvError
from sdconv.sdconv import MaskMode
from sdconv.train import evaluate, load_model, model_tensors, train


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _echo_config(cfg, out):
    out.write("# effective config\n")
    out.write(cfg.to_text())
    out.write("# end config\n")


def _write(path, text):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _config_from(args):
    return parse_config(args.config, args.overrides)


def _model_from(args):
    """Load a checkpointed model; overrides may redirect data paths or limits."""
    model, cfg, ckpt = load_model(args.checkpoint)
    if args.overrides:
        cfg = parse_config(overrides={**cfg.as_dict(), **_pairs(args.overrides)})
    return model, cfg, ckpt


def _pairs(items):
    from sdconv.config import parse_pairs

    return parse_pairs(items)


def _test_set(cfg):
    from sdconv.data import load_dataset

    return load_dataset(cfg.dataset, cfg.data_dir or None, "test").subset(cfg.eval_limit)


# -- commands -----------------------------------------------------------------------

def cmd_train(args, out):
    cfg = _config_from(args)
    _echo_config(cfg, out)
    result = train(cfg, args.out, resume=args.resume)
    for row in result.metrics:
        out.write(f"epoch={row['epoch']} step={row['step']} train_loss={row['train_loss']:.6f} "
                  f"eval_acc={row['eval_acc']:.6f} global_density={row['global_density']:.6f}\n")
    out.write(f"accuracy={result.final_accuracy:.6f}\n")
    out.write(f"global_density={result.final_density:.6f}\n")
    if result.checkpoint:
        out.write(f"checkpoint={result.checkpoint}\n")


def cmd_eval(args, out):
    model, cfg, _ = _model_from(args)
    _echo_config(cfg, out)
    out.write(f"accuracy={evaluate(model, _test_set(cfg)):.6f}\n")


def cmd_analyze_cost(args, out):
    if args.checkpoint:
        model, cfg, _ = load_model(args.checkpoint)
        report = analysis.count_cost(model, args.resolution)
    else:
        kw = {}
        if args.model != "toy":
            kw["dynamic"] = args.dynamic
        if args.dynamic or args.model == "toy":
            kw.update(k=args.k, mode=MaskMode(args.mode))
            if args.reduce_ratio:
                kw["reduce_ratio"] = args.reduce_ratio
        arch = zoo.get_arch(args.model, **kw)
        report = analysis.count_cost(arch, args.resolution)
    out.write(report.to_records())
    _write(args.csv, report.to_csv())


def cmd_analyze_sparsity(args, out):
    model, _, _ = load_model(args.checkpoint)
    report = analysis.measure_sparsity(model)
    out.write(report.to_records())
    _write(args.csv, report.to_csv())


def cmd_prune(args, out):
    model, cfg, ckpt = _model_from(args)
    pruned = experiments.prune_pretrained(model, args.fraction)
    report = analysis.measure_sparsity(pruned)
    out.write(f"fraction={args.fraction:g}\n")
    out.write(f"global_density={report.global_density:.6f}\n")
    if not args.no_eval:
        data = _test_set(cfg)
        out.write(f"accuracy_before={evaluate(model, data):.6f}\n")
        out.write(f"accuracy_after={evaluate(pruned, data):.6f}\n")
    if args.out:
        ckpt_io.save(args.out, ckpt_io.Checkpoint(model_tensors(pruned), ckpt.step, ckpt.schedule, cfg.as_dict(),
                                                  {"pruned_fraction": args.fraction}))
        out.write(f"checkpoint={args.out}\n")


def cmd_robustness(args, out):
    model, cfg, _ = _model_from(args)
    results = experiments.noise_robustness(model, _test_set(cfg), args.sigmas, args.seed)
    for sigma, acc in results:
        out.write(f"sigma={sigma:g} accuracy={acc:.6f}\n")
    _write(args.csv, experiments.robustness_csv(results))


def cmd_sweep(args, out):
    cfg = _config_from(args)
    _echo_config(cfg, out)
    points = experiments.sparsity_sweep(cfg, args.s_list, args.out)
    out.write(experiments.sweep_csv(points))


def cmd_compare(args, out):
    cfg = _config_from(args)
    _echo_config(cfg, out)
    for report in experiments.masking_strategy_compare(cfg, args.out):
        out.write(report.to_records())


def cmd_inspect(args, out):
    ckpt = ckpt_io.load(args.checkpoint)
    out.write(f"step={ckpt.step}\n")
    out.write(f"tensors={len(ckpt.tensors)}\n")
    for name, arr in ckpt.tensors.items():
        out.write(f"tensor.{name}={'x'.join(map(str, arr.shape)) or 'scalar'}\n")
    for group, values in (("schedule", ckpt.schedule), ("meta", ckpt.meta), ("config", ckpt.config)):
        for k, v in values.items():
            out.write(f"{group}.{k}={v}\n")


# -- parser ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sdconv", description="Sparse dynamic convolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def with_config(sp):
        sp.add_argument("--config", help="key=value or JSON config file")
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="settings applied after the file")

    def with_checkpoint(sp, overrides=True):
        sp.add_argument("--checkpoint", required=True)
        if overrides:
            sp.add_argument("overrides", nargs="*", metavar="key=value",
                            help="e.g. data_dir=... eval_limit=...")

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--out", help="run directory (metrics, layer log, checkpoint)")
    sp.add_argument("--resume", action="store_true", help="continue from the run directory checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy of a checkpoint")
    with_checkpoint(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze-cost", help="parameter and MAC report")
    sp.add_argument("--model", default="resnet18", choices=sorted(zoo.ZOO))
    sp.add_argument("--resolution", type=int, default=None)
    sp.add_argument("--dynamic", action="store_true", help="dynamic convolution everywhere except the stem")
    sp.add_argument("--k", type=int, default=4)
    sp.add_argument("--reduce-ratio", type=int, default=None)
    sp.add_argument("--mode", default=MaskMode.DIFFERENT.value, choices=[m.value for m in MaskMode])
    sp.add_argument("--checkpoint", help="cost a trained model with its live masks")
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_analyze_cost)

    sp = sub.add_parser("analyze-sparsity", help="per-layer sparsity of a checkpoint")
    with_checkpoint(sp, overrides=False)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_analyze_sparsity)

    sp = sub.add_parser("prune-pretrained", help="one-shot magnitude pruning of a checkpoint")
    with_checkpoint(sp)
    sp.add_argument("--fraction", type=float, default=0.5)
    sp.add_argument("--out", help="write the pruned checkpoint here")
    sp.add_argument("--no-eval", action="store_true")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("robustness", help="accuracy under Gaussian input noise")
    with_checkpoint(sp)
    sp.add_argument("--sigmas", type=_floats, default=list(experiments.DEFAULT_SIGMAS))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_robustness)

    sp = sub.add_parser("sweep", help="train across target sparsities")
    with_config(sp)
    sp.add_argument("--s-list", type=_floats, default=[0.2, 0.4, 0.6, 0.8])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare-masks", help="per-expert versus shared masks")
    with_config(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("inspect-checkpoint", help="list checkpoint contents")
    with_checkpoint(sp, overrides=False)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=err)
    try:
        args.func(args, out)
    except SDConvError as exc:
        first = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        err.write(f"error[{exc.category}]: {first}\n")
        rest = str(exc).splitlines()[1:]
        if rest:
            err.write("\n".join(rest) + "\n")
        return 2
    except OSError as exc:
        err.write(f"error[io]: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
