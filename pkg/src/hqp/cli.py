"""Command-line entry point: ``hqp <subcommand> [options]``.

Exit status is 0 on success, 2 when the pruning or quantization machinery
rejects its input, and 3 for file, format, dataset or configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .costs import CostCounters, compare_cost_models, hqp_cost, measure_pass_costs, qat_cost
from .errors import (
    CalibrationError,
    ConfigError,
    DatasetError,
    HQPError,
    ModelFormatError,
    PruningError,
    QuantizationError,
)
from .pipeline import (
    benchmark_latency,
    bundle_from_config,
    compression_report,
    model_from_config,
    run_hqp,
)
from .pruning import conditional_prune, validate_accuracy
from .quantization import quantize_model
from .report import emit_report, render_text
from .sensitivity import compute_sensitivity, dump_sensitivity, load_sensitivity, rank_filters
from .serialize import load_model, save_model
from .train import train_baseline

log = logging.getLogger("hqp")

EXIT_OK = 0
EXIT_CONSTRAINT = 2
EXIT_IO = 3


def _config(args) -> cfgmod.RunConfig:
    base = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    return base.with_overrides(
        seed=args.seed,
        delta_max=args.delta_max,
        delta_fraction=args.delta_frac,
        bits=args.bits,
    )


def _trained_model(args, cfg, bundle):
    if args.model:
        return load_model(args.model)
    log.info("no --model given; training %s from scratch", cfg.arch)
    model, acc = train_baseline(model_from_config(cfg), bundle.train, cfg.epochs, cfg.lr,
                                cfg.seed, bundle.holdout, cfg.batch_size)
    log.info("baseline holdout accuracy %.4f", acc)
    return model


def _require_model(args):
    if not args.model:
        raise ConfigError(f"{args.command} needs --model PATH")
    return load_model(args.model)


def _out(args, default):
    return Path(args.out or default)


def cmd_train(args, cfg):
    bundle = bundle_from_config(cfg)
    model, acc = train_baseline(
        model_from_config(cfg), bundle.train, cfg.epochs, cfg.lr, cfg.seed, bundle.holdout,
        cfg.batch_size, on_epoch=lambda e, l: log.info("epoch %d loss %.4f", e, l),
    )
    out = _out(args, "model.hqpm")
    save_model(model, out)
    print(f"holdout accuracy {acc:.4f}; model written to {out}")


def cmd_sensitivity(args, cfg):
    model = _require_model(args)
    bundle = bundle_from_config(cfg)
    ranked = rank_filters(compute_sensitivity(model, bundle.calib))
    out = _out(args, "sensitivity.txt")
    dump_sensitivity(ranked, out)
    print(f"{len(ranked)} units ranked; written to {out}")


def cmd_prune(args, cfg):
    model = _require_model(args)
    bundle = bundle_from_config(cfg)
    counters = CostCounters()
    if args.sensitivity:
        ranked = load_sensitivity(args.sensitivity, model)
    else:
        ranked = rank_filters(compute_sensitivity(model, bundle.calib, counters=counters))
    a_val = validate_accuracy(model, bundle.val, counters, field="eval_passes")
    state = conditional_prune(model, a_val, ranked, cfg.prune_config(), bundle.val, counters,
                              bundle.calib)
    out = _out(args, "pruned.hqpm")
    save_model(state.model, out)
    out.with_suffix(".history").write_text("\n".join(state.history_lines()) + "\n")
    print(f"theta {state.theta:.4f}, val accuracy {state.accuracy:.4f} "
          f"(baseline {a_val:.4f}), {state.steps} steps, terminated by {state.terminated_by}; "
          f"model written to {out}")


def cmd_quantize(args, cfg):
    model = _require_model(args)
    bundle = bundle_from_config(cfg)
    qmodel = quantize_model(model, bundle.calib, bits=cfg.bits)
    out = _out(args, "quantized.hqpm")
    save_model(qmodel, out)
    acc = validate_accuracy(qmodel, bundle.holdout)
    print(f"int8 holdout accuracy {acc:.4f}; model written to {out}")


def cmd_hqp(args, cfg):
    bundle = bundle_from_config(cfg)
    model = _trained_model(args, cfg, bundle)
    qmodel, state, counters = run_hqp(model, bundle, cfg.prune_config(), bits=cfg.bits)
    out = _out(args, "hqp.hqpm")
    save_model(qmodel, out)
    o = state.outcome
    print(f"theta {state.theta:.4f}; val drop before quantization "
          f"{100 * o.pre_quant_drop:.2f} points, after {100 * o.post_quant_drop:.2f}; "
          f"int8 holdout accuracy {o.holdout_quantized:.4f}")
    print("counters: " + ", ".join(f"{k}={v}" for k, v in counters.as_dict().items()))
    if o.post_quant_breach:
        print("warning: quantization pushes the val drop past delta_max")
    print(f"model written to {out}")


def cmd_bench(args, cfg):
    model = _require_model(args)
    s = benchmark_latency(model, warmup=cfg.warmup, reps=cfg.reps, seed=cfg.seed)
    print(f"mean {s.mean_ms:.3f} ms, p50 {s.p50_ms:.3f} ms, p95 {s.p95_ms:.3f} ms "
          f"(p95/p50 {s.p95_over_p50:.2f}); {s.flops} FLOPs; {s.weight_bytes} weight bytes")


def cmd_report(args, cfg):
    bundle = bundle_from_config(cfg)
    model = _trained_model(args, cfg, bundle)
    report, _, _ = compression_report(model, bundle, cfg)
    text_path, csv_path = emit_report(report, _out(args, "report.txt"))
    sys.stdout.write(render_text(report))
    print(f"report written to {text_path} and {csv_path}")


def cmd_compare_cost(args, cfg):
    n_calib = args.n_calib if args.n_calib is not None else cfg.calib_size
    n_val = args.n_val if args.n_val is not None else cfg.val_size
    n_train = args.n_train if args.n_train is not None else cfg.train_size
    counters = CostCounters(grad_passes=n_calib, loop_inference_passes=args.t_prune * n_val,
                            prune_steps=args.t_prune)
    if args.c_grad is not None and args.c_inf is not None:
        c_grad, c_inf = args.c_grad, args.c_inf
    else:
        model = load_model(args.model) if args.model else model_from_config(cfg)
        c_grad, c_inf = measure_pass_costs(model)
    ratio, c_hqp, c_qat = compare_cost_models(counters, args.epochs, n_train, c_grad, c_inf)
    assert c_hqp == hqp_cost(n_calib, args.t_prune, n_val, c_grad, c_inf)
    assert c_qat == qat_cost(args.epochs, n_train, c_grad)
    print(f"C_grad {c_grad:.6g}, C_inf {c_inf:.6g} (ratio {c_grad / c_inf:.2f})")
    print(f"C_HQP {c_hqp:.6g}, C_QAT {c_qat:.6g}, C_QAT/C_HQP {ratio:.2f}")


COMMANDS = {
    "train": (cmd_train, "train the baseline model"),
    "sensitivity": (cmd_sensitivity, "rank filters by sensitivity"),
    "prune": (cmd_prune, "accuracy-bounded structural pruning"),
    "quantize": (cmd_quantize, "INT8 post-training quantization"),
    "hqp": (cmd_hqp, "full pipeline: sensitivity, pruning, quantization"),
    "bench": (cmd_bench, "single-sample latency benchmark"),
    "report": (cmd_report, "comparison table against FP32, Q8 and P-only"),
    "compare-cost": (cmd_compare_cost, "analytic HQP vs QAT compute cost"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--model", metavar="PATH", help="input model file")
    common.add_argument("--out", metavar="PATH", help="output path")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--delta-max", type=float, metavar="F",
                        help="allowed accuracy drop as a fraction (0.015 = 1.5 points)")
    common.add_argument("--delta-frac", type=float, metavar="F",
                        help="pruning step as a fraction of the prunable filters")
    common.add_argument("--bits", type=int, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hqp", description="Accuracy-bounded pruning and INT8 quantization.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "prune":
            p.add_argument("--sensitivity", metavar="PATH", help="ranking written by 'sensitivity'")
        if name == "compare-cost":
            p.add_argument("--epochs", type=int, default=5, help="hypothetical QAT epochs")
            p.add_argument("--t-prune", type=int, default=0, help="pruning loop steps")
            p.add_argument("--n-calib", type=int)
            p.add_argument("--n-val", type=int)
            p.add_argument("--n-train", type=int)
            p.add_argument("--c-grad", type=float, help="cost of one gradient pass")
            p.add_argument("--c-inf", type=float, help="cost of one inference pass")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = _config(args)
        func(args, cfg)
    except (PruningError, CalibrationError, QuantizationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (ModelFormatError, DatasetError, ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except HQPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
