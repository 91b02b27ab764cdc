"""Command line: ``ghalab <command> [options]`` or ``python -m ghalab``.

Failures print one line on stderr::

    error code=<name> exit=<n> msg=<text>

Exit codes:

    0  success
    1  internal error
    2  usage error, unknown config key or invalid config value
    3  malformed config file
    4  missing checkpoint or input file
    5  refused (stage order, unconverged hidden units without --force-rho)
    6  non-finite loss (a diagnostic snapshot is written)
    7  corrupt checkpoint or dump file
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .. import numerics as nx
from ..checkpoint import CheckpointError, atomic_write_text, read_checkpoint
from ..fmdump import DumpError, write_fm_dump
from ..grouping import FM_KINDS, layer_type, pattern_score, pool_feature_maps
from ..metrics import metrics_to_csv, read_metrics
from ..v2s import VotingError
from .config import (
    ConfigFileError,
    ConfigKeyError,
    ConfigValueError,
    apply_overrides,
    build_config,
    config_from_dict,
    config_to_sections,
    load_config,
)
from .sweep import AXES, sweep
from .train import NonFiniteLoss, StageError, Trainer, evaluate

log = logging.getLogger("ghalab")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG_FILE = 3
EXIT_MISSING = 4
EXIT_REFUSED = 5
EXIT_NONFINITE = 6
EXIT_CORRUPT = 7


class CliError(Exception):
    def __init__(self, code, name, msg):
        super().__init__(msg)
        self.code = code
        self.name = name


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _one_line(text):
    return " ".join(str(text).split())


# ------------------------------------------------------------------ helpers


def _config(args):
    return load_config(args.config, args.set)


def _reconfigure(cfg, overrides):
    """Apply ``--set`` overrides on top of a config restored from a checkpoint."""
    if not overrides:
        return cfg
    return build_config(apply_overrides(config_to_sections(cfg), overrides))


def _restore(args, out_dir=None):
    path = args.checkpoint
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    header, _ = read_checkpoint(path)
    cfg = _reconfigure(config_from_dict(header["config"]), args.set)
    return Trainer.from_checkpoint(path, out_dir=out_dir, cfg=cfg)


def _print(obj):
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))


# ----------------------------------------------------------------- commands


def cmd_train(args):
    cfg = _config(args)
    out = args.out or cfg.output_dir
    tr = Trainer(cfg, out_dir=out)
    summary = tr.run()
    _print({"out": out, **summary})


def cmd_prune(args):
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    tr = _restore(args, out_dir=out)
    if tr.state.stage != "stage1-gct":
        raise StageError(f"checkpoint is in stage {tr.state.stage}; voting needs stage1-gct")
    converged = tr.state.rho or tr.grouping.converged()
    if not converged and not args.force_rho:
        raise StageError(f"hidden units have not converged (epoch shift "
                         f"{tr.grouping.epoch_shift():.4g}, threshold {tr.cfg.group.rho_eps}); "
                         f"pass --force-rho to vote anyway")
    if not converged:
        log.warning("non-conforming: voting forced before hidden units converged")
    report = tr.run_voting(force=args.force_rho)
    path = tr.checkpoint("pruned.ckpt")
    _print({"checkpoint": path, "report": os.path.join(out, "prune_report.txt"),
            "forced_rho": tr.state.forced_rho, "survivors": report.survivors,
            "params_before": report.params_before, "params_after": report.params_after})


def cmd_finetune(args):
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    tr = _restore(args, out_dir=out)
    if tr.state.stage != "stage2-finetune":
        raise StageError(f"checkpoint is in stage {tr.state.stage}; finetuning needs a pruned "
                         f"checkpoint (stage2-finetune)")
    tr._open_logs()
    tr.run_stage2(max_steps=args.steps)
    summary = tr.finish()
    _print({"out": out, **summary})


def cmd_eval(args):
    tr = _restore(args)
    split = getattr(tr.data, args.split)
    metrics = evaluate(tr.model, split)
    mask = tr.model.head_mask
    layers = tr.model.attention_layers()
    heads = mask.sums() if mask is not None else [a.n_heads for _, a in layers]
    _print({"split": args.split, "stage": tr.state.stage, "pruned": mask is not None,
            "layers": [n for n, _ in layers], "heads_per_layer": heads, **metrics})


def cmd_sweep(args):
    cfg = _config(args)
    out = args.out or os.path.join(cfg.output_dir, f"sweep-{args.axis}")
    alphas = [float(x) for x in args.alphas.split(",")] if args.alphas else None
    betas = [float(x) for x in args.betas.split(",")] if args.betas else None
    groups = [int(x) for x in args.groups.split(",")] if args.groups else None
    kw = {}
    if alphas:
        kw["alphas"] = alphas
    if betas:
        kw["betas"] = betas
    report = sweep(cfg, args.axis, out_dir=out, groups=groups, **kw)
    sys.stdout.write(report.to_table())


def _series(rows, key):
    return [(r["step"], r[key]) for r in rows if not math.isnan(r[key])]


def cmd_report(args):
    path = os.path.join(args.run, "metrics.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    rows = read_metrics(path)
    if not rows:
        raise CliError(EXIT_MISSING, "empty", f"{path} has no rows")
    series = [{"step": r["step"], "homogeneity": r["homogeneity"], "diversity": r["diversity"]}
              for r in rows if not math.isnan(r["homogeneity"])]
    series_path = os.path.join(args.run, "trend_series.csv")
    atomic_write_text(series_path, metrics_to_csv(series, ("step", "homogeneity", "diversity")))
    first, last = rows[0], rows[-1]
    lines = [f"run: {args.run}", f"rows: {len(rows)}", "metric\tfirst\tlast\tmin\tmax"]
    for key in ("loss_task", "loss_group", "homogeneity", "diversity", "sc", "di", "ppl", "acc"):
        vals = [v for _, v in _series(rows, key)]
        if not vals:
            lines.append(f"{key}\tn/a\tn/a\tn/a\tn/a")
            continue
        lines.append(f"{key}\t{vals[0]:.4f}\t{vals[-1]:.4f}\t{min(vals):.4f}\t{max(vals):.4f}")
    summary_path = os.path.join(args.run, "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            s = json.load(fh)
        lines.append(f"stage: {s.get('stage')}  pruned: {s.get('pruned')}  "
                     f"heads: {s.get('heads_per_layer')}")
        lines.append(f"valid acc: {s['valid']['acc']:.4f}  test acc: {s['test']['acc']:.4f}")
    lines.append(f"steps {first['step']}..{last['step']}")
    lines.append(f"series: {series_path}")
    print("\n".join(lines))


def cmd_inspect(args):
    tr = _restore(args)
    g = tr.grouping
    batch = tr.data.valid.first_batch(args.batch)
    src, tgt_in, _ = batch
    tr.model.eval()
    with nx.no_grad():
        _, fms = tr.model.forward(src, tgt_in)
    voted = [fms[i] for i in tr.voted]
    out = {"stage": tr.state.stage, "epoch": tr.state.epoch, "step": tr.state.step,
           "epoch_shift": g.epoch_shift(), "converged": g.converged(), "layers": []}
    with nx.no_grad():
        for fm, unit in zip(voted, g.units):
            entry = {"name": fm.name, "labels": None if unit.labels is None else unit.labels,
                     "last_shift": unit.last_shift}
            if unit.ema:
                entry["centroids"] = {k: v for k, v in unit.ema.items()}
                labels = g.assign([pool_feature_maps(fm, g.config.primary_kind).data])[0]
                entry["assigned"] = labels
                entry["eta"] = {k: pattern_score(pool_feature_maps(fm, k).data.astype(np.float64),
                                                 unit.ema[k][labels])
                                for k in FM_KINDS if k in unit.ema}
            out["layers"].append(entry)
    if args.dump:
        n = write_fm_dump(args.dump, fms, meta={"checkpoint": os.path.abspath(args.checkpoint),
                                                "step": tr.state.step, "batch": args.batch})
        out["dump"] = {"path": args.dump, "records": n}
    _print(out)


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="ghalab", description="Grouped head attention lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("train", help="stage 1, voting and stage 2")
    common(sp)
    sp.add_argument("--out", help="output directory (default: train.output_dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="run the voting epoch on a stage-1 checkpoint")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--force-rho", action="store_true",
                    help="vote even if the hidden units have not converged")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("finetune", help="stage-2 training of a pruned checkpoint")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--steps", type=int, help="fixed number of steps instead of epochs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="task metrics and surviving heads of a checkpoint")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="alpha/beta grid or group-count sweep")
    common(sp)
    sp.add_argument("--axis", choices=AXES, required=True)
    sp.add_argument("--alphas", help="comma-separated alpha values")
    sp.add_argument("--betas", help="comma-separated beta values")
    sp.add_argument("--groups", help="comma-separated group counts")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="summarise a run directory")
    sp.add_argument("run")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("inspect", help="dump hidden units, assignments and pattern scores")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--dump", help="also write per-head feature maps to this file")
    sp.set_defaults(func=cmd_inspect)
    return p


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.code, exc.name
    if isinstance(exc, ConfigKeyError):
        return EXIT_USAGE, "unknown-key"
    if isinstance(exc, ConfigValueError):
        return EXIT_USAGE, "bad-value"
    if isinstance(exc, ConfigFileError):
        return EXIT_CONFIG_FILE, "config-file"
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing-file"
    if isinstance(exc, (StageError, VotingError)):
        return EXIT_REFUSED, "refused"
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NONFINITE, "non-finite"
    if isinstance(exc, (CheckpointError, DumpError)):
        return EXIT_CORRUPT, "corrupt"
    return EXIT_INTERNAL, "internal"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if not args.command:
            raise CliError(EXIT_USAGE, "usage", "missing command; see --help")
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        code, name = _classify(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error code={name} exit={code} msg={_one_line(msg)}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
