"""Command-line surface.

Verbs: synth-data, train, infer, eval, pareto, macs. Every command
validates its inputs before any side effect and is deterministic given
(config, seed). Exit codes: 2 usage, 3 bad data, 4 numerical failure.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import tensor as dt
from .checkpoint import load_checkpoint, model_config_from_flat
from .config import (build_run_config, dump_run_config, load_config_file,
                     parse_overrides)
from .data import AudioSignal, Corpus, load_wav, save_wav, synth_corpus
from .errors import DataError, NumericsError, ShapeError
from .metrics import count_macs, pareto_front, si_sdr, utilization_stats
from .model import SlimDenoiser, build_model
from .rng import philox
from .training import stage1_train, stage2_train, validate_dynamic

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="config override (repeatable; wins over file)")
    parser.add_argument("--seed", type=int, help="run seed override")


def _resolve_config(args):
    file_overrides = load_config_file(args.config) if args.config else {}
    flag_overrides = parse_overrides(args.set)
    if args.seed is not None:
        flag_overrides["seed"] = args.seed
    return build_run_config(file_overrides, flag_overrides)


def _load_model(path):
    config_flat, meta, arrays = load_checkpoint(path)
    model_cfg = model_config_from_flat(config_flat)
    model = SlimDenoiser(model_cfg, rng=np.random.default_rng(0),
                         with_router=bool(meta.get("has_router")))
    model.load_state_arrays(
        {k: v for k, v in arrays.items() if not k.startswith("adam.")})
    return model, config_flat, meta


def cmd_synth_data(args):
    cfg = _resolve_config(args)
    corpus = synth_corpus(args.out, args.utterances, cfg.data, cfg.seed)
    with open(os.path.join(args.out, "run_config.txt"), "w") as fh:
        fh.write(dump_run_config(cfg))
    print(f"wrote {len(corpus)} clean/noisy pairs to {args.out}")


def cmd_train(args):
    cfg = _resolve_config(args)
    corpus = Corpus.load(args.data)
    if corpus.sample_rate != cfg.data.sample_rate:
        raise DataError(f"corpus rate {corpus.sample_rate} != configured "
                        f"{cfg.data.sample_rate}; no silent resampling")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.txt"), "w") as fh:
        fh.write(dump_run_config(cfg))
    resume_from = None
    if args.resume:
        resume_model, _, resume_meta = _load_model(args.resume)
        _, _, resume_arrays = load_checkpoint(args.resume)
        if resume_meta.get("stage") != args.stage:
            raise DataError(f"--resume checkpoint is stage "
                            f"{resume_meta.get('stage')!r}, not "
                            f"{args.stage!r}")
        resume_from = (resume_meta, resume_arrays)
    if args.stage == "slim":
        if args.resume:
            model = resume_model
        else:
            model = build_model(cfg.model, seed=cfg.seed)
            if args.init:
                init_model, _, _ = _load_model(args.init)
                model.load_state_arrays(init_model.state_arrays())
        state = stage1_train(model, corpus, cfg, args.out, echo=True,
                             max_epochs=args.epochs,
                             resume_from=resume_from)
        print(f"stage slim done: best val loss {state.best_val:.6g} "
              f"(checkpoints in {args.out})")
    else:
        if args.resume:
            model = resume_model
        else:
            if not args.init:
                raise DataError("stage dyn requires --init with a stage-1 "
                                "checkpoint")
            backbone, _, meta = _load_model(args.init)
            if meta.get("has_router"):
                model = backbone
            else:
                model = build_model(cfg.model, seed=cfg.seed)
                model.load_state_arrays(backbone.state_arrays())
                model.implant_router(philox(cfg.seed, 17))
        state = stage2_train(model, corpus, cfg, args.out, echo=True,
                             max_epochs=args.epochs,
                             resume_from=resume_from)
        print(f"stage dyn done: best val loss {state.best_val:.6g} "
              f"(checkpoints in {args.out})")


def cmd_infer(args):
    model, config_flat, meta = _load_model(args.checkpoint)
    sig = load_wav(args.wav_in)
    expect_rate = config_flat.get("data.sample_rate", sig.sample_rate)
    if sig.sample_rate != expect_rate:
        raise DataError(f"{args.wav_in}: rate {sig.sample_rate} != model "
                        f"rate {expect_rate}; no silent resampling")
    if args.uf is not None:
        with dt.no_grad():
            out = model.forward_static(
                dt.Tensor(sig.samples.astype(model.dtype)), args.uf)
        enhanced = out.data.astype(np.float64)
        trace = None
    else:
        if model.router is None:
            raise DataError("checkpoint has no router; pass --uf")
        enhanced, trace = model.forward_dynamic(sig.samples)
        enhanced = enhanced.astype(np.float64)
    save_wav(args.wav_out, AudioSignal(enhanced, sig.sample_rate))
    if trace is not None and args.trace:
        trace.write_csv(args.trace)
        print(f"trace: {trace.n_frames} frames, mean utilization "
              f"{trace.mean_utilization:.4f} -> {args.trace}")
    print(f"enhanced {args.wav_in} ({len(enhanced)} samples) -> "
          f"{args.wav_out}")


def _eval_rows(model, corpus, uf, report):
    rows = []
    traces = []
    for entry in corpus.entries:
        noisy, clean = corpus.load_pair(entry)
        if uf is not None:
            with dt.no_grad():
                out = model.forward_static(
                    dt.Tensor(noisy.astype(model.dtype)), uf).data
            util = uf
            macs = report.total(uf)
        else:
            out, trace = model.forward_dynamic(noisy)
            traces.append(trace)
            util = trace.mean_utilization
            macs = report.trace_mean(trace.occurrence)
        rows.append({
            "name": entry.name,
            "snr_db": entry.snr_db,
            "si_sdr_in": si_sdr(clean, noisy),
            "si_sdr_out": si_sdr(clean, out),
            "mean_utilization": util,
            "macs_per_sample": macs,
            "pesq": "",  # hook column for externally computed scores
            "stoi": "",
        })
    return rows, traces


def cmd_eval(args):
    model, config_flat, meta = _load_model(args.checkpoint)
    corpus = Corpus.load(args.corpus)
    model_cfg = model_config_from_flat(config_flat)
    report = count_macs(model_cfg)
    if args.uf is None and model.router is None:
        raise DataError("checkpoint has no router; pass --uf")
    rows, traces = _eval_rows(model, corpus, args.uf, report)
    fieldnames = list(rows[0].keys())
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        agg = {"name": "aggregate", "pesq": "", "stoi": ""}
        for key in ("snr_db", "si_sdr_in", "si_sdr_out", "mean_utilization",
                    "macs_per_sample"):
            agg[key] = float(np.mean([r[key] for r in rows]))
        writer.writerow(agg)
    finally:
        if args.out:
            out.close()
    if traces:
        occ, mean_util = utilization_stats(traces)
        print(f"routed eval: mean utilization {mean_util:.4f}, "
              f"occurrence {np.array2string(occ, precision=3)}")


def cmd_pareto(args):
    points = []
    labels = []
    for path in args.eval_csv:
        with open(path) as fh:
            for row in csv.DictReader(fh):
                if row["name"] == "aggregate":
                    points.append((float(row["macs_per_sample"]),
                                   float(row["si_sdr_out"])))
                    labels.append(os.path.basename(path))
    if not points:
        raise DataError("no aggregate rows found in the eval CSVs")
    nondom = pareto_front(points)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["source", "macs_per_sample", "si_sdr_out",
                         "nondominated"])
        for label, (cost, quality), flag in zip(labels, points, nondom):
            writer.writerow([label, f"{cost:.6g}", f"{quality:.6g}",
                             str(bool(flag)).lower()])
    finally:
        if args.out:
            out.close()


def cmd_macs(args):
    cfg = _resolve_config(args)
    report = count_macs(cfg.model)
    if args.uf is not None:
        cfg.model.uset.index_of(args.uf)
        print(f"total MACs/sample at uf={args.uf:g}: "
              f"{report.total(args.uf):.6g}")
    if args.csv:
        report.to_csv(args.csv)
    else:
        print(report.to_text(), end="")
    router_share = report.router_total() / report.backbone_total(1.0)
    print(f"router overhead at uf=1: {100 * router_share:.4f}%")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynslim",
        description="dynamically slimmable speech enhancement at a "
                    "desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=200)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="run one training stage")
    _add_common(p)
    p.add_argument("--stage", choices=["slim", "dyn"], required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--init", help="checkpoint to initialize from "
                                  "(required for stage dyn)")
    p.add_argument("--resume", help="checkpoint to continue training from "
                                    "(keeps epoch numbering and moments)")
    p.add_argument("--epochs", type=int, help="override max epochs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="enhance one WAV file")
    p.add_argument("checkpoint")
    p.add_argument("wav_in")
    p.add_argument("wav_out")
    p.add_argument("--uf", type=float, help="force a static utilization")
    p.add_argument("--trace", help="write routing trace CSV here")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="per-utterance metrics over a corpus")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--uf", type=float, help="static utilization "
                                            "(default: routed)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pareto", help="label eval aggregates by dominance")
    p.add_argument("eval_csv", nargs="+")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(fn=cmd_pareto)

    p = sub.add_parser("macs", help="analytic MAC report for a config")
    _add_common(p)
    p.add_argument("--uf", type=float)
    p.add_argument("--csv", help="write per-layer table here")
    p.set_defaults(fn=cmd_macs)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, ShapeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
