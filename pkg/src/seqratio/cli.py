"""Command-line entry points.

    seqratio gen-data        --config C --out DIR [--seed S]
    seqratio train           --config C --data FILE --out DIR [--order N] [--formula F] [--resume CKPT]
    seqratio eval            --config C --data FILE --out DIR (--checkpoint CKPT | --oracle) [--thresholds n]
    seqratio compare-losses  --config C --data FILE --out DIR [--losses a,b,c]

Exit codes: 0 success, 2 invalid config or arguments, 3 numerical
divergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import InvalidInput, NumericalDivergence, SeqRatioError, SequenceBatch
from .eval import np_error_by_time, sat_curve
from .io import (
    ConfigError,
    digest,
    load_config,
    read_dataset,
    write_csv,
    write_dataset,
    write_sat_curve,
)
from .losses import LLR_LOSSES
from .model import load_checkpoint, predict_llr, save_checkpoint, train
from .msprt import error_stats, run_msprt_batch
from .oracle import sample_sequences, true_llr_batch

log = logging.getLogger("seqratio")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        from .io import ExperimentConfig

        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "order", None) is not None:
        cfg.model = replace(cfg.model, order=args.order)
    if getattr(args, "formula", None) is not None:
        cfg.model = replace(cfg.model, formula=args.formula)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if args.out else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    batch = sample_sequences(cfg.source.spec(), cfg.data.M, cfg.data.T, cfg.seed)
    blob = write_dataset(batch, out / "data.seqb")
    print(f"{digest(blob)}  {out / 'data.seqb'}")
    return EXIT_OK


def _write_trace(path, trace) -> None:
    write_csv(path, ("iteration", "total", "mult", "llr"), [(i + 1, r.total, r.mult, r.llr) for i, r in enumerate(trace)])


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = read_dataset(args.data)
    init = load_checkpoint(args.resume) if args.resume else None
    mcfg = replace(cfg.model, seed=cfg.seed)
    try:
        res = train(mcfg, data, init=init)
    except NumericalDivergence as exc:
        _write_trace(out / "trace.csv", exc.trace)
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    save_checkpoint(res.params, out / "model.ckpt")
    _write_trace(out / "trace.csv", res.trace)
    if res.trace:
        print(f"initial loss {res.trace[0].total:.6g}, final loss {res.trace[-1].total:.6g}")
    return EXIT_OK


def _llr_for(args, cfg, data: SequenceBatch) -> np.ndarray:
    if args.oracle:
        spec = cfg.source.spec()
        if spec.K != data.K or spec.d != data.d:
            raise InvalidInput("source spec in config does not match the dataset shape")
        return true_llr_batch(spec, data.features)
    if not args.checkpoint:
        raise InvalidInput("eval needs --checkpoint or --oracle")
    params = load_checkpoint(args.checkpoint)
    if params.d != data.d or params.K != data.K:
        raise InvalidInput("checkpoint does not match the dataset shape")
    return predict_llr(params, data.features, cfg.model.tandem)


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = read_dataset(args.data)
    n = args.thresholds if args.thresholds is not None else cfg.eval.thresholds
    llr = _llr_for(args, cfg, data)
    curve = sat_curve(llr, data.labels, n)
    write_sat_curve(out / "sat_curve.csv", curve)

    # decisions and error statistics at the median swept threshold
    mid = curve.points[len(curve.points) // 2].threshold
    pred, tau, forced = run_msprt_batch(llr, mid)
    write_csv(
        out / "decisions.csv",
        ("index", "label", "predicted", "hitting_time", "forced", "threshold"),
        [(i, int(y) + 1, int(p) + 1, int(t), int(f), mid) for i, (y, p, t, f) in enumerate(zip(data.labels, pred, tau, forced))],
    )
    stats = error_stats(data.labels, pred, data.K, tau)
    rows = []
    for k in range(data.K):
        for l in range(data.K):
            if k != l:
                rows.append((k + 1, l + 1, stats.alpha[k, l], stats.sem[k, l], int(stats.trials[k]), float(np.exp(-mid))))
    write_csv(out / "error_stats.csv", ("true_class", "decided_class", "alpha", "sem", "trials", "bound"), rows)
    last = max(curve.points, key=lambda p: p.threshold)
    print(f"{len(curve)} thresholds; largest-threshold point: mht={last.mean_hitting_time:.4g} error={last.balanced_error:.4g}")
    return EXIT_OK


def _split(data: SequenceBatch, holdout: float):
    n_test = max(1, int(round(data.M * holdout)))
    n_train = data.M - n_test
    if n_train < 1:
        raise InvalidInput("holdout leaves no training data")
    return data.subset(np.arange(n_train)), data.subset(np.arange(n_train, data.M))


def compare_losses(cfg, data: SequenceBatch, losses, seeds, n_thresholds: int):
    """Train one model per (loss, seed); returns per-run results."""
    train_set, test_set = _split(data, cfg.eval.holdout)
    results = []
    for loss in losses:
        for seed in seeds:
            mcfg = replace(cfg.model, llr_loss=loss, seed=seed)
            diverged = False
            try:
                res = train(mcfg, train_set)
                params, trace = res.params, res.trace
            except NumericalDivergence as exc:
                diverged = True
                params, trace = exc.last_params, exc.trace
            llr = predict_llr(params, test_set.features, mcfg.tandem)
            llr = np.where(np.isfinite(llr), llr, 0.0)
            final_err = float(np_error_by_time(llr[:, -1:], test_set.labels)[0])
            try:
                curve = sat_curve(llr, test_set.labels, n_thresholds)
            except SeqRatioError:
                curve = None
            results.append(
                {"loss": loss, "seed": seed, "diverged": diverged, "final_error": final_err, "curve": curve, "trace": trace}
            )
    return results


def cmd_compare_losses(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    data = read_dataset(args.data)
    losses = [s.strip() for s in (args.losses or cfg.compare.losses).split(",") if s.strip()]
    if not losses:
        raise InvalidInput("loss list is empty")
    for loss in losses:
        if loss not in LLR_LOSSES:
            raise InvalidInput(f"unknown loss {loss!r}")
    seeds = [int(s) for s in cfg.compare.seeds.split(",") if s.strip()]
    n = args.thresholds if args.thresholds is not None else cfg.eval.thresholds
    results = compare_losses(cfg, data, losses, seeds, n)
    T = data.T
    probe_times = sorted({max(1.0, T / 4), max(1.0, T / 2), float(T)})
    summary = []
    for loss in losses:
        runs = [r for r in results if r["loss"] == loss]
        for r in runs:
            _write_trace(out / f"trace_{loss}_seed{r['seed']}.csv", r["trace"])
            if r["curve"] is not None:
                write_sat_curve(out / f"sat_{loss}_seed{r['seed']}.csv", r["curve"])
        errs = [r["final_error"] for r in runs]
        at = []
        for t in probe_times:
            vals = [r["curve"].error_at(t) for r in runs if r["curve"] is not None]
            at.append(float(np.median(vals)) if vals else float("nan"))
        summary.append([loss, float(np.median(errs)), sum(r["diverged"] for r in runs), *at])
    order = sorted(range(len(summary)), key=lambda i: summary[i][1])
    for rank, i in enumerate(order, 1):
        summary[i].append(rank)
    header = ("loss", "median_final_error", "diverged_runs", *[f"error_at_mht_{t:g}" for t in probe_times], "rank")
    write_csv(out / "summary.csv", header, summary)
    for row in sorted(summary, key=lambda r: r[-1]):
        print(f"{row[-1]}. {row[0]}: median final error {row[1]:.4f} ({row[2]} diverged)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqratio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="SEQB dataset file")

    g = sub.add_parser("gen-data", help="sample a synthetic Gaussian dataset")
    common(g, data=False)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the temporal integrator")
    common(t)
    t.add_argument("--order", type=int)
    t.add_argument("--formula", choices=["tandem", "tandemwo"])
    t.add_argument("--resume", help="checkpoint to start from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="SAT curve and error statistics")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="use true LLRs of the configured source")
    e.add_argument("--thresholds", type=int)
    e.add_argument("--order", type=int)
    e.add_argument("--formula", choices=["tandem", "tandemwo"])
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare-losses", help="train with several LLR losses and compare")
    common(c)
    c.add_argument("--losses", help="comma-separated loss names")
    c.add_argument("--thresholds", type=int)
    c.add_argument("--order", type=int)
    c.add_argument("--formula", choices=["tandem", "tandemwo"])
    c.set_defaults(func=cmd_compare_losses)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        log.error("numerical divergence: %s", exc)
        return EXIT_DIVERGED
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (InvalidInput, SeqRatioError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
