"""Command-line entry point: ``raci <subcommand> ...``.

Every subcommand prints a one-line summary on success and writes its
artifacts under ``--run``. Precondition failures exit with status 1 and the
error text on stderr; argument errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import evaluation as E
from . import storage as S
from . import training as T
from .core import DatasetError, validate_dataset
from .model import VARIANTS, RaciConfig
from .retrieval import PoolConfigError, StalePoolError
from .synthetic import GeneratorConfig, GeneratorConfigError, build_benchmark

GRADCHECK_TOL = 1e-4


class CliError(Exception):
    pass


def _parse_key(text: str):
    site, sep, year = text.rpartition(":")
    if not sep or not site:
        raise CliError(f"sample key must look like SITE:YEAR, got {text!r}")
    try:
        return site, int(year)
    except ValueError:
        raise CliError(f"sample key {text!r}: year is not an integer") from None


def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"config file {path}: {exc}") from None


# ---------------------------------------------------------------------------
# argument groups
# ---------------------------------------------------------------------------


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("raci", "lstm"))
    g.add_argument("--variant", choices=tuple(VARIANTS))
    g.add_argument("--hidden", type=int, dest="h")
    g.add_argument("--lstm-layers", type=int)
    g.add_argument("--dropout", type=float, dest="dropout_p")
    g.add_argument("--k-neighbors", type=int)
    g.add_argument("--k-pca", type=int)
    g.add_argument("--tau", type=float)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optimization")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--grad-clip", type=float)
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")


def _resolve_model(args, file_cfg: dict) -> RaciConfig:
    d = dict(file_cfg.get("model", {}))
    for name in ("model", "h", "lstm_layers", "dropout_p", "k_neighbors", "k_pca", "tau"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    cfg = RaciConfig.from_dict(d)
    variant = getattr(args, "variant", None) or file_cfg.get("variant")
    return cfg.variant(variant) if variant else cfg


def _resolve_train(args, file_cfg: dict) -> T.TrainConfig:
    d = dict(file_cfg.get("train", {}))
    for name in ("epochs", "lr", "batch_size", "seed", "grad_clip"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if "epochs" not in d:
        raise CliError("the number of epochs is required (--epochs or the config file's train.epochs)")
    return T.TrainConfig.from_dict(d)


def _load(path):
    return S.load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> str:
    d = _load_config_file(args.config).get("generator", {})
    for name in ("rows", "cols", "n_regimes", "first_year", "last_year", "n_test_years",
                 "noise_std", "seed", "smoothness", "days_per_year"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    if args.layout is not None:
        d["regime_layout"] = args.layout
    if args.days_per_year is not None and "month_lengths" not in d:
        if args.days_per_year % 12:
            raise CliError("--days-per-year must be a multiple of 12 for a uniform calendar")
        d["month_lengths"] = [args.days_per_year // 12] * 12
    gen = GeneratorConfig.from_dict(d)
    ds = build_benchmark(gen)
    S.save_dataset(ds, args.out, generator=gen.to_dict())
    n = {k: len(v) for k, v in ds.splits.items()}
    return (f"synth: wrote {len(ds.samples)} site-years for {len(ds.sites)} sites to {args.out} "
            f"(train {n['train']}, auxiliary {n['auxiliary']}, test {n['test']})")


def _write_run_basics(run: S.RunDirectory, command: str, cfg: RaciConfig, tcfg: T.TrainConfig,
                      extra: dict) -> None:
    run.write_config({"command": command, "model": cfg.to_dict(), "train": tcfg.to_dict(), **extra})
    run.write_seed(tcfg.seed)


def _write_retrieval_log(run: S.RunDirectory, log: T.RetrievalLog) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(T.RETRIEVAL_LOG_HEADER)
    for r in log.rows:
        w.writerow([r[0], r[1], r[2], r[3], r[4], S.fmt(r[5]), S.fmt(r[6]), S.fmt(r[7]), r[8]])
    return run.write_text("exports/retrieval_log.csv", buf.getvalue())


def cmd_train(args) -> str:
    file_cfg = _load_config_file(args.config)
    cfg = _resolve_model(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    ds = _load(args.data)
    run = S.RunDirectory(args.run)
    _write_run_basics(run, "train", cfg, tcfg, {"data": str(args.data)})
    log = T.RetrievalLog(ds) if args.log_retrieval else None
    state = T.train(ds, cfg, tcfg, on_retrieval=log)
    S.save_checkpoint(state, run.checkpoint_path())
    run.write_loss_history(state.loss_history)
    if log is not None:
        _write_retrieval_log(run, log)
    last = state.loss_history[-1]["loss"] if state.loss_history else float("nan")
    return f"train: {tcfg.epochs} epochs, final loss {last:.6g}, checkpoint {run.checkpoint_path()}"


def cmd_finetune(args) -> str:
    file_cfg = _load_config_file(args.config)
    state = S.load_checkpoint(args.checkpoint)
    d = {**state.train_config.to_dict(), **file_cfg.get("train", {})}
    for name in ("epochs", "lr", "batch_size", "seed", "grad_clip"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if args.epochs is None and "epochs" not in file_cfg.get("train", {}):
        raise CliError("the number of epochs is required (--epochs)")
    tcfg = T.TrainConfig.from_dict(d)
    ds = _load(args.data)
    pool_ds = _load(args.pool_data) if args.pool_data else ds
    run = S.RunDirectory(args.run)
    _write_run_basics(run, "finetune", state.config, tcfg,
                      {"data": str(args.data), "pool_data": str(args.pool_data or args.data),
                       "from_checkpoint": str(args.checkpoint)})
    state = T.fine_tune(state, ds, tcfg, pool_dataset=pool_ds)
    S.save_checkpoint(state, run.checkpoint_path())
    run.write_loss_history(state.loss_history)
    return f"finetune: {tcfg.epochs} epochs, final loss {state.loss_history[-1]['loss']:.6g}"


def cmd_eval(args) -> str:
    state = S.load_checkpoint(args.checkpoint)
    ds = _load(args.data)
    pool_ds = _load(args.pool_data) if args.pool_data else None
    group = None if args.group_by == "none" else args.group_by
    rep = E.evaluate(state, ds, args.split, group, pool_dataset=pool_ds, checkpoint_id=str(args.checkpoint))
    run = S.RunDirectory(args.run)
    run.write_config({"command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
                      "split": args.split, "group_by": args.group_by, "model": state.config.to_dict()})
    rep.write(run.path)
    return f"eval: {args.split} RMSE {rep.rmse:.6g}, within-site R2 {rep.r2:.6g} over {rep.n_sites} sites"


def cmd_ablate(args) -> str:
    file_cfg = _load_config_file(args.config)
    base = _resolve_model(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    ds = _load(args.data)
    seeds = args.seeds or [tcfg.seed]
    run = S.RunDirectory(args.run)
    _write_run_basics(run, "ablate", base, tcfg, {"data": str(args.data), "seeds": seeds})
    tables = []
    for s in seeds:
        res = E.ablation_suite(ds, base, replace(tcfg, seed=int(s)))
        run.write_text(f"ablation_seed{s}.csv", res.to_csv())
        tables.append(res.table())
    mean = {m: {v: float(np.mean([t[m][v] for t in tables])) for v in E.ABLATION_COLUMNS}
            for m in ("rmse", "r2")}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", *E.ABLATION_COLUMNS])
    for m, row in mean.items():
        w.writerow([m, *(repr(row[v]) for v in E.ABLATION_COLUMNS)])
    run.write_text("ablation.csv", buf.getvalue())
    best = min(E.ABLATION_COLUMNS, key=lambda v: mean["rmse"][v])
    return f"ablate: {len(seeds)} seed(s), mean RMSE Full {mean['rmse']['Full']:.6g}, best variant {best}"


def cmd_sweep(args) -> str:
    file_cfg = _load_config_file(args.config)
    base = _resolve_model(args, file_cfg)
    tcfg = _resolve_train(args, file_cfg)
    ds = _load(args.data)
    run = S.RunDirectory(args.run)
    _write_run_basics(run, "sweep", base, tcfg, {"data": str(args.data), "taus": args.taus,
                                                  "k_pcas": args.k_pcas, "spread_seeds": args.spread_seeds})
    res = E.sensitivity_sweep(ds, base, tcfg, args.taus, args.k_pcas, args.spread_seeds or ())
    run.write_text("sweep.csv", res.to_csv())
    if res.seed_spread is not None:
        run.write_json("sweep_spread.json", res.seed_spread)
    return f"sweep: {len(res.rows)} rows, RMSE range {res.rmse_range():.6g}"


def cmd_uq(args) -> str:
    state = S.load_checkpoint(args.checkpoint)
    ds = _load(args.data)
    pool_ds = _load(args.pool_data) if args.pool_data else None
    keys = [_parse_key(k) for k in args.keys] if args.keys else list(ds.splits[args.split])
    if not keys:
        raise CliError(f"{args.split} split is empty")
    res = T.mc_dropout_predict(state, ds, keys, p=args.p, n_passes=args.passes, seed=args.seed,
                               pool_dataset=pool_ds)
    run = S.RunDirectory(args.run)
    run.write_config({"command": "uq", "checkpoint": str(args.checkpoint), "data": str(args.data),
                      "p": args.p, "passes": args.passes, "seed": args.seed})
    run.write_seed(args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["site_id", "year", "day", "mean", "std"])
    for i, k in enumerate(res.keys):
        for d in range(res.mean.shape[1]):
            w.writerow([k[0], k[1], d, S.fmt(res.mean[i, d]), S.fmt(res.std[i, d])])
    run.write_text("uq.csv", buf.getvalue())
    run.write_json("uq_summary.json", {"spread_ratio": res.spread_ratio, "mean_std": float(res.std.mean()),
                                        "mean_abs_prediction": float(np.abs(res.mean).mean()),
                                        "n_samples": len(res.keys), "passes": args.passes, "p": args.p})
    return f"uq: {len(keys)} samples x {args.passes} passes, spread ratio {res.spread_ratio:.6g}"


def cmd_gradcheck(args) -> int:
    ds, cfg, state, pool, ws = T.toy_gradcheck_setup(seed=args.seed, h=args.hidden)
    res = T.grad_check(state.params, ws, pool, cfg, ds.calendar, step=args.step)
    if args.run:
        run = S.RunDirectory(args.run)
        run.write_json("gradcheck.json", {"max_rel_error": res.max_rel_error, "worst": list(res.worst),
                                          "per_param": res.per_param, "n_checked": res.n_checked,
                                          "fallback_targets": res.fallback_targets, "seed": args.seed})
    ok = res.max_rel_error < GRADCHECK_TOL
    print(f"gradcheck: max relative error {res.max_rel_error:.3e} over {res.n_checked} entries "
          f"(worst {res.worst[0]}[{res.worst[1]}]) {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_inspect_retrieval(args) -> str:
    state = S.load_checkpoint(args.checkpoint)
    if state.config.model != "raci":
        raise CliError("retrieval inspection needs a RACI checkpoint")
    ds = _load(args.data)
    pool_ds = _load(args.pool_data) if args.pool_data else ds
    pool = E.pool_for(state, pool_ds)
    if pool is None:
        raise CliError("this checkpoint's variant does not use yearly retrieval")
    pred = E.collect_predictions(state, ds, args.split, pool=pool)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_site", "target_year", "fallback", "member_site", "member_year", "similarity", "weight"])
    n_fb = 0
    for d in pred.diagnostics:
        for rep in d.reports:
            n_fb += int(rep.fallback)
            if rep.fallback:
                w.writerow([rep.target[0], rep.target[1], 1, "", "", "", ""])
            for idx, wt in zip(rep.members, rep.weights):
                mk = pool.keys[idx]
                w.writerow([rep.target[0], rep.target[1], 0, mk[0], mk[1], S.fmt(rep.similarities[idx]), S.fmt(wt)])
    run = S.RunDirectory(args.run)
    run.write_text("exports/retrieval.csv", buf.getvalue())
    return f"inspect-retrieval: {len(pred.keys)} targets, fallback rate {n_fb / len(pred.keys):.4g}"


def cmd_export_attention(args) -> str:
    state = S.load_checkpoint(args.checkpoint)
    if state.config.model != "raci":
        raise CliError("attention export needs a RACI checkpoint")
    ds = _load(args.data)
    pool_ds = _load(args.pool_data) if args.pool_data else None
    keys = [_parse_key(k) for k in args.keys] if args.keys else list(ds.splits[args.split])[:1]
    if not keys:
        raise CliError(f"{args.split} split is empty")
    pool = E.pool_for(state, pool_ds or ds)
    run = S.RunDirectory(args.run)
    files = []
    for k in keys:
        exp = E.export_attention(state, ds, k, pool=pool)
        files += exp.write(run.export_dir, ds.calendar)
    return f"export-attention: {len(keys)} sample(s), {len(files)} files in {run.export_dir}"


def cmd_validate(args) -> int:
    ds = _load(args.data)
    problems = validate_dataset(ds)
    if args.retrieval_log:
        problems += _validate_retrieval_log(Path(args.retrieval_log), ds)
    for p in problems:
        print(p, file=sys.stderr)
    print(f"validate: {len(problems)} violations")
    return 0 if not problems else 1


def _validate_retrieval_log(path: Path, ds) -> List[str]:
    if not path.exists():
        raise CliError(f"{path}: retrieval log missing")
    log = T.RetrievalLog(ds)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            mk = (row["member_site"], int(row["member_year"]))
            log.rows.append((int(row["epoch"]), row["target_site"], int(row["target_year"]), mk[0], mk[1],
                             float(row["similarity"]), float(row["weight"]), float(row["tau"]),
                             log._split_of.get(mk, "none")))
    return log.violations()


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raci", description="Role-aware conditional inference for daily fluxes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    for flag, typ in (("--rows", int), ("--cols", int), ("--n-regimes", int), ("--first-year", int),
                      ("--last-year", int), ("--n-test-years", int), ("--noise-std", float),
                      ("--seed", int), ("--smoothness", float), ("--days-per-year", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--layout", choices=("checkerboard", "voronoi"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset's train split")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--log-retrieval", action="store_true", help="record every retrieved candidate")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on another dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-data", help="dataset whose auxiliary split feeds retrieval (default: --data)")
    p.add_argument("--run", required=True)
    _add_train_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-data")
    p.add_argument("--split", default="test", choices=("train", "auxiliary", "test"))
    p.add_argument("--group-by", default="region_tag", choices=("region_tag", "site", "none"))
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--seeds", type=_csv_list(int))
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one-at-a-time sensitivity sweep over tau and k_pca")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--taus", type=_csv_list(float), default=[0.95, 0.97, 0.99])
    p.add_argument("--k-pcas", type=_csv_list(int), default=[3, 4, 5])
    p.add_argument("--spread-seeds", type=_csv_list(int))
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("uq", help="MC-dropout predictive spread")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-data")
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test", choices=("train", "auxiliary", "test"))
    p.add_argument("--keys", nargs="+", help="SITE:YEAR sample keys (default: the whole split)")
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--passes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("gradcheck", help="finite-difference check on the toy configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--run")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-retrieval", help="export yearly retrieval sets and similarities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-data")
    p.add_argument("--split", default="test", choices=("train", "auxiliary", "test"))
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_inspect_retrieval)

    p = sub.add_parser("export-attention", help="export attention weights, gates and driver correlations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-data")
    p.add_argument("--split", default="test", choices=("train", "auxiliary", "test"))
    p.add_argument("--keys", nargs="+")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("validate", help="check dataset invariants (and optionally a retrieval log)")
    p.add_argument("--data", required=True)
    p.add_argument("--retrieval-log")
    p.set_defaults(func=cmd_validate)
    return parser


EXPECTED_ERRORS = (CliError, DatasetError, GeneratorConfigError, PoolConfigError, StalePoolError,
                   S.CheckpointError, ValueError, KeyError, OSError, FloatingPointError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = args.func(args)
    except EXPECTED_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"raci {args.command}: error: {msg}", file=sys.stderr)
        return 1
    if isinstance(out, int):
        return out
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
