"""Command-line entry point: ``seqlab {synth,train,xval,gradcheck,render,permtest}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 gradient-check
gate failure, 5 runtime abort.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import checkpoint
from .config import RunConfig
from .data import default_load_config, load_jigsaws, standardize, synthesize, write_dataset
from .errors import CheckpointError, ConfigError, ContractError, DataError, TrainingAborted
from .experiment import compare_reports, gradcheck_suite, run_xval
from .metrics import permutation_test, read_report_csv
from .render import render_files
from .training import format_epoch_record, train

log = logging.getLogger("seqlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GATE, EXIT_ABORT = 0, 2, 3, 4, 5

# flag dest -> RunConfig key
_FLAG_KEYS = {
    "seed": "seed", "mode": "mode", "cell": "cell", "hidden": "hidden", "layers": "layers",
    "epochs": "epochs", "batch_size": "batch_size", "dropout": "dropout_p", "lr": "learning_rate",
    "grad_clip": "grad_clip", "decimation": "decimation", "data": "data", "workers": "workers",
    "reduction": "reduction",
}


def _add_common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("forward", "bidirectional"))
    p.add_argument("--cell", choices=("lstm", "vanilla"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--reduction", choices=("frame", "sequence"))
    p.add_argument("--decimation", type=int)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--data", help=f"dataset root (default: ${'SEQLAB_DATA_ROOT'})")


def build_parser():
    parser = argparse.ArgumentParser(prog="seqlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("kind", choices=("longrange", "regimes"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sequences", type=int, default=100)
    p.add_argument("--T", type=int, default=300)
    p.add_argument("--lag", type=int, default=20)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-users", type=int, default=5)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--from-manifest", help="regenerate from an existing manifest.json")

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    _add_common(p)
    p.add_argument("--users", help="comma-separated training users (default: all)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="per-epoch loss log (default: <out>.loss.log)")

    p = sub.add_parser("xval", help="leave-one-user-out cross-validation")
    _add_common(p)
    p.add_argument("--modes", default=None, help="comma-separated direction modes to evaluate")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True, help="report prefix: writes <out>-<mode>.txt/.csv")
    p.add_argument("--predictions", help="directory for per-trial truth/prediction tracks")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("render", help="SVG ribbon plot of truth and prediction tracks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")

    p = sub.add_parser("permtest", help="paired permutation test between two report CSVs")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--statistic", choices=("accuracy", "edit", "both"), default="both")
    p.add_argument("--one-sided", action="store_true")
    return parser


def _run_config(args):
    flags = {key: getattr(args, dest, None) for dest, key in _FLAG_KEYS.items()}
    if getattr(args, "no_standardize", False):
        flags["standardize"] = False
    rc = RunConfig(getattr(args, "config", None), flags)
    for line in rc.provenance_lines():
        log.info("config: %s", line)
    return rc


def _load_data(rc):
    root = rc["data"]
    if not root:
        raise ConfigError("no dataset root: pass --data or set SEQLAB_DATA_ROOT")
    return load_jigsaws(root, default_load_config(root, rc["decimation"]))


def cmd_synth(args):
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            manifest = json.load(fh)
        kind = manifest["generator"]
        keys = {"longrange": ("n_sequences", "T", "lag", "noise", "n_users"),
                "regimes": ("n_sequences", "n_users", "T", "n_classes", "noise", "mean_segment",
                             "user_distortion")}[kind]
        params = {k: manifest[k] for k in keys if k in manifest}
        seed = manifest["seed"]
    else:
        kind, seed = args.kind, args.seed
        if kind == "longrange":
            params = dict(n_sequences=args.n_sequences, T=args.T, lag=args.lag, n_users=args.n_users)
        else:
            params = dict(n_sequences=args.n_sequences, n_users=args.n_users, T=args.T,
                          n_classes=args.n_classes)
        if args.noise is not None:
            params["noise"] = args.noise
    dataset = synthesize(kind, seed, **params)
    try:
        write_dataset(dataset, args.out, extra_manifest={"generator": kind, "seed": seed})
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"wrote {len(dataset.sequences)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args):
    rc = _run_config(args)
    cfg = rc.training_config()
    dataset = _load_data(rc)
    users = args.users.split(",") if args.users else dataset.users
    train_seqs = dataset.by_users(users)
    if not train_seqs:
        raise DataError(f"no sequences for users {users}")
    stats = None
    if rc["standardize"]:
        dataset = standardize(dataset, train_seqs)
        train_seqs = dataset.by_users(users)
        stats = [list(map(float, s)) for s in dataset.normalization_stats]
    out = Path(args.out)
    log_path = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.log")
    result = train(train_seqs, dataset.n_y, cfg)
    _atomic_write_text(log_path, "".join(format_epoch_record(r) + "\n" for r in result.history))
    meta = dict(class_names=list(dataset.class_names), feature_names=list(dataset.feature_names),
                normalization_stats=stats, decimation=rc["decimation"], seed=cfg.seed,
                training=cfg.as_dict(), train_users=list(users))
    checkpoint.save(out, result.model, meta)
    print(f"wrote checkpoint {out} and loss log {log_path}")
    return EXIT_OK


def _atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_xval(args):
    rc = _run_config(args)
    cfg = rc.training_config()
    modes = args.modes.split(",") if args.modes else [cfg.mode]
    dataset = _load_data(rc)
    log.info("dataset normalizer (max ground-truth segments) = %d", dataset.normalizer())
    reports = []
    for mode in modes:
        mode_cfg = type(cfg)(**dict(cfg.as_dict(), mode=mode))
        report = run_xval(dataset, mode_cfg, use_standardize=rc["standardize"],
                          workers=rc["workers"], name=f"{cfg.cell}-{mode}",
                          predictions_dir=Path(args.predictions) / mode if args.predictions else None)
        reports.append(report)
    if len(reports) == 2:
        sig = compare_reports(reports[0], reports[1])
        for r in reports:
            r.significance = {f"permtest_vs_other.{k}": v for k, v in sig.items()}
    failed = False
    for mode, report in zip(modes, reports):
        Path(f"{args.out}-{mode}.txt").write_text(report.to_text())
        Path(f"{args.out}-{mode}.csv").write_text(report.to_csv())
        sys.stdout.write(report.to_text())
        failed = failed or bool(report.failed_runs)
    return EXIT_ABORT if failed else EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck_suite(seeds=range(args.seeds), corrupt=args.corrupt)
    groups = {}
    for r in results:
        key = (r.cell, r.mode, r.hidden, r.T)
        if key not in groups or r.max_rel_error > groups[key].max_rel_error:
            groups[key] = r
    ok = True
    for (cell, mode, hidden, T), r in groups.items():
        status = "PASS" if r.passed(args.tol) else "FAIL"
        ok = ok and r.passed(args.tol)
        print(f"{status} cell={cell} mode={mode} hidden={hidden} T={T} "
              f"max_rel_error={r.max_rel_error:.3e} param={r.worst_param} seed={r.seed}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {args.tol:g}, {len(results)} instances)")
    return EXIT_OK if ok else EXIT_GATE


def cmd_render(args):
    render_files(args.pred, args.truth, args.out, title=args.title)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_permtest(args):
    a = read_report_csv(args.report_a)
    b = read_report_csv(args.report_b)
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise ContractError(f"reports cover different runs: only in A {only_a}, only in B {only_b}")
    users = sorted(a)
    stats = ("accuracy", "edit") if args.statistic == "both" else (args.statistic,)
    for stat in stats:
        col = 0 if stat == "accuracy" else 1
        p, mode = permutation_test([a[u][col] for u in users], [b[u][col] for u in users],
                                   two_sided=not args.one_sided)
        print(f"statistic={stat} runs={len(users)} mode={mode} p={p!r}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "xval": cmd_xval,
    "gradcheck": cmd_gradcheck, "render": cmd_render, "permtest": cmd_permtest,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.kind == "longrange" and not args.from_manifest \
            and not 0 <= args.lag < args.T:
        parser.error(f"--lag must satisfy 0 <= lag < T (got lag={args.lag}, T={args.T})")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except TrainingAborted as exc:
        log.error("training aborted: %s", exc)
        return EXIT_ABORT
    except ContractError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
