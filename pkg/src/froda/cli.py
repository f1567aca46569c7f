"""Command-line front end: ``froda {fit,predict,eval,synth,sweep}``.

Every command also reads ``--config FILE``, a flat ``key=value`` file whose keys
are flag names (dashes or underscores); explicit flags override file values.
Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    FormatError,
    OpenSetProtocol,
    SyntheticSpec,
    generate_synthetic,
    load_features,
    load_labels,
    save_features,
    save_labels,
)
from .evaluation import (
    parse_grid,
    run_experiment,
    score,
    sweep_epsilon,
    write_report,
    write_sweep_csv,
)
from .inference import (
    ClassifierSpec,
    assign_known_unknown,
    encode_targets,
    predict,
    train_open_classifier,
)
from .model import VARIANTS, HyperParams, fit_auto
from .persistence import load_model, save_model
from .solvers import SolverConfig

_HP = HyperParams()
_SYN = SyntheticSpec()
_CLF = ClassifierSpec()


class CLIError(Exception):
    """Validation or runtime failure reported as a single line, exit code 1."""


def _opt(flag, type=str, default=None, help="", choices=None):
    return flag, dict(type=type, default=default, help=help, choices=choices)


HYPER_OPTS = [
    _opt("--alpha", float, _HP.alpha, "source reconstruction weight"),
    _opt("--beta", float, _HP.beta, "classification term weight"),
    _opt("--lambda1", float, _HP.lambda1, "target group-sparsity weight"),
    _opt("--lambda2", float, _HP.lambda2, "source group-sparsity weight (dfroda_u)"),
    _opt("--epsilon", float, _HP.epsilon, "known/unknown ratio threshold"),
    _opt("--d", int, _HP.d, "subspace dimension, 0 = subspace disagreement measure"),
    _opt("--variance-fraction", float, _HP.variance_fraction, "joint PCA variance kept"),
    _opt("--max-iter", int, _HP.outer_max_iter, "outer iteration cap"),
    _opt("--tol", float, _HP.outer_tol, "relative objective change to stop"),
]

CLASSIFIER_OPTS = [
    _opt("--classifier", str, "knn", "classifier for known targets",
         choices=["knn", "learnt_w", "svm"]),
    _opt("--k", int, _CLF.k, "neighbours for knn"),
    _opt("--svm-c", float, _CLF.svm_c, "linear SVM regularization weight"),
    _opt("--svm-epochs", int, _CLF.svm_epochs, "linear SVM gradient iterations"),
    _opt("--feature-space", str, _CLF.feature_space, "classifier input",
         choices=["embedding", "raw"]),
]

SYNTH_OPTS = [
    _opt("--D", int, _SYN.D, "ambient dimension"),
    _opt("--d", int, _SYN.d, "subspace dimension"),
    _opt("--C", int, _SYN.C, "known classes"),
    _opt("--n-per-class-source", int, _SYN.n_per_class_source, "source samples per class"),
    _opt("--n-per-class-target", int, _SYN.n_per_class_target, "target samples per class"),
    _opt("--n-unknown-target", int, _SYN.n_unknown_target, "unknown target samples"),
    _opt("--n-unknown-source", int, _SYN.n_unknown_source, "unknown source samples"),
    _opt("--noise-sigma", float, _SYN.noise_sigma, "additive noise std"),
    _opt("--class-center-scale", float, _SYN.class_center_scale, "class center spread"),
]

SEED_OPT = [_opt("--seed", int, 0, "seed of all randomness")]

COMMANDS = {
    "fit": dict(
        help="fit a model",
        required=["source", "target", "out"],
        opts=[
            _opt("--variant", str, "froda", "model variant", choices=list(VARIANTS)),
            _opt("--source", str, None, "source feature file (csv or bin)"),
            _opt("--target", str, None, "target feature file"),
            _opt("--source-labels", str, None, "source label file (1-based ids)"),
            _opt("--source-unknown", str, None, "unknown-class source features (dfroda_u)"),
            _opt("--out", str, None, "model file to write"),
            _opt("--trace", str, None, "objective trace CSV (default: <out>.trace.csv)"),
        ]
        + HYPER_OPTS
        + SEED_OPT,
    ),
    "predict": dict(
        help="assign and classify targets",
        required=["model", "out"],
        opts=[
            _opt("--model", str, None, "model file"),
            _opt("--target", str, None, "new target samples (default: fitted targets)"),
            _opt("--epsilon", float, None, "threshold override (default: the model's)"),
            _opt("--out", str, None, "predictions CSV"),
        ]
        + CLASSIFIER_OPTS
        + SEED_OPT,
    ),
    "eval": dict(
        help="multi-seed experiment report, or score a predictions file",
        required=["out_dir"],
        opts=[
            _opt("--variant", str, "froda", "model variant", choices=list(VARIANTS)),
            _opt("--seeds", int, 1, "number of seeds (seed, seed+1, ...)"),
            _opt("--jobs", int, 1, "parallel seeds"),
            _opt("--source", str, None, "source features with labels (real-data mode)"),
            _opt("--target", str, None, "target features with labels (real-data mode)"),
            _opt("--protocol", str, "office", "class split for real data",
                 choices=["office", "bcis", "bcis_sun"]),
            _opt("--predictions", str, None, "score this predictions CSV instead"),
            _opt("--truth", str, None, "truth labels for --predictions"),
            _opt("--n-classes", int, None, "known classes for --predictions"),
            _opt("--out-dir", str, None, "directory for report.json and report.csv"),
        ]
        + HYPER_OPTS
        + CLASSIFIER_OPTS
        + [o for o in SYNTH_OPTS if o[0] != "--d"]
        + SEED_OPT,
    ),
    "synth": dict(
        help="write a synthetic open-set scenario",
        required=["out_dir"],
        opts=SYNTH_OPTS
        + SEED_OPT
        + [
            _opt("--format", str, "csv", "feature file format", choices=["csv", "bin"]),
            _opt("--out-dir", str, None, "output directory"),
        ],
    ),
    "sweep": dict(
        help="accuracy as a function of epsilon",
        required=["model", "truth"],
        opts=[
            _opt("--model", str, None, "model file"),
            _opt("--truth", str, None, "target truth labels (1..C+1)"),
            _opt("--grid", str, "0.05:0.05:1.0", "start:step:stop or comma list"),
            _opt("--out", str, "sweep.csv", "sweep CSV"),
        ]
        + CLASSIFIER_OPTS
        + SEED_OPT,
    ),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="froda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"froda {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, cmd in COMMANDS.items():
        p = sub.add_parser(name, help=cmd["help"], description=cmd["help"])
        p.add_argument("--config", default=None, help="flat key=value config file")
        for flag, kw in cmd["opts"]:
            default = kw["default"]
            shown = "" if default is None else f" (default: {default})"
            req = " [required]" if flag[2:].replace("-", "_") in cmd["required"] else ""
            p.add_argument(
                flag,
                type=kw["type"],
                default=None,
                choices=kw["choices"],
                help=kw["help"] + shown + req,
            )
        p.set_defaults(_parser=p)
    return parser


def _parse_config(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.lstrip("-").replace("-", "_")] = value
    return values


def resolve_args(args):
    """Apply config-file values, then defaults, to the parsed flags."""
    cmd = COMMANDS[args.command]
    opts = {flag[2:].replace("-", "_"): kw for flag, kw in cmd["opts"]}
    if args.config:
        for key, raw in _parse_config(args.config).items():
            if key not in opts:
                raise CLIError(f"unknown config key {key!r} for {args.command}")
            if getattr(args, key) is None:
                kw = opts[key]
                try:
                    value = kw["type"](raw)
                except ValueError:
                    raise CLIError(f"config key {key!r}: bad value {raw!r}") from None
                if kw["choices"] and value not in kw["choices"]:
                    raise CLIError(f"config key {key!r}: {value!r} not in {kw['choices']}")
                setattr(args, key, value)
    for key, kw in opts.items():
        if getattr(args, key) is None:
            setattr(args, key, kw["default"])
    missing = [k for k in cmd["required"] if getattr(args, k) is None]
    if missing:
        args._parser.error(
            "the following arguments are required: "
            + ", ".join("--" + m.replace("_", "-") for m in missing)
        )
    return args


def _hyperparams(args):
    return HyperParams(
        alpha=args.alpha,
        beta=args.beta,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        epsilon=args.epsilon,
        d=args.d,
        variance_fraction=args.variance_fraction,
        outer_max_iter=args.max_iter,
        outer_tol=args.tol,
        inner=SolverConfig(),
    )


def _classifier_spec(args):
    return ClassifierSpec(
        kind=args.classifier,
        k=args.k,
        svm_c=args.svm_c,
        svm_epochs=args.svm_epochs,
        seed=args.seed,
        feature_space=args.feature_space,
    )


def _synthetic_spec(args, d=None):
    return SyntheticSpec(
        D=args.D,
        d=d if d is not None else args.d,
        C=args.C,
        n_per_class_source=args.n_per_class_source,
        n_per_class_target=args.n_per_class_target,
        n_unknown_target=args.n_unknown_target,
        n_unknown_source=args.n_unknown_source,
        noise_sigma=args.noise_sigma,
        class_center_scale=args.class_center_scale,
        seed=args.seed,
    )


def cmd_fit(args, out):
    hp = _hyperparams(args)
    source = load_features(args.source)
    target = load_features(args.target)
    if args.source_labels:
        labels = load_labels(args.source_labels)
    elif source.has_labels:
        labels = source.labels
    else:
        labels = None
    if args.variant != "froda" and labels is None:
        raise CLIError(f"--variant {args.variant} requires --source-labels")
    if labels is not None:
        if labels.size != source.n_samples:
            raise CLIError(
                f"{labels.size} source labels for {source.n_samples} source samples"
            )
        if labels.min() < 1:
            raise CLIError("source labels must be 1-based class ids")
    unknown = None
    if args.source_unknown:
        if args.variant != "dfroda_u":
            raise CLIError("--source-unknown is only used by --variant dfroda_u")
        unknown = load_features(args.source_unknown).features
    print(
        "config variant={} alpha={} beta={} lambda1={} lambda2={} epsilon={} d={} "
        "variance_fraction={} max_iter={} tol={}".format(
            args.variant, hp.alpha, hp.beta, hp.lambda1, hp.lambda2, hp.epsilon,
            hp.d, hp.variance_fraction, hp.outer_max_iter, hp.outer_tol,
        ),
        file=out,
    )

    def log(it, value):
        print(f"iter {it} objective {value!r}", file=out)

    model = fit_auto(
        source.features,
        target.features,
        labels=labels,
        variant=args.variant,
        hp=hp,
        Xs_unknown=unknown,
        callback=log,
    )
    save_model(model, args.out)
    trace = args.trace or args.out + ".trace.csv"
    with open(trace, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "objective"])
        for i, v in enumerate(model.objective_trace):
            writer.writerow([i, repr(float(v))])
    print(
        f"done d={model.d} iterations={model.n_iter} converged={model.converged} "
        f"objective={model.objective_trace[-1]!r}",
        file=out,
    )


def cmd_predict(args, out):
    model, _ = load_model(args.model)
    spec = _classifier_spec(args)
    eps = model.hyperparams.epsilon if args.epsilon is None else args.epsilon
    Xt = None
    T = None
    if args.target:
        Xt = load_features(args.target).features
        T = encode_targets(model, Xt)
    assignment = assign_known_unknown(model, eps, T)
    if model.source_labels is None:
        raise CLIError("the model has no source labels; refit with --source-labels")
    clf = train_open_classifier(model, assignment, spec)
    labels = predict(model, clf, assignment, Xt)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_index", "ratio", "is_unknown", "label"])
        for i in range(labels.size):
            writer.writerow(
                [i, repr(float(assignment.ratio[i])), int(assignment.is_unknown[i]), int(labels[i])]
            )
    print(
        f"predicted {labels.size} targets, {assignment.n_unknown} unknown "
        f"(epsilon={eps}, classifier={spec.kind}, k={spec.k})",
        file=out,
    )


def _read_prediction_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "label" not in rows[0]:
        raise CLIError(f"{path}: expected a 'label' column")
    return np.array([int(r["label"]) for r in rows])


def cmd_eval(args, out):
    if args.predictions:
        if not args.truth or args.n_classes is None:
            raise CLIError("--predictions needs --truth and --n-classes")
        pred = _read_prediction_labels(args.predictions)
        truth = load_labels(args.truth)
        s = score(pred, truth, args.n_classes)
        metrics = {
            "overall_accuracy": s.overall_accuracy,
            "class_avg_accuracy": s.class_avg_accuracy,
            "unknown_precision": s.unknown_precision,
            "unknown_recall": s.unknown_recall,
            "unknown_f1": s.unknown_f1,
        }
        report = {
            "summary": {k: {"mean": v, "std": 0.0} for k, v in metrics.items()},
            "per_class": {str(k): v for k, v in s.per_class.items()},
            "empty_classes": s.empty_classes,
        }
        for key in ("fit_seconds", "per_iter_seconds", "n_outer_iters"):
            report["summary"][key] = {"mean": 0.0, "std": 0.0}
    else:
        hp = _hyperparams(args)
        spec = _classifier_spec(args)
        seeds = range(args.seed, args.seed + args.seeds)
        kwargs = {}
        if args.source or args.target:
            if not (args.source and args.target):
                raise CLIError("real-data mode needs both --source and --target")
            if args.protocol == "office":
                proto = OpenSetProtocol.office()
            else:
                proto = OpenSetProtocol.bcis(target_is_sun=args.protocol == "bcis_sun")
            kwargs = dict(
                source=load_features(args.source),
                target=load_features(args.target),
                protocol=proto,
            )
        else:
            d_true = hp.d if hp.d > 0 else _SYN.d
            kwargs = dict(synthetic=_synthetic_spec(args, d=d_true))
        report = run_experiment(
            args.variant, hp, spec, seeds, jobs=args.jobs, **kwargs
        )
    write_report(report, args.out_dir)
    for key, stats in report["summary"].items():
        print(f"{key} {stats['mean']:.4f} +/- {stats['std']:.4f}", file=out)


def cmd_synth(args, out):
    spec = _synthetic_spec(args)
    scen = generate_synthetic(spec)
    root = Path(args.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ext = "csv" if args.format == "csv" else "bin"
    save_features(Dataset(scen.Xs, scen.ys, "source"), root / f"source.{ext}", args.format)
    save_features(Dataset(scen.Xt, None, "target"), root / f"target.{ext}", args.format)
    save_labels(scen.ys, root / "source_labels.csv")
    save_labels(scen.yt, root / "target_truth.csv")
    if scen.Xs_unknown.shape[1]:
        save_features(
            Dataset(scen.Xs_unknown, None, "source_unknown"),
            root / f"source_unknown.{ext}",
            args.format,
        )
    with open(root / "spec.json", "w") as fh:
        json.dump(vars(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote synthetic scenario (seed={spec.seed}) to {root}", file=out)


def cmd_sweep(args, out):
    model, _ = load_model(args.model)
    truth = load_labels(args.truth)
    grid = parse_grid(args.grid)
    rows = sweep_epsilon(model, grid, truth, _classifier_spec(args))
    write_sweep_csv(rows, args.out)
    for eps, acc, n_unk in rows:
        print(f"epsilon {eps!r} class_avg_accuracy {acc:.4f} unknown {n_unk}", file=out)


HANDLERS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
}


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args = resolve_args(args)
        HANDLERS[args.command](args, out)
    except (CLIError, FormatError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
