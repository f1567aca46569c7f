"""Open-set accuracy metrics, multi-seed runs and epsilon sweeps."""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List

import numpy as np

from .data import SyntheticSpec, apply_protocol, generate_synthetic
from .inference import (
    ClassifierSpec,
    assign_known_unknown,
    predict,
    train_open_classifier,
)
from .model import HyperParams, fit_auto

logger = logging.getLogger(__name__)

METRICS = (
    "overall_accuracy",
    "class_avg_accuracy",
    "unknown_precision",
    "unknown_recall",
    "unknown_f1",
    "fit_seconds",
    "per_iter_seconds",
    "n_outer_iters",
)


@dataclass
class Scores:
    overall_accuracy: float
    class_avg_accuracy: float
    per_class: Dict[int, float]
    unknown_precision: float
    unknown_recall: float
    unknown_f1: float
    empty_classes: List[int] = field(default_factory=list)


def _ratio(num, den, both_empty=1.0):
    return float(num / den) if den else both_empty


def score(predictions, truth, n_classes):
    """Accuracy over ``C + 1`` classes and known-vs-unknown detection quality.

    Classes absent from ``truth`` are left out of the class average and listed
    in ``empty_classes``. Unknown-detection precision/recall are 1 when there is
    nothing to detect and nothing was flagged.
    """
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(truth, dtype=int)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truth must be vectors of equal length")
    C = int(n_classes)
    for name, arr in (("predictions", pred), ("truth", true)):
        if arr.size and (arr.min() < 1 or arr.max() > C + 1):
            raise ValueError(f"{name} contain labels outside 1..{C + 1}")
    per_class, empty = {}, []
    for c in range(1, C + 2):
        mask = true == c
        if mask.any():
            per_class[c] = float(np.mean(pred[mask] == c))
        else:
            empty.append(c)
    overall = float(np.mean(pred == true)) if true.size else 1.0
    class_avg = float(np.mean(list(per_class.values()))) if per_class else 1.0
    unk_p, unk_t = pred == C + 1, true == C + 1
    tp = int(np.sum(unk_p & unk_t))
    nothing = not unk_p.any() and not unk_t.any()
    precision = _ratio(tp, int(unk_p.sum()), 1.0 if nothing else 0.0)
    recall = _ratio(tp, int(unk_t.sum()), 1.0 if nothing else 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    return Scores(overall, class_avg, per_class, precision, recall, f1, empty)


@dataclass
class RunResult:
    seed: int
    scores: Scores
    fit_seconds: float
    per_iter_seconds: float
    n_outer_iters: int
    d: int

    def flat(self):
        out = {k: getattr(self.scores, k) for k in METRICS[:5]}
        out.update(
            fit_seconds=self.fit_seconds,
            per_iter_seconds=self.per_iter_seconds,
            n_outer_iters=self.n_outer_iters,
        )
        return out


def run_once(split, variant, hp, clf_spec, seed=0):
    """Fit, assign, classify and score one protocol split."""
    model = fit_auto(
        split.Xs,
        split.Xt,
        labels=split.ys,
        variant=variant,
        hp=hp,
        Xs_unknown=split.Xs_unknown if variant == "dfroda_u" else None,
    )
    if model.source_labels is None:
        model.source_labels = np.asarray(split.ys, dtype=int)
        model.n_classes = split.n_classes
    assignment = assign_known_unknown(model, hp.epsilon)
    clf = train_open_classifier(model, assignment, clf_spec)
    pred = predict(model, clf, assignment)
    return RunResult(
        seed=seed,
        scores=score(pred, split.yt, split.n_classes),
        fit_seconds=model.fit_seconds,
        per_iter_seconds=model.per_iter_seconds,
        n_outer_iters=model.n_iter,
        d=model.d,
    ), model, pred


def _split_for_seed(seed, synthetic, source, target, protocol):
    if synthetic is not None:
        return generate_synthetic(replace(synthetic, seed=seed)).as_split()
    return apply_protocol(source, target, replace(protocol, seed=seed))


def _run_seed(args):
    seed, synthetic, source, target, protocol, variant, hp, clf_spec = args
    split = _split_for_seed(seed, synthetic, source, target, protocol)
    result, _, _ = run_once(split, variant, hp, clf_spec, seed)
    return result


def aggregate(results):
    """Mean and sample standard deviation (0 for a single seed) of every metric."""
    rows = [r.flat() for r in results]
    out = {}
    for key in METRICS:
        vals = np.array([row[key] for row in rows], dtype=float)
        if np.all(vals == vals[0]):
            # np.mean may round away from a repeated value
            out[key] = {"mean": float(vals[0]), "std": 0.0}
            continue
        out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1))}
    return out


def run_experiment(
    variant="froda",
    hp=None,
    clf_spec=None,
    seeds=(0,),
    synthetic=None,
    source=None,
    target=None,
    protocol=None,
    jobs=1,
):
    """Repeat split + fit + predict over ``seeds`` and aggregate mean +/- std.

    Either ``synthetic`` (a :class:`SyntheticSpec`) or ``source``, ``target``
    and ``protocol`` select the data; each seed re-draws the scenario or the
    protocol subsample.
    """
    hp = hp or HyperParams()
    clf_spec = clf_spec or ClassifierSpec()
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    if synthetic is None and (source is None or target is None or protocol is None):
        synthetic = SyntheticSpec()
    tasks = [
        (s, synthetic, source, target, protocol, variant, hp, clf_spec) for s in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, tasks))
    else:
        results = [_run_seed(t) for t in tasks]
    return {
        "variant": variant,
        "classifier": asdict(clf_spec),
        "hyperparams": hp.as_dict(),
        "seeds": seeds,
        "summary": aggregate(results),
        "runs": [
            {
                "seed": r.seed,
                "d": r.d,
                **r.flat(),
                "per_class": {str(k): v for k, v in r.scores.per_class.items()},
                "empty_classes": r.scores.empty_classes,
            }
            for r in results
        ],
    }


def write_report(report, out_dir):
    """Write ``report.json`` and a flat ``report.csv`` (metric,mean,std)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "mean", "std"])
        for key in METRICS:
            stats = report["summary"][key]
            writer.writerow([key, repr(stats["mean"]), repr(stats["std"])])
    return out / "report.json", out / "report.csv"


def sweep_epsilon(model, epsilon_grid, truth, clf_spec=None, source_labels=None):
    """Re-assign and re-classify the fitted targets for every threshold.

    Returns a list of ``(epsilon, class_avg_accuracy, n_unknown)`` rows.
    """
    grid = [float(e) for e in epsilon_grid]
    if not grid:
        raise ValueError("epsilon grid is empty")
    clf_spec = clf_spec or ClassifierSpec()
    truth = np.asarray(truth, dtype=int)
    rows = []
    for eps in grid:
        assignment = assign_known_unknown(model, eps)
        clf = train_open_classifier(model, assignment, clf_spec, source_labels)
        pred = predict(model, clf, assignment)
        s = score(pred, truth, clf.n_classes)
        rows.append((eps, s.class_avg_accuracy, assignment.n_unknown))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epsilon", "class_avg_accuracy"])
        for eps, acc, _ in rows:
            writer.writerow([repr(eps), repr(acc)])


def parse_grid(text):
    """Parse ``start:step:stop`` (inclusive) or a comma list of thresholds."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[1] <= 0:
            raise ValueError(f"bad grid {text!r}; expected start:step:stop")
        start, step, stop = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(max(n, 0))]
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ValueError("epsilon grid is empty")
    return values


def format_accuracy_table(results, pairs):
    """Render per-pair accuracies as a ``Method | pair | ...`` text table.

    ``results`` maps a method name to ``{pair: accuracy in [0, 1]}``; cells are
    percentages with one decimal, ``-`` where a pair is missing.
    """
    pairs = list(pairs)
    lines = [" | ".join(["Method"] + pairs)]
    for method, row in results.items():
        cells = [f"{100 * row[p]:.1f}" if p in row else "-" for p in pairs]
        lines.append(" | ".join([method] + cells))
    return "\n".join(lines)
