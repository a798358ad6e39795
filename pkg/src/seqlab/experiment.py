"""Leave-one-user-out evaluation and the gradient-exactness sweep."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import louo_splits, standardize
from .errors import TrainingAborted
from .metrics import (
    EvalReport,
    RunResult,
    frame_accuracy,
    normalized_edit_distance,
    permutation_test,
    to_segments,
)
from .model import ModelSpec, init_params
from .numeric import Rng
from .training import Batch, backward, finite_diff_grad, max_relative_error, record, train

log = logging.getLogger(__name__)


def evaluate_sequences(model, sequences, normalizer):
    """Pooled frame accuracy and mean normalized edit distance over ``sequences``.

    Returns ``(accuracy, edit, tracks)`` where tracks holds the predicted
    label track of each sequence.
    """
    tracks, edits = [], []
    for seq in sequences:
        labels = model.predict(seq.inputs).labels
        tracks.append(labels)
        edits.append(normalized_edit_distance(
            to_segments(labels, seq.label_mask), seq.segments(), normalizer))
    acc = frame_accuracy(np.concatenate(tracks),
                         np.concatenate([s.labels for s in sequences]),
                         np.concatenate([s.label_mask for s in sequences]))
    return acc, float(np.mean(edits)), tracks


def _run_one(args):
    dataset, run, cfg, use_standardize = args
    train_seqs = dataset.by_users(run.train_users)
    ds = standardize(dataset, train_seqs) if use_standardize else dataset
    train_seqs = ds.by_users(run.train_users)
    test_seqs = ds.by_users([run.held_out_user])
    result = train(train_seqs, dataset.n_y, cfg)
    acc, edit, tracks = evaluate_sequences(result.model, test_seqs, run.normalizer)
    return acc, edit, [(s, t) for s, t in zip(test_seqs, tracks)]


def run_xval(dataset, cfg, use_standardize=True, workers=1, name=None, predictions_dir=None):
    """Train and test once per held-out user; returns an :class:`EvalReport`.

    A run that aborts is recorded as failed and the remaining runs continue.
    Runs are independent and seeded identically, so ``workers`` does not
    change the report.
    """
    runs = louo_splits(dataset)
    report = EvalReport(name or f"{cfg.cell}-{cfg.mode}", runs[0].normalizer)
    jobs = [(dataset, run, cfg, use_standardize) for run in runs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, job) for job in jobs]
            outcomes = [_collect(f.result) for f in futures]
    else:
        outcomes = [_collect(lambda job=job: _run_one(job)) for job in jobs]

    for run, (value, error) in zip(runs, outcomes):
        if error is not None:
            log.error("run %d (user %s) failed: %s", run.index, run.held_out_user, error)
            report.runs.append(RunResult(run.index, run.held_out_user, failed=True, error=error))
            continue
        acc, edit, tracks = value
        log.info("run %d user %s: accuracy %.2f edit %.2f", run.index, run.held_out_user, acc, edit)
        report.runs.append(RunResult(run.index, run.held_out_user, acc, edit))
        if predictions_dir is not None:
            write_tracks(predictions_dir, dataset.class_names, tracks)
    return report


def _collect(thunk):
    try:
        return thunk(), None
    except (TrainingAborted, FloatingPointError, ValueError) as exc:
        return None, str(exc)


def write_tracks(out_dir, class_names, tracks):
    """One ``<trial>.truth.txt`` and ``<trial>.pred.txt`` per sequence; ``-`` marks unlabeled frames."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seq, pred in tracks:
        with open(out / f"{seq.trial_id}.truth.txt", "w") as fh:
            for lab, keep in zip(seq.labels, seq.label_mask):
                fh.write(f"{class_names[lab] if keep else '-'}\n")
        with open(out / f"{seq.trial_id}.pred.txt", "w") as fh:
            for lab in pred:
                fh.write(f"{class_names[lab]}\n")


def compare_reports(a, b):
    """Paired permutation tests on accuracy and edit distance of two reports."""
    users_a = {r.held_out_user: r for r in a.runs if not r.failed}
    users_b = {r.held_out_user: r for r in b.runs if not r.failed}
    if set(users_a) != set(users_b):
        raise ValueError(f"run sets differ: {sorted(set(users_a) ^ set(users_b))}")
    users = sorted(users_a)
    out = {}
    for stat in ("accuracy", "edit"):
        p, mode = permutation_test([getattr(users_a[u], stat) for u in users],
                                   [getattr(users_b[u], stat) for u in users])
        out[f"p_{stat}"] = p
        out["mode"] = mode
    return out


# ---------------------------------------------------------------------------
# gradient exactness


@dataclass
class GradcheckResult:
    cell: str
    mode: str
    hidden: int
    T: int
    seed: int
    max_rel_error: float
    worst_param: str

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol


def gradcheck_instance(cell, mode, hidden, T, seed, n_x=3, n_y=4, layers=1, eps=1e-5,
                       scale=0.5, corrupt=False):
    """Compare backprop with central differences on one random model and sequence.

    ``corrupt`` perturbs one analytic gradient entry (negative control).
    """
    spec = ModelSpec(n_x=n_x, n_y=n_y, hidden=hidden, cell=cell, mode=mode, layers=layers)
    rng = Rng(seed)
    params = init_params(spec, rng, scale=scale)
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = (2.0 * rng.uniform(value.shape) - 1.0) * scale
    batch = Batch.single(rng.normal((T, n_x)), (rng.uniform(T) * n_y).astype(np.int64))
    analytic = backward(record(spec, params, batch))
    if corrupt:
        analytic["output.b"] = analytic["output.b"].copy()
        analytic["output.b"][0] += 1e-2
    numeric = finite_diff_grad(spec, params, batch, eps)
    err, where = max_relative_error(analytic, numeric)
    return GradcheckResult(cell, mode, hidden, T, seed, err, where)


def gradcheck_suite(cells=("vanilla", "lstm"), modes=("forward", "bidirectional"),
                    hiddens=(3, 5), lengths=(1, 7), seeds=range(5), **kwargs):
    return [
        gradcheck_instance(cell, mode, hidden, T, seed, **kwargs)
        for cell in cells for mode in modes for hidden in hiddens
        for T in lengths for seed in seeds
    ]
