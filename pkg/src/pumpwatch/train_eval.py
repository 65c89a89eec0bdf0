"""Training loop, thresholded metrics, multi-seed aggregation and reporting."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from itertools import groupby
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .dataset import SegmentSet, batch_indices
from .errors import EmptySplit, LengthMismatch, NonFiniteLoss, TooFewRuns
from .nn.optim import Adam
from .rng import substream

log = logging.getLogger(__name__)

RESULTS_COLUMNS = ("model", "chunk_size", "seed", "epoch", "precision", "recall", "f1", "threshold")

DISPLAY_NAMES = {"clstm": "C-LSTM", "anomaly_transformer": "Anom. Trans."}

# Published batch sizes, thresholds and undersampling fractions by (model, chunk seconds).
PUBLISHED_BATCH_SIZE = {
    ("clstm", 5): 1200, ("clstm", 15): 600, ("clstm", 25): 600,
    ("anomaly_transformer", 5): 32, ("anomaly_transformer", 15): 32, ("anomaly_transformer", 25): 32,
}
PUBLISHED_THRESHOLD = {
    ("clstm", 5): 0.5, ("clstm", 15): 0.4, ("clstm", 25): 0.65,
    ("anomaly_transformer", 5): 0.48, ("anomaly_transformer", 15): 0.48, ("anomaly_transformer", 25): 0.48,
}
PUBLISHED_UNDERSAMPLE = {("clstm", 15): 0.1}
DEFAULT_UNDERSAMPLE = 0.05
PUBLISHED_EPOCHS = {"clstm": 200, "anomaly_transformer": 50}


@dataclass(frozen=True)
class ReferenceRow:
    model: str
    chunk: str
    precision: float  # percent
    recall: float
    f1: float
    f1_ci: float | None = None


# Published reference results. Baseline rows are constants only; nothing here retrains them.
REFERENCE_TABLE: tuple[ReferenceRow, ...] = (
    ReferenceRow("Kamps (Init.)", "1 Hour", 15.6, 96.7, 26.8),
    ReferenceRow("Kamps (Bal.)", "1 Hour", 38.4, 93.5, 54.4),
    ReferenceRow("Kamps (Strict)", "1 Hour", 50.1, 75.0, 60.5),
    ReferenceRow("RF", "5 Secs", 97.7, 71.6, 82.6, 0.0),
    ReferenceRow("RF", "15 Secs", 98.0, 81.9, 89.2, 0.0),
    ReferenceRow("RF", "25 Secs", 94.5, 83.8, 88.8, 0.0),
    ReferenceRow("C-LSTM", "5 Secs", 91.2, 77.5, 83.7, 1.0),
    ReferenceRow("C-LSTM", "15 Secs", 94.2, 84.9, 89.3, 0.4),
    ReferenceRow("C-LSTM", "25 Secs", 94.2, 85.0, 89.3, 0.5),
    ReferenceRow("Anom. Trans.", "5 Secs", 91.0, 87.7, 89.3, 0.4),
    ReferenceRow("Anom. Trans.", "15 Secs", 93.0, 94.2, 93.6, 0.8),
    ReferenceRow("Anom. Trans.", "25 Secs", 88.4, 90.0, 89.2, 0.3),
)


def reference_row(model: str, chunk_size: int) -> ReferenceRow | None:
    name = DISPLAY_NAMES.get(model, model)
    for row in REFERENCE_TABLE:
        if row.model == name and row.chunk == f"{chunk_size} Secs":
            return row
    return None


# --- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(probs, labels, threshold: float = 0.5) -> Metrics:
    """Binary metrics with prediction = prob >= threshold; empty denominators give 0."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(probs) != len(labels):
        raise LengthMismatch(f"{len(probs)} probabilities vs {len(labels)} labels")
    pred = probs >= threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(precision, recall, f1_score(precision, recall), tp, fp, fn, tn, threshold)


def threshold_sweep(probs, labels, step: float = 0.01) -> list[Metrics]:
    n = int(round(1.0 / step))
    return [compute_metrics(probs, labels, round(i * step, 10)) for i in range(n + 1)]


def confidence_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half width, t_{n-1,(1+level)/2} * sd / sqrt(n)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise TooFewRuns(f"need at least 2 runs for an interval, got {n}")
    sd = values.std(ddof=1)
    t = stats.t.ppf(0.5 + level / 2, n - 1)
    return float(values.mean()), float(t * sd / math.sqrt(n))


# --- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_precision: float
    val_recall: float
    val_f1: float


@dataclass
class RunResult:
    model: str
    chunk_size: int
    seed: int
    threshold: float
    best: EpochRecord
    history: list[EpochRecord]
    best_state: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    val_probs: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    threshold: float
    seed: int
    learning_rate: float | None = None
    chunk_size: int = 15


def _targets(model, segs: SegmentSet) -> np.ndarray:
    cfg = getattr(model, "config", None)
    if getattr(cfg, "mse_mode", "last") == "all":
        return segs.window_labels.astype(np.float64)
    return segs.y.astype(np.float64)


def train(model, train_segments: SegmentSet, val_segments: SegmentSet, config: TrainConfig, on_epoch=None) -> RunResult:
    """Fit ``model`` and keep the epoch with the highest validation F1 (earliest on ties).

    Batches are reshuffled every epoch from the run's "shuffle" stream.
    Validation segments are only ever scored, never resampled.
    """
    if len(train_segments) == 0 or len(val_segments) == 0:
        raise EmptySplit(f"train has {len(train_segments)} segments, validation {len(val_segments)}")
    lr = config.learning_rate or model.config.learning_rate
    opt = Adam(model.parameters(), lr=lr)
    shuffle = substream(config.seed, "shuffle")
    targets = _targets(model, train_segments)

    history: list[EpochRecord] = []
    best: EpochRecord | None = None
    best_state = model.state_dict()
    best_probs = None
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b, ix in enumerate(batch_indices(len(train_segments), config.batch_size, shuffle)):
            try:
                out = model.train_step(train_segments.X[ix], targets[ix], opt, batch_index=b)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(b, float("nan"), epoch) from exc
            losses.append(out[0] if isinstance(out, tuple) else out)
        probs = model.predict(val_segments.X)
        m = compute_metrics(probs, val_segments.y, config.threshold)
        rec = EpochRecord(epoch, float(np.mean(losses)), m.precision, m.recall, m.f1)
        history.append(rec)
        log.info("epoch %d loss %.6f P %.4f R %.4f F1 %.4f", epoch, rec.train_loss, m.precision, m.recall, m.f1)
        if best is None or rec.val_f1 > best.val_f1:
            best, best_state, best_probs = rec, model.state_dict(), probs
        if on_epoch is not None:
            on_epoch(rec)
    return RunResult(
        model=model.name,
        chunk_size=config.chunk_size,
        seed=config.seed,
        threshold=config.threshold,
        best=best,
        history=history,
        best_state=best_state,
        val_probs=best_probs,
    )


# --- results CSV and reporting -----------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    model: str
    chunk_size: int
    seed: int
    epoch: int
    precision: float
    recall: float
    f1: float
    threshold: float


def result_rows(results: Iterable[RunResult]) -> list[ResultRow]:
    rows = []
    for r in results:
        for h in r.history:
            rows.append(ResultRow(r.model, r.chunk_size, r.seed, h.epoch, h.val_precision, h.val_recall, h.val_f1, r.threshold))
    return rows


def write_results_csv(rows: Iterable[ResultRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RESULTS_COLUMNS)
    for r in rows:
        w.writerow([r.model, r.chunk_size, r.seed, r.epoch, repr(r.precision), repr(r.recall), repr(r.f1), repr(r.threshold)])


def read_results_csv(fh) -> list[ResultRow]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != RESULTS_COLUMNS:
        raise ValueError(f"results CSV header must be {','.join(RESULTS_COLUMNS)}")
    return [
        ResultRow(
            r["model"], int(r["chunk_size"]), int(r["seed"]), int(r["epoch"]),
            float(r["precision"]), float(r["recall"]), float(r["f1"]), float(r["threshold"]),
        )
        for r in reader
    ]


@dataclass
class SummaryRow:
    model: str
    chunk_size: int
    n_runs: int
    precision: float
    recall: float
    f1: float
    f1_ci: float
    reference: ReferenceRow | None


@dataclass
class Report:
    rows: list[SummaryRow]
    text: str
    csv: str
    curves_csv: str


def best_epochs(rows: Sequence[ResultRow]) -> list[ResultRow]:
    """Best epoch per (model, chunk_size, seed): highest F1, earliest on ties."""
    key = lambda r: (r.model, r.chunk_size, r.seed)  # noqa: E731
    out = []
    for _, grp in groupby(sorted(rows, key=lambda r: (key(r), r.epoch)), key=key):
        grp = list(grp)
        out.append(max(grp, key=lambda r: (r.f1, -r.epoch)))
    return out


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def report(results: Sequence[RunResult] | Sequence[ResultRow], reference: Sequence[ReferenceRow] = REFERENCE_TABLE) -> Report:
    """Mean best-epoch metrics per model and chunk size with a 95% t-interval on F1."""
    rows = list(results)
    if not rows:
        raise ValueError("report needs at least one run")
    if isinstance(rows[0], RunResult):
        rows = result_rows(rows)
    best = best_epochs(rows)
    summary = []
    for (model, chunk), grp in groupby(sorted(best, key=lambda r: (r.model, r.chunk_size)), key=lambda r: (r.model, r.chunk_size)):
        grp = list(grp)
        f1s = [r.f1 for r in grp]
        if len(grp) >= 2:
            f1_mean, half = confidence_interval(f1s)
        else:
            f1_mean, half = f1s[0], 0.0
        ref = next(
            (x for x in reference if x.model == DISPLAY_NAMES.get(model, model) and x.chunk == f"{chunk} Secs"),
            None,
        )
        summary.append(SummaryRow(
            model, chunk, len(grp),
            float(np.mean([r.precision for r in grp])), float(np.mean([r.recall for r in grp])),
            f1_mean, half, ref,
        ))

    lines = [f"{'Model':<14}{'Chunk Size':<12}{'Precision':>10}{'Recall':>10}{'F1':>18}{'Ref. F1':>18}{'Runs':>6}"]
    for s in summary:
        f1 = f"{100 * s.f1:.1f} ±{100 * s.f1_ci:.1f}%"
        if s.reference is None:
            ref = "-"
        else:
            ci = "" if s.reference.f1_ci is None else f" ±{s.reference.f1_ci:.1f}%"
            ref = f"{s.reference.f1:.1f}{ci}"
        lines.append(
            f"{DISPLAY_NAMES.get(s.model, s.model):<14}{f'{s.chunk_size} Secs':<12}"
            f"{_pct(s.precision):>10}{_pct(s.recall):>10}{f1:>18}{ref:>18}{s.n_runs:>6}"
        )
    lines.append("")
    lines.append("F1 is the mean of per-run best-epoch F1; ± is a 95% Student-t interval (t_{n-1,0.975}·sd/√n).")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "chunk_size", "n_runs", "precision", "recall", "f1", "f1_ci", "ref_precision", "ref_recall", "ref_f1", "ref_f1_ci"])
    for s in summary:
        r = s.reference
        w.writerow([
            s.model, s.chunk_size, s.n_runs, repr(s.precision), repr(s.recall), repr(s.f1), repr(s.f1_ci),
            "" if r is None else r.precision / 100, "" if r is None else r.recall / 100,
            "" if r is None else r.f1 / 100, "" if r is None or r.f1_ci is None else r.f1_ci / 100,
        ])

    cbuf = io.StringIO()
    cw = csv.writer(cbuf, lineterminator="\n")
    cw.writerow(["model", "chunk_size", "epoch", "n_runs", "mean_precision", "mean_recall", "mean_f1"])
    key = lambda r: (r.model, r.chunk_size, r.epoch)  # noqa: E731
    for (model, chunk, epoch), grp in groupby(sorted(rows, key=key), key=key):
        grp = list(grp)
        cw.writerow([
            model, chunk, epoch, len(grp),
            repr(float(np.mean([g.precision for g in grp]))),
            repr(float(np.mean([g.recall for g in grp]))),
            repr(float(np.mean([g.f1 for g in grp]))),
        ])
    return Report(summary, text, buf.getvalue(), cbuf.getvalue())
