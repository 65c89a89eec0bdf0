"""End-to-end runs built from the library pieces: load, prepare, train, evaluate, replay."""
from __future__ import annotations

import io
import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .anomaly_transformer import AnomalyTransformer, AnomTransConfig
from .clstm import CLSTM, CLstmConfig
from .config import RunConfig, data_hash
from .dataset import (
    PreparedData,
    SplitSpec,
    load_prepared,
    mask_columns,
    prepare,
    prepare_validation,
    save_prepared,
    split_train_val,
    synthesize,
    undersample,
    window_indices,
)
from .errors import HashMismatch, SchemaMismatch
from .ingest import ChunkSeries, load_feature_csv
from .nn import Checkpoint, count_params, load_checkpoint, save_checkpoint
from .rng import substream
from .train_eval import (
    Metrics,
    RunResult,
    TrainConfig,
    compute_metrics,
    report,
    result_rows,
    threshold_sweep,
    train,
    write_results_csv,
)

log = logging.getLogger(__name__)

_MODELS = {"clstm": (CLSTM, CLstmConfig), "anomaly_transformer": (AnomalyTransformer, AnomTransConfig)}

PREPARED_NAME = "prepared.npz"
VAL_CSV_NAME = "val_features.csv"
RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.txt"


def build_model(name: str, config=None, seed: int = 0):
    try:
        cls, cfg_cls = _MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}") from None
    if isinstance(config, dict):
        config = cfg_cls(**config)
    return cls(config, rng=substream(seed, "init"))


def model_from_checkpoint(ckpt: Checkpoint):
    model = build_model(ckpt.model, ckpt.model_config, ckpt.seed)
    model.load_state_dict(ckpt.params)
    return model


def checkpoint_name(seed: int) -> str:
    return f"checkpoint_seed{seed}.npz"


# --- data ---------------------------------------------------------------------

def load_series(cfg: RunConfig) -> ChunkSeries:
    if cfg.features is None:
        return synthesize(cfg.synth_spec(), cfg.synthetic_seed)
    return load_feature_csv(cfg.features, chunk_size=cfg.chunk_size)


def prepare_data(cfg: RunConfig, cache: Path | None = None) -> PreparedData:
    """Prepared segments for ``cfg``, reusing ``cache`` when its hash still matches."""
    h = data_hash(cfg)
    if cache is not None:
        hit = load_prepared(cache, expected_hash=h)
        if hit is not None:
            log.info("using cached segments from %s", cache)
            return hit
    series = load_series(cfg)
    data = prepare(
        series,
        s=cfg.segment_length,
        split=SplitSpec(cfg.train_fraction),
        min_chunks=cfg.min_pump_chunks,
        masked=cfg.masked_columns,
        config_hash=h,
    )
    if cache is not None:
        save_prepared(data, cache)
    return data


def validation_series(cfg: RunConfig) -> ChunkSeries:
    """Raw validation rows (the tail of the chronological split), for replay."""
    return split_train_val(load_series(cfg), SplitSpec(cfg.train_fraction))[1]


# --- training -----------------------------------------------------------------

@dataclass
class TrainOutput:
    results: list[RunResult]
    checkpoints: list[Path]
    results_csv: Path
    summary: str
    n_params: int


def train_one(cfg: RunConfig, data: PreparedData, seed: int, on_epoch=None) -> tuple[RunResult, object]:
    model = build_model(cfg.model, cfg.model_config(), seed)
    train_segs = undersample(data.train, cfg.resolved_undersample(), substream(seed, "undersample"))
    tc = TrainConfig(
        epochs=cfg.resolved_epochs(),
        batch_size=cfg.resolved_batch_size(),
        threshold=cfg.resolved_threshold(),
        seed=seed,
        learning_rate=cfg.learning_rate,
        chunk_size=cfg.chunk_size,
    )
    log.info("seed %d: %d train segments (%d positive), %d validation", seed, len(train_segs), int(train_segs.y.sum()), len(data.val))
    return train(model, train_segs, data.val, tc, on_epoch=on_epoch), model


def checkpoint_for(cfg: RunConfig, result: RunResult, config_hash: str) -> Checkpoint:
    mc = cfg.model_config()
    return Checkpoint(
        model=cfg.model,
        model_config=mc.as_dict(),
        params=result.best_state,
        config_hash=config_hash,
        epoch=result.best.epoch,
        seed=result.seed,
        extra={
            "chunk_size": cfg.chunk_size,
            "segment_length": cfg.segment_length,
            "masked_columns": list(cfg.masked_columns),
            "threshold": result.threshold,
            "best": {"precision": result.best.val_precision, "recall": result.best.val_recall, "f1": result.best.val_f1},
        },
    )


def run_training(cfg: RunConfig, out_dir=None, on_epoch=None) -> TrainOutput:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg, out / PREPARED_NAME)

    results, paths = [], []
    n_params = count_params(build_model(cfg.model, cfg.model_config(), 0))
    for seed in cfg.seeds:
        result, _ = train_one(cfg, data, seed, on_epoch=on_epoch)
        results.append(result)
        paths.append(save_checkpoint(out / checkpoint_name(seed), checkpoint_for(cfg, result, data.config_hash)))

    csv_path = out / RESULTS_NAME
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        write_results_csv(result_rows(results), fh)

    lines = [
        f"model: {cfg.model}",
        f"parameters: {n_params}",
        f"chunk size: {cfg.chunk_size}s, segment length: {cfg.segment_length}",
        f"epochs: {cfg.resolved_epochs()}, batch size: {cfg.resolved_batch_size()}, "
        f"threshold: {cfg.resolved_threshold()}, undersample: {cfg.resolved_undersample()}",
        f"train segments: {len(data.train)} before undersampling, validation segments: {len(data.val)}",
    ]
    for r in results:
        b = r.best
        lines.append(
            f"seed {r.seed}: best epoch {b.epoch} precision {b.val_precision:.4f} recall {b.val_recall:.4f} f1 {b.val_f1:.4f}"
        )
    lines.append("")
    lines.append(report(results).text)
    summary = "\n".join(lines)
    (out / SUMMARY_NAME).write_text(summary, encoding="utf-8")
    return TrainOutput(results, paths, csv_path, summary, n_params)


# --- evaluation -----------------------------------------------------------------

def evaluate(ckpt: Checkpoint, data: PreparedData, threshold: float | None = None, sweep: bool = False):
    if ckpt.config_hash != data.config_hash:
        raise HashMismatch(
            f"checkpoint was trained on data {ckpt.config_hash[:12]}, dataset is {data.config_hash[:12]}"
        )
    thr = ckpt.extra.get("threshold", 0.5) if threshold is None else threshold
    probs = model_from_checkpoint(ckpt).predict(data.val.X)
    metrics = compute_metrics(probs, data.val.y, thr)
    table = threshold_sweep(probs, data.val.y) if sweep else None
    return metrics, table


def format_metrics(m: Metrics) -> str:
    return (
        f"threshold {m.threshold!r}: precision {m.precision:.6f} recall {m.recall:.6f} f1 {m.f1:.6f} "
        f"(tp {m.tp}, fp {m.fp}, fn {m.fn}, tn {m.tn})"
    )


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("threshold,precision,recall,f1,tp,fp,fn,tn\n")
    for m in rows:
        buf.write(f"{m.threshold!r},{m.precision!r},{m.recall!r},{m.f1!r},{m.tp},{m.fp},{m.fn},{m.tn}\n")
    return buf.getvalue()


# --- replay -----------------------------------------------------------------

class StreamScorer:
    """Scores chunks one at a time, using only chunks already seen for the same pump.

    Until a pump has ``s`` chunks the window is completed by reflection
    inside what has arrived so far, matching the batch windows exactly.
    """

    def __init__(self, model, segment_length: int, masked_columns=()):
        self.model = model
        self.s = segment_length
        self.masked = tuple(masked_columns)
        self._buffers: dict[int, deque] = {}
        self._seen: dict[int, int] = {}

    def push(self, pump: int, row: np.ndarray) -> float:
        buf = self._buffers.setdefault(pump, deque(maxlen=self.s))
        buf.append(np.asarray(row, dtype=np.float64))
        k = self._seen.get(pump, 0)
        self._seen[pump] = k + 1
        rows = np.stack(buf)
        if k + 1 < self.s:
            rows = rows[window_indices(k + 1, self.s)[k]]
        window = mask_columns(rows[None], self.masked)
        return float(self.model.predict(window)[0])


@dataclass(frozen=True)
class ReplayEvent:
    timestamp: float
    pump: int
    probability: float
    alert: bool

    def line(self) -> str:
        return f"{self.timestamp!r},{self.pump},{self.probability!r},{int(self.alert)}"


REPLAY_HEADER = "timestamp,pump,probability,alert"


def replay(
    ckpt: Checkpoint,
    series: ChunkSeries,
    speed: float = 0.0,
    threshold: float | None = None,
    sleep: Callable[[float], None] | None = None,
) -> Iterator[ReplayEvent]:
    """Yield one event per chunk in file order.

    ``speed`` is a playback multiplier: 1 sleeps one chunk length per chunk,
    0 runs as fast as possible.
    """
    chunk = ckpt.extra.get("chunk_size")
    if chunk is not None and chunk != series.chunk_size:
        raise SchemaMismatch(f"checkpoint expects {chunk}s chunks, stream has {series.chunk_size}s")
    if speed < 0:
        raise ValueError("speed must be >= 0")
    sleep = sleep or time.sleep
    thr = ckpt.extra.get("threshold", 0.5) if threshold is None else threshold
    scorer = StreamScorer(model_from_checkpoint(ckpt), ckpt.extra["segment_length"], ckpt.extra.get("masked_columns", ()))
    pumps = series.pump_index
    for i, row in enumerate(series.data):
        if i and speed > 0:
            sleep(series.chunk_size / speed)
        p = scorer.push(int(pumps[i]), row)
        yield ReplayEvent(float(series.dates[i]), int(pumps[i]), p, p >= thr)


def batch_probabilities(ckpt: Checkpoint, series: ChunkSeries) -> np.ndarray:
    """Batch-mode probabilities for ``series`` in file order (the replay reference)."""
    segs = prepare_validation(series, ckpt.extra["segment_length"], ckpt.extra.get("masked_columns", ()))
    probs = model_from_checkpoint(ckpt).predict(segs.X)
    # segments come grouped by pump; put them back into file order
    out = np.empty(len(series))
    pumps = series.pump_index
    for pump in dict.fromkeys(pumps.tolist()):
        rows = np.flatnonzero(pumps == pump)
        sel = segs.pump == pump
        out[rows[segs.position[sel]]] = probs[sel]
    return out

