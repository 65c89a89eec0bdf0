"""Pump-and-dump detection on chunked exchange trade data.

Two detectors (a convolutional LSTM and a supervised Anomaly Transformer)
built on a small numpy autodiff engine, plus ingestion, windowing,
training/evaluation and a CLI.
"""
from .anomaly_transformer import AnomalyTransformer, AnomTransConfig
from .clstm import CLSTM, CLstmConfig
from .config import RunConfig
from .dataset import SegmentSet, SynthSpec, prepare, segment, synthesize, undersample
from .ingest import ChunkSeries, aggregate_chunks, load_feature_csv, parse_trades, write_feature_csv
from .train_eval import compute_metrics, report, threshold_sweep, train

__version__ = "0.1.0"

__all__ = [
    "AnomTransConfig",
    "AnomalyTransformer",
    "CLSTM",
    "CLstmConfig",
    "ChunkSeries",
    "RunConfig",
    "SegmentSet",
    "SynthSpec",
    "aggregate_chunks",
    "compute_metrics",
    "load_feature_csv",
    "parse_trades",
    "prepare",
    "report",
    "segment",
    "synthesize",
    "threshold_sweep",
    "train",
    "undersample",
    "write_feature_csv",
]
