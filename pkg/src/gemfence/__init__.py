"""Geofencing from WiFi scans with bipartite graph embeddings.

Records and access points form a weighted bipartite graph; bi-level
sample-and-aggregate embeddings of the records feed a histogram outlier
detector that decides whether a scan was taken inside the fence, and that
keeps absorbing confidently-inside scans as they stream in.
"""

from .bisage import BisageParams, EmbeddingTable, bi_level_forward, infer_embedding, init_embeddings
from .detector import Decision, HistogramDetector, OutlierScore, Verdict, enhanced_score
from .engine import EngineConfig, GemModel, IngestResult, bootstrap
from .graph import BipartiteGraph, SignalRecord, WalkConfig, build_graph, read_records, write_records
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph", "BisageParams", "Decision", "EmbeddingTable", "EngineConfig", "GemModel",
    "HistogramDetector", "IngestResult", "OutlierScore", "SignalRecord", "TrainConfig", "Verdict",
    "WalkConfig", "bi_level_forward", "bootstrap", "build_graph", "enhanced_score",
    "infer_embedding", "init_embeddings", "read_records", "train", "write_records",
]
