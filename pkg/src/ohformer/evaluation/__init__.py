from ohformer.evaluation.analysis import (
    SimilarityReport,
    analyze_model,
    attention_similarity_report,
    flop_rows,
    js_divergence,
    uniform_js,
)
from ohformer.evaluation.metrics import RetrievalResult, RetrievalSet, cmc_map, dist_matrix, evaluate
from ohformer.evaluation.synth import SynthSpec, synth_generate

__all__ = [
    "RetrievalResult",
    "RetrievalSet",
    "SimilarityReport",
    "SynthSpec",
    "analyze_model",
    "attention_similarity_report",
    "cmc_map",
    "dist_matrix",
    "evaluate",
    "flop_rows",
    "js_divergence",
    "synth_generate",
    "uniform_js",
]
