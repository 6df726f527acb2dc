"""Black-box detection of hallucinated references via self-consistency queries."""

from .corpus import CandidateReference, Topic, parse_title_list, sample_topics
from .direct import classify_completion, ensemble_dq, score_direct
from .gateway import BackendPolicy, CompletionBatch, Gateway, PromptRequest, cache_key
from .indirect import ensemble_iq_dq, estimate_overlap, score_indirect
from .labeler import build_quoted_query, label_reference
from .metrics import auc, bootstrap_band, cohens_kappa, delong_ci, fdr_curve, hallucination_rate, roc_curve
from .pipeline import export_report, resume, run_pipeline

__version__ = "0.1.0"
