"""Prefill-only KV-cache compression toolkit."""

__version__ = "0.1.0"

from .trace import (BudgetConfig, PrefillTrace, SyntheticSpec, gen_synthetic,
                    load_trace, save_trace, validate_trace)
from .tinylm import (TinyLMConfig, TinyLMWeights, init_weights, load_weights,
                     prefill, sample_tokens, save_weights, window_nll)
from .utility import UtilityField, base_utility, compute_utility, mean_attention, \
    relative_norms, window_mass
from .bandit import BanditDataset, CQLParams, QTable, fit_cql, greedy_policy
from .headtable import (HeadExperience, HeadTable, collect_head_experience,
                        compile_head_table, pooled_importance)
from .riskgate import (BinEdges, GateTable, RiskCoords, collect_gate_experience,
                       compile_gate_table, discretize, fit_bins, gate_select,
                       risk_coords, semantic_risk, structural_risk)
from .pipeline import (CompressedCache, Selection, baseline_select, build_cache,
                       compress)
from .bound import BoundReport, bound_report, compressed_attention, \
    frobenius_error, l1_truncation_check
from .evaluation import EvalReport, evaluate_run, nll_delta
