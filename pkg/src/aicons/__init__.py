"""AI-enabled blockchain consensus simulator with Shapley reward attribution.

An embedding-based recommender (trained by decentralized federated
averaging) selects each round's block creator, and every node is rewarded
by a three-dimensional Shapley contribution (model accuracy, energy
thrift, bandwidth). Simplified PoW/PoS/PoD/PoFL baselines run behind the
same engine interface for fairness, throughput, and profit comparisons.
"""

from .domain import (LabeledRecord, LedgerBlock, MonitoringSample,
                     NodeProfile, digest, label_group, validate_sample,
                     verify_chain)
from .metrics import (AblationMask, FairnessRow, TrendFit, fit_trend, profit,
                      reward_contribution_ratio, run_ablation)
from .recommender import (ModelConfig, ModelParams, accuracy,
                          cosine_similarity, embed, fedavg, margin_loss,
                          rank_nodes, train_local)
from .shapley import (CoalitionInputs, ShapleyReport, UtilityVector, collapse,
                      consensus_average, energy_of_node, normalize,
                      shapley_exact, shapley_sampled, utility)
from .simulation import (NetworkModel, RoundOutcome, SimConfig, SimResult,
                         run_simulation, throughput)
from .trace import TraceSpec, generate_trace, load_trace, save_trace

__version__ = "0.1.0"
