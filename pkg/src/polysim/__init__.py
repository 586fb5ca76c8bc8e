"""Multi-SLO LLM-serving scheduler library and cluster simulator."""

from .capacity import (Binding, WorkloadPoint, cost_co, cost_pd,
                       max_decode_batch_pd, max_token_batch_co)
from .perf_model import (AnalyticModel, AnalyticParams, PerfModel,
                         ProfileTable, TableModel, default_model,
                         iteration_time, load_profile)
from .scheduler import (RoutingDecision, SchedulerConfig, Server,
                        admit_co, decode_feasible, dynamic_chunk_plan,
                        predict_peak_kv)
from .sim import (ClusterSim, RunMetrics, SimConfig, check_token_deadlines,
                  cost_metrics, dslo_attained, goodput_at, run_sim)
from .workload import (Request, SloTier, TierDistribution, assign_slos,
                       default_distribution, default_tiers, generate_arrivals,
                       load_trace, synthesize_uniform)

__version__ = "0.1.0"
