"""Cache-aware reordering, scheduling and de-duplication of retrieved contexts."""

from .cache_sim import CacheConfig, OverCapacityError, PrefillReport, PrefixCache, hit_rate
from .core import (
    Accessed,
    Appended,
    Context,
    Evicted,
    IndexNode,
    InvalidPathError,
    PreconditionError,
    RewrittenRequest,
    UnknownSessionError,
)
from .dedup import SessionState, SessionStore, activate_multi_turn, dedup_turn, open_session
from .distance import DistanceParams, context_distance, pairwise_distances
from .hints import assemble, render_location_hint, render_order_hint
from .index import ContextIndex
from .ordering import OrderedContext, order_batch, order_context
from .pipeline import ExperimentConfig, Rewriter, run_experiment
from .scheduler import Schedule, schedule
from .workload import TraceRecord, WorkloadSpec, generate, load_trace, save_trace

__version__ = "0.1.0"
