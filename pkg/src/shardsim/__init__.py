"""Deterministic desk-scale simulation of sharded data-parallel training.

Parameters are flattened per unit and sharded across simulated ranks;
training unshards each unit just in time, reduces gradients back to shards,
and accounts every byte moved and every byte resident on a discrete-event
device model.  Everything is exactly reproducible from a seed.
"""
from .collectives import (
    ALL_GATHER,
    ALL_REDUCE,
    REDUCE_SCATTER,
    CollectiveError,
    CollectiveFabric,
    CollectiveHandle,
    DeadlockError,
    RankTask,
    ShardingPlan,
    TrafficLedger,
    build_plan,
    hybrid_reduce_task,
    predicted_cross_host_traffic,
    run_round_robin,
    run_symmetric,
    run_threaded,
    traffic_report,
)
from .deferred_init import (
    FakeModel,
    HostArena,
    InitOp,
    InitProgram,
    UnsupportedInitOpError,
    eager_param_values,
    init_streamed_from_host,
    init_unsharded_on_device,
    materialize_by_unit,
    record,
    replay,
)
from .engine import (
    ACCUM_NO_COMM,
    ACCUM_OFF,
    ACCUM_WITH_COMM,
    NRAF,
    RAF,
    EngineConfig,
    EngineError,
    ExecutionOrder,
    LocalTrainResult,
    PrecisionPolicy,
    ScalerConfig,
    Session,
    ShardedGradScaler,
    StaticOrderError,
    StepResult,
    local_train,
    max_param_delta,
)
from .flatparam import (
    FlatParamError,
    FlatParameter,
    OriginalParam,
    SharedParameterError,
    UnitLayout,
    build_unit_layouts,
    dump_plan_lines,
    peak_param_memory,
    writeback_grad,
)
from .memsim import (
    CachingAllocator,
    CostModel,
    DeviceSim,
    MemoryLedger,
    SimulatedOOM,
    Trace,
    TraceRecord,
    collective_size_sweep,
    retry_experiment,
)
from .numerics import (
    DTYPES,
    ITEMSIZE,
    Adam,
    DenseTensor,
    LayeredModel,
    ModelSpec,
    NumericsError,
    SGD,
    batch_stream,
    make_optimizer,
    mse_loss,
    named_stream,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
