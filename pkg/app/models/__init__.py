from .schemas import (
    Method,
    EstimatorKind,
    OptimizerKind,
    PairUniverse,
    SplitTag,
    SamplingScheme,
    SynthConfig,
    BilevelConfig,
    TraceRecord,
    TrainTrace,
    MetricRecord,
    MetricReport,
    VarianceRow,
    CheckResult
)
from .containers import (
    Interaction,
    Dataset,
    PairSet,
    SplitAssignment,
    SyntheticGroundTruth
)

__all__ = [
    'Method',
    'EstimatorKind',
    'OptimizerKind',
    'PairUniverse',
    'SplitTag',
    'SamplingScheme',
    'SynthConfig',
    'BilevelConfig',
    'TraceRecord',
    'TrainTrace',
    'MetricRecord',
    'MetricReport',
    'VarianceRow',
    'CheckResult',
    'Interaction',
    'Dataset',
    'PairSet',
    'SplitAssignment',
    'SyntheticGroundTruth'
]
