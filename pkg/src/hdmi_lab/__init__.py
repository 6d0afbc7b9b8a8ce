"""Source-free hypothesis transfer with hypothesis-disparity-regularized MI maximization."""

from .adapt import AdaptConfig, RunLog, SourceConfig, adapt_target, run_pipeline, train_source
from .diffnet import LayerSpec, Network, ParamStore, sgd_step, softmax
from .hypotheses import (
    HypothesisSet, SourceSnapshot, anchor_predict, build_set, ensemble_predict, predict_all,
    to_target,
)
from .shiftdata import Dataset, ShiftSpec, generate

__version__ = "0.1.0"
