"""Zero-shot hyperparameter portfolios from tabular benchmark results.

Build a small ordered set of hyperparameter configurations offline, from a
config-by-dataset error table, such that evaluating just those few configs on
a new dataset gets close to the best the whole table could offer.  Includes
the greedy full-information selector, two budget-limited selectors (offline
Bayesian optimization and a multi-fidelity HyperBand variant), baselines, and
a leave-one-dataset-out benchmark harness.
"""

from zshpo.bench import (
    AggregateCurve,
    ComparisonCell,
    LodoResult,
    MethodSpec,
    aggregate,
    compare,
    emit_plot_data,
    lodo_evaluate,
    random_search_baseline,
    register_method,
    run_method,
)
from zshpo.forest import (
    FeatureMatrix,
    FeatureSpec,
    ForestModel,
    encode,
    fit_forest,
    predict_mean,
)
from zshpo.mfhb import (
    HyperBandState,
    MfTrace,
    mf_run,
    new_bracket_threshold,
    rung_resource,
)
from zshpo.obo import (
    EvaluationLedger,
    OboParams,
    OboTrace,
    acquire_config_location,
    acquire_dataset,
    naive_run,
    obo_run,
    surrogate_baseline_run,
)
from zshpo.portfolio import (
    Portfolio,
    empty_set_loss,
    exhaustive_select,
    greedy_select,
    marginal_gain,
    meta_loss,
)
from zshpo.tables import (
    ConfigRecord,
    DatasetMeta,
    NormalizedTable,
    PerformanceTable,
    TableFormatError,
    drop_dataset,
    load_table,
    normalize,
    red,
    reference_losses,
    save_table,
    selection_matrix,
    synth_table,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateCurve",
    "ComparisonCell",
    "ConfigRecord",
    "DatasetMeta",
    "EvaluationLedger",
    "LodoResult",
    "MethodSpec",
    "aggregate",
    "compare",
    "emit_plot_data",
    "lodo_evaluate",
    "random_search_baseline",
    "register_method",
    "run_method",
    "FeatureMatrix",
    "FeatureSpec",
    "ForestModel",
    "HyperBandState",
    "MfTrace",
    "NormalizedTable",
    "OboParams",
    "OboTrace",
    "PerformanceTable",
    "Portfolio",
    "TableFormatError",
    "acquire_config_location",
    "acquire_dataset",
    "drop_dataset",
    "empty_set_loss",
    "encode",
    "exhaustive_select",
    "fit_forest",
    "greedy_select",
    "load_table",
    "marginal_gain",
    "meta_loss",
    "mf_run",
    "naive_run",
    "new_bracket_threshold",
    "normalize",
    "obo_run",
    "predict_mean",
    "red",
    "reference_losses",
    "rung_resource",
    "save_table",
    "selection_matrix",
    "surrogate_baseline_run",
    "synth_table",
    "__version__",
]
