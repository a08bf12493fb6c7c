"""Join-cardinality estimation over star subschemas of a foreign-key graph.

The pipeline: partition the schema into stars, sample each star's full outer
join, fit one conditional density model per star, then estimate any tree
query by walking its covering stars and multiplying conditional selectivities
and fanouts.
"""

from .data import Dataset, Workload, load_dataset, parse_workload
from .estimators import (DaeConfig, DaeModel, ExactEmpiricalEstimator,
                         TrainingDiverged, load_model, save_model, train)
from .inference import EstimateResult, InferenceConfig, estimate_cardinality
from .joiner import build_layout, materialize, sample_join, true_cardinality
from .schema import (QueryGraph, SchemaGraph, Subschema, SubschemaHypergraph,
                     check_connected, load_schema_config, partition)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Workload", "load_dataset", "parse_workload",
    "DaeConfig", "DaeModel", "ExactEmpiricalEstimator", "TrainingDiverged",
    "load_model", "save_model", "train",
    "EstimateResult", "InferenceConfig", "estimate_cardinality",
    "build_layout", "materialize", "sample_join", "true_cardinality",
    "QueryGraph", "SchemaGraph", "Subschema", "SubschemaHypergraph",
    "check_connected", "load_schema_config", "partition",
    "__version__",
]
