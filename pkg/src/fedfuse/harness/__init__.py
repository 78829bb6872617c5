"""Data ingestion, synthetic generators, experiment drivers, and reports."""

from .experiments import (
    DataBundle,
    evaluate_multimodal,
    fer_data_bundle,
    run_centralized,
    run_federated,
    run_individual,
    synthetic_bundle,
    task_for,
)
from .fer import FerRecord, Usage, load_fer_csv, records_to_arrays, stratified_subset
from .report import ExperimentReport, MetricRow, accuracy_of, confusion_matrix, export_report
from .synth import (
    ClientData,
    MultimodalTaskConfig,
    SynthPhysioConfig,
    SynthVisualConfig,
    gen_synthetic_physio,
    gen_synthetic_visual,
    make_client_data,
    make_test_data,
    physio_feature_matrix,
)

__all__ = [
    "ClientData",
    "DataBundle",
    "ExperimentReport",
    "FerRecord",
    "MetricRow",
    "MultimodalTaskConfig",
    "SynthPhysioConfig",
    "SynthVisualConfig",
    "Usage",
    "accuracy_of",
    "confusion_matrix",
    "evaluate_multimodal",
    "export_report",
    "fer_data_bundle",
    "gen_synthetic_physio",
    "gen_synthetic_visual",
    "load_fer_csv",
    "make_client_data",
    "make_test_data",
    "physio_feature_matrix",
    "records_to_arrays",
    "run_centralized",
    "run_federated",
    "run_individual",
    "stratified_subset",
    "synthetic_bundle",
    "task_for",
]
