"""Streaming change detection on QuantTree histograms.

Monitors multivariate datastreams without assuming the data law: a
histogram fitted on a small training set, an exponentially weighted
per-bin proportion tracked online, and Monte Carlo calibrated
thresholds that keep the average time before a false alarm at a target
value for any stationary distribution.
"""

from .bench import (
    DetectorConfig,
    ExperimentReport,
    StreamFamily,
    auc_by_lag,
    geometric_false_alarm_rate,
    measure_arl0,
    measure_batch_arl0,
    measure_delay_far,
    rank_auc,
    write_report,
)
from .calibration import (
    BatchThreshold,
    CalibrationMeta,
    ThresholdTable,
    calibrate,
    calibrate_batch_threshold,
    conditional_quantile_thresholds,
    fit_threshold_polynomial,
    simulate_statistic_paths,
)
from .datagen import (
    ChangeSpec,
    CsvLaw,
    GaussianLaw,
    MeanShift,
    RandomShift,
    StreamSpec,
    UniformLaw,
    gaussian_change_mean_shift,
    generate_array,
    generate_stream,
    ingest_csv,
)
from .detector import (
    BatchDetectorState,
    DetectorState,
    batch_init,
    batch_step,
    qtewma_init,
    qtewma_step,
    run_stream,
    run_streams,
)
from .partition import (
    QuantTreePartition,
    build_partition,
    lookup,
    lookup_array,
    sample_bin_probabilities,
)

__version__ = "0.1.0"
