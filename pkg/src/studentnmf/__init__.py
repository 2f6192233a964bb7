"""Weekly behaviour features from educational event logs, soft-clustered with weighted NMF."""

__version__ = "0.1.0"

from .errors import ConfigurationError, ParseError, StudentNMFError, ValidationError
from .featurizer import FeatureMatrix, FeatureSpec, bloom_group, build_matrix, extract_row
from .sessionizer import (
    Kind, PeriodCalendar, RawEvent, Session, StudentPeriodEntry,
    activity_counts, assign_periods, build_sessions, parse_events,
)
from .wnmf import (
    DiagonalRescaling, FactorModel, FitOptions,
    apply_bound_rule, fit, init_factors, masked_objective, normalize_clusters, select_k, update_step,
)
from .analysis import cluster_report, membership_distribution, membership_timeseries
from .synthgen import SyntheticSpec, aligned_recovery_error, plant_factors, synth_event_log, synth_matrix
