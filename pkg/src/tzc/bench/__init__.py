"""Benchmark harness: latency and reliability of the shared-memory path
against a full-copy socket baseline."""

from .harness import (
    CaseConfig,
    CaseReport,
    SubscriberResult,
    run_case,
    run_matrix,
    summarize,
    write_csv,
    DEFAULT_SIZES,
    DEFAULT_SUBS,
    DEFAULT_TRANSPORTS,
)
