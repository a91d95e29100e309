"""Analytic and discrete-event performance model."""

from .engine import (  # noqa: F401
    KERNEL,
    DurationSpec,
    RampDownReport,
    SimResult,
    closed_form_efficiency,
    constant,
    des_run,
    effective_task_time,
    efficiency_sweep,
    empirical,
    io_overhead_per_task,
    lognormal,
    lognormal_from_mean_sd,
    min_task_length_for_efficiency,
    normal,
    ramp_down_loss,
    trace,
    uniform,
    wave_efficiency,
)
