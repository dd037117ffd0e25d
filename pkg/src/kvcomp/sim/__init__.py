"""Cycle, traffic and energy model of the accelerator."""

from .hardware import (
    CIM_BLOCKS,
    MODULES,
    ConfigError,
    HardwareConfig,
    cim_dims_for,
    load_hardware_config,
    save_hardware_config,
)
from .report import CSV_COLUMNS, FORMATS, emit_report, load_report
from .schedule import (
    WorkloadCase,
    WorkloadSchedule,
    core_finish_times,
    multicore_finish_times,
    pipeline_ttft,
    schedule_workload,
    sequential_ttft,
)
from .simulator import CATEGORIES, ENERGY_KEYS, MODES, SimReport, kv_transfer_bytes, simulate
