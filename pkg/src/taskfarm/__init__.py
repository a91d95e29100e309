"""taskfarm: high-throughput many-task execution.

A compact dispatcher/executor stack for running very large numbers of small
tasks: a binary wire protocol, an asyncio dispatch service with task bundling
and fail-fast error handling, caching executors, block-granular provisioning,
and a calibrated performance model for sizing runs before committing cycles.
"""

__version__ = "0.1.0"

from .proto import (  # noqa: F401
    DispatchMode,
    ErrorClass,
    InputFile,
    OutputFile,
    TaskResult,
    TaskSpec,
)
