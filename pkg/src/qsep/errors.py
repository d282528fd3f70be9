"""Exception types shared across the toolchain."""


class QsepError(Exception):
    """Base class for all toolchain errors."""


class ManifestError(QsepError):
    """Malformed model manifest or missing/mismatched weight blob."""


class GraphError(QsepError):
    """Network graph violates a structural invariant."""


class QuantError(QsepError):
    """Invalid quantization parameters or unquantizable construct."""


class StreamUnderrun(QsepError):
    """A streaming producer ended before the consumer was satisfied."""


class PlanError(QsepError):
    """Hardware plan or schedule is inconsistent with the graph."""


class MemoryFault(QsepError):
    """Out-of-bounds or uninitialized access to the shared memory image."""
