"""Exception hierarchy shared by every simulator layer."""


class SimError(Exception):
    """Base class for all simulator errors."""


class PastEventError(SimError):
    """An event was scheduled before the current virtual time."""


class TimeOverflowError(SimError):
    """A time value does not fit in an unsigned 64-bit cycle counter."""


class AddressError(SimError):
    """Address out of range or misaligned for the requested operation."""


class CapabilityError(SimError):
    """A privileged mutation was attempted without the right token."""


class HostMemoryExhausted(SimError):
    pass


class StateError(SimError):
    """An operation was invoked in a state that does not allow it."""


class BudgetInvariantError(SimError):
    """Internal scheduler accounting went wrong; indicates a simulator bug."""


class ChannelError(SimError):
    pass


class ScenarioError(SimError):
    """Invalid scenario file: parse error, dangling reference or failed admission."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AdmissionError(ScenarioError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
