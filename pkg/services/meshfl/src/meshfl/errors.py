"""Exception hierarchy shared by every meshfl module."""


class MeshFLError(Exception):
    """Base class for all meshfl failures."""


class ConfigError(MeshFLError, ValueError):
    """Scenario, preset or section values are invalid."""


class TopologyError(ConfigError):
    """The mesh description cannot be turned into a valid topology."""


class DataError(MeshFLError, ValueError):
    """Dataset generation or partitioning failed."""


class SchedulingError(MeshFLError, ValueError):
    """An event was posted before the current simulated time."""


class TelemetryError(MeshFLError, RuntimeError):
    """In-band telemetry header used out of protocol order."""


class RoutingFault(MeshFLError, RuntimeError):
    """No usable next hop for a packet."""


class TrainingError(MeshFLError, ValueError):
    """Local training or aggregation received inconsistent inputs."""


class ProtocolError(MeshFLError, RuntimeError):
    """A COMM message arrived in a state that does not accept it."""


class RunAborted(MeshFLError, RuntimeError):
    """The experiment could not run to completion."""
