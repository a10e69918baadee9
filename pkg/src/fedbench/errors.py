class FedBenchError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FedBenchError, ValueError):
    """Invalid configuration, shapes or schemas."""


class SchemaError(ConfigError):
    """Two models (or a model and a gradient set) disagree on parameter layout."""


class InvalidTraceError(FedBenchError):
    """A forward trace no longer matches the model it came from."""


class DegenerateInputError(FedBenchError, ValueError):
    """Input for which the requested quantity is undefined."""


class TrainingError(FedBenchError, RuntimeError):
    """Training diverged or otherwise could not proceed."""
