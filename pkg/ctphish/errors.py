"""
Exception hierarchy shared by every pipeline module.
"""


class PipelineError(Exception):
    """Base class for all domain errors raised by the pipeline."""


class ConfigError(PipelineError, ValueError):
    pass


# certs
class MalformedDer(PipelineError, ValueError):
    pass


# ctlog
class LogUnreachable(PipelineError):
    pass


class MalformedResponse(PipelineError, ValueError):
    pass


class RangeRejected(PipelineError):
    pass


class LeafDecodeError(PipelineError, ValueError):
    pass


class EmptySpan(PipelineError):
    pass


# intel
class UnknownFormat(PipelineError, ValueError):
    pass


# datasets, classifiers and features
class EmptyClass(PipelineError, ValueError):
    pass


class DimensionMismatch(PipelineError, ValueError):
    pass


class EmptyInput(PipelineError, ValueError):
    pass


class UntrainedModel(PipelineError):
    pass


# evaluate
class DegenerateSet(PipelineError, ValueError):
    pass


# fixture server
class SpecInvalid(PipelineError, ValueError):
    pass
