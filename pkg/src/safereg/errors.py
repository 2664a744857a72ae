"""Exception hierarchy shared across the package."""


class SafeRegError(Exception):
    """Base class for all package errors."""


# causal graph

class GraphError(SafeRegError, ValueError):
    pass


class CycleDetected(GraphError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("graph contains the cycle " + " -> ".join(map(str, self.cycle)))


class UnknownEndpoint(GraphError):
    pass


class DuplicateNode(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class NotAControl(UnknownNode):
    """Raised when an intervention names a variable that is not a control input."""


class OverlappingSets(GraphError):
    pass


class InvalidTreatment(GraphError):
    pass


class NotIdentifiable(SafeRegError):
    pass


# specification logic

class SpecError(SafeRegError, ValueError):
    pass


class SpecSyntaxError(SpecError):
    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} at position {position}")


class UnknownComparator(SpecError):
    def __init__(self, token, position):
        self.token = token
        self.position = position
        super().__init__(f"unknown comparator {token!r} at position {position}")


class LengthMismatch(SafeRegError, ValueError):
    pass


class MissingMetric(SpecError):
    pass


class NonFiniteMetric(SpecError):
    pass


# observational data

class DataError(SafeRegError, ValueError):
    pass


class DataIoError(DataError, OSError):
    pass


class EmptyDataset(DataIoError):
    pass


class SchemaMismatch(DataError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class MissingColumn(DataError):
    pass


class InsufficientData(DataError):
    pass


class EmptyStratum(DataError):
    pass


class TooFewSamples(DataError):
    pass


# gaussian process

class GPError(SafeRegError, ValueError):
    pass


class SingularFactorization(GPError):
    pass


class NonFiniteValue(GPError):
    pass


class NotPSD(GPError):
    pass


class InvalidStep(GPError):
    pass


# environment / learner / cli

class OutOfDomain(SafeRegError, ValueError):
    pass


class EnvironmentFailure(SafeRegError, RuntimeError):
    pass


class MissingTruthFlags(SafeRegError, ValueError):
    pass


class ConfigError(SafeRegError, ValueError):
    pass
