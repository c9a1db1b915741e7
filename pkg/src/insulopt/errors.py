"""Exception hierarchy shared by all insulopt modules."""


class InsuloptError(Exception):
    """Base class for all errors raised by insulopt."""


class InvalidArgument(InsuloptError, ValueError):
    pass


class DegenerateGeometry(InsuloptError, ValueError):
    pass


class InvalidMesh(InsuloptError, ValueError):
    pass


class MeshQualityFailure(InsuloptError):
    def __init__(self, message, quality=None):
        super().__init__(message)
        self.quality = quality


class InvalidWeight(InsuloptError, ValueError):
    pass


class InfeasibleParams(InsuloptError, ValueError):
    pass


class InvalidDensity(InsuloptError, ValueError):
    pass


class NoConvergence(InsuloptError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class GradientProbeFailure(InsuloptError):
    def __init__(self, message, vertex=None):
        super().__init__(message)
        self.vertex = vertex
