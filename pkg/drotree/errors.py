class DroTreeError(Exception):
    """Base class for every error raised by drotree."""


class ParseError(DroTreeError, ValueError):
    pass


class ValidationError(DroTreeError, ValueError):
    def __init__(self, message, node=None, rule=None):
        self.node = node
        self.rule = rule
        prefix = f"node {node!r}: " if node is not None else ""
        super().__init__(f"{prefix}{message}" + (f" [{rule}]" if rule else ""))


class UnknownNode(DroTreeError, KeyError):
    def __init__(self, node):
        self.node = node
        super().__init__(node)

    def __str__(self):
        return f"unknown node {self.node!r}"


class StageOutOfRange(DroTreeError, ValueError):
    pass


class MixedStages(DroTreeError, ValueError):
    pass


class MissingXiField(DroTreeError, KeyError):
    def __init__(self, node, field):
        self.node = node
        self.field = field
        super().__init__(node, field)

    def __str__(self):
        return f"node {self.node!r} has no xi field {self.field!r}"


class ParamOutOfRange(DroTreeError, ValueError):
    pass


class InvalidRemoval(DroTreeError, ValueError):
    pass


class NumericalBreakdown(DroTreeError, RuntimeError):
    pass


class InstanceInfeasible(DroTreeError, RuntimeError):
    pass


class InstanceUnbounded(DroTreeError, RuntimeError):
    pass


class InfeasiblePolicy(DroTreeError, RuntimeError):
    def __init__(self, node, message="policy violates node constraints"):
        self.node = node
        super().__init__(f"node {node!r}: {message}")


class NotSolved(DroTreeError, RuntimeError):
    pass


class IterationLimit(DroTreeError, RuntimeError):
    """Raised when Benders stops on max_iter; `outcome` holds the best policy found."""

    def __init__(self, outcome, message="iteration limit reached"):
        self.outcome = outcome
        super().__init__(message)
