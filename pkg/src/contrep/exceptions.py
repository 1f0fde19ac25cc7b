"""Exception types raised across the package."""


class ContrepError(Exception):
    """Base class for all package errors."""


# task streams
class UnknownDataset(ContrepError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NotDivisible(ContrepError, ValueError):
    pass


class EmptyTask(ContrepError, ValueError):
    pass


class SequenceSyntaxError(ContrepError, ValueError):
    pass


# models
class ShapeMismatch(ContrepError, ValueError):
    pass


class ProjectorDisabled(ContrepError, RuntimeError):
    pass


class UnknownHead(ContrepError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# losses
class LabelOutOfRange(ContrepError, ValueError):
    pass


class ZeroVector(ContrepError, ValueError):
    pass


class NoPositive(ContrepError, ValueError):
    pass


class DegenerateBatch(ContrepError, ValueError):
    pass


# training
class MissingSnapshot(ContrepError, RuntimeError):
    pass


class NonFiniteLoss(ContrepError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# evaluation
class EmptyReference(ContrepError, ValueError):
    pass


class MissingClass(ContrepError, ValueError):
    pass


class DegenerateMean(ContrepError, ValueError):
    pass


class DegenerateInput(ContrepError, ValueError):
    pass


# harness
class ValidationError(ContrepError, ValueError):
    """Config validation failure carrying ``{field: message}`` details."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = {"config": errors}
        self.errors = dict(errors)
        msg = "; ".join(f"{k}: {v}" for k, v in self.errors.items())
        super().__init__(msg)


class MissingMetric(ContrepError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingRun(ContrepError, FileNotFoundError):
    pass
