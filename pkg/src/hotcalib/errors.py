"""Exception hierarchy.

Everything raised on purpose derives from :class:`HotCalibError`.  The CLI maps
:class:`InputError` subclasses to exit code 2 and :class:`NumericalError`
subclasses to exit code 1.
"""


class HotCalibError(Exception):
    pass


class InputError(HotCalibError):
    """Bad user input: malformed files, wrong shapes, invalid parameters."""


class NumericalError(HotCalibError):
    """A computation could not produce a finite answer."""


class DimensionMismatch(InputError):
    pass


class NonFiniteCost(InputError):
    pass


class NonFiniteInput(InputError):
    pass


class InstanceTooLarge(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyFile(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class CovarianceUndefined(InputError):
    def __init__(self, label):
        super().__init__(f"class {label!r} has fewer than 2 samples; covariance undefined")
        self.label = label


class NegativeInput(InputError):
    pass


class LogOfNonPositive(InputError):
    pass


class ZeroVector(InputError):
    pass


class InsufficientClasses(InputError):
    pass


class NotEnoughClasses(InputError):
    pass


class NotEnoughSamples(InputError):
    def __init__(self, label, have, need):
        super().__init__(f"class {label!r} has {have} samples, episode needs {need}")
        self.label = label


class NumericalUnderflow(NumericalError):
    pass


class CovarianceNotPD(NumericalError):
    pass
