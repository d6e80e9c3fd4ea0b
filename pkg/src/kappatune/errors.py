"""Exception types raised across the toolkit."""


class KappaError(Exception):
    """Base class for all toolkit errors."""


class FormatError(KappaError):
    pass


class CorruptHeader(FormatError):
    pass


class DuplicateTensor(KappaError):
    def __init__(self, name):
        super().__init__(f"duplicate tensor name: {name!r}")
        self.name = name


class NotFound(KappaError, KeyError):
    def __init__(self, name):
        super().__init__(f"tensor not found: {name!r}")
        self.name = name

    def __str__(self):
        return self.args[0]


class NonFiniteData(KappaError):
    def __init__(self, name, index):
        super().__init__(f"non-finite element in {name!r} at flat index {index}")
        self.name = name
        self.index = index


class SizeMismatch(KappaError):
    pass


class IoError(KappaError):
    pass


class NotEligible(KappaError):
    pass


class ZeroTensor(KappaError):
    def __init__(self, name=None):
        msg = "all singular values are zero"
        if name is not None:
            msg = f"{name}: {msg}"
        super().__init__(msg)
        self.name = name


class EmptyEligibleSet(KappaError):
    pass


class DegenerateSpectrum(KappaError):
    pass


class SingularCovariance(KappaError):
    pass


class ConvergenceFailure(KappaError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class InsufficientSamples(KappaError):
    pass


class DegenerateScale(KappaError):
    pass


class ConfigError(KappaError):
    pass


class DivergenceError(KappaError):
    def __init__(self, epoch, context=""):
        msg = f"non-finite loss at epoch {epoch}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)
        self.epoch = epoch
