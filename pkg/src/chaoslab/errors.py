"""Exception hierarchy shared by every chaoslab module."""


class ChaoslabError(Exception):
    """Base class for all errors raised by chaoslab."""


class ConfigError(ChaoslabError):
    """A configuration document failed validation.

    ``path`` names the offending location inside the document, e.g.
    ``services[2].capacity_per_instance``.
    """

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SchemaError(ConfigError):
    pass


class CycleError(ConfigError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("dependency cycle " + " -> ".join(self.cycle), "edges")


class DanglingReferenceError(ConfigError):
    def __init__(self, name, path):
        self.name = name
        super().__init__(f"reference to unknown id {name!r}", path)


class ScopeKindMismatchError(ConfigError):
    """A per-user scope was attached to a physical fault."""


class UnknownTargetError(ConfigError):
    pass


class AllRegionsDownError(ChaoslabError):
    """No region is left that can accept traffic."""


class OpenWindowError(ChaoslabError):
    """A metric window was queried before it closed."""


class UnknownMetricError(ChaoslabError):
    pass


class IndeterminateControlError(ChaoslabError):
    """The control group produced no steady-state signal, so nothing can be compared."""


class ReplayMismatchError(ChaoslabError):
    def __init__(self, message, window=None):
        self.window = window
        super().__init__(message)
