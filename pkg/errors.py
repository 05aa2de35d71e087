class SiemError(Exception):
    """Base class for every error a pipeline stage can raise."""
    exit_code = 3


class ConfigurationError(SiemError):
    exit_code = 2


# Event model / collector

class MalformedEvent(SiemError):
    pass


class ParseReject(SiemError):
    pass


class InvalidGrammar(ConfigurationError):
    pass


class NondeterministicProbe(ConfigurationError):
    pass


class InvalidRule(ConfigurationError):
    pass


# Decision support

class InvalidSystemDescription(ConfigurationError):
    pass


class InvalidHierarchy(ConfigurationError):
    pass


class UnknownAttribute(ConfigurationError):
    pass


class NonConvergence(SiemError):
    pass


class MissingLocalPriority(SiemError):
    pass


class UnknownEndpoint(SiemError):
    pass


class PathLimitExceeded(SiemError):
    pass


class DimensionMismatch(SiemError):
    pass


class StaleRemediation(SiemError):
    pass


# Resilient event storage

class InvalidParams(ConfigurationError):
    pass


class MaterialMismatch(SiemError):
    pass


class InsufficientShares(SiemError):
    pass


class CombineFailure(SiemError):
    def __init__(self, message, shares=()):
        super().__init__(message)
        self.shares = tuple(shares)


class QuorumUnreachable(SiemError):
    def __init__(self, message, corrupted=()):
        super().__init__(message)
        self.corrupted = tuple(corrupted)


class InvalidPolicy(ConfigurationError):
    pass
