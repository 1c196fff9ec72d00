"""Exception hierarchy shared by the raptor modules."""


class RaptorError(Exception):
    pass


# manifest
class ManifestError(RaptorError):
    pass


class MalformedDocument(ManifestError):
    pass


class DuplicateName(ManifestError):
    pass


class UnknownDependency(ManifestError):
    pass


class CyclicDependency(ManifestError):
    pass


class PathTraversal(ManifestError):
    pass


class UnknownFunction(ManifestError):
    pass


class InvalidMask(ManifestError):
    pass


# listsched
class MismatchedTaskSets(RaptorError):
    pass


# context
class ContextError(RaptorError):
    pass


class InvalidOffset(ContextError):
    pass


class UnknownMaskedFunction(ContextError):
    pass


class InvalidMetadata(ContextError):
    pass


class NotALeader(ContextError):
    pass


# flight
class FlightError(RaptorError):
    pass


class NotRunning(FlightError):
    pass


class DependencyNotSatisfied(FlightError):
    pass


class WireError(FlightError):
    pass


# executor
class ExecutorError(RaptorError):
    pass


class SpawnFailure(ExecutorError):
    pass


class MissingEntrypoint(ExecutorError):
    pass


class AlreadyExited(ExecutorError):
    pass


class CleanupFailure(ExecutorError):
    pass


# proxy
class ProxyError(RaptorError):
    pass


class NotInitialized(ProxyError):
    pass


class AlreadyInitialized(ProxyError):
    pass


class InvalidArchive(ProxyError):
    pass


class ActivationTimeout(ProxyError):
    pass


# cli
class ConfigError(RaptorError):
    pass


class BindFailure(RaptorError):
    pass
