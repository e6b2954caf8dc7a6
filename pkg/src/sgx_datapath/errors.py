"""Exception types raised across the package."""


class DataPathError(Exception):
    """Base class for every error raised by this package."""


# call gate
class DuplicateCall(DataPathError):
    pass


class UnknownCall(DataPathError):
    pass


class PlacementViolation(DataPathError):
    """A buffer does not match the placement declared for its parameter."""


# emulated memory
class OutOfEmulatedMemory(DataPathError, MemoryError):
    pass


class BoundsError(DataPathError, IndexError):
    pass


class IntegrityError(DataPathError):
    """Authenticated data (sealed page, stored block) failed verification."""


# crypto engine
class UnknownKey(DataPathError, KeyError):
    pass


class AuthError(DataPathError):
    pass


class KeyInstallRejected(DataPathError):
    pass


# secure channel
class HandshakeError(DataPathError):
    pass


class RecordRejected(DataPathError):
    pass


# at-rest store
class StoreError(DataPathError, OSError):
    pass


# benchmark harness
class EmptyInput(DataPathError, ValueError):
    pass


class HarnessError(DataPathError):
    pass


class IncompleteMatrix(DataPathError):
    pass


class ParseError(DataPathError, ValueError):
    pass
