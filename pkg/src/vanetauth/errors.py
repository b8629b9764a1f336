"""Exception hierarchy shared by every vanetauth module."""


class VanetAuthError(Exception):
    """Base class for all library errors."""


# crypto
class CryptoError(VanetAuthError):
    pass


class UnknownKey(CryptoError):
    pass


class WrongKey(CryptoError):
    pass


class BadPadding(CryptoError):
    pass


class UnknownIdentity(CryptoError):
    pass


class NotLeader(CryptoError):
    pass


class UnknownGroup(CryptoError):
    pass


# keytree
class KeyTreeError(VanetAuthError):
    pass


class BadBranching(KeyTreeError):
    pass


class IndivisibleK(KeyTreeError):
    pass


class TooManyPaths(KeyTreeError):
    pass


class NoPathFound(KeyTreeError):
    pass


class StaleTimestamp(KeyTreeError):
    pass


class BadParams(KeyTreeError):
    pass


# groups
class GroupError(VanetAuthError):
    pass


class OffRoad(GroupError):
    pass


class EmptyGroup(GroupError):
    pass


class BadSignature(GroupError):
    pass


class WrongCell(GroupError):
    pass


class NotMember(GroupError):
    pass


# protocols
class Rejected(VanetAuthError):
    """An inbound envelope failed verification.

    ``cause`` is a short machine-readable reason recorded in the trace.
    """

    def __init__(self, cause: str, detail: str = ""):
        super().__init__(f"{cause}: {detail}" if detail else cause)
        self.cause = cause


class UnsupportedComm(VanetAuthError):
    pass


# simnet / cli
class ConfigError(VanetAuthError):
    pass


class InvariantViolation(VanetAuthError):
    pass


class CorruptTrace(VanetAuthError):
    pass


class BadGroupSignature(Rejected):
    def __init__(self, detail: str = ""):
        super().__init__("bad_group_signature", detail)


class DirectoryMiss(Rejected):
    def __init__(self, detail: str = ""):
        super().__init__("unknown_group", detail)


class NoGroupSignature(VanetAuthError):
    pass
