"""Exception hierarchy shared by every module."""


class FedAvoidError(Exception):
    """Base class."""


class ConfigError(FedAvoidError, ValueError):
    pass


class DataError(FedAvoidError, ValueError):
    pass


class ArchitectureError(FedAvoidError, ValueError):
    pass


class IncompatibleArchitectureError(ArchitectureError):
    """Parameter vector or update belongs to a different architecture digest."""


class ProtocolError(FedAvoidError):
    pass


class FormatError(FedAvoidError, ValueError):
    """Malformed bytes. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class StateError(FedAvoidError):
    pass


class NavigationError(FedAvoidError):
    pass
