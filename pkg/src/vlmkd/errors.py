"""Exception hierarchy shared across the pipeline.

CLI exit codes are attached to the classes so the command layer can map
any raised error without a lookup table.
"""
from __future__ import annotations


class VlmKdError(Exception):
    exit_code = 2


class ConfigError(VlmKdError, ValueError):
    exit_code = 1


class ContractError(VlmKdError, ValueError):
    """A caller broke a shape or type precondition."""

    exit_code = 1


class DomainError(VlmKdError, ValueError):
    exit_code = 1


class RangeError(VlmKdError, IndexError):
    exit_code = 1


class NumericError(VlmKdError, FloatingPointError):
    exit_code = 2


class WiringError(VlmKdError):
    """Caches, dataset and models disagree about ids or dimensions."""

    exit_code = 1


class TransportError(VlmKdError):
    exit_code = 2

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class MalformedResponseError(VlmKdError):
    exit_code = 2


class ProtocolError(VlmKdError):
    exit_code = 2


class PartialFailure(VlmKdError):
    exit_code = 3

    def __init__(self, message: str, missing: list[str]):
        super().__init__(message)
        self.missing = missing


class CacheFormatError(VlmKdError):
    exit_code = 2


class CacheCorruptionError(CacheFormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CacheIntegrityError(CacheFormatError):
    def __init__(self, message: str, entry_id: str):
        super().__init__(message)
        self.entry_id = entry_id
