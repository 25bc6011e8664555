"""Exception types shared across the simulator."""

from __future__ import annotations


class SimError(Exception):
    """Base class for simulator failures."""


class AccountUnderflowError(SimError):
    """A memory account was asked to uncharge below zero (fatal invariant breach)."""


class AccountOverLimitError(SimError):
    """A charge that was guaranteed to fit (e.g. under a temp raise) did not."""


class ProtocolDesyncError(SimError):
    """Control-plane state disagrees with the byte stream (e.g. over-transmission)."""


class SocketClosedError(SimError):
    """Application call on a socket that no longer accepts application calls."""


class LockDisciplineError(SimError):
    """One execution context held two socket locks at once."""


class WatchdogTimeout(SimError):
    """A stress scenario failed to complete within its watchdog budget."""
