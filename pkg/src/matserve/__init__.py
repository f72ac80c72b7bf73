"""matserve: desk-scale numerical offload over TCP.

Clients stream dense matrices to a driver-coordinated worker pool, invoke
distributed linear-algebra routines by name against matrix handles, and
stream results back.
"""

from .client import (
    BuiltinLibrary,
    CgReport,
    ClientError,
    ClientHandle,
    InvalidHandleError,
    LocalMatrix,
    ServerError,
    Session,
    SessionClosedError,
    SvdResult,
    connect,
)
from .server import Server

__version__ = "0.1.0"

__all__ = [
    "BuiltinLibrary",
    "CgReport",
    "ClientError",
    "ClientHandle",
    "InvalidHandleError",
    "LocalMatrix",
    "Server",
    "ServerError",
    "Session",
    "SessionClosedError",
    "SvdResult",
    "connect",
    "__version__",
]
