from .message import (
    DEFAULT_CA_PORT,
    DEFAULT_MS_PORT,
    InvariantViolation,
    MalformedMgcp,
    MgcpCommand,
    MgcpError,
    MgcpResponse,
    UnknownVerb,
    parse_mgcp,
    serialize_mgcp,
)
from .transaction import MgcpTimers, MgcpTxState, mgcp_transaction_step

__all__ = [
    "DEFAULT_CA_PORT",
    "DEFAULT_MS_PORT",
    "InvariantViolation",
    "MalformedMgcp",
    "MgcpCommand",
    "MgcpError",
    "MgcpResponse",
    "MgcpTimers",
    "MgcpTxState",
    "UnknownVerb",
    "mgcp_transaction_step",
    "parse_mgcp",
    "serialize_mgcp",
]
