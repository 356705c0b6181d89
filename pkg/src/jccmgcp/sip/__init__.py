from .message import (
    BodyLengthMismatch,
    InvariantViolation,
    MalformedStartLine,
    MissingMandatoryHeader,
    SipError,
    SipMessage,
    build_request,
    build_response,
    parse_sip,
    serialize_sip,
)
from .transaction import IllegalEventForState, SipTimers, SipTxState, sip_transaction_step

__all__ = [
    "BodyLengthMismatch",
    "IllegalEventForState",
    "InvariantViolation",
    "MalformedStartLine",
    "MissingMandatoryHeader",
    "SipError",
    "SipMessage",
    "SipTimers",
    "SipTxState",
    "build_request",
    "build_response",
    "parse_sip",
    "serialize_sip",
    "sip_transaction_step",
]
