"""MGCP 1.0 message codec (commands and responses, no piggy-backing)."""

from __future__ import annotations

import dataclasses

from ..sdp import MalformedSdp, SdpSession, parse_sdp, serialize_sdp

VERBS = ("CRCX", "MDCX", "DLCX", "RQNT", "NTFY")
MAX_TXID = 999_999_999

PARAM_CODES = frozenset({"C", "I", "L", "M", "S", "R", "D", "X", "O", "N", "Z"})

REQUIRED_PARAMS = {
    "CRCX": ("C", "M"),
    "RQNT": ("X",),
    "NTFY": ("X", "O"),
}

DEFAULT_MS_PORT = 2427
DEFAULT_CA_PORT = 2727


class MgcpError(ValueError):
    pass


class MalformedMgcp(MgcpError):
    pass


class UnknownVerb(MgcpError):
    pass


class InvariantViolation(MgcpError):
    pass


def _param(params, code: str) -> str | None:
    for key, value in params:
        if key.upper() == code:
            return value
    return None


@dataclasses.dataclass(frozen=True)
class MgcpCommand:
    verb: str
    transaction_id: int
    endpoint_id: str
    params: tuple[tuple[str, str], ...] = ()
    sdp: SdpSession | None = None

    def param(self, code: str) -> str | None:
        return _param(self.params, code)


@dataclasses.dataclass(frozen=True)
class MgcpResponse:
    code: int
    transaction_id: int
    comment: str = ""
    params: tuple[tuple[str, str], ...] = ()
    sdp: SdpSession | None = None

    def param(self, code: str) -> str | None:
        return _param(self.params, code)

    @property
    def ok(self) -> bool:
        return 200 <= self.code < 300


def _split(datagram: bytes) -> tuple[list[str], str]:
    text = datagram.decode("utf-8")
    text = text.replace("\r\n", "\n")
    head, sep, rest = text.partition("\n\n")
    return head.split("\n"), rest if sep else ""


def _parse_params(lines: list[str]) -> tuple[tuple[str, str], ...]:
    params = []
    for line in lines:
        if not line.strip():
            continue
        code, colon, value = line.partition(":")
        code = code.strip()
        if not colon or not code:
            raise MalformedMgcp(f"bad parameter line {line!r}")
        params.append((code.upper(), value.strip()))
    return tuple(params)


def _parse_body(rest: str) -> SdpSession | None:
    if not rest.strip():
        return None
    try:
        return parse_sdp(rest)
    except MalformedSdp as exc:
        raise MalformedMgcp(f"bad SDP body: {exc}") from exc


def parse_mgcp(datagram: bytes) -> MgcpCommand | MgcpResponse:
    if not datagram:
        raise MalformedMgcp("empty datagram")
    try:
        lines, rest = _split(datagram)
    except UnicodeDecodeError as exc:
        raise MalformedMgcp("not UTF-8") from exc
    first = lines[0].split()
    if not first:
        raise MalformedMgcp("empty first line")

    if first[0].isdigit():
        if len(first) < 2 or not first[1].isdigit():
            raise MalformedMgcp(f"bad response line {lines[0]!r}")
        return MgcpResponse(
            code=int(first[0]),
            transaction_id=int(first[1]),
            comment=" ".join(first[2:]),
            params=_parse_params(lines[1:]),
            sdp=_parse_body(rest),
        )

    if len(first) != 5 or first[3] != "MGCP" or first[4] != "1.0":
        raise MalformedMgcp(f"bad command line {lines[0]!r}")
    verb = first[0].upper()
    if verb not in VERBS:
        raise UnknownVerb(verb)
    if not first[1].isdigit():
        raise MalformedMgcp(f"bad transaction id {first[1]!r}")
    return MgcpCommand(
        verb=verb,
        transaction_id=int(first[1]),
        endpoint_id=first[2],
        params=_parse_params(lines[1:]),
        sdp=_parse_body(rest),
    )


def check_command(cmd: MgcpCommand) -> None:
    if cmd.verb not in VERBS:
        raise InvariantViolation(f"unknown verb {cmd.verb}")
    if not 1 <= cmd.transaction_id <= MAX_TXID:
        raise InvariantViolation(f"transaction id {cmd.transaction_id} out of range")
    if "@" not in cmd.endpoint_id or " " in cmd.endpoint_id:
        raise InvariantViolation(f"bad endpoint id {cmd.endpoint_id!r}")
    for code in REQUIRED_PARAMS.get(cmd.verb, ()):
        if cmd.param(code) is None:
            raise InvariantViolation(f"{cmd.verb} needs parameter {code}")


def serialize_mgcp(msg: MgcpCommand | MgcpResponse) -> bytes:
    if isinstance(msg, MgcpCommand):
        check_command(msg)
        lines = [f"{msg.verb} {msg.transaction_id} {msg.endpoint_id} MGCP 1.0"]
    else:
        if not 100 <= msg.code <= 999 or not 0 <= msg.transaction_id <= MAX_TXID:
            raise InvariantViolation("bad response code or transaction id")
        lines = [f"{msg.code} {msg.transaction_id} {msg.comment}".rstrip()]
    for code, value in msg.params:
        if "\n" in value or "\r" in value:
            raise InvariantViolation(f"multi-line value for {code}")
        lines.append(f"{code}: {value}")
    out = "\r\n".join(lines) + "\r\n"
    if msg.sdp is not None:
        out += "\r\n" + serialize_sdp(msg.sdp)
    return out.encode("utf-8")
