"""SIP message codec.

Only the grammar subset needed by a closed B2BUA topology is modelled:
start line, an ordered header list kept verbatim, and an optional body.
"""

from __future__ import annotations

import dataclasses
import re

SUPPORTED_METHODS = ("INVITE", "ACK", "BYE")

REASONS = {
    100: "Trying",
    180: "Ringing",
    183: "Session Progress",
    200: "OK",
    400: "Bad Request",
    402: "Payment Required",
    403: "Forbidden",
    404: "Not Found",
    405: "Method Not Allowed",
    408: "Request Timeout",
    480: "Temporarily Unavailable",
    481: "Call/Transaction Does Not Exist",
    486: "Busy Here",
    487: "Request Terminated",
    488: "Not Acceptable Here",
}

MANDATORY_HEADERS = ("Call-ID", "From", "To", "CSeq")

_COMPACT = {
    "i": "call-id",
    "f": "from",
    "t": "to",
    "v": "via",
    "m": "contact",
    "c": "content-type",
    "l": "content-length",
}

_REQUEST_LINE = re.compile(r"^([A-Za-z]+) (\S+) SIP/2\.0$")
_STATUS_LINE = re.compile(r"^SIP/2\.0 ([1-6]\d\d) ?(.*)$")


class SipError(ValueError):
    pass


class MalformedStartLine(SipError):
    pass


class MissingMandatoryHeader(SipError):
    def __init__(self, name: str):
        super().__init__(f"missing mandatory header {name}")
        self.name = name


class BodyLengthMismatch(SipError):
    pass


class InvariantViolation(SipError):
    pass


def _canon(name: str) -> str:
    low = name.strip().lower()
    return _COMPACT.get(low, low)


@dataclasses.dataclass
class SipMessage:
    kind: str  # "request" | "response"
    method: str | None = None
    uri: str | None = None
    status: int | None = None
    reason: str | None = None
    headers: list[tuple[str, str]] = dataclasses.field(default_factory=list)
    body: bytes = b""

    @property
    def is_request(self) -> bool:
        return self.kind == "request"

    def header(self, name: str) -> str | None:
        want = _canon(name)
        for key, value in self.headers:
            if _canon(key) == want:
                return value
        return None

    def header_all(self, name: str) -> list[str]:
        want = _canon(name)
        return [v for k, v in self.headers if _canon(k) == want]

    def set_header(self, name: str, value: str) -> None:
        want = _canon(name)
        for i, (key, _) in enumerate(self.headers):
            if _canon(key) == want:
                self.headers[i] = (key, value)
                return
        self.headers.append((name, value))

    @property
    def call_id(self) -> str:
        return self.header("Call-ID") or ""

    @property
    def cseq(self) -> tuple[int, str]:
        raw = self.header("CSeq") or ""
        parts = raw.split()
        if len(parts) != 2 or not parts[0].isdigit():
            raise InvariantViolation(f"bad CSeq {raw!r}")
        return int(parts[0]), parts[1].upper()

    @property
    def branch(self) -> str | None:
        via = self.header("Via")
        if via is None:
            return None
        return header_param(via, "branch")

    @property
    def from_tag(self) -> str | None:
        value = self.header("From")
        return header_param(value, "tag") if value else None

    @property
    def to_tag(self) -> str | None:
        value = self.header("To")
        return header_param(value, "tag") if value else None

    def summary(self) -> str:
        if self.is_request:
            return f"{self.method} {self.uri}"
        return f"{self.status} ({self.cseq[1]})"


def header_param(value: str, name: str) -> str | None:
    for part in value.split(";")[1:]:
        key, _, val = part.partition("=")
        if key.strip().lower() == name:
            return val.strip()
    return None


def parse_sip(datagram: bytes) -> SipMessage:
    if not datagram:
        raise MalformedStartLine("empty datagram")
    head, sep, body = datagram.partition(b"\r\n\r\n")
    if not sep:
        # tolerate a message with no body and no terminating blank line
        head, body = datagram.rstrip(b"\r\n"), b""
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedStartLine("header section is not UTF-8") from exc
    lines = text.split("\r\n")
    start = lines[0]

    if m := _REQUEST_LINE.match(start):
        msg = SipMessage("request", method=m.group(1).upper(), uri=m.group(2))
    elif m := _STATUS_LINE.match(start):
        msg = SipMessage("response", status=int(m.group(1)), reason=m.group(2))
    else:
        raise MalformedStartLine(f"bad start line {start!r}")

    for line in lines[1:]:
        if not line:
            continue
        name, colon, value = line.partition(":")
        if not colon or not name.strip():
            raise MalformedStartLine(f"bad header line {line!r}")
        msg.headers.append((name.strip(), value.strip()))

    for name in MANDATORY_HEADERS:
        if msg.header(name) is None:
            raise MissingMandatoryHeader(name)

    length = msg.header("Content-Length")
    if length is not None:
        if not length.isdigit() or int(length) != len(body):
            raise BodyLengthMismatch(f"Content-Length {length} but body has {len(body)} bytes")
    msg.body = body
    return msg


def check_invariants(msg: SipMessage) -> None:
    for name in MANDATORY_HEADERS:
        if msg.header(name) is None:
            raise InvariantViolation(f"missing {name}")
    _, cseq_method = msg.cseq
    if msg.is_request:
        if not msg.method or msg.status is not None or not msg.uri:
            raise InvariantViolation("request needs a method and URI and no status")
        if cseq_method != msg.method:
            raise InvariantViolation(f"CSeq method {cseq_method} does not match {msg.method}")
    else:
        if msg.status is None or not 100 <= msg.status <= 699 or msg.method is not None:
            raise InvariantViolation("response needs a status in 100-699 and no method")
    if msg.body and msg.header("Content-Type") is None:
        raise InvariantViolation("body present without Content-Type")


def serialize_sip(msg: SipMessage) -> bytes:
    check_invariants(msg)
    if msg.is_request:
        start = f"{msg.method} {msg.uri} SIP/2.0"
    else:
        reason = msg.reason if msg.reason is not None else REASONS.get(msg.status, "")
        start = f"SIP/2.0 {msg.status} {reason}".rstrip()
    out = [start]
    have_length = False
    for name, value in msg.headers:
        if _canon(name) == "content-length":
            value = str(len(msg.body))
            have_length = True
        out.append(f"{name}: {value}")
    if not have_length:
        out.append(f"Content-Length: {len(msg.body)}")
    return ("\r\n".join(out) + "\r\n\r\n").encode("utf-8") + msg.body


# -- builders ---------------------------------------------------------------


def build_request(
    method: str,
    uri: str,
    *,
    via: str,
    from_: str,
    to: str,
    call_id: str,
    cseq: int,
    contact: str | None = None,
    body: bytes = b"",
    content_type: str = "application/sdp",
) -> SipMessage:
    headers = [
        ("Via", via),
        ("Max-Forwards", "70"),
        ("From", from_),
        ("To", to),
        ("Call-ID", call_id),
        ("CSeq", f"{cseq} {method}"),
    ]
    if contact:
        headers.append(("Contact", contact))
    if body:
        headers.append(("Content-Type", content_type))
    headers.append(("Content-Length", str(len(body))))
    return SipMessage("request", method=method, uri=uri, headers=headers, body=body)


def build_response(
    request: SipMessage,
    status: int,
    *,
    to_tag: str | None = None,
    contact: str | None = None,
    body: bytes = b"",
    reason: str | None = None,
) -> SipMessage:
    headers: list[tuple[str, str]] = [("Via", v) for v in request.header_all("Via")]
    to = request.header("To") or ""
    if to_tag and header_param(to, "tag") is None:
        to = f"{to};tag={to_tag}"
    headers += [
        ("From", request.header("From") or ""),
        ("To", to),
        ("Call-ID", request.call_id),
        ("CSeq", request.header("CSeq") or ""),
    ]
    if contact:
        headers.append(("Contact", contact))
    if body:
        headers.append(("Content-Type", "application/sdp"))
    headers.append(("Content-Length", str(len(body))))
    return SipMessage(
        "response",
        status=status,
        reason=reason if reason is not None else REASONS.get(status, ""),
        headers=headers,
        body=body,
    )


def build_ack_for_failure(invite: SipMessage, response: SipMessage) -> SipMessage:
    """ACK belonging to the INVITE transaction (same branch) for a non-2xx final."""
    cseq_no, _ = invite.cseq
    return build_request(
        "ACK",
        invite.uri or "",
        via=invite.header("Via") or "",
        from_=invite.header("From") or "",
        to=response.header("To") or "",
        call_id=invite.call_id,
        cseq=cseq_no,
    )


def uri_address(uri: str, default_port: int = 5060) -> tuple[str, int]:
    """Host and port of a ``sip:`` URI, also accepting ``<...>`` name-addr form."""
    value = uri.strip()
    if "<" in value:
        value = value[value.index("<") + 1 : value.index(">")]
    value = value.removeprefix("sip:").split(";", 1)[0]
    hostport = value.rsplit("@", 1)[-1]
    host, _, port = hostport.partition(":")
    if not host:
        raise InvariantViolation(f"no host in {uri!r}")
    return host, int(port) if port else default_port


def uri_user(uri: str) -> str | None:
    value = uri.strip()
    if "<" in value:
        value = value[value.index("<") + 1 : value.index(">")]
    value = value.removeprefix("sip:").split(";", 1)[0]
    return value.split("@", 1)[0] if "@" in value else None
