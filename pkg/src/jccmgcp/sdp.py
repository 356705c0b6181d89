"""Session description codec (the subset carried in SIP bodies and MGCP messages)."""

from __future__ import annotations

import dataclasses


class MalformedSdp(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class MediaLine:
    media_type: str
    port: int
    codecs: tuple[str, ...]
    protocol: str = "RTP/AVP"


@dataclasses.dataclass(frozen=True)
class SdpSession:
    origin: str
    connection_address: str
    media: tuple[MediaLine, ...]
    session_name: str = "-"

    def __post_init__(self) -> None:
        if not self.media:
            raise MalformedSdp("session has no media line")
        for m in self.media:
            if m.port <= 0:
                raise MalformedSdp(f"media port must be positive, got {m.port}")

    @property
    def audio_port(self) -> int:
        for m in self.media:
            if m.media_type == "audio":
                return m.port
        return self.media[0].port


def parse_sdp(text: str | bytes) -> SdpSession:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = [ln.strip() for ln in text.replace("\r\n", "\n").split("\n")]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != "v=0":
        raise MalformedSdp("SDP must start with v=0")

    origin = None
    address = None
    session_name = "-"
    media: list[MediaLine] = []
    for line in lines[1:]:
        if len(line) < 2 or line[1] != "=":
            raise MalformedSdp(f"bad SDP line {line!r}")
        key, value = line[0], line[2:]
        if key == "o":
            origin = value
        elif key == "s":
            session_name = value
        elif key == "c":
            parts = value.split()
            if len(parts) != 3 or parts[0] != "IN":
                raise MalformedSdp(f"bad connection line {line!r}")
            # c=IN IP4 <address>[/<ttl>]
            conn = parts[2].split("/")[0]
            if not media:
                address = conn
            elif address is None:
                address = conn
        elif key == "m":
            parts = value.split()
            if len(parts) < 3:
                raise MalformedSdp(f"bad media line {line!r}")
            try:
                port = int(parts[1])
            except ValueError as exc:
                raise MalformedSdp(f"bad media port in {line!r}") from exc
            media.append(MediaLine(parts[0], port, tuple(parts[3:]), parts[2]))
        # t=, a= and the rest carry nothing this codec models.

    if origin is None:
        raise MalformedSdp("missing o= line")
    if address is None:
        raise MalformedSdp("missing c= line")
    if not media:
        raise MalformedSdp("missing m= line")
    return SdpSession(origin, address, tuple(media), session_name)


def serialize_sdp(sdp: SdpSession) -> str:
    lines = [
        "v=0",
        f"o={sdp.origin}",
        f"s={sdp.session_name}",
        f"c=IN IP4 {sdp.connection_address}",
        "t=0 0",
    ]
    for m in sdp.media:
        fmt = " ".join(m.codecs)
        lines.append(f"m={m.media_type} {m.port} {m.protocol} {fmt}".rstrip())
    return "\r\n".join(lines) + "\r\n"


def make_sdp(user: str, address: str, port: int, codecs=("0", "8"), version: int = 1) -> SdpSession:
    return SdpSession(
        origin=f"{user} {version} {version} IN IP4 {address}",
        connection_address=address,
        media=(MediaLine("audio", port, tuple(codecs)),),
    )
