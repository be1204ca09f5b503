"""Classic pcap reading and bi-flow assembly.

Record framing is read incrementally with `struct` so that a truncated record can be
reported with its byte offset; link, network and transport layers are decoded with dpkt.
"""

from __future__ import annotations

import io
import logging
import socket
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import dpkt

from .common import DEFAULT_IDLE_TIMEOUT, DEFAULT_N_B, zopen
from .errors import PcapError, PreconditionError, UnsupportedFormatError

log = logging.getLogger(__name__)

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

# magic (as read little-endian) -> (byte order, ticks per second)
PCAP_MAGICS = {
    0xA1B2C3D4: ("<", 1_000_000),
    0xD4C3B2A1: (">", 1_000_000),
    0xA1B23C4D: ("<", 1_000_000_000),
    0x4D3CB2A1: (">", 1_000_000_000),
}
PCAPNG_MAGIC = 0x0A0D0D0A

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229

PROTO_TCP = 6
PROTO_UDP = 17


@dataclass(frozen=True, slots=True)
class RawPacket:
    """One decoded IP packet.

    Attributes:
        timestamp: Capture time in seconds.
        src: Source address as text.
        dst: Destination address as text.
        sport: Source port (0 when the transport is neither TCP nor UDP).
        dport: Destination port.
        proto: IP protocol number.
        tcp_window: TCP window field (0 for UDP and others).
        payload: Transport-layer payload bytes.
        frame_len: Captured frame length.
        offset: Byte offset of the record in the capture.
        payload_len: Length of the original payload when `payload` holds only a prefix of it.
    """

    timestamp: float
    src: str
    dst: str
    sport: int
    dport: int
    proto: int
    tcp_window: int
    payload: bytes
    frame_len: int
    offset: int = 0
    payload_len: int | None = None

    @property
    def size(self) -> int:
        return len(self.payload) if self.payload_len is None else self.payload_len

    def trimmed(self, n_b: int) -> "RawPacket":
        """The same packet keeping only the first `n_b` payload bytes."""
        return replace(self, payload=self.payload[:n_b], payload_len=self.size)


class PcapReader:
    """Streaming iterator over the IP packets of a classic pcap capture.

    Frames that are not IP, or that dpkt cannot decode, are skipped and counted in
    `skipped`. Iteration stops with a `PcapError` at the first truncated record, after
    every complete record before it has been yielded.

    Raises:
        UnsupportedFormatError: If the stream does not start with a classic pcap magic.
        PcapError: If the global header is truncated.
    """

    def __init__(self, stream: BinaryIO, name: str = "<stream>") -> None:
        self.stream = stream
        self.name = name
        self.packets = 0
        self.skipped = 0
        self._offset = 0

        header = stream.read(GLOBAL_HEADER_LEN)
        if len(header) < 4:
            raise UnsupportedFormatError(f"`{name}` is too short to be a pcap capture", byte_offset=0)
        (magic,) = struct.unpack("<I", header[:4])
        if magic == PCAPNG_MAGIC:
            raise UnsupportedFormatError(f"`{name}` is a pcapng capture; only classic pcap is supported", byte_offset=0)
        if magic not in PCAP_MAGICS:
            raise UnsupportedFormatError(f"`{name}` has unknown magic number 0x{magic:08X}", byte_offset=0)
        if len(header) < GLOBAL_HEADER_LEN:
            raise PcapError(f"`{name}` has a truncated global header", byte_offset=len(header))

        self.byte_order, self.ticks = PCAP_MAGICS[magic]
        self.snaplen, self.linktype = struct.unpack(self.byte_order + "II", header[16:24])
        self._record = struct.Struct(self.byte_order + "IIII")
        self._offset = GLOBAL_HEADER_LEN

    def __iter__(self) -> Iterator[RawPacket]:
        while True:
            start = self._offset
            rec_header = self.stream.read(RECORD_HEADER_LEN)
            if not rec_header:
                return
            if len(rec_header) < RECORD_HEADER_LEN:
                raise PcapError(f"Truncated record header in `{self.name}`", byte_offset=start)
            ts_sec, ts_frac, incl_len, _orig_len = self._record.unpack(rec_header)
            frame = self.stream.read(incl_len)
            if len(frame) < incl_len:
                raise PcapError(
                    f"Truncated record in `{self.name}`: {incl_len} bytes announced, {len(frame)} present",
                    byte_offset=start,
                )
            self._offset = start + RECORD_HEADER_LEN + incl_len

            packet = self._decode(ts_sec + ts_frac / self.ticks, frame, start)
            if packet is None:
                self.skipped += 1
                continue
            self.packets += 1
            yield packet

    def _decode(self, timestamp: float, frame: bytes, offset: int) -> RawPacket | None:
        try:
            ip = self._network_layer(frame)
        except (dpkt.UnpackError, struct.error) as e:
            log.debug(f"Skipping undecodable frame at byte offset {offset}: {e}")
            return None
        if ip is None:
            return None

        family = socket.AF_INET if isinstance(ip, dpkt.ip.IP) else socket.AF_INET6
        proto = getattr(ip, "p", getattr(ip, "nxt", 0))
        transport = ip.data
        sport = dport = window = 0
        if isinstance(transport, dpkt.tcp.TCP):
            sport, dport, window = transport.sport, transport.dport, transport.win
            payload = bytes(transport.data)
        elif isinstance(transport, dpkt.udp.UDP):
            sport, dport = transport.sport, transport.dport
            payload = bytes(transport.data)
        else:
            payload = bytes(transport) if isinstance(transport, (bytes, bytearray)) else bytes(transport.data)

        return RawPacket(
            timestamp=timestamp,
            src=socket.inet_ntop(family, ip.src),
            dst=socket.inet_ntop(family, ip.dst),
            sport=sport,
            dport=dport,
            proto=proto,
            tcp_window=window,
            payload=payload,
            frame_len=len(frame),
            offset=offset,
        )

    def _network_layer(self, frame: bytes):
        if self.linktype == LINKTYPE_ETHERNET:
            ip = dpkt.ethernet.Ethernet(frame).data
        elif self.linktype == LINKTYPE_LINUX_SLL:
            ip = dpkt.sll.SLL(frame).data
        elif self.linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
            if not frame:
                return None
            version = frame[0] >> 4
            ip = dpkt.ip.IP(frame) if version == 4 else dpkt.ip6.IP6(frame) if version == 6 else None
        else:
            raise PcapError(f"Unsupported link type {self.linktype} in `{self.name}`", byte_offset=16)
        return ip if isinstance(ip, (dpkt.ip.IP, dpkt.ip6.IP6)) else None


def parse_pcap(source: BinaryIO | bytes, name: str = "<stream>") -> PcapReader:
    """Start streaming a capture from a binary stream or raw capture bytes."""
    if isinstance(source, (bytes, bytearray)):
        return PcapReader(io.BytesIO(source), name=name)
    return PcapReader(source, name=name)


def read_capture(path: str | Path, idle_timeout: float = DEFAULT_IDLE_TIMEOUT, n_b: int = DEFAULT_N_B) -> tuple[list[FlowRecord], int]:
    """Read a (possibly gzipped) capture file and assemble its flows.

    Packets are stably sorted by timestamp first, since multi-interface captures are
    not always written in time order. The sort holds one record per packet in memory,
    but each record keeps only the first `n_b` payload bytes, which is all that flow
    assembly reads.

    Returns:
        (flows, number of skipped frames).
    """
    with zopen(path) as fh:
        reader = parse_pcap(fh, name=str(path))
        packets = sorted((pkt.trimmed(n_b) for pkt in reader), key=lambda p: p.timestamp)
    return assemble_flows(packets, idle_timeout, n_b, source=Path(path).name), reader.skipped


# ─── Flows ───────────────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Canonical bi-flow 5-tuple: the lexicographically smaller endpoint comes first."""

    addr_a: str
    port_a: int
    addr_b: str
    port_b: int
    proto: int

    @classmethod
    def of(cls, src: str, sport: int, dst: str, dport: int, proto: int) -> "FlowKey":
        (a, pa), (b, pb) = sorted([(src, sport), (dst, dport)])
        return cls(a, pa, b, pb, proto)

    def __str__(self) -> str:
        return f"{self.addr_a}:{self.port_a} <-> {self.addr_b}:{self.port_b} proto {self.proto}"


@dataclass(slots=True)
class PacketMeta:
    timestamp: float
    payload_len: int
    tcp_window: int
    direction: int


@dataclass
class FlowRecord:
    """An assembled bi-flow.

    Attributes:
        key: Canonical flow key.
        initiator: (address, port) of the sender of the first packet.
        responder: The other endpoint.
        packets: Packet metadata in arrival order; direction 0 is initiator to responder.
        payload_prefix: Transport payloads concatenated in arrival order, capped at n_b bytes.
        source: Capture the flow came from, if known.
    """

    key: FlowKey
    initiator: tuple[str, int]
    responder: tuple[str, int]
    packets: list[PacketMeta] = field(default_factory=list)
    payload_prefix: bytes = b""
    source: str | None = None

    @property
    def start(self) -> float:
        return self.packets[0].timestamp if self.packets else 0.0

    @property
    def last(self) -> float:
        return self.packets[-1].timestamp if self.packets else 0.0


def assemble_flows(
    packets: Iterable[RawPacket],
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
    n_b: int = DEFAULT_N_B,
    source: str | None = None,
) -> list[FlowRecord]:
    """Group time-ordered packets into bi-flows.

    A gap longer than `idle_timeout` between two packets of the same key closes the flow
    and starts a new one. Packets whose transport is neither TCP nor UDP are counted and
    skipped.

    Returns:
        Flows sorted by start time.

    Raises:
        PreconditionError: If timestamps go backwards.
    """
    active: dict[FlowKey, FlowRecord] = {}
    done: list[FlowRecord] = []
    prefixes: dict[int, bytearray] = {}
    skipped = 0
    last_ts = float("-inf")

    for pkt in packets:
        if pkt.timestamp < last_ts:
            raise PreconditionError(
                f"Packets are not time-ordered: {pkt.timestamp} follows {last_ts} (byte offset {pkt.offset})"
            )
        last_ts = pkt.timestamp
        if pkt.proto not in (PROTO_TCP, PROTO_UDP):
            skipped += 1
            continue

        key = FlowKey.of(pkt.src, pkt.sport, pkt.dst, pkt.dport, pkt.proto)
        flow = active.get(key)
        if flow is not None and pkt.timestamp - flow.last > idle_timeout:
            done.append(flow)
            flow = None
        if flow is None:
            flow = FlowRecord(key=key, initiator=(pkt.src, pkt.sport), responder=(pkt.dst, pkt.dport), source=source)
            active[key] = flow
            prefixes[id(flow)] = bytearray()

        direction = 0 if (pkt.src, pkt.sport) == flow.initiator else 1
        flow.packets.append(PacketMeta(pkt.timestamp, pkt.size, pkt.tcp_window, direction))
        prefix = prefixes[id(flow)]
        if len(prefix) < n_b:
            prefix.extend(pkt.payload[: n_b - len(prefix)])

    done.extend(active.values())
    for flow in done:
        flow.payload_prefix = bytes(prefixes[id(flow)])
    if skipped:
        log.info(f"Skipped {skipped} packets with a transport other than TCP/UDP")
    return sorted(done, key=lambda f: f.start)
