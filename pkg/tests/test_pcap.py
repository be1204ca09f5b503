import gzip
import struct

import pytest

from prime_traffic.errors import PcapError, PreconditionError, UnsupportedFormatError
from prime_traffic.pcap import FlowKey, RawPacket, assemble_flows, parse_pcap, read_capture


def _packet(ts, src="10.0.0.1", sport=1000, dst="10.0.0.2", dport=443, proto=6, payload=b"", window=0):
    return RawPacket(ts, src, dst, sport, dport, proto, window, payload, 60)


def test_two_packet_tcp_capture(pcap_kit):
    data = pcap_kit.capture(
        [
            (1.0, pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"hello", window=512)),
            (1.25, pcap_kit.tcp("10.0.0.2", 443, "10.0.0.1", 5000, b"world!", window=1024)),
        ]
    )
    packets = list(parse_pcap(data))
    assert len(packets) == 2
    first, second = packets
    assert (first.src, first.sport, first.dst, first.dport, first.proto) == ("10.0.0.1", 5000, "10.0.0.2", 443, 6)
    assert first.payload == b"hello" and first.tcp_window == 512
    assert second.timestamp == pytest.approx(1.25)
    assert first.offset == 24


def test_header_only_capture_yields_nothing(pcap_kit):
    reader = parse_pcap(pcap_kit.capture([]))
    assert list(reader) == []
    assert reader.packets == 0 and reader.skipped == 0


def test_non_ip_frames_are_counted_and_skipped(pcap_kit):
    reader = parse_pcap(
        pcap_kit.capture([(0.0, pcap_kit.arp()), (0.5, pcap_kit.udp("10.0.0.1", 53, "10.0.0.9", 5353, b"q"))])
    )
    packets = list(reader)
    assert [p.proto for p in packets] == [17]
    assert reader.skipped == 1 and reader.packets == 1


def test_truncated_tail_reports_record_offset(pcap_kit):
    frame = pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"abc")
    data = pcap_kit.capture([(1.0, frame), (2.0, frame)])[:-5]
    seen = []
    with pytest.raises(PcapError) as err:
        for packet in parse_pcap(data):
            seen.append(packet)
    assert len(seen) == 1
    assert err.value.byte_offset == 24 + 16 + len(frame)
    assert f"byte offset {24 + 16 + len(frame)}" in str(err.value)


def test_truncated_record_header(pcap_kit):
    data = pcap_kit.capture([]) + b"\x00" * 7
    with pytest.raises(PcapError) as err:
        list(parse_pcap(data))
    assert err.value.byte_offset == 24


def test_pcapng_is_rejected():
    data = struct.pack("<I", 0x0A0D0D0A) + b"\x00" * 28
    with pytest.raises(UnsupportedFormatError) as err:
        parse_pcap(data)
    assert err.value.byte_offset == 0
    assert "pcapng" in str(err.value)


def test_unknown_magic_and_short_input():
    with pytest.raises(UnsupportedFormatError):
        parse_pcap(b"\xde\xad\xbe\xef" + b"\x00" * 20)
    with pytest.raises(UnsupportedFormatError):
        parse_pcap(b"\xd4")


def test_truncated_global_header(pcap_kit):
    with pytest.raises(PcapError) as err:
        parse_pcap(pcap_kit.capture([])[:10])
    assert not isinstance(err.value, UnsupportedFormatError)


@pytest.mark.parametrize("byte_order", ["<", ">"])
@pytest.mark.parametrize("nanoseconds", [False, True])
def test_byte_order_and_timestamp_resolution(pcap_kit, byte_order, nanoseconds):
    frame = pcap_kit.udp("10.0.0.1", 1234, "10.0.0.2", 53, b"x")
    data = pcap_kit.capture([(3.5, frame)], byte_order=byte_order, nanoseconds=nanoseconds)
    (packet,) = parse_pcap(data)
    assert packet.timestamp == pytest.approx(3.5)
    assert packet.dport == 53


def test_read_capture_handles_gzip(pcap_kit, tmp_path):
    data = pcap_kit.capture(
        [
            (0.0, pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"a" * 10)),
            (0.1, pcap_kit.arp()),
            (0.2, pcap_kit.tcp("10.0.0.2", 443, "10.0.0.1", 5000, b"b" * 10)),
        ]
    )
    path = tmp_path / "trace.pcap.gz"
    path.write_bytes(gzip.compress(data))
    flows, skipped = read_capture(path, n_b=16)
    assert skipped == 1
    (flow,) = flows
    assert flow.payload_prefix == b"a" * 10 + b"b" * 6
    assert flow.source == "trace.pcap.gz"


def test_read_capture_orders_packets_and_keeps_full_lengths(pcap_kit, tmp_path):
    data = pcap_kit.capture(
        [
            (0.3, pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"c" * 300)),
            (0.1, pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"a" * 200)),
            (0.2, pcap_kit.tcp("10.0.0.2", 443, "10.0.0.1", 5000, b"b" * 100)),
        ]
    )
    path = tmp_path / "unordered.pcap"
    path.write_bytes(data)
    (flow,), _ = read_capture(path, n_b=8)
    assert [p.payload_len for p in flow.packets] == [200, 100, 300]
    assert [p.direction for p in flow.packets] == [0, 1, 0]
    assert flow.payload_prefix == b"a" * 8


def test_trimmed_packet_remembers_its_length():
    packet = _packet(0.0, payload=b"x" * 50).trimmed(4)
    assert packet.payload == b"xxxx" and packet.size == 50
    assert packet.trimmed(2).size == 50


def test_flow_key_is_direction_free():
    assert FlowKey.of("10.0.0.2", 443, "10.0.0.1", 5000, 6) == FlowKey.of("10.0.0.1", 5000, "10.0.0.2", 443, 6)


def test_assemble_flows_tracks_direction_and_prefix():
    packets = [
        _packet(0.0, payload=b"abc"),
        _packet(0.1, src="10.0.0.2", sport=443, dst="10.0.0.1", dport=1000, payload=b"defg"),
        _packet(0.2, payload=b"hi"),
    ]
    (flow,) = assemble_flows(packets, n_b=5)
    assert [p.direction for p in flow.packets] == [0, 1, 0]
    assert flow.initiator == ("10.0.0.1", 1000)
    assert flow.payload_prefix == b"abcde"


def test_idle_gap_splits_flows():
    flows = assemble_flows([_packet(0.0), _packet(30.0), _packet(100.0)], idle_timeout=60.0)
    assert [len(f.packets) for f in flows] == [2, 1]


def test_separate_five_tuples_are_separate_flows():
    flows = assemble_flows([_packet(0.0), _packet(0.1, sport=1001), _packet(0.2, proto=17)])
    assert len(flows) == 3


def test_other_transports_are_skipped():
    assert assemble_flows([_packet(0.0, proto=1)]) == []


def test_backwards_timestamps_are_rejected():
    with pytest.raises(PreconditionError):
        assemble_flows([_packet(1.0), _packet(0.5)])
