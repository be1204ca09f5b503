"""Shared fixtures: hand-built capture bytes, small models and small task streams."""

from __future__ import annotations

import socket
import struct
from types import SimpleNamespace

import numpy as np
import pytest

from prime_traffic.model import ModelSpec, PartitionedModel
from prime_traffic.synth import make_profiles, sample_dataset, stage_stream

ETH_SRC = bytes.fromhex("020000000001")
ETH_DST = bytes.fromhex("020000000002")


def _ipv4(src: str, dst: str, proto: int, body: bytes) -> bytes:
    header = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        0,
        20 + len(body),
        1,
        0,
        64,
        proto,
        0,
        socket.inet_aton(src),
        socket.inet_aton(dst),
    )
    return header + body


def _ethernet(ip: bytes, ethertype: int = 0x0800) -> bytes:
    return ETH_DST + ETH_SRC + struct.pack("!H", ethertype) + ip


def tcp_frame(src: str, sport: int, dst: str, dport: int, payload: bytes = b"", window: int = 1024) -> bytes:
    tcp = struct.pack("!HHIIHHHH", sport, dport, 1, 0, (5 << 12) | 0x18, window, 0, 0) + payload
    return _ethernet(_ipv4(src, dst, 6, tcp))


def udp_frame(src: str, sport: int, dst: str, dport: int, payload: bytes = b"") -> bytes:
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    return _ethernet(_ipv4(src, dst, 17, udp))


def arp_frame() -> bytes:
    arp = struct.pack("!HHBBH6s4s6s4s", 1, 0x0800, 6, 4, 1, ETH_SRC, socket.inet_aton("10.0.0.1"), b"\0" * 6, socket.inet_aton("10.0.0.2"))
    return _ethernet(arp, ethertype=0x0806)


def capture(
    records: list[tuple[float, bytes]], byte_order: str = "<", nanoseconds: bool = False, linktype: int = 1
) -> bytes:
    """Classic pcap bytes for (timestamp, frame) records."""
    magic = 0xA1B23C4D if nanoseconds else 0xA1B2C3D4
    ticks = 1_000_000_000 if nanoseconds else 1_000_000
    out = struct.pack(byte_order + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for ts, frame in records:
        sec = int(ts)
        frac = int(round((ts - sec) * ticks))
        out += struct.pack(byte_order + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


@pytest.fixture(autouse=True)
def isolated_config_dir(tmp_path, monkeypatch):
    """Keep a developer's own defaults.json out of the tests."""
    config_dir = tmp_path / "config"
    monkeypatch.setattr("prime_traffic.config.get_config_dir", lambda: config_dir)
    return config_dir


@pytest.fixture
def pcap_kit() -> SimpleNamespace:
    return SimpleNamespace(tcp=tcp_frame, udp=udp_frame, arp=arp_frame, capture=capture)


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar `f()` w.r.t. every entry of `x` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def numgrad():
    return numerical_gradient


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(input_dim=12, token_width=4, d_model=4, heads=2, hidden=[5, 3], dropout=0.0)


@pytest.fixture
def tiny_model(tiny_spec) -> PartitionedModel:
    model = PartitionedModel.build(tiny_spec, seed=7)
    model.add_head(3, seed=1)
    return model


@pytest.fixture(scope="session")
def small_stream():
    """Two stages (3 + 2 classes) of small synthetic vectors (width 16 + 4 * 4 = 32)."""
    profiles = make_profiles(5, similarity=0.2, seed=3)
    dataset = sample_dataset(profiles, samples_per_class=24, n_b=16, n_p=4, seed=3)
    return stage_stream(dataset, [3, 2], seed=3)


@pytest.fixture
def small_spec(small_stream) -> ModelSpec:
    return ModelSpec(input_dim=small_stream.input_dim, token_width=8, d_model=8, heads=2, hidden=[8, 6], dropout=0.1)
