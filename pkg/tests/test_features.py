import numpy as np
import pytest

from prime_traffic.errors import PreconditionError, ShapeError
from prime_traffic.features import UNLABELED, Dataset, FeatureVector, extract_features
from prime_traffic.pcap import FlowKey, FlowRecord, PacketMeta


def _flow(packets, prefix=b""):
    return FlowRecord(
        key=FlowKey.of("10.0.0.1", 1000, "10.0.0.2", 443, 6),
        initiator=("10.0.0.1", 1000),
        responder=("10.0.0.2", 443),
        packets=[PacketMeta(*p) for p in packets],
        payload_prefix=prefix,
    )


def test_payload_bytes_are_scaled_and_padded():
    vec = extract_features(_flow([(0.0, 3, 100, 0)], prefix=b"\x00\xff\x80"), n_b=5, n_p=2)
    np.testing.assert_allclose(vec.x_pay, [0.0, 1.0, 128 / 255, 0.0, 0.0])


def test_payload_prefix_is_truncated():
    vec = extract_features(_flow([(0.0, 8, 0, 0)], prefix=b"\x01" * 8), n_b=4, n_p=1)
    assert vec.x_pay.shape == (4,)


def test_header_rows():
    flow = _flow([(0.0, 730, 32767, 0), (0.5, 3000, 65535, 1), (20.5, 0, 0, 0)])
    vec = extract_features(flow, n_b=4, n_p=4)
    np.testing.assert_allclose(vec.x_hdr[0], [0.5, 32767 / 65535, 0.0, 0.0])
    np.testing.assert_allclose(vec.x_hdr[1], [1.0, 1.0, 0.05, 1.0])
    np.testing.assert_allclose(vec.x_hdr[2], [0.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(vec.x_hdr[3], 0.0)


def test_udp_packets_have_zero_window():
    vec = extract_features(_flow([(0.0, 20, 0, 0), (0.1, 20, 0, 1)]), n_b=2, n_p=2)
    np.testing.assert_array_equal(vec.x_hdr[:, 1], 0.0)


def test_only_first_n_p_packets_are_used():
    flow = _flow([(float(i), 10, 0, i % 2) for i in range(6)])
    vec = extract_features(flow, n_b=1, n_p=3)
    assert vec.x_hdr.shape == (3, 4)
    np.testing.assert_array_equal(vec.x_hdr[:, 3], [0.0, 1.0, 0.0])


def test_flat_vector_layout():
    vec = extract_features(_flow([(0.0, 10, 0, 0)], prefix=b"\xff"), n_b=2, n_p=3)
    flat = vec.flat()
    assert flat.shape == (2 + 4 * 3,)
    assert flat[0] == 1.0 and flat[2] == pytest.approx(10 / 1460)


def test_non_positive_sizes_are_rejected():
    with pytest.raises(PreconditionError):
        extract_features(_flow([]), n_b=0, n_p=2)


def _dataset(n=5, n_b=3, n_p=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.random((n, n_b + 4 * n_p)),
        rng.integers(0, 2, size=n),
        n_b,
        n_p,
        class_names=["web", "voip"],
        meta={"generator": "test"},
    )


def test_dataset_file_round_trip(tmp_path):
    ds = _dataset()
    loaded = Dataset.read(ds.write(tmp_path / "ds.ptds"))
    np.testing.assert_array_equal(loaded.features, ds.features)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    assert loaded.class_names == ["web", "voip"]
    assert loaded.meta == {"generator": "test"}
    assert loaded.normalizers == ds.normalizers


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset(np.zeros((0, 11)), [], 3, 2)
    loaded = Dataset.read(ds.write(tmp_path / "empty.ptds"))
    assert len(loaded) == 0 and loaded.features.shape == (0, 11)


def test_dataset_read_rejects_foreign_and_short_files(tmp_path):
    bad = tmp_path / "bad.ptds"
    bad.write_bytes(b"not a dataset")
    with pytest.raises(PreconditionError):
        Dataset.read(bad)

    path = _dataset().write(tmp_path / "short.ptds")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(PreconditionError):
        Dataset.read(path)


def test_dataset_shape_is_checked():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 5)), [0, 1], 3, 2)


def test_from_vectors_marks_unlabeled():
    vecs = [FeatureVector(np.zeros(2), np.zeros((1, 4)), label=None), FeatureVector(np.ones(2), np.zeros((1, 4)), 1)]
    ds = Dataset.from_vectors(vecs, n_b=2, n_p=1)
    assert ds.labels.tolist() == [UNLABELED, 1]
    assert ds.vector(0).label is None and ds.vector(1).label == 1


def test_to_frame_columns():
    df = _dataset(n=2).to_frame()
    assert df.columns[:3] == ["label", "class", "pay_0"]
    assert df.columns[-1] == "hdr_1_dir"
    assert df.height == 2


def test_subset_and_class_counts():
    ds = _dataset(n=6)
    sub = ds.subset(np.array([0, 1, 2]))
    assert len(sub) == 3
    assert sum(ds.class_counts().values()) == 6
