"""Flow feature vectors and the dataset file format.

A feature vector is ``X = [X_pay, X_hdr]``: the first n_b transport-payload bytes of a
flow divided by 255, followed by n_p rows of per-packet header features
(payload length, TCP window, inter-arrival time, direction).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import polars as pl

from .common import (
    DATASET_FORMAT_VERSION,
    DEFAULT_N_B,
    DEFAULT_N_P,
    HDR_FIELDS,
    IAT_CLIP_SECONDS,
    PAYLOAD_LEN_SCALE,
    TCP_WINDOW_SCALE,
)
from .errors import PreconditionError, ShapeError
from .pcap import FlowRecord

log = logging.getLogger(__name__)

DATASET_MAGIC = b"PRIMEDS1"
HDR_COLUMNS = ("len", "win", "iat", "dir")
UNLABELED = -1


@dataclass(frozen=True)
class Normalizers:
    """Scales of the header features; recorded in every dataset header."""

    payload_len: float = PAYLOAD_LEN_SCALE
    tcp_window: float = TCP_WINDOW_SCALE
    iat_clip: float = IAT_CLIP_SECONDS


@dataclass
class FeatureVector:
    x_pay: np.ndarray
    x_hdr: np.ndarray
    label: int | None = None

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x_pay, self.x_hdr.ravel()])


def extract_features(
    flow: FlowRecord,
    n_b: int = DEFAULT_N_B,
    n_p: int = DEFAULT_N_P,
    normalizers: Normalizers = Normalizers(),
    label: int | None = None,
) -> FeatureVector:
    """Build the feature vector of one flow.

    The payload prefix is truncated or zero-padded to n_b bytes. Header rows beyond the
    flow's packet count stay all-zero; the first packet's inter-arrival time is 0.
    """
    if n_b <= 0 or n_p <= 0:
        raise PreconditionError(f"n_b and n_p must be positive, got n_b={n_b}, n_p={n_p}")

    x_pay = np.zeros(n_b)
    prefix = np.frombuffer(flow.payload_prefix[:n_b], dtype=np.uint8)
    x_pay[: prefix.size] = prefix / 255.0

    x_hdr = np.zeros((n_p, HDR_FIELDS))
    prev = None
    for row, pkt in enumerate(flow.packets[:n_p]):
        iat = 0.0 if prev is None else pkt.timestamp - prev
        prev = pkt.timestamp
        x_hdr[row] = (
            min(pkt.payload_len / normalizers.payload_len, 1.0),
            pkt.tcp_window / normalizers.tcp_window,
            min(max(iat, 0.0), normalizers.iat_clip) / normalizers.iat_clip,
            float(pkt.direction),
        )
    return FeatureVector(x_pay=x_pay, x_hdr=x_hdr, label=label)


# ─── Datasets ────────────────────────────────────────────────────────────────


@dataclass
class Dataset:
    """A labeled matrix of flat feature vectors.

    Attributes:
        features: Array of shape (count, n_b + 4 * n_p).
        labels: Class index per row (-1 for unlabeled).
        n_b: Payload bytes per vector.
        n_p: Header rows per vector.
        class_names: Name of every class index.
        normalizers: Header-feature scales the vectors were built with.
        meta: Free-form provenance (generator parameters, source captures).
    """

    features: np.ndarray
    labels: np.ndarray
    n_b: int
    n_p: int
    class_names: list[str] = field(default_factory=list)
    normalizers: Normalizers = Normalizers()
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.size == 0 and not len(self.labels):
            self.features = np.zeros((0, self.width))
        if self.features.shape != (len(self.labels), self.width):
            raise ShapeError(
                f"Features must have shape ({len(self.labels)}, {self.width}) for n_b={self.n_b}, n_p={self.n_p}, got {self.features.shape}",
                expected=(len(self.labels), self.width),
                actual=self.features.shape,
            )

    @property
    def width(self) -> int:
        return self.n_b + HDR_FIELDS * self.n_p

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_vectors(cls, vectors: list[FeatureVector], n_b: int, n_p: int, **kwargs) -> "Dataset":
        width = n_b + HDR_FIELDS * n_p
        features = np.array([v.flat() for v in vectors]).reshape(len(vectors), width)
        labels = np.array([UNLABELED if v.label is None else v.label for v in vectors], dtype=np.int64)
        return cls(features, labels, n_b, n_p, **kwargs)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.features[idx], self.labels[idx], self.n_b, self.n_p, list(self.class_names), self.normalizers, dict(self.meta)
        )

    def vector(self, row: int) -> FeatureVector:
        x = self.features[row]
        label = int(self.labels[row])
        return FeatureVector(x[: self.n_b], x[self.n_b :].reshape(self.n_p, HDR_FIELDS), None if label < 0 else label)

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def header(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "n_b": self.n_b,
            "n_p": self.n_p,
            "width": self.width,
            "count": len(self),
            "normalizers": asdict(self.normalizers),
            "class_names": list(self.class_names),
            "meta": self.meta,
        }

    def to_frame(self) -> pl.DataFrame:
        """Wide table: label, class name, every payload byte and every header field."""
        names = [f"pay_{i}" for i in range(self.n_b)] + [
            f"hdr_{row}_{col}" for row in range(self.n_p) for col in HDR_COLUMNS
        ]
        df = pl.from_numpy(self.features, schema=names, orient="row")
        class_names = [
            self.class_names[i] if 0 <= i < len(self.class_names) else None for i in self.labels.tolist()
        ]
        return df.insert_column(0, pl.Series("class", class_names, dtype=pl.String)).insert_column(
            0, pl.Series("label", self.labels)
        )

    def write(self, path: str | Path) -> Path:
        """Write the dataset file: magic, length-prefixed JSON header, fixed-width records.

        Every record is an int32 label followed by `width` float64 values, all little-endian.
        """
        path = Path(path)
        header = json.dumps(self.header()).encode("utf-8")
        records = np.zeros(len(self), dtype=_record_dtype(self.width))
        records["label"] = self.labels
        records["x"] = self.features
        with path.open("wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(records.tobytes())
        log.debug(f"Wrote {len(self)} vectors to {path}")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "Dataset":
        """Read a dataset file written by `write`.

        Raises:
            PreconditionError: On a wrong magic, unsupported version or short record section.
        """
        path = Path(path)
        data = path.read_bytes()
        if not data.startswith(DATASET_MAGIC):
            raise PreconditionError(f"`{path}` is not a prime-traffic dataset file")
        pos = len(DATASET_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, pos)
        header = json.loads(data[pos + 4 : pos + 4 + hlen])
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise PreconditionError(f"Unsupported dataset format version {header.get('format_version')} in `{path}`")

        dtype = _record_dtype(header["width"])
        body = data[pos + 4 + hlen :]
        if len(body) != header["count"] * dtype.itemsize:
            raise PreconditionError(
                f"`{path}` announces {header['count']} records but holds {len(body) // dtype.itemsize}"
            )
        records = np.frombuffer(body, dtype=dtype)
        return cls(
            features=records["x"].astype(np.float64),
            labels=records["label"].astype(np.int64),
            n_b=header["n_b"],
            n_p=header["n_p"],
            class_names=header["class_names"],
            normalizers=Normalizers(**header["normalizers"]),
            meta=header["meta"],
        )

    def export_csv(self, path: str | Path) -> Path:
        self.to_frame().write_csv(path)
        return Path(path)


def _record_dtype(width: int) -> np.dtype:
    return np.dtype([("label", "<i4"), ("x", "<f8", (width,))])
