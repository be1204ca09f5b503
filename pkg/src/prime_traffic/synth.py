"""Synthetic labeled traffic and incremental task streams.

Each class is a small generative profile: a Markov chain over packet-size buckets,
a direction-alternation probability, an inter-arrival rate and a byte distribution.
Flows are simulated from the profile and pushed through `extract_features`, so synthetic
vectors have exactly the format of capture-derived ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .common import DEFAULT_N_B, DEFAULT_N_P, PAYLOAD_LEN_SCALE
from .errors import PreconditionError
from .features import Dataset, extract_features
from .pcap import PROTO_TCP, PROTO_UDP, FlowKey, FlowRecord, PacketMeta

log = logging.getLogger(__name__)

N_BUCKETS = 8
BUCKET_EDGES = np.linspace(0.0, PAYLOAD_LEN_SCALE, N_BUCKETS + 1).round().astype(np.int64)
DEFAULT_SPLIT = (0.75, 0.10, 0.15)


@dataclass
class ClassProfile:
    """Generative description of one traffic class.

    Attributes:
        class_id: Class index.
        initial: Distribution of the first packet's size bucket.
        transition: Row-stochastic size-bucket transition matrix.
        direction_alternation: Probability that the next packet flips direction.
        iat_rate: Rate of the exponential inter-arrival time (packets per second).
        byte_probs: Distribution of payload byte values.
        mean_packets: Mean flow length in packets.
        window_mean: Mean TCP window (unused for UDP).
        proto: IP protocol of the class's flows.
    """

    class_id: int
    initial: np.ndarray
    transition: np.ndarray
    direction_alternation: float
    iat_rate: float
    byte_probs: np.ndarray
    mean_packets: float
    window_mean: float
    proto: int

    def same_as(self, other: "ClassProfile") -> bool:
        """Equal in everything except the class id."""
        return (
            np.array_equal(self.initial, other.initial)
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.byte_probs, other.byte_probs)
            and (self.direction_alternation, self.iat_rate, self.mean_packets, self.window_mean, self.proto)
            == (other.direction_alternation, other.iat_rate, other.mean_packets, other.window_mean, other.proto)
        )


def _random_profile(rng: np.random.Generator, class_id: int) -> ClassProfile:
    return ClassProfile(
        class_id=class_id,
        initial=rng.dirichlet(np.ones(N_BUCKETS)),
        transition=rng.dirichlet(np.full(N_BUCKETS, 0.5), size=N_BUCKETS),
        direction_alternation=float(rng.uniform(0.1, 0.9)),
        iat_rate=float(rng.uniform(0.5, 50.0)),
        byte_probs=rng.dirichlet(np.full(256, 0.3)),
        mean_packets=float(rng.uniform(4.0, 40.0)),
        window_mean=float(rng.uniform(1024.0, 65535.0)),
        proto=PROTO_TCP if rng.random() < 0.7 else PROTO_UDP,
    )


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    return p / p.sum(axis=-1, keepdims=True)


def make_profiles(num_classes: int, similarity: float, seed: int) -> list[ClassProfile]:
    """Draw class profiles whose mutual similarity is controlled by `similarity`.

    Every profile is ``similarity * base + (1 - similarity) * own`` for one shared base
    profile and an independent per-class draw; the protocol follows the base with
    probability `similarity`. 0 gives independent profiles, 1 identical ones.
    """
    if num_classes < 2:
        raise PreconditionError(f"num_classes must be at least 2, got {num_classes}")
    if not 0.0 <= similarity <= 1.0:
        raise PreconditionError(f"similarity must lie in [0, 1], got {similarity}")

    rng = np.random.default_rng(seed)
    base = _random_profile(rng, -1)
    s, t = similarity, 1.0 - similarity
    profiles = []
    for class_id in range(num_classes):
        own = _random_profile(rng, class_id)
        coin = rng.random()
        profiles.append(
            ClassProfile(
                class_id=class_id,
                initial=_normalize_rows(s * base.initial + t * own.initial),
                transition=_normalize_rows(s * base.transition + t * own.transition),
                direction_alternation=s * base.direction_alternation + t * own.direction_alternation,
                iat_rate=s * base.iat_rate + t * own.iat_rate,
                byte_probs=_normalize_rows(s * base.byte_probs + t * own.byte_probs),
                mean_packets=s * base.mean_packets + t * own.mean_packets,
                window_mean=s * base.window_mean + t * own.window_mean,
                proto=base.proto if coin < s else own.proto,
            )
        )
    return profiles


def simulate_flow(profile: ClassProfile, n_b: int, rng: np.random.Generator, index: int = 0) -> FlowRecord:
    """Simulate one bi-flow from a class profile."""
    n_packets = 1 + int(rng.poisson(max(profile.mean_packets - 1.0, 0.0)))
    key = FlowKey.of("10.0.0.1", 1024 + index % 60000, "10.1.0.1", 443, profile.proto)
    flow = FlowRecord(key=key, initiator=("10.0.0.1", 1024 + index % 60000), responder=("10.1.0.1", 443))

    bucket = rng.choice(N_BUCKETS, p=profile.initial)
    direction, ts = 0, 0.0
    prefix = bytearray()
    for i in range(n_packets):
        if i:
            bucket = rng.choice(N_BUCKETS, p=profile.transition[bucket])
            ts += rng.exponential(1.0 / profile.iat_rate)
            if rng.random() < profile.direction_alternation:
                direction ^= 1
        size = int(rng.integers(BUCKET_EDGES[bucket], BUCKET_EDGES[bucket + 1], endpoint=True))
        window = 0
        if profile.proto == PROTO_TCP:
            window = int(np.clip(rng.normal(profile.window_mean, 0.1 * profile.window_mean), 0, 65535))
        flow.packets.append(PacketMeta(ts, size, window, direction))
        if len(prefix) < n_b and size:
            take = min(size, n_b - len(prefix))
            prefix.extend(rng.choice(256, size=take, p=profile.byte_probs).astype(np.uint8).tobytes())
    flow.payload_prefix = bytes(prefix)
    return flow


def sample_dataset(
    profiles: list[ClassProfile],
    samples_per_class: int,
    n_b: int = DEFAULT_N_B,
    n_p: int = DEFAULT_N_P,
    seed: int = 0,
) -> Dataset:
    """Simulate `samples_per_class` flows per profile and extract their feature vectors.

    Sample i of class c uses its own generator seeded from (seed, c, i), so any sample
    can be regenerated independently of the others.
    """
    if samples_per_class < 1:
        raise PreconditionError(f"samples_per_class must be at least 1, got {samples_per_class}")

    vectors = []
    for profile in profiles:
        for i in range(samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, profile.class_id, i]))
            flow = simulate_flow(profile, n_b, rng, index=i)
            vectors.append(extract_features(flow, n_b, n_p, label=profile.class_id))

    n_classes = max(p.class_id for p in profiles) + 1
    return Dataset.from_vectors(
        vectors,
        n_b,
        n_p,
        class_names=[f"class-{c}" for c in range(n_classes)],
        meta={"source": "synthetic", "samples_per_class": samples_per_class, "seed": seed},
    )


# ─── Task streams ────────────────────────────────────────────────────────────


@dataclass
class Split:
    """Features and stage-local labels of one split."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Stage:
    index: int
    class_ids: list[int]
    class_names: list[str]
    train: Split
    val: Split
    test: Split

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


@dataclass
class TaskStream:
    stages: list[Stage]
    input_dim: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.stages)


def _resolve_plan(plan: list, class_ids: list[int]) -> list[list[int]]:
    if all(isinstance(p, int) for p in plan):
        if sum(plan) != len(class_ids):
            raise PreconditionError(f"Stage plan {plan} covers {sum(plan)} classes, dataset has {len(class_ids)}")
        groups, start = [], 0
        for size in plan:
            if size < 1:
                raise PreconditionError(f"Stage sizes must be positive, got {plan}")
            groups.append(class_ids[start : start + size])
            start += size
        return groups

    groups = [[int(c) for c in group] for group in plan]
    flat = [c for group in groups for c in group]
    if unknown := sorted(set(flat) - set(class_ids)):
        raise PreconditionError(f"Stage plan references unknown classes {unknown}")
    if len(flat) != len(set(flat)):
        raise PreconditionError("Stage plan lists a class in more than one stage")
    if missing := sorted(set(class_ids) - set(flat)):
        raise PreconditionError(f"Stage plan does not assign classes {missing}")
    if any(not group for group in groups):
        raise PreconditionError("Every stage needs at least one class")
    return groups


def stage_stream(
    dataset: Dataset, plan: list, split: tuple[float, float, float] = DEFAULT_SPLIT, seed: int = 0
) -> TaskStream:
    """Cut a dataset into incremental stages with per-class stratified splits.

    Args:
        dataset: Labeled vectors (unlabeled rows are ignored).
        plan: Either stage sizes over the sorted class ids (e.g. ``[10, 2, 2]``) or
            explicit class-id lists per stage.
        split: Train/validation/test fractions.
        seed: Shuffle seed.

    Returns:
        The stream; labels inside a stage are local indices into `class_ids`.
    """
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise PreconditionError(f"Split fractions must be three non-negative numbers summing to 1, got {split}")

    class_ids = sorted(c for c in dataset.class_counts() if c >= 0)
    stages = []
    for index, group in enumerate(_resolve_plan(list(plan), class_ids), start=1):
        parts: dict[str, list] = {"train": [], "val": [], "test": []}
        for local, cls in enumerate(group):
            rows = np.flatnonzero(dataset.labels == cls)
            np.random.default_rng(np.random.SeedSequence([seed, cls])).shuffle(rows)
            n = len(rows)
            n_train = int(round(split[0] * n))
            n_val = min(int(round(split[1] * n)), n - n_train)
            cuts = {"train": rows[:n_train], "val": rows[n_train : n_train + n_val], "test": rows[n_train + n_val :]}
            for name, idx in cuts.items():
                parts[name].append((idx, np.full(len(idx), local, dtype=np.int64)))

        splits = {}
        for name, chunks in parts.items():
            idx = np.concatenate([c[0] for c in chunks])
            splits[name] = Split(dataset.features[idx], np.concatenate([c[1] for c in chunks]))
        names = [dataset.class_names[c] if c < len(dataset.class_names) else f"class-{c}" for c in group]
        stages.append(Stage(index, list(group), names, **splits))
        log.debug(f"Stage {index}: classes {group}, {len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}")

    return TaskStream(stages=stages, input_dim=dataset.width, meta={"plan": [s.class_ids for s in stages], "split": list(split), "seed": seed})
