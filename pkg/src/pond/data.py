"""Datasets, synthetic multi-domain generation, splitting and the PONDDS1 container."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BadMagicError, ChecksumError, ConfigError, ShapeError, TruncatedError

SPLIT_TAGS = ("pretrain", "tune", "validation", "test")
DATASET_MAGIC = b"PONDDS1\0"


class LabeledInstance(NamedTuple):
    series: np.ndarray  # (n, L)
    label: int


@dataclass(frozen=True)
class DomainDataset:
    """All instances of one domain, stored as a stacked ``(count, n, L)`` array."""

    domain_id: str
    K: int
    X: np.ndarray
    y: np.ndarray
    splits: tuple[str, ...]
    n: int = 0
    L: int = 0

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 3:
            if X.size == 0 and self.n and self.L:
                X = X.reshape(0, self.n, self.L)
            else:
                raise ShapeError(f"dataset values must be (count, n, L), got {X.shape}")
        count, n, L = X.shape
        if n < 1 or L < 2:
            raise ShapeError(f"series must have n >= 1 and L >= 2, got n={n}, L={L}")
        if len(y) != count or len(self.splits) != count:
            raise ShapeError("labels, splits and values disagree on instance count")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if count and (y.min() < 0 or y.max() >= self.K):
            raise ConfigError(f"labels must lie in 0..{self.K - 1}")
        bad = set(self.splits) - set(SPLIT_TAGS)
        if bad:
            raise ConfigError(f"unknown split tags {sorted(bad)}")
        if not np.isfinite(X).all():
            raise ConfigError("series values must be finite")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "splits", tuple(self.splits))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "L", L)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def instances(self) -> list[LabeledInstance]:
        return [LabeledInstance(self.X[i], int(self.y[i])) for i in range(len(self))]

    def indices(self, tag: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == tag], dtype=np.int64)

    def part(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(tag)
        return self.X[idx], self.y[idx]

    def with_splits(self, splits: Sequence[str]) -> "DomainDataset":
        return DomainDataset(self.domain_id, self.K, self.X, self.y, tuple(splits), self.n, self.L)


# --------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SyntheticSpec:
    """Group-structured sinusoid domains.

    Domain ``i`` belongs to group ``i % G``. Each group has a phase offset and
    a per-channel gain; every domain (the target included) draws an extra
    phase jitter uniformly from ``[-phase_jitter, phase_jitter]``.
    """

    M: int = 6
    G: int = 2
    K: int = 4
    n: int = 3
    L: int = 128
    freqs: tuple[float, ...] = (3.0, 4.0, 5.0, 6.0)
    sigma: float = 0.8
    per_domain: int = 50
    target_group: int = 0
    phase_jitter: float = 0.3
    target_count: int = 0
    group_phases: tuple[float, ...] | None = None
    group_gains: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 2 or self.M < 2:
            raise ConfigError("need K >= 2 and M >= 2")
        if not 1 <= self.G <= self.M:
            raise ConfigError("need 1 <= G <= M")
        if len(self.freqs) != self.K or len(set(self.freqs)) != self.K:
            raise ConfigError("need K distinct class frequencies")
        if self.sigma < 0 or self.phase_jitter < 0:
            raise ConfigError("sigma and phase_jitter must be non-negative")
        if self.n < 1 or self.L < 2 or self.per_domain < 1:
            raise ConfigError("need n >= 1, L >= 2 and per_domain >= 1")
        if not 0 <= self.target_group < self.G:
            raise ConfigError("target_group out of range")
        if self.group_phases is not None and len(self.group_phases) != self.G:
            raise ConfigError("group_phases needs one entry per group")
        if self.group_gains is not None and (
            len(self.group_gains) != self.G or any(len(g) != self.n for g in self.group_gains)
        ):
            raise ConfigError("group_gains needs G rows of n gains")

    def replace(self, **kw) -> "SyntheticSpec":
        return dataclasses.replace(self, **kw)

    def group_of(self, domain_index: int) -> int:
        return domain_index % self.G

    def source_ids(self) -> list[str]:
        return [f"S{i}" for i in range(self.M)]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["freqs"] = list(self.freqs)
        if self.group_phases is not None:
            d["group_phases"] = list(self.group_phases)
        if self.group_gains is not None:
            d["group_gains"] = [list(g) for g in self.group_gains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "freqs" in d:
            d["freqs"] = tuple(float(f) for f in d["freqs"])
        if d.get("group_phases") is not None:
            d["group_phases"] = tuple(float(p) for p in d["group_phases"])
        if d.get("group_gains") is not None:
            d["group_gains"] = tuple(tuple(float(x) for x in g) for g in d["group_gains"])
        return cls(**d)


def group_parameters(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-group phase offsets ``(G,)`` and channel gains ``(G, n)``."""
    rng = np.random.default_rng([spec.seed, 7919])
    if spec.group_phases is None:
        phases = 2.0 * math.pi * np.arange(spec.G) / spec.G
    else:
        phases = np.array(spec.group_phases, dtype=np.float64)
    if spec.group_gains is None:
        gains = rng.uniform(0.5, 1.5, size=(spec.G, spec.n))
    else:
        gains = np.array(spec.group_gains, dtype=np.float64)
    return phases, gains


def class_templates(spec: SyntheticSpec, group: int, phase_shift: float = 0.0) -> np.ndarray:
    """Noiseless class signals ``(K, n, L)`` for one group."""
    phases, gains = group_parameters(spec)
    t = np.arange(spec.L, dtype=np.float64)
    freqs = np.asarray(spec.freqs, dtype=np.float64)
    wave = np.sin(2.0 * math.pi * freqs[:, None] * t[None, :] / spec.L + phases[group] + phase_shift)
    return gains[group][None, :, None] * wave[:, None, :]


def _make_domain(spec: SyntheticSpec, domain_id: str, group: int, count: int,
                 rng: np.random.Generator) -> DomainDataset:
    jitter = rng.uniform(-spec.phase_jitter, spec.phase_jitter) if spec.phase_jitter > 0 else 0.0
    templates = class_templates(spec, group, jitter)
    labels = rng.permutation(np.arange(count) % spec.K)
    X = templates[labels]
    if spec.sigma > 0:
        X = X + rng.normal(0.0, spec.sigma, size=X.shape)
    return DomainDataset(domain_id, spec.K, X, labels, ("test",) * count)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[DomainDataset], DomainDataset]:
    """Source domains ``S0..S{M-1}`` plus a target ``T`` from ``spec.target_group``."""
    streams = np.random.SeedSequence(spec.seed).spawn(spec.M + 1)
    sources = [
        _make_domain(spec, f"S{i}", spec.group_of(i), spec.per_domain, np.random.default_rng(streams[i]))
        for i in range(spec.M)
    ]
    target_n = spec.target_count or spec.per_domain
    target = _make_domain(spec, "T", spec.target_group, target_n, np.random.default_rng(streams[spec.M]))
    return sources, target


# --------------------------------------------------------------------------
# splitting and target shots


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    quotas = [total * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: DomainDataset, ratios: dict | Sequence[float] = (0.6, 0.2, 0.2),
          seed: int = 0) -> DomainDataset:
    """Stratified pretrain/tune/validation tagging with largest-remainder counts."""
    if isinstance(ratios, dict):
        ratios = (ratios["pretrain"], ratios["tune"], ratios["validation"])
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    tags = ["pretrain"] * len(dataset)
    for c in range(dataset.K):
        members = np.flatnonzero(dataset.y == c)
        if len(members) == 0:
            continue
        if len(members) < 5:
            raise ConfigError(f"class {c} of {dataset.domain_id} has {len(members)} instances, need >= 5")
        members = rng.permutation(members)
        counts = largest_remainder(len(members), ratios)
        start = 0
        for tag, k in zip(("pretrain", "tune", "validation"), counts):
            for i in members[start:start + k]:
                tags[i] = tag
            start += k
    return dataset.with_splits(tags)


def target_shot_indices(target: DomainDataset, count: int, seed: int = 0) -> np.ndarray:
    if count > len(target):
        raise ConfigError(f"requested {count} shots from a target of size {len(target)}")
    if count < 0:
        raise ConfigError("shot count must be non-negative")
    rng = np.random.default_rng(seed)
    pools = {c: list(rng.permutation(np.flatnonzero(target.y == c))) for c in range(target.K)}
    picked: list[int] = []
    while len(picked) < count:
        for c in range(target.K):
            if len(picked) == count:
                break
            if pools[c]:
                picked.append(int(pools[c].pop(0)))
    return np.array(picked, dtype=np.int64)


def take_target_shots(target: DomainDataset, count: int, seed: int = 0) -> list[LabeledInstance]:
    """Class-stratified few-shot sample; exhausted classes are skipped round-robin."""
    return [LabeledInstance(target.X[i], int(target.y[i])) for i in target_shot_indices(target, count, seed)]


# --------------------------------------------------------------------------
# container


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = _header_bytes(header)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return magic + struct.pack("<I", len(head)) + head + payload + struct.pack("<I", crc)


def read_container(blob: bytes, magic: bytes, payload_len) -> tuple[dict, bytes]:
    """Split a container into (header, payload); ``payload_len`` maps header -> bytes."""
    if blob[: len(magic)] != magic:
        raise BadMagicError(f"expected magic {magic!r}")
    pos = len(magic)
    if len(blob) < pos + 4:
        raise TruncatedError("missing header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise TruncatedError("header shorter than declared")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"unreadable header: {exc}") from None
    pos += hlen
    need = payload_len(header)
    if len(blob) < pos + need + 4:
        raise TruncatedError(f"payload needs {need} bytes plus checksum, file has {len(blob) - pos}")
    payload = blob[pos:pos + need]
    (crc,) = struct.unpack_from("<I", blob, pos + need)
    if len(blob) != pos + need + 4:
        raise TruncatedError("trailing bytes after checksum")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("payload checksum mismatch")
    return header, payload


def dataset_to_bytes(ds: DomainDataset) -> bytes:
    header = {
        "domain_id": ds.domain_id,
        "n": ds.n,
        "L": ds.L,
        "K": ds.K,
        "count": len(ds),
        "splits": list(ds.splits),
        "labels": [int(v) for v in ds.y],
    }
    payload = np.ascontiguousarray(ds.X, dtype="<f8").tobytes()
    return write_container(DATASET_MAGIC, header, payload)


def dataset_from_bytes(blob: bytes) -> DomainDataset:
    header, payload = read_container(
        blob, DATASET_MAGIC, lambda h: 8 * int(h["count"]) * int(h["n"]) * int(h["L"])
    )
    X = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(header["count"], header["n"], header["L"])
    return DomainDataset(header["domain_id"], header["K"], X, header["labels"], tuple(header["splits"]),
                         header["n"], header["L"])


def save_dataset(ds: DomainDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> DomainDataset:
    return dataset_from_bytes(Path(path).read_bytes())
