"""Synthetic dataset generation, CSV ingestion, and fake/real pair sampling.

Synthetic images are built additively from fixed unit-RMS patterns: a
per-sample background field, a per-subgroup signal, and (for fakes) one
per-domain artifact plus one artifact shared across all fake domains. A
per-subgroup leak coefficient can add the shared artifact to real samples,
which correlates forgery evidence with subgroup membership.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

REAL_DOMAIN = "real"

CSV_FIXED_COLUMNS = ["id", "y", "a", "d"]


class DatasetError(ValueError):
    """Raised for invalid specs, malformed CSV rows, or degenerate datasets."""


@dataclass(frozen=True)
class Sample:
    """One example: image tensor, subgroup id, domain label, binary target."""

    x: Tensor
    d: str
    a: str
    y: int
    sample_id: str = ""

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DatasetError(f"sample {self.sample_id!r}: target must be 0 or 1, got {self.y}")
        if (self.y == 1) == (self.a == REAL_DOMAIN):
            raise DatasetError(
                f"sample {self.sample_id!r}: target {self.y} inconsistent with domain {self.a!r}"
            )


@dataclass(frozen=True)
class SubgroupStats:
    """Per-subgroup training example counts."""

    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class Dataset:
    """Immutable sample collection with subgroup and domain vocabularies."""

    def __init__(self, samples: list[Sample], subgroups: tuple[str, ...], domains: tuple[str, ...]):
        if not samples:
            raise DatasetError("no samples")
        self.samples = tuple(samples)
        self.subgroups = subgroups
        self.domains = domains
        shape = samples[0].x.shape
        for s in samples:
            if s.x.shape != shape:
                raise DatasetError(
                    f"sample {s.sample_id!r}: shape {s.x.shape} differs from {shape}"
                )
        self.image_shape = shape

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def subgroup_index(self, d: str) -> int:
        try:
            return self.subgroups.index(d)
        except ValueError:
            raise DatasetError(f"unknown subgroup {d!r}; vocabulary is {self.subgroups}") from None

    def domain_index(self, a: str) -> int:
        try:
            return self.domains.index(a)
        except ValueError:
            raise DatasetError(f"unknown domain {a!r}; vocabulary is {self.domains}") from None


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic dataset.

    `subgroup_weights` gives sampling probabilities (normalized internally);
    `domains` lists fake-generation sources ("real" is reserved). The four
    amplitudes scale background, subgroup signal, per-domain artifact, and
    the shared cross-domain artifact; `noise` scales white noise.

    `amp_jitter` draws each fake's artifact scales from
    [amp * (1 - jitter), amp] so forgery strength varies per sample.
    `subgroup_real_leak` adds the shared artifact to real samples of the
    named subgroups, scaled by a per-sample uniform draw from [0, leak]:
    with leak near the jittered artifact range this correlates forgery
    evidence with subgroup membership and no classifier can fully separate
    the leaked subgroup's reals from weak fakes.
    """

    subgroup_weights: dict[str, float]
    domains: tuple[str, ...] = ("method_a", "method_b")
    n_real: int = 100
    n_fake: int = 100
    image_shape: tuple[int, int, int] = (3, 16, 16)
    amp_background: float = 0.25
    amp_demographic: float = 0.2
    amp_domain_specific: float = 0.2
    amp_domain_agnostic: float = 0.2
    amp_noise: float = 0.05
    amp_jitter: float = 0.3
    subgroup_real_leak: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    pattern_seed: int = 0  # patterns are a separate "world": datasets that
    # should be comparable (train/test splits) share it while varying `seed`

    def validate(self) -> None:
        problems = []
        if len(self.subgroup_weights) < 2:
            problems.append("subgroup_weights: need at least 2 subgroups")
        for name, w in self.subgroup_weights.items():
            if not (np.isfinite(w) and w > 0):
                problems.append(f"subgroup_weights[{name!r}]: weight must be positive and finite")
        if len(self.domains) < 2:
            problems.append("domains: need at least 2 fake domains")
        if REAL_DOMAIN in self.domains:
            problems.append(f"domains: {REAL_DOMAIN!r} is reserved for real samples")
        if self.n_real < 1:
            problems.append("n_real: must be >= 1")
        if self.n_fake < 1:
            problems.append("n_fake: must be >= 1")
        if len(self.image_shape) != 3 or any(v < 1 for v in self.image_shape):
            problems.append("image_shape: must be three positive extents")
        for amp_name in (
            "amp_background",
            "amp_demographic",
            "amp_domain_specific",
            "amp_domain_agnostic",
            "amp_noise",
        ):
            v = getattr(self, amp_name)
            if not (np.isfinite(v) and v >= 0):
                problems.append(f"{amp_name}: must be nonnegative and finite")
        if not (0 <= self.amp_jitter <= 1):
            problems.append("amp_jitter: must lie in [0, 1]")
        for name in self.subgroup_real_leak:
            if name not in self.subgroup_weights:
                problems.append(f"subgroup_real_leak[{name!r}]: unknown subgroup")
        if problems:
            raise DatasetError("invalid dataset spec: " + "; ".join(problems))


def _unit_rms(pattern: np.ndarray) -> np.ndarray:
    return pattern / np.sqrt(np.mean(pattern * pattern))


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Generate a dataset from a spec; identical seeds give identical tensors."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    pattern_rng = np.random.default_rng(spec.pattern_seed)
    c, h, w = spec.image_shape
    subgroups = tuple(spec.subgroup_weights)
    weights = np.array([spec.subgroup_weights[g] for g in subgroups], dtype=np.float64)
    weights = weights / weights.sum()

    subgroup_patterns = {g: _unit_rms(pattern_rng.standard_normal((c, h, w))) for g in subgroups}
    domain_patterns = {a: _unit_rms(pattern_rng.standard_normal((c, h, w))) for a in spec.domains}
    shared_pattern = _unit_rms(pattern_rng.standard_normal((c, h, w)))

    coarse_h, coarse_w = max(1, h // 4), max(1, w // 4)

    def background() -> np.ndarray:
        coarse = rng.standard_normal((c, coarse_h, coarse_w))
        up = np.repeat(np.repeat(coarse, -(-h // coarse_h), axis=1), -(-w // coarse_w), axis=2)
        return up[:, :h, :w]

    samples: list[Sample] = []
    labels = [0] * spec.n_real + [1] * spec.n_fake
    for i, y in enumerate(labels):
        g = subgroups[rng.choice(len(subgroups), p=weights)]
        x = spec.amp_background * background()
        x = x + spec.amp_demographic * subgroup_patterns[g]
        if y == 1:
            a = spec.domains[int(rng.integers(len(spec.domains)))]
            spec_scale = 1.0 - spec.amp_jitter * rng.random()
            shared_scale = 1.0 - spec.amp_jitter * rng.random()
            x = x + spec_scale * spec.amp_domain_specific * domain_patterns[a]
            x = x + shared_scale * spec.amp_domain_agnostic * shared_pattern
        else:
            a = REAL_DOMAIN
            leak = spec.subgroup_real_leak.get(g, 0.0)
            if leak:
                x = x + leak * rng.random() * shared_pattern
        x = x + spec.amp_noise * rng.standard_normal((c, h, w))
        samples.append(Sample(x=Tensor(x), d=g, a=a, y=y, sample_id=f"s{i:06d}"))

    return Dataset(samples, subgroups, (REAL_DOMAIN,) + spec.domains)


def subgroup_stats(dataset: Dataset) -> SubgroupStats:
    """Exact per-subgroup counts, keyed in vocabulary order."""
    counts = {g: 0 for g in dataset.subgroups}
    for s in dataset.samples:
        counts[s.d] += 1
    return SubgroupStats(counts={g: n for g, n in counts.items() if n > 0})


def sample_pairs(dataset: Dataset, batch_size: int, rng) -> list[list[tuple[Sample, Sample]]]:
    """One epoch of opposite-label pairs, chunked into batches.

    Every sample anchors exactly one pair per epoch (shuffled order); each
    anchor is paired with a uniformly drawn sample of the opposite label.
    `rng` is an integer seed or a numpy Generator whose state carries across
    epochs.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    real_idx = [i for i, s in enumerate(dataset.samples) if s.y == 0]
    fake_idx = [i for i, s in enumerate(dataset.samples) if s.y == 1]
    if not real_idx or not fake_idx:
        raise DatasetError(
            f"pair sampling needs both labels; got {len(real_idx)} real and {len(fake_idx)} fake"
        )
    order = rng.permutation(len(dataset.samples))
    pairs = []
    for anchor in order:
        pool = fake_idx if dataset.samples[anchor].y == 0 else real_idx
        partner = pool[int(rng.integers(len(pool)))]
        pairs.append((dataset.samples[anchor], dataset.samples[partner]))
    return [pairs[i : i + batch_size] for i in range(0, len(pairs), batch_size)]


def _parse_header(header: list[str], n_features: int) -> str:
    if header[: len(CSV_FIXED_COLUMNS)] != CSV_FIXED_COLUMNS:
        raise DatasetError(
            f"header must start with {','.join(CSV_FIXED_COLUMNS)}, got {','.join(header[:4])}"
        )
    rest = header[len(CSV_FIXED_COLUMNS) :]
    if rest == ["tensor_path"]:
        return "tensor_path"
    expected = [f"feat_{i}" for i in range(n_features)]
    if rest == expected:
        return "features"
    raise DatasetError(
        f"header must end with tensor_path or feat_0..feat_{n_features - 1}; "
        f"got {len(rest)} trailing columns"
    )


def load_csv(path, image_shape: tuple[int, int, int] = (3, 16, 16)) -> Dataset:
    """Load an annotated CSV dataset; malformed rows fail fast with line numbers.

    Schema (exact header): ``id,y,a,d,feat_0,...,feat_{CHW-1}`` with inline
    features, or ``id,y,a,d,tensor_path`` where each path names a text file
    of CHW whitespace-separated values, resolved relative to the CSV.
    """
    c, h, w = image_shape
    n_features = c * h * w
    base_dir = os.path.dirname(os.path.abspath(path))
    samples: list[Sample] = []
    subgroups: list[str] = []
    domains: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: no samples (empty file)") from None
        mode = _parse_header(header, n_features)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(
                    f"{path} line {line_no}: expected {len(header)} columns, got {len(row)}"
                )
            sample_id, y_str, a, d = row[0], row[1], row[2], row[3]
            if y_str not in ("0", "1"):
                raise DatasetError(f"{path} line {line_no}: target must be 0 or 1, got {y_str!r}")
            y = int(y_str)
            if (y == 1) == (a == REAL_DOMAIN):
                raise DatasetError(
                    f"{path} line {line_no}: target {y} inconsistent with domain {a!r}"
                )
            if mode == "features":
                try:
                    values = np.array([float(v) for v in row[4:]], dtype=np.float64)
                except ValueError as exc:
                    raise DatasetError(f"{path} line {line_no}: bad feature value ({exc})") from None
            else:
                tensor_path = os.path.join(base_dir, row[4])
                try:
                    with open(tensor_path, "r", encoding="utf-8") as tf:
                        values = np.array([float(v) for v in tf.read().split()], dtype=np.float64)
                except OSError as exc:
                    raise DatasetError(
                        f"{path} line {line_no}: cannot read tensor file {row[4]!r} ({exc})"
                    ) from None
            if values.size != n_features:
                raise DatasetError(
                    f"{path} line {line_no}: expected {n_features} values, got {values.size}"
                )
            if not np.all(np.isfinite(values)):
                raise DatasetError(f"{path} line {line_no}: non-finite feature values")
            if d not in subgroups:
                subgroups.append(d)
            if a not in domains:
                domains.append(a)
            samples.append(
                Sample(x=Tensor(values.reshape(image_shape)), d=d, a=a, y=y, sample_id=sample_id)
            )
    if not samples:
        raise DatasetError(f"{path}: no samples")
    return Dataset(samples, tuple(subgroups), tuple(domains))


def save_csv(dataset: Dataset, path) -> None:
    """Write the dataset in the inline-features CSV schema."""
    n_features = int(np.prod(dataset.image_shape))
    header = CSV_FIXED_COLUMNS + [f"feat_{i}" for i in range(n_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset.samples:
            writer.writerow(
                [s.sample_id, s.y, s.a, s.d] + [repr(float(v)) for v in s.x.data.ravel()]
            )


def write_stats(stats: SubgroupStats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("subgroup\tcount\n")
        for g, n in stats.counts.items():
            fh.write(f"{g}\t{n}\n")
