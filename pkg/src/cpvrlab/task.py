"""Conditional pointer-value retrieval task: oracle, generator, datasets.

An instance is a length-L sequence of integers in [1, K]. Starting at
index 1, keep following pointers while they move forward
(``get_pointer(a[i]) > i``); the answer is ``get_value`` of the element
where the walk stops. The number of pointer-follow transitions is the
instance's hop count, its complexity measure.

Two variants: ``plain`` (pointer and value are the identity, K == L) and
``modulus`` (both map through a 1-based shifted modulus so every element
stays a valid index/value in [1, L]).

Indexing is 1-based throughout, matching the element value range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import rng_from_seed

FORMAT_VERSION = "cpvr-v1"

VARIANTS = ("plain", "modulus")


class TaskError(ValueError):
    """Invalid task parameters or infeasible generation request."""


@dataclass(frozen=True)
class TaskSpec:
    """Task family parameters: variant, sequence length L, max element value K."""

    variant: str
    length: int
    max_value: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TaskError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.length < 1:
            raise TaskError(f"length must be positive, got {self.length}")
        if self.variant == "plain" and self.max_value != self.length:
            raise TaskError(f"plain variant requires K == L, got K={self.max_value}, L={self.length}")
        if self.variant == "modulus" and self.max_value < self.length:
            raise TaskError(f"modulus variant requires K >= L, got K={self.max_value}, L={self.length}")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "length": self.length, "max_value": self.max_value}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(variant=d["variant"], length=int(d["length"]), max_value=int(d["max_value"]))


@dataclass(frozen=True)
class PvrInstance:
    """One task example with its oracle solution attached."""

    sequence: tuple[int, ...]
    label: int
    hops: int
    trace: tuple[int, ...]

    def to_record(self, scratchpad: str | None = None) -> dict:
        rec = {
            "sequence": list(self.sequence),
            "label": self.label,
            "hops": self.hops,
            "trace": list(self.trace),
        }
        if scratchpad is not None:
            rec["scratchpad"] = scratchpad
        return rec


def _check_element(x: int, spec: TaskSpec) -> None:
    if not 1 <= x <= spec.max_value:
        raise TaskError(f"element {x} outside [1, {spec.max_value}]")


def get_pointer(x: int, spec: TaskSpec) -> int:
    """Index in [1, L] that element ``x`` points to."""
    _check_element(x, spec)
    if spec.variant == "plain":
        return x
    return (x - 1) % spec.length + 1


def get_value(x: int, spec: TaskSpec) -> int:
    """Value in [1, L] read out from element ``x``."""
    _check_element(x, spec)
    if spec.variant == "plain":
        return x
    return (x - 1) % spec.length + 1


def solve(sequence, spec: TaskSpec) -> PvrInstance:
    """Brute-force oracle: walk pointers while they move forward.

    The trace is strictly increasing, so the walk terminates after at
    most L-1 hops. Only dereferenced elements are range-checked; the walk
    never reads unvisited positions.
    """
    seq = [int(v) for v in sequence]
    if len(seq) != spec.length:
        raise TaskError(f"sequence length {len(seq)} != spec length {spec.length}")
    i = 1
    trace = [1]
    hops = 0
    while True:
        p = get_pointer(seq[i - 1], spec)
        if p <= i:
            break
        i = p
        trace.append(i)
        hops += 1
    label = get_value(seq[i - 1], spec)
    return PvrInstance(sequence=tuple(seq), label=label, hops=hops, trace=tuple(trace))


def _element_with_pointer(target: int, spec: TaskSpec, rng: np.random.Generator) -> int:
    """Sample an element value whose pointer is exactly ``target``."""
    if spec.variant == "plain":
        return target
    # values congruent to target (1-based): target, target+L, target+2L, ... <= K
    n_choices = (spec.max_value - target) // spec.length + 1
    t = int(rng.integers(0, n_choices))
    return target + t * spec.length


def generate_instance(spec: TaskSpec, target_hops: int, rng: np.random.Generator) -> PvrInstance:
    """Construct an instance whose oracle hop count equals ``target_hops``.

    Builds a strictly increasing index chain starting at 1, plants
    pointers along it, makes the final element halt, and fills the rest
    uniformly. Unvisited positions cannot alter the trace, so the oracle
    check at the end is an assertion, not a retry loop.
    """
    L, K = spec.length, spec.max_value
    if target_hops < 0:
        raise TaskError(f"target_hops must be nonnegative, got {target_hops}")
    if target_hops > L - 1:
        raise TaskError(f"target_hops {target_hops} infeasible for L={L} (max {L - 1})")
    seq = rng.integers(1, K + 1, size=L).astype(np.int64)
    if target_hops > 0:
        tail = np.sort(rng.choice(np.arange(2, L + 1), size=target_hops, replace=False))
        chain = [1] + [int(i) for i in tail]
    else:
        chain = [1]
    for a, b in zip(chain, chain[1:]):
        seq[a - 1] = _element_with_pointer(b, spec, rng)
    last = chain[-1]
    halt_target = int(rng.integers(1, last + 1))
    seq[last - 1] = _element_with_pointer(halt_target, spec, rng)

    inst = solve(seq, spec)
    assert inst.hops == target_hops, f"constructed {inst.hops} hops, wanted {target_hops}"
    assert inst.trace == tuple(chain)
    return inst


def format_scratchpad(instance: PvrInstance, spec: TaskSpec) -> str:
    """Render ``label # v2 v3 ... vfinal`` (values at post-initial trace steps).

    A hop-0 instance has no intermediate steps; its scratch-pad is just
    the label again, keeping 'label at the end' true degenerately.
    """
    values = [get_value(instance.sequence[i - 1], spec) for i in instance.trace[1:]]
    if not values:
        values = [instance.label]
    return f"{instance.label} # " + " ".join(str(v) for v in values)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    """On-disk index for a generated dataset: spec, per-hop counts, file map."""

    spec: TaskSpec
    seed: int
    counts: dict[int, int]
    files: dict[int, str]
    format_version: str = FORMAT_VERSION
    scratchpad: bool = False

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "scratchpad": self.scratchpad,
            "counts": {str(h): c for h, c in sorted(self.counts.items())},
            "files": {str(h): f for h, f in sorted(self.files.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise TaskError(f"unsupported dataset format {d.get('format_version')!r}")
        return cls(
            spec=TaskSpec.from_dict(d["spec"]),
            seed=int(d["seed"]),
            counts={int(h): int(c) for h, c in d["counts"].items()},
            files={int(h): f for h, f in d["files"].items()},
            format_version=d["format_version"],
            scratchpad=bool(d.get("scratchpad", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def bucket_path(self, hops: int, root: str | Path | None = None) -> Path:
        p = Path(self.files[hops])
        return Path(root) / p if root is not None else p


def generate_dataset(
    spec: TaskSpec,
    hop_range: tuple[int, int],
    count_per_hop: int,
    seed: int,
    destination: str | Path,
    scratchpad: bool = False,
) -> DatasetManifest:
    """Write one deduplicated jsonl file per hop bucket plus a manifest.

    Deterministic: identical (spec, seed) produce byte-identical files.
    Duplicate sequences within a bucket are regenerated from derived
    per-attempt seeds, so collisions do not disturb other instances.
    """
    lo, hi = hop_range
    if lo < 1 or hi < lo:
        raise TaskError(f"invalid hop range {lo}..{hi}")
    if hi > spec.length - 1:
        raise TaskError(f"hop bucket {hi} infeasible for L={spec.length}")
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)

    counts: dict[int, int] = {}
    files: dict[int, str] = {}
    for hops in range(lo, hi + 1):
        name = f"hops_{hops:02d}.jsonl"
        path = dest / name
        seen: set[tuple[int, ...]] = set()
        attempt = 0
        with open(path, "w") as fh:
            while len(seen) < count_per_hop:
                rng = rng_from_seed(seed, "dataset", spec.variant, spec.length, hops, attempt)
                attempt += 1
                inst = generate_instance(spec, hops, rng)
                if inst.sequence in seen:
                    continue
                seen.add(inst.sequence)
                pad = format_scratchpad(inst, spec) if scratchpad else None
                fh.write(json.dumps(inst.to_record(pad), separators=(",", ":")) + "\n")
        counts[hops] = count_per_hop
        files[hops] = name

    manifest = DatasetManifest(spec=spec, seed=seed, counts=counts, files=files, scratchpad=scratchpad)
    with open(dest / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_bucket(manifest: DatasetManifest, hops: int, root: str | Path) -> list[PvrInstance]:
    """Read one hop bucket back as instances (oracle fields included)."""
    out = []
    with open(manifest.bucket_path(hops, root)) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(
                PvrInstance(
                    sequence=tuple(rec["sequence"]),
                    label=int(rec["label"]),
                    hops=int(rec["hops"]),
                    trace=tuple(rec["trace"]),
                )
            )
    return out


@dataclass
class ArrayDataset:
    """Dense view of dataset buckets for the trainer: sequences and labels."""

    spec: TaskSpec
    sequences: np.ndarray  # (n, L) int64, values in [1, K]
    labels: np.ndarray  # (n,) int64, values in [1, L]
    hops: np.ndarray  # (n,) int64
    buckets: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, root: str | Path,
                      buckets: list[int] | None = None, limit_per_bucket: int | None = None) -> "ArrayDataset":
        chosen = sorted(manifest.counts) if buckets is None else sorted(buckets)
        seqs, labels, hops = [], [], []
        bucket_counts = {}
        for h in chosen:
            instances = load_bucket(manifest, h, root)
            if limit_per_bucket is not None:
                instances = instances[:limit_per_bucket]
            bucket_counts[h] = len(instances)
            for inst in instances:
                seqs.append(inst.sequence)
                labels.append(inst.label)
                hops.append(inst.hops)
        return cls(
            spec=manifest.spec,
            sequences=np.asarray(seqs, dtype=np.int64),
            labels=np.asarray(labels, dtype=np.int64),
            hops=np.asarray(hops, dtype=np.int64),
            buckets=bucket_counts,
        )

    def __len__(self) -> int:
        return len(self.labels)
