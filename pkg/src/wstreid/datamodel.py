"""Dataset ingestion and weakly supervised tracklet (WST) construction.

A WST merges all raw tracklets of one person within one camera view, so a
label ``y`` only identifies a person *relative to its camera*.  Raw person
ids stay on the samples for evaluation ground truth and co-occurrence
estimation but are never consumed by the training losses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DatasetError, ParseError
from .tensorio import load_tensors

MANIFEST_FIELDS = (
    "sample_id",
    "raw_person_id",
    "camera_id",
    "raw_tracklet_id",
    "timestamp_seconds",
    "tensor_key",
)


@dataclass
class Sample:
    """One person image record; ``vector`` is the pre-sized input tensor."""

    sample_id: int
    raw_person_id: int
    camera_id: int
    raw_tracklet_id: int
    timestamp: float
    tensor_key: str = ""
    vector: np.ndarray | None = None


@dataclass
class WstDataset:
    """Samples plus per-camera dense WST labels.

    ``labels[i]`` is in ``[0, class_counts[samples[i].camera_id])``; within a
    camera, every label value is occupied.  The pair (camera_id, label)
    identifies one WST.
    """

    samples: list[Sample]
    labels: list[int]
    class_counts: list[int]
    num_cameras: int
    # camera -> label -> sample indices, built once for the batch sampler
    members: dict[int, list[list[int]]] = field(repr=False, default_factory=dict)

    @property
    def num_samples(self) -> int:
        return len(self.samples)

    def input_dim(self) -> int:
        for s in self.samples:
            if s.vector is not None:
                return int(s.vector.shape[0])
        raise DatasetError("dataset carries no input vectors")

    def input_matrix(self, indices) -> np.ndarray:
        rows = []
        for i in indices:
            v = self.samples[i].vector
            if v is None:
                raise DatasetError(f"sample {self.samples[i].sample_id} has no vector")
            rows.append(v)
        return np.stack(rows).astype(np.float64)


def _index_members(samples, labels, class_counts) -> dict[int, list[list[int]]]:
    members: dict[int, list[list[int]]] = {
        c: [[] for _ in range(count)] for c, count in enumerate(class_counts)
    }
    for i, (s, y) in enumerate(zip(samples, labels)):
        members[s.camera_id][y].append(i)
    return members


def build_wst(samples: list[Sample]) -> WstDataset:
    """Merge samples sharing (raw person, camera) into one WST per camera.

    Labels are dense per camera, assigned in ascending raw person id order
    so rebuilding from identical input is deterministic.
    """
    if not samples:
        raise DatasetError("cannot build a WST dataset from zero samples")
    num_cameras = max(s.camera_id for s in samples) + 1
    if min(s.camera_id for s in samples) < 0:
        raise DatasetError("negative camera id")

    persons_by_camera: list[list[int]] = [[] for _ in range(num_cameras)]
    seen: set[tuple[int, int]] = set()
    for s in samples:
        key = (s.camera_id, s.raw_person_id)
        if key not in seen:
            seen.add(key)
            persons_by_camera[s.camera_id].append(s.raw_person_id)

    label_of: dict[tuple[int, int], int] = {}
    class_counts: list[int] = []
    for c in range(num_cameras):
        ordered = sorted(persons_by_camera[c])
        for y, pid in enumerate(ordered):
            label_of[(c, pid)] = y
        class_counts.append(len(ordered))

    labels = [label_of[(s.camera_id, s.raw_person_id)] for s in samples]
    return WstDataset(
        samples=list(samples),
        labels=labels,
        class_counts=class_counts,
        num_cameras=num_cameras,
        members=_index_members(samples, labels, class_counts),
    )


def build_reduced(samples: list[Sample], window_minutes: float) -> WstDataset:
    """Keep only the largest time-chained WST per (person, camera).

    Within each (person, camera) group, time-sorted samples are chained into
    tracklets whenever consecutive timestamps differ by at most the window;
    only the chain with the most images survives, ties broken by earliest
    start time.
    """
    if window_minutes <= 0:
        raise ContractError(f"window_minutes must be positive, got {window_minutes}")
    if not samples:
        raise DatasetError("cannot reduce zero samples")
    window = float(window_minutes) * 60.0

    groups: dict[tuple[int, int], list[Sample]] = {}
    for s in samples:
        groups.setdefault((s.raw_person_id, s.camera_id), []).append(s)

    kept: list[Sample] = []
    for key in sorted(groups):
        ordered = sorted(groups[key], key=lambda s: (s.timestamp, s.sample_id))
        chains: list[list[Sample]] = [[ordered[0]]]
        for s in ordered[1:]:
            if s.timestamp - chains[-1][-1].timestamp <= window:
                chains[-1].append(s)
            else:
                chains.append([s])
        best = max(chains, key=lambda ch: (len(ch), -ch[0].timestamp))
        kept.extend(best)

    kept.sort(key=lambda s: s.sample_id)
    return build_wst(kept)


@dataclass
class CoOccurrenceMatrix:
    """phi[i, j] = P(person occurs in camera i | person occurs in camera j)."""

    phi: np.ndarray

    @property
    def num_cameras(self) -> int:
        return self.phi.shape[0]


def estimate_phi(samples: list[Sample]) -> CoOccurrenceMatrix:
    """Estimate camera co-occurrence from the raw person annotations.

    Cameras containing no person get an all-zero row and column, including
    the diagonal.
    """
    if not samples:
        raise DatasetError("cannot estimate co-occurrence from zero samples")
    num_cameras = max(s.camera_id for s in samples) + 1
    persons: list[set[int]] = [set() for _ in range(num_cameras)]
    for s in samples:
        persons[s.camera_id].add(s.raw_person_id)

    phi = np.zeros((num_cameras, num_cameras))
    for j in range(num_cameras):
        if not persons[j]:
            continue
        denom = len(persons[j])
        for i in range(num_cameras):
            phi[i, j] = len(persons[i] & persons[j]) / denom
    return CoOccurrenceMatrix(phi=phi)


# ---------------------------------------------------------------------------
# Manifest and co-occurrence file formats


def write_manifest(path, samples: list[Sample]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(MANIFEST_FIELDS)
        for s in samples:
            writer.writerow(
                [
                    s.sample_id,
                    s.raw_person_id,
                    s.camera_id,
                    s.raw_tracklet_id,
                    repr(float(s.timestamp)),
                    s.tensor_key,
                ]
            )


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    samples: list[Sample] = []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest, header line required") from None
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ParseError(f"{path}: bad manifest header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
            try:
                samples.append(
                    Sample(
                        sample_id=int(row[0]),
                        raw_person_id=int(row[1]),
                        camera_id=int(row[2]),
                        raw_tracklet_id=int(row[3]),
                        timestamp=float(row[4]),
                        tensor_key=row[5].strip(),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return samples


def attach_vectors(samples: list[Sample], tensors_path) -> None:
    """Resolve each sample's tensor key against a container file, in place."""
    tensors = load_tensors(tensors_path)
    for s in samples:
        if s.tensor_key not in tensors:
            raise DatasetError(
                f"sample {s.sample_id}: tensor key {s.tensor_key!r} missing from container"
            )
        s.vector = tensors[s.tensor_key].reshape(-1)


def load_corpus(manifest_path, tensors_path=None) -> list[Sample]:
    """Read a manifest and, by default, its sibling ``tensors.bin`` payloads."""
    manifest_path = Path(manifest_path)
    samples = read_manifest(manifest_path)
    if tensors_path is None:
        tensors_path = manifest_path.parent / "tensors.bin"
    if Path(tensors_path).exists():
        attach_vectors(samples, tensors_path)
    return samples


def write_phi(path, matrix: CoOccurrenceMatrix) -> None:
    path = Path(path)
    n = matrix.num_cameras
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow([f"camera_{c}" for c in range(n)])
        for i in range(n):
            writer.writerow([repr(float(v)) for v in matrix.phi[i]])


def read_phi(path) -> CoOccurrenceMatrix:
    path = Path(path)
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty co-occurrence file") from None
        n = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n:
                raise ParseError(f"{path}:{lineno}: expected {n} columns")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if len(rows) != n:
        raise ParseError(f"{path}: expected {n} rows, found {len(rows)}")
    phi = np.array(rows, dtype=np.float64)
    if ((phi < 0.0) | (phi > 1.0)).any():
        raise ParseError(f"{path}: co-occurrence entries must lie in [0, 1]")
    return CoOccurrenceMatrix(phi=phi)
