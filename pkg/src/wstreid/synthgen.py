"""Deterministic synthetic multi-camera corpus generator.

Each person gets a base vector, each camera a fixed additive shift vector,
and each image is base + shift + isotropic noise.  The additive shift
creates exactly the cross-camera appearance gap the alignment losses are
meant to close, at a scale where training runs finish in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import Sample, write_manifest
from .errors import ContractError
from .tensorio import save_tensors

# Raw tracklets of one (person, camera) group start this many seconds apart;
# images inside a tracklet are one second apart.
TRACKLET_GAP_SECONDS = 600.0


@dataclass
class SynthConfig:
    num_persons: int = 50
    num_cameras: int = 4
    images_per_person_per_camera: int = 8
    input_dim: int = 32
    sigma_id: float = 0.8
    sigma_cam: float = 1.5
    # rows are visit profiles; person p uses row p mod len(rows).  None means
    # every person visits every camera.
    visit_matrix: np.ndarray | None = None
    # raw tracklets per (person, camera) group
    fragmentation: int = 2
    seed: int = 7

    def resolved_visit_matrix(self) -> np.ndarray:
        if self.visit_matrix is None:
            return np.ones((self.num_cameras, self.num_cameras))
        m = np.asarray(self.visit_matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.num_cameras:
            raise ContractError(
                f"visit matrix must have {self.num_cameras} columns, got shape {m.shape}"
            )
        if ((m < 0.0) | (m > 1.0)).any():
            raise ContractError("visit probabilities must lie in [0, 1]")
        return m

    def validate(self) -> None:
        if self.num_persons < 1 or self.num_cameras < 1:
            raise ContractError("need at least one person and one camera")
        if self.images_per_person_per_camera < 1:
            raise ContractError("need at least one image per person per camera")
        if self.input_dim < 1:
            raise ContractError("input_dim must be positive")
        if self.sigma_id < 0 or self.sigma_cam < 0:
            raise ContractError("noise magnitudes must be non-negative")
        if self.fragmentation < 1:
            raise ContractError("fragmentation must be at least 1")
        self.resolved_visit_matrix()


def generate(config: SynthConfig) -> tuple[list[Sample], dict[int, list[int]]]:
    """Produce samples plus the ground-truth person -> cameras map."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    dim = config.input_dim
    num_cameras = config.num_cameras
    visit = config.resolved_visit_matrix()

    bases = rng.normal(size=(config.num_persons, dim))
    shifts = rng.normal(scale=config.sigma_cam or 1.0, size=(num_cameras, dim))
    if config.sigma_cam == 0.0:
        shifts[:] = 0.0

    samples: list[Sample] = []
    truth: dict[int, list[int]] = {}
    next_sample = 0
    next_tracklet = 0
    per_group = config.images_per_person_per_camera

    for person in range(config.num_persons):
        profile = visit[person % visit.shape[0]]
        draws = rng.random(num_cameras)
        cameras = [c for c in range(num_cameras) if draws[c] < profile[c]]
        if not cameras:
            cameras = [int(np.argmax(profile))]
        truth[person] = cameras
        for camera in cameras:
            noise = rng.normal(scale=config.sigma_id or 1.0, size=(per_group, dim))
            if config.sigma_id == 0.0:
                noise[:] = 0.0
            vectors = bases[person] + shifts[camera] + noise
            fragments = min(config.fragmentation, per_group)
            chunk, extra = divmod(per_group, fragments)
            start = float((person * num_cameras + camera) * 100000)
            image = 0
            for k in range(fragments):
                size = chunk + (1 if k < extra else 0)
                for j in range(size):
                    samples.append(
                        Sample(
                            sample_id=next_sample,
                            raw_person_id=person,
                            camera_id=camera,
                            raw_tracklet_id=next_tracklet,
                            timestamp=start + k * TRACKLET_GAP_SECONDS + j,
                            tensor_key=str(next_sample),
                            vector=vectors[image],
                        )
                    )
                    next_sample += 1
                    image += 1
                next_tracklet += 1
    return samples, truth


def write_corpus(samples: list[Sample], out_dir) -> dict:
    """Write manifest.csv plus tensors.bin and return corpus statistics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir / "manifest.csv", samples)
    save_tensors(out_dir / "tensors.bin", {s.tensor_key: s.vector for s in samples})
    cameras = sorted({s.camera_id for s in samples})
    return {
        "images": len(samples),
        "persons": len({s.raw_person_id for s in samples}),
        "cameras": len(cameras),
        "images_per_camera": {
            c: sum(1 for s in samples if s.camera_id == c) for c in cameras
        },
    }


def split_for_retrieval(
    samples: list[Sample], num_eval_persons: int, queries_per_group: int = 1
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Hold out the highest person ids as a query/gallery evaluation set.

    Within each held-out (person, camera) group the first
    ``queries_per_group`` images become queries, the rest gallery.  The
    remaining persons form the training set, so evaluation identities are
    never seen in training.
    """
    pids = sorted({s.raw_person_id for s in samples})
    if not 1 <= num_eval_persons < len(pids):
        raise ContractError(
            f"num_eval_persons must be in [1, {len(pids) - 1}], got {num_eval_persons}"
        )
    eval_pids = set(pids[-num_eval_persons:])
    train = [s for s in samples if s.raw_person_id not in eval_pids]

    groups: dict[tuple[int, int], list[Sample]] = {}
    for s in samples:
        if s.raw_person_id in eval_pids:
            groups.setdefault((s.raw_person_id, s.camera_id), []).append(s)
    query: list[Sample] = []
    gallery: list[Sample] = []
    for key in sorted(groups):
        ordered = sorted(groups[key], key=lambda s: s.sample_id)
        query.extend(ordered[:queries_per_group])
        gallery.extend(ordered[queries_per_group:])
    return train, query, gallery
