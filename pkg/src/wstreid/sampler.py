"""Structured mini-batch construction for pair-based training.

A batch draws from a fixed number of camera views (default 2) and, per
view, a fixed number of same-WST image pairs (default 16), giving the
default batch size 64.  ``chi`` lists dataset sample indices; ``chi_u`` and
``rho`` address *positions within chi* so that a sample drawn twice stays
unambiguous.  Pairs never mix cameras and never pair a sample with itself,
though one WST may contribute several pairs in a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import WstDataset
from .errors import SamplingError

DEFAULT_VIEWS_PER_BATCH = 2
DEFAULT_PAIRS_PER_VIEW = 16


@dataclass
class MiniBatch:
    chi: list[int]                      # dataset sample indices, length B
    chi_u: dict[int, list[int]]         # camera id -> positions within chi
    c_batch: int                        # number of camera views in the batch
    rho: list[tuple[int, int]]          # same-WST pairs, positions within chi

    @property
    def size(self) -> int:
        return len(self.chi)


@dataclass
class BatchData:
    """A batch resolved against its dataset for loss evaluation."""

    inputs: np.ndarray                  # [B, input_dim]
    labels: np.ndarray                  # [B]
    cameras: np.ndarray                 # [B]
    rows_by_camera: dict[int, np.ndarray]
    pairs: list[tuple[int, int]]        # row positions


def pairable_wsts(dataset: WstDataset, camera: int) -> list[int]:
    """Labels of WSTs in a camera holding at least two samples."""
    return [y for y, members in enumerate(dataset.members[camera]) if len(members) >= 2]


class BatchSampler:
    """Owns the RNG for one training run; batches are deterministic per seed."""

    def __init__(
        self,
        dataset: WstDataset,
        views_per_batch: int = DEFAULT_VIEWS_PER_BATCH,
        pairs_per_view: int = DEFAULT_PAIRS_PER_VIEW,
        seed: int = 0,
    ):
        if views_per_batch < 1 or pairs_per_view < 1:
            raise SamplingError("views_per_batch and pairs_per_view must be positive")
        self.dataset = dataset
        self.views_per_batch = views_per_batch
        self.pairs_per_view = pairs_per_view
        self._rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))

        self._pairable = {
            c: pairable_wsts(dataset, c) for c in range(dataset.num_cameras)
        }
        self.eligible_cameras = [c for c, ys in sorted(self._pairable.items()) if ys]
        if len(self.eligible_cameras) < views_per_batch:
            bad = [c for c in range(dataset.num_cameras) if not self._pairable[c]]
            raise SamplingError(
                f"need {views_per_batch} cameras with pairable WSTs, have "
                f"{len(self.eligible_cameras)}; cameras without pairs: {bad}"
            )

    def next_batch(self) -> MiniBatch:
        rng = self._rng
        cameras = sorted(
            int(c)
            for c in rng.choice(
                self.eligible_cameras, size=self.views_per_batch, replace=False
            )
        )
        chi: list[int] = []
        chi_u: dict[int, list[int]] = {}
        rho: list[tuple[int, int]] = []
        for camera in cameras:
            labels = self._pairable[camera]
            positions: list[int] = []
            for _ in range(self.pairs_per_view):
                y = labels[int(rng.integers(len(labels)))]
                members = self.dataset.members[camera][y]
                first, second = rng.choice(len(members), size=2, replace=False)
                i_pos, j_pos = len(chi), len(chi) + 1
                chi.append(members[int(first)])
                chi.append(members[int(second)])
                positions.extend((i_pos, j_pos))
                rho.append((i_pos, j_pos))
            chi_u[camera] = positions
        return MiniBatch(chi=chi, chi_u=chi_u, c_batch=len(cameras), rho=rho)


def resolve_batch(dataset: WstDataset, batch: MiniBatch) -> BatchData:
    inputs = dataset.input_matrix(batch.chi)
    labels = np.array([dataset.labels[i] for i in batch.chi], dtype=np.intp)
    cameras = np.array(
        [dataset.samples[i].camera_id for i in batch.chi], dtype=np.intp
    )
    rows_by_camera = {
        cam: np.array(positions, dtype=np.intp)
        for cam, positions in sorted(batch.chi_u.items())
    }
    return BatchData(
        inputs=inputs,
        labels=labels,
        cameras=cameras,
        rows_by_camera=rows_by_camera,
        pairs=list(batch.rho),
    )
