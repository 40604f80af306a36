"""Objective terms: per-camera classification, cross-camera feature
alignment, and pair-consistency mutual learning across classifier branches.

All divergence terms work in log space on log-softmax outputs; the public
distribution-level ops floor probabilities at ``PROB_FLOOR`` before taking
logs.  Pair consistency feeds both members of every same-WST pair through
every camera's branch and penalizes the symmetrized KL divergence of the
two predictions; gradients flow into both sides (no stop-gradient) and into
the branch itself, so branches adapt to features from foreign cameras.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .errors import ContractError, DimensionError
from .network import MutualModel, extract
from .sampler import BatchData

PROB_FLOOR = 1e-12

MODES = ("baseline-nocl", "baseline", "mlfe", "mlfc", "full")
_CROSS_MODES = ("baseline", "mlfe", "mlfc", "full")
_PAIR_MODES = ("mlfc", "full")


@dataclass
class LossReport:
    """Per-term values for one step; ``node`` carries the weighted total."""

    per_camera: float
    cross_camera: float
    pair: float
    total: float
    cross_weight: float
    pair_weight: float
    node: Node


# ---------------------------------------------------------------------------
# Distribution-level ops


def cross_entropy(probs, label: int) -> Node:
    """Negative log probability of ``label`` under a distribution row."""
    p = dc.as_node(probs)
    if p.value.ndim != 1 or p.value.size == 0:
        raise DimensionError(f"cross_entropy expects a distribution vector, got {p.value.shape}")
    if not 0 <= int(label) < p.value.shape[0]:
        raise ContractError(
            f"label {label} out of range for {p.value.shape[0]} classes"
        )
    picked = dc.take_rows(dc.log(dc.clip_min(p, PROB_FLOOR)), [int(label)])
    return dc.scale(dc.sum_all(picked), -1.0)


def _check_distribution(name: str, value: np.ndarray) -> None:
    if value.ndim != 1 or value.size == 0:
        raise DimensionError(f"{name} must be a non-empty vector, got {value.shape}")
    if (value < -1e-9).any() or abs(value.sum() - 1.0) > 1e-6:
        raise ContractError(f"{name} is not a probability distribution")


def kl_divergence(p, q) -> Node:
    """sum_l p_l log(p_l / q_l), probabilities floored before the logs."""
    p, q = dc.as_node(p), dc.as_node(q)
    if p.value.shape != q.value.shape:
        raise DimensionError(
            f"kl_divergence: shapes {p.value.shape} and {q.value.shape} differ"
        )
    _check_distribution("p", p.value)
    _check_distribution("q", q.value)
    pf = dc.clip_min(p, PROB_FLOOR)
    qf = dc.clip_min(q, PROB_FLOOR)
    return dc.sum_all(dc.mul(pf, dc.sub(dc.log(pf), dc.log(qf))))


def js_divergence(p, q) -> Node:
    """Symmetrized KL: half the divergence in each direction."""
    return dc.scale(dc.add(kl_divergence(p, q), kl_divergence(q, p)), 0.5)


# ---------------------------------------------------------------------------
# Batch-level terms (helpers take precomputed features so the total can share
# one extraction per extractor; public wrappers extract themselves)


def _per_camera_term(model: MutualModel, features: Node, batch: BatchData,
                     mode: str) -> Node:
    total: Node | None = None
    for camera, rows in batch.rows_by_camera.items():
        if not 0 <= camera < model.num_cameras:
            raise ContractError(f"batch camera {camera} has no classifier branch")
        logits = model.branches[camera].logits(dc.take_rows(features, rows), mode)
        log_probs = dc.log_softmax(logits)
        picked = dc.pick(log_probs, batch.labels[rows])
        part = dc.sum_all(picked)
        total = part if total is None else dc.add(total, part)
    if total is None:
        raise ContractError("per-camera loss needs a non-empty batch")
    return dc.scale(total, -1.0 / len(batch.labels))


def per_camera_loss(model: MutualModel, extractor: int, batch: BatchData,
                    mode: str = "train") -> Node:
    """Mean cross entropy over the batch, each sample via its own camera's branch."""
    features = extract(model, extractor, batch.inputs, mode)
    return _per_camera_term(model, features, batch, mode)


def cross_camera_loss(features_by_camera: dict[int, Node | np.ndarray]) -> Node:
    """Mean squared distance between per-camera feature means, both orders."""
    cameras = sorted(features_by_camera)
    if len(cameras) < 2:
        raise ContractError("cross-camera loss needs at least two camera views")
    means = {u: dc.mean_rows(dc.as_node(features_by_camera[u])) for u in cameras}
    total: Node | None = None
    for u in cameras:
        for v in cameras:
            if u == v:
                continue
            gap = dc.sqnorm(dc.sub(means[u], means[v]))
            total = gap if total is None else dc.add(total, gap)
    return dc.scale(total, 1.0 / (len(cameras) * (len(cameras) - 1)))


def _cross_camera_term(features: Node, batch: BatchData) -> Node:
    return cross_camera_loss(
        {u: dc.take_rows(features, rows) for u, rows in batch.rows_by_camera.items()}
    )


def _js_rows(lp_a: Node, lp_b: Node) -> Node:
    """Row-wise symmetrized KL from two log-probability matrices."""
    p_a, p_b = dc.exp(lp_a), dc.exp(lp_b)
    kl_ba = dc.rowwise_sum(dc.mul(p_b, dc.sub(lp_b, lp_a)))
    kl_ab = dc.rowwise_sum(dc.mul(p_a, dc.sub(lp_a, lp_b)))
    return dc.scale(dc.add(kl_ba, kl_ab), 0.5)


def _routed_pair_log_probs(model, features, batch, mode):
    """Yield per-branch log-probs of the rows appearing in pairs."""
    rows = sorted({pos for pair in batch.pairs for pos in pair})
    local = {pos: idx for idx, pos in enumerate(rows)}
    i_idx = [local[i] for i, _ in batch.pairs]
    j_idx = [local[j] for _, j in batch.pairs]
    routed = dc.take_rows(features, rows)
    for branch in model.branches:
        log_probs = dc.log_softmax(branch.logits(routed, mode))
        yield dc.take_rows(log_probs, i_idx), dc.take_rows(log_probs, j_idx)


def _pair_term(model: MutualModel, features: Node, batch: BatchData,
               mode: str) -> Node:
    if not batch.pairs:
        raise ContractError("pair-consistency loss needs a non-empty pair set")
    total: Node | None = None
    for lp_i, lp_j in _routed_pair_log_probs(model, features, batch, mode):
        part = dc.sum_all(_js_rows(lp_i, lp_j))
        total = part if total is None else dc.add(total, part)
    return dc.scale(total, 1.0 / (model.num_cameras * len(batch.pairs)))


def pair_consistency_loss(model: MutualModel, extractor: int, batch: BatchData,
                          mode: str = "train") -> Node:
    """Mean symmetrized KL between pair predictions across all branches."""
    features = extract(model, extractor, batch.inputs, mode)
    return _pair_term(model, features, batch, mode)


def _validate_phi(model: MutualModel, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    expected = (model.num_cameras, model.num_cameras)
    if phi.shape != expected:
        raise ContractError(f"co-occurrence matrix must be {expected}, got {phi.shape}")
    if ((phi < 0.0) | (phi > 1.0)).any():
        raise ContractError("co-occurrence entries must lie in [0, 1]")
    return phi


def _thresholded_pair_term(model: MutualModel, features: Node, batch: BatchData,
                           phi: np.ndarray, eta: float, mode: str) -> Node:
    if not batch.pairs:
        raise ContractError("pair-consistency loss needs a non-empty pair set")
    phi = _validate_phi(model, phi)
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    pair_cameras = np.array([batch.cameras[i] for i, _ in batch.pairs])
    gates = (phi[:, pair_cameras] >= eta).astype(np.float64)  # [C, P]
    active = gates.sum(axis=0)
    contributing = int((active > 0).sum())
    if contributing == 0:
        return Node(0.0)
    weights = np.where(active > 0, gates / np.where(active > 0, active, 1.0), 0.0)
    weights = weights / contributing
    total: Node | None = None
    for k, (lp_i, lp_j) in enumerate(
        _routed_pair_log_probs(model, features, batch, mode)
    ):
        if not gates[k].any():
            continue
        part = dc.sum_all(dc.mul(_js_rows(lp_i, lp_j), Node(weights[k])))
        total = part if total is None else dc.add(total, part)
    return total if total is not None else Node(0.0)


def thresholded_pair_consistency_loss(
    model: MutualModel, extractor: int, batch: BatchData,
    phi: np.ndarray, eta: float, mode: str = "train",
) -> Node:
    """Pair consistency restricted to branches whose cameras co-occur.

    Branch k participates for a pair from camera c only when
    phi[k, c] >= eta; each pair is normalized by its own active-branch count
    and pairs with no active branch contribute nothing (they also leave the
    pair count).  eta = 0 reproduces the unthresholded loss.
    """
    features = extract(model, extractor, batch.inputs, mode)
    return _thresholded_pair_term(model, features, batch, phi, eta, mode)


# ---------------------------------------------------------------------------
# Composition


def _mean_over_extractors(terms: list[Node]) -> Node:
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / len(terms))


def total_loss(
    model: MutualModel,
    batch: BatchData,
    *,
    mode: str = "full",
    cross_weight: float = 0.2,
    pair_weight: float = 0.4,
    eta: float | None = None,
    phi: np.ndarray | None = None,
    bn_mode: str = "train",
) -> LossReport:
    """Weighted objective for one batch, averaged over all extractors.

    ``mode`` picks the active terms (the ablation grid); terms a mode drops
    are reported as zero so the weighted-sum identity always holds.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}, expected one of {MODES}")
    if cross_weight < 0 or pair_weight < 0:
        raise ContractError("loss weights must be non-negative")
    if eta is not None:
        if mode not in _PAIR_MODES:
            raise ContractError(f"eta only applies to modes {_PAIR_MODES}")
        if phi is None:
            raise ContractError("eta requires a co-occurrence matrix")

    pl_terms: list[Node] = []
    cl_terms: list[Node] = []
    jl_terms: list[Node] = []
    for e in range(model.num_extractors):
        features = extract(model, e, batch.inputs, bn_mode)
        pl_terms.append(_per_camera_term(model, features, batch, bn_mode))
        if mode in _CROSS_MODES:
            cl_terms.append(_cross_camera_term(features, batch))
        if mode in _PAIR_MODES:
            if eta is not None:
                jl_terms.append(
                    _thresholded_pair_term(model, features, batch, phi, eta, bn_mode)
                )
            else:
                jl_terms.append(_pair_term(model, features, batch, bn_mode))

    pl = _mean_over_extractors(pl_terms)
    cl = _mean_over_extractors(cl_terms) if cl_terms else None
    jl = _mean_over_extractors(jl_terms) if jl_terms else None

    node = pl
    if cl is not None:
        node = dc.add(node, dc.scale(cl, cross_weight))
    if jl is not None:
        node = dc.add(node, dc.scale(jl, pair_weight))
    return LossReport(
        per_camera=float(pl.value),
        cross_camera=float(cl.value) if cl is not None else 0.0,
        pair=float(jl.value) if jl is not None else 0.0,
        total=float(node.value),
        cross_weight=float(cross_weight),
        pair_weight=float(pair_weight),
        node=node,
    )
