"""Feature extractors and the shared per-camera classifier bank.

Several extractors (two by default) produce features for the same images;
all of them feed one shared cluster of per-camera classifier branches, so
branch gradients blend information from every extractor.  The extractor is
a configurable multilayer perceptron: affine, batch norm, ReLU per hidden
layer, then a plain affine projection to the feature width.  A classifier
branch is fc -> batch norm -> ReLU -> fc with a softmax read-out sized to
its camera's WST label count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import BnState, Node
from .errors import ContractError, DimensionError
from .tensorio import load_tensors, save_tensors


@dataclass
class ModelConfig:
    input_dim: int
    feature_dim: int = 64
    hidden_dims: tuple[int, ...] = (64,)
    branch_hidden: int | None = None    # None -> feature_dim // 2
    num_extractors: int = 2

    def resolved_branch_hidden(self) -> int:
        if self.branch_hidden is not None:
            return self.branch_hidden
        return max(1, self.feature_dim // 2)

    def validate(self) -> None:
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ContractError("input_dim and feature_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ContractError("hidden widths must be positive")
        if self.branch_hidden is not None and self.branch_hidden < 1:
            raise ContractError("branch_hidden must be positive")
        if self.num_extractors < 1:
            raise ContractError("need at least one extractor")


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform fan-in initialization with variance 1/fan_in."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Backbone:
    """MLP feature extractor; hidden layers carry batch normalization."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.widths = list(widths)
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        self.bn: list[BnState | None] = []
        last = len(widths) - 2
        for i in range(len(widths) - 1):
            self.weights.append(Node(init_weight(rng, widths[i], widths[i + 1])))
            self.biases.append(Node(np.zeros(widths[i + 1])))
            self.bn.append(BnState(widths[i + 1]) if i < last else None)

    def forward(self, x, mode: str) -> Node:
        x = dc.as_node(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.widths[0]:
            raise DimensionError(
                f"backbone expects [n, {self.widths[0]}] inputs, got {x.value.shape}"
            )
        out = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = dc.add_bias(dc.matmul(out, w), b)
            if self.bn[i] is not None:
                out = dc.batchnorm(out, self.bn[i], mode)
                out = dc.relu(out)
        return out

    def parameters(self, prefix: str) -> dict[str, Node]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.layer{i}.weight"] = w
            params[f"{prefix}.layer{i}.bias"] = b
            if self.bn[i] is not None:
                params[f"{prefix}.layer{i}.bn.gamma"] = self.bn[i].gamma
                params[f"{prefix}.layer{i}.bn.beta"] = self.bn[i].beta
        return params

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bn):
            if bn is not None:
                out[f"{prefix}.layer{i}.bn.running_mean"] = bn.running_mean
                out[f"{prefix}.layer{i}.bn.running_var"] = bn.running_var
        return out


class ClassifierBranch:
    """Two fully connected layers with batch norm, one branch per camera."""

    def __init__(self, feature_dim: int, hidden: int, num_classes: int,
                 rng: np.random.Generator, camera_id: int):
        self.camera_id = camera_id
        self.num_classes = num_classes
        self.w1 = Node(init_weight(rng, feature_dim, hidden))
        self.b1 = Node(np.zeros(hidden))
        self.bn = BnState(hidden)
        self.w2 = Node(init_weight(rng, hidden, num_classes))
        self.b2 = Node(np.zeros(num_classes))

    def logits(self, features, mode: str) -> Node:
        h = dc.add_bias(dc.matmul(features, self.w1), self.b1)
        h = dc.relu(dc.batchnorm(h, self.bn, mode))
        return dc.add_bias(dc.matmul(h, self.w2), self.b2)

    def parameters(self, prefix: str) -> dict[str, Node]:
        return {
            f"{prefix}.fc1.weight": self.w1,
            f"{prefix}.fc1.bias": self.b1,
            f"{prefix}.bn.gamma": self.bn.gamma,
            f"{prefix}.bn.beta": self.bn.beta,
            f"{prefix}.fc2.weight": self.w2,
            f"{prefix}.fc2.bias": self.b2,
        }

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.bn.running_mean": self.bn.running_mean,
            f"{prefix}.bn.running_var": self.bn.running_var,
        }


class MutualModel:
    """Extractors plus the single branch bank they share."""

    def __init__(self, config: ModelConfig, class_counts: list[int], seed: int):
        config.validate()
        if not class_counts or any(m < 1 for m in class_counts):
            raise ContractError("every camera needs at least one WST label")
        self.config = config
        self.class_counts = list(class_counts)
        self.seed = seed
        widths = [config.input_dim, *config.hidden_dims, config.feature_dim]
        # distinct sub-seeds keep mutual learning non-degenerate
        self.extractors = [
            Backbone(widths, np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(2, e))))
            for e in range(config.num_extractors)
        ]
        branch_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
        hidden = config.resolved_branch_hidden()
        self.branches = [
            ClassifierBranch(config.feature_dim, hidden, m, branch_rng, camera_id=k)
            for k, m in enumerate(class_counts)
        ]

    @property
    def num_cameras(self) -> int:
        return len(self.branches)

    @property
    def num_extractors(self) -> int:
        return len(self.extractors)

    def parameters(self) -> dict[str, Node]:
        params: dict[str, Node] = {}
        for e, backbone in enumerate(self.extractors):
            params.update(backbone.parameters(f"extractor{e}"))
        for k, branch in enumerate(self.branches):
            params.update(branch.parameters(f"branch{k}"))
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for e, backbone in enumerate(self.extractors):
            out.update(backbone.buffers(f"extractor{e}"))
        for k, branch in enumerate(self.branches):
            out.update(branch.buffers(f"branch{k}"))
        return out


def extract(model: MutualModel, extractor: int, inputs, mode: str = "train") -> Node:
    """Features for a batch of inputs from one extractor."""
    if not 0 <= extractor < model.num_extractors:
        raise ContractError(f"no extractor {extractor}")
    return model.extractors[extractor].forward(inputs, mode)


def predict(model: MutualModel, extractor: int, features, camera: int,
            mode: str = "eval") -> Node:
    """Softmax distributions of branch ``camera`` over its WST labels."""
    if not 0 <= camera < model.num_cameras:
        raise ContractError(f"no classifier branch for camera {camera}")
    if not 0 <= extractor < model.num_extractors:
        raise ContractError(f"no extractor {extractor}")
    features = dc.as_node(features)
    return dc.softmax(model.branches[camera].logits(features, mode))


# ---------------------------------------------------------------------------
# Checkpoints: tensor container + JSON metadata sidecar


def checkpoint_paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".tensors", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".tensors"), stem.with_suffix(".json")


def save_checkpoint(model: MutualModel, stem, metadata: dict) -> tuple[Path, Path]:
    tensors_path, meta_path = checkpoint_paths(stem)
    entries = {name: node.value for name, node in model.parameters().items()}
    entries.update(model.buffers())
    save_tensors(tensors_path, entries)
    meta = dict(metadata)
    meta["model"] = {
        "input_dim": model.config.input_dim,
        "feature_dim": model.config.feature_dim,
        "hidden_dims": list(model.config.hidden_dims),
        "branch_hidden": model.config.resolved_branch_hidden(),
        "num_extractors": model.config.num_extractors,
        "class_counts": model.class_counts,
        "seed": model.seed,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return tensors_path, meta_path


def load_checkpoint(stem) -> tuple[MutualModel, dict]:
    tensors_path, meta_path = checkpoint_paths(stem)
    meta = json.loads(meta_path.read_text())
    spec = meta["model"]
    config = ModelConfig(
        input_dim=spec["input_dim"],
        feature_dim=spec["feature_dim"],
        hidden_dims=tuple(spec["hidden_dims"]),
        branch_hidden=spec["branch_hidden"],
        num_extractors=spec["num_extractors"],
    )
    model = MutualModel(config, spec["class_counts"], seed=spec["seed"])
    entries = load_tensors(tensors_path)
    for name, node in model.parameters().items():
        if name not in entries:
            raise ContractError(f"checkpoint missing parameter {name}")
        if entries[name].shape != node.value.shape:
            raise DimensionError(
                f"checkpoint parameter {name} has shape {entries[name].shape}, "
                f"expected {node.value.shape}"
            )
        node.value = entries[name]

    def restore(bn: BnState, prefix: str) -> None:
        for stat in ("running_mean", "running_var"):
            key = f"{prefix}.bn.{stat}"
            if key not in entries:
                raise ContractError(f"checkpoint missing buffer {key}")
            setattr(bn, stat, entries[key])

    for e, backbone in enumerate(model.extractors):
        for i, bn in enumerate(backbone.bn):
            if bn is not None:
                restore(bn, f"extractor{e}.layer{i}")
    for k, branch in enumerate(model.branches):
        restore(branch.bn, f"branch{k}")
    return model, meta
