"""ADAM optimization loop with deterministic seeding and checkpointing.

A run is fully reproducible from (dataset, config): the sampler, parameter
initialization, and update rule are all driven by the config seed, and no
wall-clock value ever reaches a persisted artifact.  Step timing is only
handed to the optional progress callback.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datamodel import CoOccurrenceMatrix, WstDataset
from .errors import ContractError, ParseError
from .kvconfig import parse_kv_file
from .losses import MODES, LossReport, total_loss
from .network import ModelConfig, MutualModel, save_checkpoint
from .sampler import BatchSampler, resolve_batch

LOG_HEADER = "step,per_camera,cross_camera,pair,total"

# modes trained with a single extractor unless the config overrides
_SINGLE_EXTRACTOR_MODES = ("baseline-nocl", "baseline", "mlfc")


@dataclass
class TrainConfig:
    mode: str = "full"
    steps: int = 2000
    seed: int = 0
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cross_loss_weight: float = 0.2
    pair_loss_weight: float = 0.4
    eta: float | None = None
    views_per_batch: int = 2
    pairs_per_view: int = 16
    feature_dim: int = 64
    hidden_dims: tuple[int, ...] = (64,)
    branch_hidden: int | None = None
    num_extractors: int | None = None
    checkpoint_every: int = 500

    def resolved_num_extractors(self) -> int:
        if self.num_extractors is not None:
            return self.num_extractors
        return 1 if self.mode in _SINGLE_EXTRACTOR_MODES else 2

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.steps < 1:
            raise ContractError("steps must be positive")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ContractError("adam_eps must be positive")
        if self.cross_loss_weight < 0 or self.pair_loss_weight < 0:
            raise ContractError("loss weights must be non-negative")
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ContractError("eta must lie in [0, 1]")
        if self.views_per_batch < 1 or self.pairs_per_view < 1:
            raise ContractError("batch shape values must be positive")
        if self.checkpoint_every < 1:
            raise ContractError("checkpoint_every must be positive")
        if self.num_extractors is not None and self.num_extractors < 1:
            raise ContractError("num_extractors must be positive")

    _INT_FIELDS = ("steps", "seed", "views_per_batch", "pairs_per_view",
                   "feature_dim", "checkpoint_every")
    _FLOAT_FIELDS = ("learning_rate", "beta1", "beta2", "adam_eps",
                     "cross_loss_weight", "pair_loss_weight")
    _OPTIONAL_INT_FIELDS = ("branch_hidden", "num_extractors")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        config = cls()
        known = set(cls.__dataclass_fields__)
        for key, value in mapping.items():
            if key not in known:
                raise ParseError(f"unknown train config key {key!r}")
            try:
                if key in cls._INT_FIELDS:
                    setattr(config, key, int(value))
                elif key in cls._FLOAT_FIELDS:
                    setattr(config, key, float(value))
                elif key in cls._OPTIONAL_INT_FIELDS:
                    setattr(config, key, None if value.lower() == "none" else int(value))
                elif key == "eta":
                    config.eta = None if value.lower() == "none" else float(value)
                elif key == "hidden_dims":
                    config.hidden_dims = tuple(
                        int(v) for v in value.split(",") if v.strip()
                    )
                else:
                    setattr(config, key, value)
            except ValueError as exc:
                raise ParseError(f"train config key {key!r}: {exc}") from None
        return config

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(parse_kv_file(path))

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if name == "hidden_dims":
                out[name] = ",".join(str(v) for v in value)
            elif value is None:
                out[name] = "none"
            else:
                out[name] = repr(value) if isinstance(value, float) else str(value)
        return out


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def create(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    *,
    learning_rate: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected ADAM update, applied to the parameter arrays in place.

    A missing or None gradient counts as zero, so momentum keeps decaying
    for parameters a step did not touch.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise ContractError(
                f"gradient shape {grad.shape} != parameter shape {param.shape} for {name}"
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        param -= learning_rate * update


@dataclass
class StepRecord:
    step: int
    per_camera: float
    cross_camera: float
    pair: float
    total: float

    def as_line(self) -> str:
        return (
            f"{self.step},{self.per_camera!r},{self.cross_camera!r},"
            f"{self.pair!r},{self.total!r}"
        )


def write_log(path, records: list[StepRecord]) -> None:
    with open(path, "w") as fp:
        fp.write(LOG_HEADER + "\n")
        for record in records:
            fp.write(record.as_line() + "\n")


def read_log(path) -> list[StepRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ParseError(f"{path}: bad training log header")
    records = []
    for line in lines[1:]:
        step, pl, cl, jl, total = line.split(",")
        records.append(StepRecord(int(step), float(pl), float(cl), float(jl), float(total)))
    return records


@dataclass
class TrainResult:
    model: MutualModel
    records: list[StepRecord]
    config: TrainConfig
    checkpoints: list[Path] = field(default_factory=list)
    log_path: Path | None = None


def train(
    dataset: WstDataset,
    config: TrainConfig,
    phi: np.ndarray | CoOccurrenceMatrix | None = None,
    out_dir=None,
    metadata: dict | None = None,
    progress=None,
) -> TrainResult:
    """Run the sample -> loss -> backward -> update loop for config.steps.

    With ``out_dir`` set, writes ``train_log.csv``, periodic checkpoints,
    and always a final checkpoint.  ``progress(record, elapsed_ms)`` is
    called per step; elapsed time never enters the persisted outputs.
    """
    config.validate()
    phi_matrix = phi.phi if isinstance(phi, CoOccurrenceMatrix) else phi
    if config.eta is not None and phi_matrix is None:
        raise ContractError("eta is set but no co-occurrence matrix was given")

    sampler = BatchSampler(
        dataset,
        views_per_batch=config.views_per_batch,
        pairs_per_view=config.pairs_per_view,
        seed=config.seed,
    )
    model_config = ModelConfig(
        input_dim=dataset.input_dim(),
        feature_dim=config.feature_dim,
        hidden_dims=config.hidden_dims,
        branch_hidden=config.branch_hidden,
        num_extractors=config.resolved_num_extractors(),
    )
    model = MutualModel(model_config, dataset.class_counts, seed=config.seed)
    params = model.parameters()
    values = {name: node.value for name, node in params.items()}
    state = AdamState.create(values)

    meta = dict(metadata or {})
    meta["config"] = config.to_mapping()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records: list[StepRecord] = []
    checkpoints: list[Path] = []
    for step in range(1, config.steps + 1):
        started = time.perf_counter()
        batch = resolve_batch(dataset, sampler.next_batch())
        report: LossReport = total_loss(
            model,
            batch,
            mode=config.mode,
            cross_weight=config.cross_loss_weight,
            pair_weight=config.pair_loss_weight,
            eta=config.eta,
            phi=phi_matrix,
        )
        dc.zero_grads(params.values())
        dc.backward(report.node)
        grads = {name: node.grad for name, node in params.items()}
        adam_step(
            values,
            grads,
            state,
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
        )
        record = StepRecord(
            step=step,
            per_camera=report.per_camera,
            cross_camera=report.cross_camera,
            pair=report.pair,
            total=report.total,
        )
        records.append(record)
        if progress is not None:
            progress(record, (time.perf_counter() - started) * 1000.0)
        if out_dir is not None and (
            step % config.checkpoint_every == 0 or step == config.steps
        ):
            name = "checkpoint_final" if step == config.steps else f"checkpoint_step{step:06d}"
            tensors_path, _ = save_checkpoint(model, out_dir / name, meta)
            checkpoints.append(tensors_path.with_suffix(""))

    log_path = None
    if out_dir is not None:
        log_path = out_dir / "train_log.csv"
        write_log(log_path, records)
    return TrainResult(
        model=model,
        records=records,
        config=config,
        checkpoints=checkpoints,
        log_path=log_path,
    )
