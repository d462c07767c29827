"""Training loops: the validation-loss stopping rule, multi-seed experiments,
continuation to exact mimicry, and the decomposed UART model.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from devmimic import encoding
from devmimic.dataset import Dataset, Split
from devmimic.evaluation import WidthMismatch, decoded_accuracy
from devmimic.machines import MachineKind
from devmimic.rnn import (
    ConfigError,
    GRUNetwork,
    Nadam,
    NetworkConfig,
    NonFiniteError,
    clip_global_norm,
    msle_loss,
)

log = logging.getLogger(__name__)

# SeedSequence stream ids for the shuffling generator, mixed with the network seed
_SHUFFLE_TRAIN = 1
_SHUFFLE_MIMIC = 2

# name -> (columns in the 22-wide frame, encoding, output size)
DECOMPOSED_GROUPS = {
    "Parity": (encoding.UART_GROUPS["parity"], "One-Hot", 5),
    "Word Length": (encoding.UART_GROUPS["word_length"], "One-Hot", 4),
    "Stop Bits": (encoding.UART_GROUPS["stop_bits"], "One-Hot", 3),
    "Baud Rate": (encoding.UART_GROUPS["baud"], "Scaled", 1),
    "Tx": (encoding.UART_GROUPS["tx"], "Binary", 1),
    "Data": (encoding.UART_GROUPS["data"], "Binary", 8),
}


@dataclass(frozen=True)
class TrainingConfig:
    epsilon_stop: float = 0.001
    patience: int = 20
    max_epochs: int = 4096
    success_threshold: float = 0.05
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clip_norm: float | None = None
    # continuation: consecutive perfect epochs required, and the extra-epoch budget
    mimicry_patience: int = 20
    mimicry_budget: int = 4096

    def __post_init__(self):
        if not self.epsilon_stop < self.success_threshold:
            raise ConfigError("epsilon_stop must be below success_threshold")
        if self.patience < 1 or self.mimicry_patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1 or self.mimicry_budget < 0:
            raise ConfigError("max_epochs must be >= 1 and mimicry_budget >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")

    def updated(self, **overrides) -> "TrainingConfig":
        return replace(self, **overrides)


class StopReason(enum.Enum):
    CONVERGED = "converged"
    MAX_EPOCHS = "max_epochs"
    NON_FINITE = "non_finite"
    MIMICRY = "mimicry"
    BUDGET = "budget"


class StoppingRule:
    """Stop once validation loss has been below epsilon for more than ``patience``
    consecutive epochs, or when ``max_epochs`` have run."""

    def __init__(self, epsilon: float, patience: int, max_epochs: int):
        self.epsilon, self.patience, self.max_epochs = epsilon, patience, max_epochs
        self.streak = 0
        self.epochs = 0

    def update(self, val_loss: float) -> StopReason | None:
        self.epochs += 1
        self.streak = self.streak + 1 if val_loss < self.epsilon else 0
        if self.streak > self.patience:
            return StopReason.CONVERGED
        if self.epochs >= self.max_epochs:
            return StopReason.MAX_EPOCHS
        return None


def is_success(eval_loss: float | None, threshold: float) -> bool:
    return eval_loss is not None and math.isfinite(eval_loss) and eval_loss < threshold


@dataclass
class RunRecord:
    machine: str
    seed: int
    n_params: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    # decoded accuracy per epoch: validation split in train(), evaluation split in continuation
    accuracy: list = field(default_factory=list)
    stop_reason: StopReason | None = None
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    success: bool = False
    wall_time: float = 0.0
    # continuation only
    epochs_plus: int | None = None
    best_accuracy: float | None = None
    message: str = ""

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "decoded_accuracy"])
            for i in range(self.epochs):
                acc = self.accuracy[i] if i < len(self.accuracy) else ""
                writer.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(acc)])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stop_reason"] = self.stop_reason.value if self.stop_reason else None
        out["epochs"] = self.epochs
        return out


# -- the loop ---------------------------------------------------------------------


def _check_widths(network: GRUNetwork, datasets: dict) -> None:
    for split, ds in datasets.items():
        if ds.inputs.shape[-1] != network.config.input_width or \
                ds.targets.shape[-1] != network.config.output_width:
            raise WidthMismatch(
                f"{split.value} dataset widths ({ds.inputs.shape[-1]}, {ds.targets.shape[-1]}) do not match "
                f"network ({network.config.input_width}, {network.config.output_width})")


class Trainer:
    """Owns one network's optimizer state and shuffling stream.

    ``fit`` implements the stopping-rule protocol and ``fit_mimicry`` the
    continuation; both can be called in sequence on the same instance so
    the optimizer moments carry over.
    """

    def __init__(self, network: GRUNetwork, datasets: dict, config: TrainingConfig = TrainingConfig()):
        if Split.TRAIN not in datasets or Split.VALIDATION not in datasets:
            raise ConfigError("train and validation splits are required")
        _check_widths(network, datasets)
        self.network = network
        self.datasets = datasets
        self.config = config
        self.optimizer = Nadam(network.params, config.learning_rate, config.beta1, config.beta2,
                               config.adam_epsilon)
        self.kind = datasets[Split.TRAIN].kind
        self.columns = datasets[Split.TRAIN].columns
        self.epochs_done = 0

    def _rng(self, stream: int) -> np.random.Generator:
        seq = np.random.SeedSequence([self.network.config.seed, stream])
        return np.random.Generator(np.random.PCG64(seq))

    def run_epoch(self, rng: np.random.Generator) -> float:
        """One pass over the training split; returns the sample-weighted mean batch loss."""
        train = self.datasets[Split.TRAIN]
        net, bs = self.network, self.config.batch_size
        order = rng.permutation(train.n_sequences)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            loss, grads = net.loss_and_grads(train.inputs[idx], train.targets[idx])
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {self.epochs_done + 1}")
            if self.config.clip_norm is not None:
                clip_global_norm(grads, self.config.clip_norm)
            self.optimizer.step(net.params, grads)
            net.touch()
            total += loss * len(idx)
        self.epochs_done += 1
        return total / len(order)

    def score(self, split: Split) -> tuple[float, float]:
        """(MSLE, decoded accuracy) of the current network on a split."""
        ds = self.datasets[split]
        predicted = self.network.predict(ds.inputs)
        return msle_loss(predicted, ds.targets), decoded_accuracy(self.kind, predicted, ds.targets,
                                                                  self.columns)

    def validate(self) -> tuple[float, float]:
        return self.score(Split.VALIDATION)

    def _new_record(self) -> RunRecord:
        return RunRecord(self.kind.display_name, self.network.config.seed, self.network.n_params)

    def _finish(self, record: RunRecord, started: float) -> RunRecord:
        if Split.EVALUATION in self.datasets and record.stop_reason is not StopReason.NON_FINITE:
            record.eval_loss, record.eval_accuracy = self.score(Split.EVALUATION)
        record.success = is_success(record.eval_loss, self.config.success_threshold)
        record.wall_time = time.perf_counter() - started
        return record

    def fit(self) -> RunRecord:
        cfg = self.config
        rule = StoppingRule(cfg.epsilon_stop, cfg.patience, cfg.max_epochs)
        rng = self._rng(_SHUFFLE_TRAIN)
        record = self._new_record()
        started = time.perf_counter()
        while record.stop_reason is None:
            try:
                train_loss = self.run_epoch(rng)
                val_loss, val_acc = self.validate()
                if not math.isfinite(val_loss):
                    raise NonFiniteError(f"non-finite validation loss at epoch {self.epochs_done}")
            except NonFiniteError as exc:
                record.stop_reason, record.message = StopReason.NON_FINITE, str(exc)
                log.warning("seed %d aborted: %s", record.seed, exc)
                break
            record.train_loss.append(train_loss)
            record.val_loss.append(val_loss)
            record.accuracy.append(val_acc)
            record.stop_reason = rule.update(val_loss)
            log.debug("seed %d epoch %d train %.6g val %.6g acc %.6f", record.seed, record.epochs,
                      train_loss, val_loss, val_acc)
        return self._finish(record, started)

    def fit_mimicry(self) -> RunRecord:
        """Keep training until decoded evaluation accuracy is 100% for
        ``mimicry_patience`` consecutive checks, or the extra-epoch budget runs out.

        The check before any extra training counts, so an already perfect
        network reports Epochs+ = 0. On budget exhaustion the best-scoring
        parameters are restored.
        """
        if Split.EVALUATION not in self.datasets:
            raise ConfigError("continuation needs an evaluation split")
        cfg = self.config
        rng = self._rng(_SHUFFLE_MIMIC)
        record = self._new_record()
        started = time.perf_counter()
        _, acc = self.score(Split.EVALUATION)
        best, best_epoch = acc, 0
        best_params = {k: v.copy() for k, v in self.network.params.items()}
        streak = 1 if acc == 1.0 else 0
        extra = 0
        while streak < cfg.mimicry_patience and extra < cfg.mimicry_budget:
            try:
                train_loss = self.run_epoch(rng)
                val_loss, _ = self.validate()
                _, acc = self.score(Split.EVALUATION)
            except NonFiniteError as exc:
                record.stop_reason, record.message = StopReason.NON_FINITE, str(exc)
                break
            extra += 1
            record.train_loss.append(train_loss)
            record.val_loss.append(val_loss)
            record.accuracy.append(acc)
            if acc > best:
                best, best_epoch = acc, extra
                best_params = {k: v.copy() for k, v in self.network.params.items()}
            streak = streak + 1 if acc == 1.0 else 0
        if record.stop_reason is None:
            record.stop_reason = StopReason.MIMICRY if streak >= cfg.mimicry_patience else StopReason.BUDGET
        if record.stop_reason is not StopReason.MIMICRY:
            for k, v in best_params.items():
                self.network.params[k][...] = v
            self.network.touch()
        record.epochs_plus, record.best_accuracy = best_epoch, best
        return self._finish(record, started)


def train(network: GRUNetwork, datasets: dict, config: TrainingConfig = TrainingConfig()) -> RunRecord:
    return Trainer(network, datasets, config).fit()


def continue_to_mimicry(network: GRUNetwork, datasets: dict, config: TrainingConfig = TrainingConfig(),
                        trainer: Trainer | None = None) -> RunRecord:
    """Continuation phase; pass the ``trainer`` from :func:`train` to keep optimizer state."""
    if trainer is None:
        trainer = Trainer(network, datasets, config)
    elif trainer.network is not network:
        raise ConfigError("trainer belongs to a different network")
    return trainer.fit_mimicry()


# -- experiments ----------------------------------------------------------------------


def network_config_for(kind: MachineKind, seed: int, **overrides) -> NetworkConfig:
    return NetworkConfig(kind.input_width, kind.output_width, seed=seed, **overrides)


@dataclass
class ExperimentSummary:
    machine: str
    n_params: int
    n_networks: int
    n_success: int
    success_rate: float
    mean_epochs: float
    median_epochs: float
    mean_epochs_success: float | None
    # mean over successful runs (None if there are none) and over every finished run
    mean_eval_loss: float | None
    mean_eval_loss_all: float | None

    @classmethod
    def from_records(cls, records: list[RunRecord]) -> "ExperimentSummary":
        if not records:
            raise ValueError("no records")
        epochs = [r.epochs for r in records]
        good = [r for r in records if r.success]
        finite = [r.eval_loss for r in records if r.eval_loss is not None and math.isfinite(r.eval_loss)]
        return cls(
            machine=records[0].machine,
            n_params=records[0].n_params,
            n_networks=len(records),
            n_success=len(good),
            success_rate=len(good) / len(records),
            mean_epochs=float(np.mean(epochs)),
            median_epochs=float(np.median(epochs)),
            mean_epochs_success=float(np.mean([r.epochs for r in good])) if good else None,
            mean_eval_loss=float(np.mean([r.eval_loss for r in good])) if good else None,
            mean_eval_loss_all=float(np.mean(finite)) if finite else None,
        )

    def to_csv(self, path) -> None:
        row = asdict(self)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(row))
            writer.writerow(["" if v is None else v for v in row.values()])


@dataclass
class Experiment:
    records: list
    summary: ExperimentSummary

    def curves(self) -> np.ndarray:
        """(max epochs, n runs) validation losses, NaN after a run stopped."""
        n = max(r.epochs for r in self.records)
        out = np.full((n, len(self.records)), np.nan)
        for j, r in enumerate(self.records):
            out[:r.epochs, j] = r.val_loss
        return out

    def curves_to_csv(self, path) -> None:
        """Per-epoch validation loss per seed plus the mean over runs still training."""
        curves = self.curves()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch"] + [f"seed_{r.seed}" for r in self.records] + ["mean_active"])
            for i, row in enumerate(curves):
                active = row[~np.isnan(row)]
                writer.writerow([i + 1] + ["" if np.isnan(v) else repr(float(v)) for v in row]
                                + [repr(float(active.mean()))])


def _run_one(args) -> tuple[RunRecord, dict]:
    kind, seed, datasets, config, net_overrides = args
    network = GRUNetwork(network_config_for(kind, seed, **net_overrides))
    record = train(network, datasets, config)
    return record, network.params


def experiment(kind: MachineKind, n_networks: int, datasets: dict,
               config: TrainingConfig = TrainingConfig(), base_seed: int = 0,
               workers: int = 1, network_overrides: dict | None = None,
               keep_params: bool = False) -> Experiment:
    """Train ``n_networks`` networks with seeds base_seed, base_seed + 1, ...

    Runs are independent, so ``workers > 1`` spreads them over processes
    without changing any result. A run that aborts stays in the list with
    its stop reason. With ``keep_params`` each record gets a ``params``
    attribute holding the trained weights.
    """
    if n_networks < 1:
        raise ConfigError("n_networks must be >= 1")
    jobs = [(kind, base_seed + i, datasets, config, network_overrides or {}) for i in range(n_networks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    records = []
    for record, params in results:
        if keep_params:
            record.params = params
        records.append(record)
    return Experiment(records, ExperimentSummary.from_records(records))


# -- decomposed model -------------------------------------------------------------------


@dataclass
class CompositeModel:
    """Six group networks whose outputs concatenate into the 22-wide frame layout."""

    networks: dict

    def predict(self, inputs) -> np.ndarray:
        parts = [self.networks[name].predict(inputs) for name in DECOMPOSED_GROUPS]
        return np.concatenate(parts, axis=-1)


@dataclass
class DecomposedResult:
    records: dict
    model: CompositeModel


def decomposed_datasets(datasets: dict, group: str) -> dict:
    cols = DECOMPOSED_GROUPS[group][0]
    return {split: ds.with_targets(cols) for split, ds in datasets.items()}


def _run_group(args) -> tuple[RunRecord, dict]:
    name, datasets, config, net_config = args
    network = GRUNetwork(net_config)
    record = train(network, decomposed_datasets(datasets, name), config)
    return record, network.params


def train_decomposed(datasets: dict, config: TrainingConfig = TrainingConfig(), seed: int = 0,
                     hidden_layers: int = 4, hidden_width: int | None = None,
                     workers: int = 1) -> DecomposedResult:
    """One network per UART output group, all at the monolithic hidden width.

    Group i uses network seed ``seed + i`` in the order of
    :data:`DECOMPOSED_GROUPS`.
    """
    kind = datasets[Split.TRAIN].kind
    if kind is not MachineKind.SERIAL_PORT:
        raise ConfigError("the decomposed model is defined for the UART only")
    width = hidden_width or NetworkConfig(kind.input_width, kind.output_width).hidden_width
    jobs = []
    for i, (name, (_, _, size)) in enumerate(DECOMPOSED_GROUPS.items()):
        net_config = NetworkConfig(kind.input_width, size, hidden_layers, width, seed + i)
        jobs.append((name, datasets, config, net_config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_group, jobs))
    else:
        results = [_run_group(job) for job in jobs]
    records, networks = {}, {}
    for (name, _, _, net_config), (record, params) in zip(jobs, results):
        record.machine = f"{kind.display_name}:{name}"
        records[name] = record
        networks[name] = GRUNetwork(net_config, params)
    return DecomposedResult(records, CompositeModel(networks))
