"""Command-line entry point: ``devmimic <subcommand> ...``.

Exit codes (errors also print one JSON line prefixed ``error:`` on stderr)::

    0  success
    1  unexpected internal error
    2  usage error (bad flags)
    3  missing input file
    4  width mismatch between data, model and machine
    5  configuration violation or rejected input
    6  training aborted on a non-finite loss
    7  output path not writable
    8  unreadable or corrupt dataset/checkpoint file
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from devmimic import __version__
from devmimic import dataset as dsmod
from devmimic import evaluation, training
from devmimic.dataset import PRESETS, Split
from devmimic.machines import MachineKind, RejectedInput
from devmimic.rnn import CheckpointError, ConfigError, GRUNetwork, load_checkpoint, save_checkpoint

OUT_ENV = "DEVMIMIC_OUT"
DEFAULT_OUT = "devmimic-out"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_WIDTH = 4
EXIT_CONFIG = 5
EXIT_NONFINITE = 6
EXIT_UNWRITABLE = 7
EXIT_FORMAT = 8


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# -- experiment spec ------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """Everything needed to re-run an experiment; stored as JSON.

    ``preset`` is a preset name or a mapping of split name to
    [n_sequences, length]. ``training`` and ``network`` hold overrides of
    :class:`~devmimic.training.TrainingConfig` and
    :class:`~devmimic.rnn.NetworkConfig` fields.
    """

    machine: str = "eightbit"
    preset: object = "desk"
    data_seed: int = 0
    base_seed: int = 0
    n_networks: int = 1
    training: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    output_dir: str | None = None

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        data = json.loads(_read_text(path))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CliError(EXIT_CONFIG, "config", f"{path}: unknown spec keys {sorted(unknown)}")
        return cls(**data)

    def kind(self) -> MachineKind:
        try:
            return MachineKind.parse(self.machine)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc)) from exc

    def sizes(self) -> dict:
        if isinstance(self.preset, str):
            if self.preset not in PRESETS:
                raise CliError(EXIT_CONFIG, "config", f"unknown preset {self.preset!r}")
            return PRESETS[self.preset]
        try:
            return {Split(name): (int(n), int(t)) for name, (n, t) in self.preset.items()}
        except (ValueError, TypeError, AttributeError) as exc:
            raise CliError(EXIT_CONFIG, "config", f"bad custom preset {self.preset!r}") from exc

    def training_config(self) -> training.TrainingConfig:
        try:
            return training.TrainingConfig(**self.training)
        except TypeError as exc:
            raise CliError(EXIT_CONFIG, "config", f"bad training override: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


_TRAINING_FLAGS = ("epsilon_stop", "patience", "max_epochs", "success_threshold", "batch_size",
                   "learning_rate", "clip_norm", "mimicry_patience", "mimicry_budget")
_NETWORK_FLAGS = ("hidden_layers", "hidden_width", "truncate")


def build_spec(args) -> ExperimentSpec:
    """Layer built-in defaults, then the spec file, then explicit flags."""
    spec = ExperimentSpec.from_file(args.spec) if getattr(args, "spec", None) else ExperimentSpec()
    for name, attr in (("machine", "machine"), ("preset", "preset"), ("seed", "data_seed"),
                       ("base_seed", "base_seed"), ("n", "n_networks"), ("out", "output_dir")):
        value = getattr(args, name, None)
        if value is not None:
            setattr(spec, attr, value)
    spec.training = dict(spec.training)
    spec.network = dict(spec.network)
    for name in _TRAINING_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            spec.training[name] = value
    for name in _NETWORK_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            spec.network[name] = value
    return spec


# -- helpers ---------------------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, "missing_file", f"{path}: no such file") from exc


def output_dir(spec_dir: str | None) -> Path:
    path = Path(spec_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_UNWRITABLE, "unwritable", f"{path}: {exc.strerror or exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_UNWRITABLE, "unwritable", f"{path}: not writable")
    return path


def dataset_path(directory: Path, kind: MachineKind, split: Split) -> Path:
    return directory / f"{kind.value}-{split.value}.dset"


def load_datasets(args, spec: ExperimentSpec, splits=tuple(Split)) -> dict:
    """Datasets from ``--data DIR`` if given, else generated from the spec's preset and seed."""
    kind = spec.kind()
    if getattr(args, "data", None):
        return {s: dsmod.load(dataset_path(Path(args.data), kind, s), kind) for s in splits}
    sizes = spec.sizes()
    return {s: dsmod.generate(kind, *sizes[s], spec.data_seed, s) for s in splits}


def load_model(spec_value: str, kind: MachineKind | None = None):
    if spec_value == "ground-truth":
        if kind is None:
            raise CliError(EXIT_CONFIG, "config", "--model ground-truth needs --machine")
        return evaluation.GroundTruthModel(kind)
    network, _ = load_checkpoint(spec_value)
    if kind is not None and (network.config.input_width, network.config.output_width) != \
            (kind.input_width, kind.output_width):
        raise CliError(EXIT_WIDTH, "width_mismatch",
                       f"{spec_value}: network widths ({network.config.input_width}, "
                       f"{network.config.output_width}) do not match {kind.display_name}")
    return network


def _record_json(record: training.RunRecord) -> str:
    data = record.to_dict()
    data.pop("wall_time")  # keeps output files identical across identical runs
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _write_run(out: Path, stem: str, network: GRUNetwork, record: training.RunRecord) -> None:
    save_checkpoint(network, out / f"{stem}.ckpt", step=record.epochs,
                    extra={"machine": record.machine, "stop_reason": record.stop_reason.value})
    record.to_csv(out / f"{stem}-log.csv")
    (out / f"{stem}-record.json").write_text(_record_json(record))


def _print_record(record: training.RunRecord) -> None:
    print(f"{record.machine} seed={record.seed} epochs={record.epochs} stop={record.stop_reason.value} "
          f"eval_loss={evaluation.fmt(record.eval_loss)} eval_accuracy={evaluation.fmt(record.eval_accuracy)} "
          f"success={record.success} wall={record.wall_time:.1f}s")


def _emit(table: evaluation.Table, out: Path | None, name: str) -> None:
    print(table.to_text())
    if out is not None:
        table.to_csv(out / f"{name}.csv")


# -- subcommands ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = build_spec(args)
    kind, out = spec.kind(), output_dir(spec.output_dir)
    for split, (n, length) in spec.sizes().items():
        ds = dsmod.generate(kind, n, length, spec.data_seed, split)
        path = dataset_path(out, kind, split)
        dsmod.save(ds, path)
        print(f"{path} {n}x{length} sha256={dsmod.file_checksum(path)}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = build_spec(args)
    kind, out, config = spec.kind(), output_dir(spec.output_dir), spec.training_config()
    datasets = load_datasets(args, spec)
    network = GRUNetwork(training.network_config_for(kind, spec.base_seed, **spec.network))
    record = training.train(network, datasets, config)
    _write_run(out, f"{kind.value}-seed{spec.base_seed}", network, record)
    (out / "spec.json").write_text(spec.to_json())
    _print_record(record)
    return EXIT_NONFINITE if record.stop_reason is training.StopReason.NON_FINITE else EXIT_OK


def cmd_experiment(args) -> int:
    spec = build_spec(args)
    kind, out, config = spec.kind(), output_dir(spec.output_dir), spec.training_config()
    datasets = load_datasets(args, spec)
    workers = 1 if args.serial else args.workers
    result = training.experiment(kind, spec.n_networks, datasets, config, spec.base_seed, workers,
                                 spec.network, keep_params=True)
    for record in result.records:
        network = GRUNetwork(training.network_config_for(kind, record.seed, **spec.network), record.params)
        _write_run(out, f"{kind.value}-seed{record.seed}", network, record)
        _print_record(record)
    result.summary.to_csv(out / f"{kind.value}-summary.csv")
    result.curves_to_csv(out / f"{kind.value}-curves.csv")
    (out / "spec.json").write_text(spec.to_json())
    _emit(evaluation.experiment_table([result.summary]), out, f"{kind.value}-table")
    return EXIT_OK


def cmd_mimic(args) -> int:
    spec = build_spec(args)
    kind, out = spec.kind(), output_dir(spec.output_dir)
    if args.model == "ground-truth":
        ds = load_datasets(args, spec, (Split.EVALUATION,))[Split.EVALUATION]
        report = evaluation.mimicry(evaluation.GroundTruthModel(kind), ds)
        _emit(evaluation.mimicry_table([(report, None, None)]), out, f"{kind.value}-mimicry")
        return EXIT_OK
    network = load_model(args.model, kind)
    _, header = load_checkpoint(args.model)
    config = spec.training_config()
    datasets = load_datasets(args, spec)
    record = training.continue_to_mimicry(network, datasets, config)
    stem = f"{kind.value}-seed{network.config.seed}-mimic"
    _write_run(out, stem, network, record)
    report = evaluation.mimicry(network, datasets[Split.EVALUATION])
    plus = record.epochs_plus if record.stop_reason is training.StopReason.MIMICRY else None
    _emit(evaluation.mimicry_table([(report, header.get("step", 0) + record.epochs_plus, plus)]),
          out, f"{stem}-table")
    for name, acc in report.group_accuracy.items():
        print(f"group {name}: {100 * acc:.4f}%")
    return EXIT_OK


def cmd_decompose(args) -> int:
    spec = build_spec(args)
    spec.machine = "uart"
    out, config = output_dir(spec.output_dir), spec.training_config()
    datasets = load_datasets(args, spec)
    result = training.train_decomposed(datasets, config, spec.base_seed,
                                       spec.network.get("hidden_layers", 4), spec.network.get("hidden_width"),
                                       1 if args.serial else args.workers)
    for i, (name, record) in enumerate(result.records.items()):
        stem = f"uart-{name.lower().replace(' ', '_')}-seed{spec.base_seed + i}"
        _write_run(out, stem, result.model.networks[name], record)
    (out / "spec.json").write_text(spec.to_json())
    _emit(evaluation.decomposed_table(result.records), out, "decomposed-table")
    report = evaluation.mimicry(result.model, datasets[Split.EVALUATION])
    print(f"composite accuracy: {100 * report.accuracy:.4f}% of {report.total_outputs}")
    for name, acc in report.group_accuracy.items():
        print(f"group {name}: {100 * acc:.4f}%")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    spec = build_spec(args)
    kind, out = spec.kind(), output_dir(spec.output_dir)
    model = load_model(args.model, kind)
    ds = load_datasets(args, spec, (Split.EVALUATION,))[Split.EVALUATION]
    if not 0 <= args.sequence < ds.n_sequences:
        raise CliError(EXIT_CONFIG, "config", f"--sequence must be in [0, {ds.n_sequences})")
    hm = evaluation.heatmap(model, ds.inputs[args.sequence], ds.targets[args.sequence], kind)
    stem = out / f"{kind.value}-heatmap-{args.sequence}"
    hm.to_csv(f"{stem}.csv")
    hm.to_svg(f"{stem}.svg")
    print(f"{stem}.csv {stem}.svg mean_loss={hm.mean:.6g}")
    return EXIT_OK


def cmd_hello(args) -> int:
    model = load_model(args.model, MachineKind.SERIAL_PORT)
    reports = [evaluation.hello_world(model, t, args.text) for t in args.target]
    out = output_dir(args.out) if args.out else None
    _emit(evaluation.hello_table(reports), out, "hello")
    return EXIT_OK


def cmd_statespace(args) -> int:
    out = output_dir(args.out) if args.out else None
    _emit(evaluation.statespace_table(), out, "statespace")
    return EXIT_OK


def cmd_report(args) -> int:
    """Rebuild the experiment table from the ``*-record.json`` files in a run directory."""
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise CliError(EXIT_MISSING, "missing_file", f"{run_dir}: no such directory")
    groups: dict[str, list] = {}
    for path in sorted(run_dir.glob("*-record.json")):
        data = json.loads(path.read_text())
        if data.get("epochs_plus") is not None:
            continue
        data.pop("epochs")
        data["stop_reason"] = training.StopReason(data["stop_reason"]) if data["stop_reason"] else None
        groups.setdefault(data["machine"], []).append(training.RunRecord(**data))
    if not groups:
        raise CliError(EXIT_MISSING, "missing_file", f"{run_dir}: no run records")
    summaries = [training.ExperimentSummary.from_records(recs) for recs in groups.values()]
    _emit(evaluation.experiment_table(summaries), run_dir, "report")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


def _add_common(p, data: bool = True) -> None:
    p.add_argument("--machine", help="eightbit, direct, invert, xor, parity or uart")
    p.add_argument("--preset", help="paper, desk or tiny (custom sizes via --spec)")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--spec", help="JSON experiment spec; flags override it")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    if data:
        p.add_argument("--data", help="directory of dataset files written by 'generate'")


def _add_training(p) -> None:
    p.add_argument("--base-seed", type=int, help="network seed (first seed for experiments)")
    p.add_argument("--epsilon-stop", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--success-threshold", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--mimicry-patience", type=int)
    p.add_argument("--mimicry-budget", type=int)
    p.add_argument("--hidden-layers", type=int)
    p.add_argument("--hidden-width", type=int)
    p.add_argument("--truncate", type=int, help="BPTT window length (default: full sequence)")


def _add_parallel(p) -> None:
    p.add_argument("--workers", type=int, default=1, help="processes across networks")
    p.add_argument("--serial", action="store_true", help="force one process (deterministic reference)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devmimic", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/validation/evaluation datasets")
    _add_common(p, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one network with the stopping rule")
    _add_common(p)
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="train several seeds and summarize")
    _add_common(p)
    _add_training(p)
    _add_parallel(p)
    p.add_argument("--n", type=int, help="number of networks")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("mimic", help="continue training to exact mimicry, or score the ground truth")
    _add_common(p)
    _add_training(p)
    p.add_argument("--model", required=True, help="checkpoint path or 'ground-truth'")
    p.set_defaults(func=cmd_mimic)

    p = sub.add_parser("decompose", help="train the six per-group UART networks")
    _add_common(p)
    _add_training(p)
    _add_parallel(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("heatmap", help="per-output loss heatmap of one evaluation sequence")
    _add_common(p)
    p.add_argument("--model", required=True, help="checkpoint path or 'ground-truth'")
    p.add_argument("--sequence", type=int, default=0, help="evaluation sequence index")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("hello", help="send 'Hello World!' through a UART model")
    p.add_argument("--target", action="append", required=True, help="e.g. 115200,8n1 (repeatable)")
    p.add_argument("--model", default="ground-truth", help="checkpoint path or 'ground-truth'")
    p.add_argument("--text", default=evaluation.HELLO_TEXT)
    p.add_argument("--out", help="also write hello.csv here")
    p.set_defaults(func=cmd_hello)

    p = sub.add_parser("statespace", help="print the state-space sizes of all machines")
    p.add_argument("--out", help="also write statespace.csv here")
    p.set_defaults(func=cmd_statespace)

    p = sub.add_parser("report", help="tabulate the run records in a directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def _classify(exc: Exception) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, FileNotFoundError):
        return CliError(EXIT_MISSING, "missing_file", f"{exc.filename}: no such file")
    if isinstance(exc, (dsmod.DatasetWidthError, evaluation.WidthMismatch)):
        return CliError(EXIT_WIDTH, "width_mismatch", str(exc))
    if isinstance(exc, (dsmod.DatasetError, CheckpointError, json.JSONDecodeError)):
        return CliError(EXIT_FORMAT, "bad_file", str(exc))
    if isinstance(exc, (ConfigError, RejectedInput)):
        return CliError(EXIT_CONFIG, "config", str(exc))
    if isinstance(exc, PermissionError):
        return CliError(EXIT_UNWRITABLE, "unwritable", f"{exc.filename}: permission denied")
    if isinstance(exc, FloatingPointError):
        return CliError(EXIT_NONFINITE, "non_finite", str(exc))
    return CliError(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        err = _classify(exc)
        print("error: " + json.dumps({"code": err.code, "kind": err.kind, "message": str(err)}),
              file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
