"""Observation datasets: random command sequences and ground-truth outputs.

Commands are drawn i.i.d. uniform over the machine's command codes from a
PCG64 generator (numpy's ``np.random.PCG64``) seeded with
``SeedSequence([seed, split_id])``, where split_id is 0/1/2 for
train/validation/evaluation. The same (kind, split, counts, length, seed)
therefore reproduces bit-identical data on any platform numpy supports.

File layout::

    DEVMIMIC-DATASET {"version": 1, "kind": ..., "split": ..., ...}\\n
    inputs  float32 little-endian, row-major (n_sequences, length, input_width)
    targets float32 little-endian, row-major (n_sequences, length, output_width)
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from devmimic import encoding
from devmimic.machines import MachineKind, simulate_simple_codes, simulate_uart_codes

MAGIC = b"DEVMIMIC-DATASET"
FORMAT_VERSION = 1
_WIRE = np.dtype("<f4")


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    """Bad magic bytes or an unparseable header."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetWidthError(DatasetError):
    pass


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    EVALUATION = "evaluation"

    @property
    def split_id(self) -> int:
        return list(Split).index(self)


# (n_sequences, length) per split
PRESETS = {
    "paper": {Split.TRAIN: (4096, 1024), Split.VALIDATION: (1024, 1024), Split.EVALUATION: (128, 1024)},
    "desk": {Split.TRAIN: (256, 64), Split.VALIDATION: (64, 64), Split.EVALUATION: (32, 64)},
    "tiny": {Split.TRAIN: (32, 16), Split.VALIDATION: (8, 16), Split.EVALUATION: (8, 16)},
}


@dataclass
class Dataset:
    kind: MachineKind
    split: Split
    inputs: np.ndarray
    targets: np.ndarray
    seed: int
    # target column range (start, stop) when the targets are a slice of the full output
    columns: tuple | None = None

    def __post_init__(self):
        if self.inputs.shape[:2] != self.targets.shape[:2]:
            raise DatasetWidthError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree on (N, T)")
        out_width = self.kind.output_width if self.columns is None else self.columns[1] - self.columns[0]
        if self.inputs.shape[2] != self.kind.input_width or self.targets.shape[2] != out_width:
            raise DatasetWidthError(
                f"{self.kind.display_name} expects widths ({self.kind.input_width}, "
                f"{out_width}), got ({self.inputs.shape[2]}, {self.targets.shape[2]})")

    @property
    def n_sequences(self) -> int:
        return self.inputs.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.inputs.shape[1]

    def header(self) -> dict:
        if self.columns is not None:
            raise DatasetWidthError("sliced datasets are not serialized")
        return {
            "version": FORMAT_VERSION,
            "kind": self.kind.value,
            "split": self.split.value,
            "n_sequences": self.n_sequences,
            "sequence_length": self.sequence_length,
            "input_width": self.kind.input_width,
            "output_width": self.kind.output_width,
            "seed": self.seed,
        }

    def to_bytes(self) -> bytes:
        head = MAGIC + b" " + json.dumps(self.header(), sort_keys=True).encode() + b"\n"
        return (head + self.inputs.astype(_WIRE).tobytes(order="C")
                + self.targets.astype(_WIRE).tobytes(order="C"))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def subset(self, index) -> "Dataset":
        return Dataset(self.kind, self.split, self.inputs[index], self.targets[index], self.seed,
                       self.columns)

    def with_targets(self, columns: slice) -> "Dataset":
        """Same inputs, only the given target columns of a full-width dataset."""
        if self.columns is not None:
            raise DatasetWidthError("dataset targets are already sliced")
        start, stop, _ = columns.indices(self.kind.output_width)
        return Dataset(self.kind, self.split, self.inputs,
                       np.ascontiguousarray(self.targets[..., start:stop]), self.seed, (start, stop))


def draw_codes(kind: MachineKind, n_sequences: int, length: int, seed: int,
               split: Split = Split.TRAIN) -> np.ndarray:
    if n_sequences < 1 or length < 1:
        raise ValueError("n_sequences and length must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, split.split_id])))
    return rng.integers(0, kind.n_codes, size=(n_sequences, length), dtype=np.int64)


def targets_for_codes(kind: MachineKind, codes: np.ndarray) -> np.ndarray:
    if kind.is_simple:
        return simulate_simple_codes(kind, codes).astype(encoding.DTYPE)
    return encoding.encode_uart_trace(simulate_uart_codes(codes))


def generate(kind: MachineKind, n_sequences: int, length: int, seed: int,
             split: Split = Split.TRAIN) -> Dataset:
    codes = draw_codes(kind, n_sequences, length, seed, split)
    return Dataset(kind, split, encoding.encode_codes(kind, codes), targets_for_codes(kind, codes), seed)


def generate_preset(kind: MachineKind, preset: str | dict, seed: int) -> dict[Split, Dataset]:
    sizes = PRESETS[preset] if isinstance(preset, str) else preset
    return {split: generate(kind, n, length, seed, split) for split, (n, length) in sizes.items()}


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset.to_bytes())


def load(path, kind: MachineKind | None = None) -> Dataset:
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if not blob.startswith(MAGIC + b" ") or newline < 0:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
    try:
        header = json.loads(blob[len(MAGIC) + 1:newline])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: version {header.get('version')}, expected {FORMAT_VERSION}")
    file_kind = MachineKind(header["kind"])
    n, t = header["n_sequences"], header["sequence_length"]
    iw, ow = header["input_width"], header["output_width"]
    if (iw, ow) != (file_kind.input_width, file_kind.output_width):
        raise DatasetWidthError(f"{path}: widths ({iw}, {ow}) do not match {file_kind.display_name}")
    if kind is not None and kind is not file_kind:
        raise DatasetWidthError(f"{path}: holds {file_kind.display_name}, expected {kind.display_name}")
    payload = memoryview(blob)[newline + 1:]
    n_in, n_out = n * t * iw, n * t * ow
    if len(payload) != (n_in + n_out) * _WIRE.itemsize:
        raise DatasetTruncatedError(
            f"{path}: payload is {len(payload)} bytes, expected {(n_in + n_out) * _WIRE.itemsize}")
    values = np.frombuffer(payload, dtype=_WIRE).astype(np.float32)
    return Dataset(file_kind, Split(header["split"]), values[:n_in].reshape(n, t, iw),
                   values[n_in:].reshape(n, t, ow), int(header["seed"]))


def export_csv(dataset: Dataset, path) -> None:
    """One row per time step: sequence, step, input columns, target columns."""
    iw, ow = dataset.inputs.shape[2], dataset.targets.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "step"] + [f"in_{i}" for i in range(iw)]
                        + [f"out_{j}" for j in range(ow)])
        for s in range(dataset.n_sequences):
            for t in range(dataset.sequence_length):
                writer.writerow([s, t] + [repr(float(v)) for v in dataset.inputs[s, t]]
                                + [repr(float(v)) for v in dataset.targets[s, t]])


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
