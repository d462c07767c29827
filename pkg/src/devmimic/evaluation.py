"""Exact-mimicry scoring, loss heatmaps, the Hello-World demo and tables.

A "model" here is anything with ``predict(inputs) -> outputs`` over
(B, T, input_width) or (T, input_width) arrays: a trained
:class:`~devmimic.rnn.GRUNetwork`, a decomposed composite, or
:class:`GroundTruthModel`, which runs the simulated device itself.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from devmimic import encoding
from devmimic.dataset import Dataset, targets_for_codes
from devmimic.machines import (
    STOP_BITS,
    WORD_LENGTHS,
    MachineKind,
    Parity,
    RejectedInput,
    hello_world_program,
    state_space,
)
from devmimic.rnn import msle_elements, msle_loss

HELLO_TEXT = "Hello World!"


class WidthMismatch(ValueError):
    pass


# -- models ---------------------------------------------------------------------


def codes_from_inputs(kind: MachineKind, inputs: np.ndarray) -> np.ndarray:
    """Recover integer command codes from encoded (possibly noisy) inputs."""
    inputs = np.asarray(inputs)
    if kind.is_simple:
        return (inputs[..., 0] >= 0.5).astype(np.int64) * 8 + np.argmax(inputs[..., 1:], axis=-1)
    bits = (inputs >= 0.5).astype(np.int64)
    write = bits[..., 0]
    reg = bits[..., 1] * 4 + bits[..., 2] * 2 + bits[..., 3]
    data = (bits[..., 4:12] * (1 << np.arange(7, -1, -1))).sum(axis=-1) * write
    return (write << 11) | (reg << 8) | data


@dataclass
class GroundTruthModel:
    """The simulated device, exposed through the same ``predict`` interface as a network."""

    kind: MachineKind

    def predict(self, inputs) -> np.ndarray:
        inputs = np.asarray(inputs)
        if inputs.shape[-1] != self.kind.input_width:
            raise WidthMismatch(f"input width {inputs.shape[-1]} != {self.kind.input_width}")
        batched = inputs.ndim == 3
        codes = codes_from_inputs(self.kind, inputs if batched else inputs[None])
        out = targets_for_codes(self.kind, codes)
        return out if batched else out[0]


# -- mimicry ----------------------------------------------------------------------


def _group_slices(kind: MachineKind) -> dict[str, slice]:
    if kind.is_simple:
        return {f"bit{i}": slice(i, i + 1) for i in range(kind.output_width)}
    return dict(encoding.UART_GROUPS)


def value_matches(kind: MachineKind, predicted, target, columns: tuple | None = None) -> np.ndarray:
    """Boolean array, True where a decoded output value equals the truth.

    ``columns`` restricts the comparison to a (start, stop) slice of the full
    output; the rest of the vector is filled from the target so that group
    decoding (argmax) only ever sees the sliced columns vary.
    """
    predicted, target = np.asarray(predicted), np.asarray(target)
    if predicted.shape != target.shape:
        raise WidthMismatch(f"prediction shape {predicted.shape} != target shape {target.shape}")
    if columns is None:
        if predicted.shape[-1] != kind.output_width:
            raise WidthMismatch(f"width {predicted.shape[-1]} != {kind.output_width}")
        return encoding.decoded_values(kind, predicted) == encoding.decoded_values(kind, target)
    start, stop = columns
    if predicted.shape[-1] != stop - start:
        raise WidthMismatch(f"width {predicted.shape[-1]} != slice width {stop - start}")
    full_pred = np.zeros(predicted.shape[:-1] + (kind.output_width,), dtype=np.float64)
    full_true = np.zeros_like(full_pred)
    full_pred[..., start:stop] = predicted
    full_true[..., start:stop] = target
    return value_matches(kind, full_pred, full_true)[..., start:stop]


def decoded_accuracy(kind: MachineKind, predicted, target, columns: tuple | None = None) -> float:
    return float(np.mean(value_matches(kind, predicted, target, columns)))


@dataclass
class MimicryReport:
    machine: str
    total_outputs: int
    correct_outputs: int
    group_correct: dict = field(default_factory=dict)
    group_total: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct_outputs / self.total_outputs

    @property
    def group_accuracy(self) -> dict[str, float]:
        return {k: self.group_correct[k] / self.group_total[k] for k in self.group_correct}


def mimicry(model, dataset: Dataset) -> MimicryReport:
    """Decode every predicted output and count exact matches.

    Totals count one unit per output value (width x length x sequences);
    group accuracy counts one unit per group per step, a group being correct
    only when all of its values are.
    """
    kind = dataset.kind
    if dataset.columns is not None:
        raise WidthMismatch("mimicry needs full-width targets")
    predicted = model.predict(dataset.inputs)
    matches = value_matches(kind, predicted, dataset.targets)
    report = MimicryReport(kind.display_name, int(matches.size), int(matches.sum()))
    steps = dataset.n_sequences * dataset.sequence_length
    for name, cols in _group_slices(kind).items():
        report.group_correct[name] = int(np.all(matches[..., cols], axis=-1).sum())
        report.group_total[name] = steps
    return report


# -- heatmap ------------------------------------------------------------------------


@dataclass
class LossHeatmap:
    """Per (time step, output) squared-log loss, averaged over sequences."""

    matrix: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(self.matrix.mean())

    def column_means(self) -> np.ndarray:
        return self.matrix.mean(axis=0)

    def to_csv(self, path) -> None:
        labels = self.labels or [f"out_{j}" for j in range(self.matrix.shape[1])]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + labels)
            for t, row in enumerate(self.matrix):
                writer.writerow([t] + [repr(float(v)) for v in row])

    def to_svg(self, path, cell: int = 8) -> None:
        """Outputs along x, time steps down y; linear gray ramp, black = lowest loss."""
        m = self.matrix
        T, W = m.shape
        lo, hi = float(m.min()), float(m.max())
        span = hi - lo if hi > lo else 1.0
        level = np.round(255 * (m - lo) / span).astype(int)
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * cell}" height="{T * cell}" '
            f'shape-rendering="crispEdges">',
            f"<title>{escape(f'loss heatmap, min {lo:.3g}, max {hi:.3g}')}</title>",
        ]
        for t in range(T):
            for j in range(W):
                g = level[t, j]
                parts.append(f'<rect x="{j * cell}" y="{t * cell}" width="{cell}" height="{cell}" '
                             f'fill="rgb({g},{g},{g})"/>')
        parts.append("</svg>")
        Path(path).write_text("\n".join(parts) + "\n")


def output_labels(kind: MachineKind) -> list[str]:
    if kind.is_simple:
        return [f"out_{j}" for j in range(kind.output_width)]
    labels = [f"parity_{p.name.lower()}" for p in Parity]
    labels += [f"wordlen_{w}" for w in WORD_LENGTHS]
    labels += [f"stop_{s:g}" for s in STOP_BITS]
    labels += ["baud", "tx"] + [f"data_{b}" for b in range(7, -1, -1)]
    return labels


def heatmap(model, inputs, targets, kind: MachineKind | None = None) -> LossHeatmap:
    """Loss matrix for one sequence (T, W) or a batch (B, T, W) averaged over B."""
    predicted = model.predict(inputs)
    targets = np.asarray(targets)
    if predicted.shape != targets.shape:
        raise WidthMismatch(f"prediction shape {predicted.shape} != target shape {targets.shape}")
    elems = msle_elements(predicted, targets).astype(np.float64)
    matrix = elems.mean(axis=0) if elems.ndim == 3 else elems
    labels = output_labels(kind) if kind is not None and kind.output_width == matrix.shape[1] else []
    return LossHeatmap(matrix, labels)


# -- hello world ----------------------------------------------------------------------


_PARITY_LETTERS = {"n": Parity.NONE, "o": Parity.ODD, "e": Parity.EVEN, "h": Parity.HIGH, "l": Parity.LOW}


@dataclass(frozen=True)
class HelloTarget:
    baud: int
    word_length: int
    parity: Parity
    stop_bits: float

    @property
    def label(self) -> str:
        letter = next(k for k, v in _PARITY_LETTERS.items() if v == self.parity)
        return f"{self.baud},{self.word_length}{letter}{self.stop_bits:g}"


def parse_target(text: str) -> HelloTarget:
    """Parse "115200,8n1" style notation: baud, word length, parity letter, stop bits."""
    m = re.fullmatch(r"\s*(\d+)\s*,\s*([5-8])([noehl])(1|1\.5|2)\s*", text.lower())
    if not m:
        raise RejectedInput(f"bad target {text!r}; expected e.g. 115200,8n1")
    return HelloTarget(int(m.group(1)), int(m.group(2)), _PARITY_LETTERS[m.group(3)], float(m.group(4)))


@dataclass
class HelloReport:
    target: str
    baud: int
    word_length: int
    parity: Parity
    stop_bits: float
    output: str
    frames: list = field(default_factory=list)


def hello_world(model, target: HelloTarget | str, text: str = HELLO_TEXT) -> HelloReport:
    """Program the UART for ``target``, send ``text`` and decode what the model emits.

    Line settings come from the frame at the final step; the baud is left
    unclamped so a model's overshoot shows up as is.
    """
    if isinstance(target, str):
        target = parse_target(target)
    program = hello_world_program(text, target.baud, target.word_length, target.parity, target.stop_bits)
    inputs = np.stack([encoding.encode_uart_command(cmd) for cmd in program])
    raw = np.asarray(model.predict(inputs), dtype=np.float64)
    if raw.shape != (len(program), 22):
        raise WidthMismatch(f"model produced shape {raw.shape}, expected ({len(program)}, 22)")
    frames = [encoding.decode_uart_output(row) for row in raw]
    chars = "".join(chr(f.data) for f in frames if f.tx)
    last = frames[-1]
    return HelloReport(target.label, int(encoding.decode_baud(raw[-1, encoding.BAUD_COLUMN], clamp=False)),
                       last.word_length, last.parity, last.stop_bits, chars, frames)


# -- tables -------------------------------------------------------------------------------


@dataclass
class Table:
    header: list
    rows: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header)
            writer.writerows(self.rows)

    def to_text(self) -> str:
        cells = [self.header] + [[str(c) for c in row] for row in self.rows]
        widths = [max(len(str(r[i])) for r in cells) for i in range(len(self.header))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def fmt(value, spec: str = ".4g") -> str:
    """Format a number, rendering None/NaN (e.g. a mean over no runs) as N/A."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "N/A"
    return format(value, spec)


def _require(items) -> list:
    items = list(items)
    if not items:
        raise ValueError("table needs at least one row")
    return items


def experiment_table(summaries) -> Table:
    """Machine, # Params, Epochs, % Success, Eval Loss (successful runs), Eval Loss (all runs)."""
    rows = [[s.machine, s.n_params, fmt(s.mean_epochs, ".0f"), fmt(100 * s.success_rate, ".0f"),
             fmt(s.mean_eval_loss), fmt(s.mean_eval_loss_all)] for s in _require(summaries)]
    return Table(["Machine", "# Params", "Epochs", "% Success", "Eval Loss", "Eval Loss (all)"], rows)


def mimicry_table(entries) -> Table:
    """Entries are (MimicryReport, epochs, epochs_plus); epochs_plus None renders N/A."""
    rows = []
    for report, epochs, epochs_plus in _require(entries):
        rows.append([report.machine, report.total_outputs, fmt(epochs, "d"),
                     fmt(epochs_plus, "d"), f"{100 * report.accuracy:.4f}%"])
    return Table(["Machine", "# Outputs", "Epochs", "Epochs+", "Accuracy"], rows)


def decomposed_table(records) -> Table:
    """Records is a mapping of output group name to its RunRecord."""
    from devmimic.training import DECOMPOSED_GROUPS

    rows = []
    for name, rec in _require(records.items()):
        encoding_name, size = DECOMPOSED_GROUPS[name][1:]
        val = rec.val_loss[-1] if rec.val_loss else None
        rows.append([name, encoding_name, size, rec.epochs, fmt(val)])
    return Table(["Output", "Encoding", "Output Size", "Epochs", "Val. Loss"], rows)


def hello_table(reports) -> Table:
    rows = [[r.target, r.baud, r.word_length, r.parity.name.capitalize(), f"{r.stop_bits:g}", r.output]
            for r in _require(reports)]
    return Table(["Target", "Baudrate", "Wordlen", "Parity", "Sbits", "Output"], rows)


def statespace_table(kinds=tuple(MachineKind)) -> Table:
    rows = []
    for kind in _require(kinds):
        i, s, o = state_space(kind)
        rows.append([kind.display_name, f"2^{i}", f"2^{s}", f"2^{o}"])
    return Table(["Machine", "Inputs", "Internal States", "Outputs"], rows)


def evaluation_loss(model, dataset: Dataset) -> float:
    return msle_loss(model.predict(dataset.inputs), dataset.targets)
