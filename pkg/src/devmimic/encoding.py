"""Float vector encodings for commands and device outputs.

Simple command (9 values)::

    [set?, onehot(index) x 8]

UART command (12 values)::

    [write?, register bits (3, MSB first), data bits (8, MSB first; zero on read)]

UART output frame (22 values)::

    [parity onehot x5 (None, Odd, Even, High, Low),
     word length onehot x4 (5, 6, 7, 8),
     stop bits onehot x3 (1, 1.5, 2),
     baud / 115200,
     tx flag,
     data bits x8 (MSB first)]

Decoding is total over real-valued network output: one-hot groups take the
argmax (lowest index on ties), flags and bits threshold at >= 0.5.
"""

from __future__ import annotations

import numpy as np

from devmimic.machines import (
    BASE_CLOCK,
    N_LATCHES,
    STOP_BITS,
    WORD_LENGTHS,
    Action,
    MachineKind,
    Op,
    Parity,
    RejectedInput,
    SimpleCommand,
    UartCommand,
    UartOutputFrame,
    UartTrace,
)

DTYPE = np.float32

UART_GROUPS = {
    "parity": slice(0, 5),
    "word_length": slice(5, 9),
    "stop_bits": slice(9, 12),
    "baud": slice(12, 13),
    "tx": slice(13, 14),
    "data": slice(14, 22),
}
BAUD_COLUMN = 12
TX_COLUMN = 13

_BITS8 = np.array([7, 6, 5, 4, 3, 2, 1, 0])
_BITS3 = np.array([2, 1, 0])


def _bits(value, shifts: np.ndarray) -> np.ndarray:
    return ((np.asarray(value)[..., None] >> shifts) & 1).astype(DTYPE)


def _from_bits(bits: np.ndarray) -> np.ndarray:
    weights = 1 << np.arange(bits.shape[-1] - 1, -1, -1)
    return (bits.astype(np.int64) * weights).sum(axis=-1)


def encode_simple_command(cmd: SimpleCommand) -> np.ndarray:
    vec = np.zeros(1 + N_LATCHES, dtype=DTYPE)
    vec[0] = 1.0 if cmd.action == Action.SET else 0.0
    vec[1 + cmd.index] = 1.0
    return vec


def encode_uart_command(cmd: UartCommand) -> np.ndarray:
    vec = np.zeros(12, dtype=DTYPE)
    vec[0] = 1.0 if cmd.op == Op.WRITE else 0.0
    vec[1:4] = _bits(cmd.register, _BITS3)
    if cmd.op == Op.WRITE:
        vec[4:12] = _bits(cmd.data, _BITS8)
    return vec


def encode_command(cmd) -> np.ndarray:
    if isinstance(cmd, SimpleCommand):
        return encode_simple_command(cmd)
    return encode_uart_command(cmd)


def decode_simple_command(vec) -> SimpleCommand:
    vec = np.asarray(vec)
    return SimpleCommand(Action(int(vec[0] >= 0.5)), int(np.argmax(vec[1:])))


def decode_uart_command(vec) -> UartCommand:
    """Inverse of :func:`encode_uart_command`; read data comes back as 0."""
    vec = np.asarray(vec)
    bits = (vec >= 0.5).astype(np.int64)
    return UartCommand(Op(int(bits[0])), int(_from_bits(bits[1:4])), int(_from_bits(bits[4:12])))


def encode_uart_output(frame: UartOutputFrame) -> np.ndarray:
    if not 0 <= frame.baud <= BASE_CLOCK:
        raise RejectedInput(f"baud {frame.baud} outside [0, {BASE_CLOCK}]")
    vec = np.zeros(22, dtype=DTYPE)
    vec[int(frame.parity)] = 1.0
    vec[5 + WORD_LENGTHS.index(frame.word_length)] = 1.0
    vec[9 + STOP_BITS.index(frame.stop_bits)] = 1.0
    vec[BAUD_COLUMN] = frame.baud / BASE_CLOCK
    vec[TX_COLUMN] = 1.0 if frame.tx else 0.0
    vec[14:22] = _bits(frame.data, _BITS8)
    return vec


def encode_simple_output(bits) -> np.ndarray:
    return np.asarray(bits, dtype=DTYPE)


def decode_baud(raw, clamp: bool = True):
    """Baud from its scaled encoding, rounded half-up to the nearest integer.

    With ``clamp=False`` the value is left unbounded so that overshoot
    (e.g. 115285) stays visible in reports.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if clamp:
        raw = np.clip(raw, 0.0, 1.0)
    return np.floor(raw * BASE_CLOCK + 0.5).astype(np.int64)


def decode_uart_output(raw) -> UartOutputFrame:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (22,):
        raise RejectedInput(f"expected 22 values, got shape {raw.shape}")
    tx = bool(raw[TX_COLUMN] >= 0.5)
    data = int(_from_bits(raw[14:22] >= 0.5))
    return UartOutputFrame(
        word_length=WORD_LENGTHS[int(np.argmax(raw[UART_GROUPS["word_length"]]))],
        baud=int(decode_baud(raw[BAUD_COLUMN])),
        stop_bits=STOP_BITS[int(np.argmax(raw[UART_GROUPS["stop_bits"]]))],
        parity=Parity(int(np.argmax(raw[UART_GROUPS["parity"]]))),
        tx=tx,
        data=data if tx else 0,
    )


def decode_simple_output(raw, width: int | None = None) -> np.ndarray:
    raw = np.asarray(raw)
    if width is not None and raw.shape[-1] != width:
        raise RejectedInput(f"expected width {width}, got {raw.shape[-1]}")
    return (raw >= 0.5).astype(np.int64)


# -- batch encoders over integer command codes -------------------------------


def encode_simple_codes(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros(codes.shape + (1 + N_LATCHES,), dtype=DTYPE)
    out[..., 0] = codes >> 3
    np.put_along_axis(out, (1 + (codes & 7))[..., None], 1.0, axis=-1)
    return out


def encode_uart_codes(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    write = codes >> 11
    out = np.empty(codes.shape + (12,), dtype=DTYPE)
    out[..., 0] = write
    out[..., 1:4] = _bits((codes >> 8) & 7, _BITS3)
    out[..., 4:12] = _bits(np.where(write == 1, codes & 0xFF, 0), _BITS8)
    return out


def encode_codes(kind: MachineKind, codes: np.ndarray) -> np.ndarray:
    return encode_simple_codes(codes) if kind.is_simple else encode_uart_codes(codes)


def encode_uart_trace(trace: UartTrace) -> np.ndarray:
    shape = trace.baud.shape
    out = np.zeros(shape + (22,), dtype=DTYPE)
    np.put_along_axis(out, trace.parity[..., None], 1.0, axis=-1)
    np.put_along_axis(out, 5 + trace.word_length[..., None], 1.0, axis=-1)
    np.put_along_axis(out, 9 + trace.stop_bits[..., None], 1.0, axis=-1)
    out[..., BAUD_COLUMN] = trace.baud / BASE_CLOCK
    out[..., TX_COLUMN] = trace.tx
    out[..., 14:22] = _bits(trace.data, _BITS8)
    return out


def _onehot_argmax(block: np.ndarray) -> np.ndarray:
    idx = np.argmax(block, axis=-1)
    return (np.arange(block.shape[-1]) == idx[..., None]).astype(np.int64)


def decoded_values(kind: MachineKind, raw: np.ndarray) -> np.ndarray:
    """Per-value decoded symbols with the same trailing width as ``raw``.

    One-hot groups are replaced by the one-hot of their argmax, flags and
    bits by their 0.5 threshold, and the UART baud column by the unclamped
    rounded integer rate. Comparing two such arrays elementwise gives the
    per-value mimicry count.
    """
    raw = np.asarray(raw)
    if kind.is_simple:
        return decode_simple_output(raw, kind.output_width)
    if raw.shape[-1] != 22:
        raise RejectedInput(f"expected width 22, got {raw.shape[-1]}")
    out = (raw >= 0.5).astype(np.int64)
    for name in ("parity", "word_length", "stop_bits"):
        out[..., UART_GROUPS[name]] = _onehot_argmax(raw[..., UART_GROUPS[name]])
    out[..., BAUD_COLUMN] = decode_baud(raw[..., BAUD_COLUMN], clamp=False)
    return out
