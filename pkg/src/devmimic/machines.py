"""Deterministic simulators for the six test devices.

Every machine is a latched-input transducer: each command updates internal
state and the machine emits one output frame computed from the new state.

Five "simple" machines share an 8-latch input bank driven by Set/Clear
commands. The serial port is a 16550-style UART that models the transmit
path and the line configuration registers at bit level.

UART register map (offsets)::

    0  THR (write, DLAB=0) / DLL (DLAB=1)
    1  IER (DLAB=0)        / DLM (DLAB=1)
    2  FCR    3  LCR    4  MCR    5  LSR    6  MSR    7  SCR

LCR layout: bits 0-1 word length (00=5 .. 11=8), bit 2 stop bits,
bit 3 parity enable, bit 4 even parity select, bit 5 stick parity,
bit 7 DLAB.

Commands also have a compact integer code used by the dataset generator
and the vectorized simulator:

* simple machines: ``code = action * 8 + index`` (16 codes, action 1 = Set)
* UART: ``code = op << 11 | register << 8 | data`` (4096 codes, op 1 = Write)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

BASE_CLOCK = 115200
N_LATCHES = 8

SIMPLE_INPUT_WIDTH = 9
UART_INPUT_WIDTH = 12
UART_OUTPUT_WIDTH = 22

N_SIMPLE_CODES = 16
N_UART_CODES = 4096

REG_THR = 0
REG_IER = 1
REG_LCR = 3
LCR_DLAB = 0x80


class RejectedInput(ValueError):
    """Raised when a command is malformed or not valid for the machine."""


class MachineKind(enum.Enum):
    EIGHT_BIT = "eightbit"
    SINGLE_DIRECT = "direct"
    SINGLE_INVERT = "invert"
    SIMPLE_XOR = "xor"
    PARITY = "parity"
    SERIAL_PORT = "uart"

    @property
    def is_simple(self) -> bool:
        return self is not MachineKind.SERIAL_PORT

    @property
    def input_width(self) -> int:
        return SIMPLE_INPUT_WIDTH if self.is_simple else UART_INPUT_WIDTH

    @property
    def output_width(self) -> int:
        if self is MachineKind.EIGHT_BIT:
            return 8
        if self is MachineKind.SERIAL_PORT:
            return UART_OUTPUT_WIDTH
        return 1

    @property
    def n_codes(self) -> int:
        return N_SIMPLE_CODES if self.is_simple else N_UART_CODES

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @classmethod
    def parse(cls, text: str) -> "MachineKind":
        """Accept the short value (``xor``), the enum name or the display name."""
        key = text.strip().lower().replace("-", "_")
        for kind in cls:
            if key in (kind.value, kind.name.lower(), kind.display_name.lower()):
                return kind
        raise RejectedInput(f"unknown machine kind {text!r}")


_DISPLAY_NAMES = {
    MachineKind.EIGHT_BIT: "EightBitMachine",
    MachineKind.SINGLE_DIRECT: "SingleDirectMachine",
    MachineKind.SINGLE_INVERT: "SingleInvertMachine",
    MachineKind.SIMPLE_XOR: "SimpleXORMachine",
    MachineKind.PARITY: "ParityMachine",
    MachineKind.SERIAL_PORT: "SerialPortMachine",
}


class Action(enum.IntEnum):
    CLEAR = 0
    SET = 1


class Op(enum.IntEnum):
    READ = 0
    WRITE = 1


class Parity(enum.IntEnum):
    NONE = 0
    ODD = 1
    EVEN = 2
    HIGH = 3
    LOW = 4


WORD_LENGTHS = (5, 6, 7, 8)
STOP_BITS = (1.0, 1.5, 2.0)


class SimpleCommand(NamedTuple):
    action: Action
    index: int

    @classmethod
    def set(cls, index: int) -> "SimpleCommand":
        return cls(Action.SET, index)

    @classmethod
    def clear(cls, index: int) -> "SimpleCommand":
        return cls(Action.CLEAR, index)

    @property
    def code(self) -> int:
        return int(self.action) * N_LATCHES + self.index

    @classmethod
    def from_code(cls, code: int) -> "SimpleCommand":
        return cls(Action(code >> 3), code & 7)


class UartCommand(NamedTuple):
    op: Op
    register: int
    data: int = 0

    @classmethod
    def write(cls, register: int, data: int) -> "UartCommand":
        return cls(Op.WRITE, register, data)

    @classmethod
    def read(cls, register: int) -> "UartCommand":
        return cls(Op.READ, register, 0)

    @property
    def code(self) -> int:
        return int(self.op) << 11 | self.register << 8 | self.data

    @classmethod
    def from_code(cls, code: int) -> "UartCommand":
        return cls(Op(code >> 11), (code >> 8) & 7, code & 0xFF)


Command = Union[SimpleCommand, UartCommand]

SimpleState = tuple  # 8 ints in {0, 1}
SIMPLE_RESET: SimpleState = (0,) * N_LATCHES


@dataclass(frozen=True)
class UartState:
    registers: tuple = (0,) * 8
    dll: int = 0
    dlm: int = 0

    @property
    def lcr(self) -> int:
        return self.registers[REG_LCR]

    @property
    def dlab(self) -> bool:
        return bool(self.lcr & LCR_DLAB)

    @property
    def divisor(self) -> int:
        return self.dlm << 8 | self.dll


@dataclass(frozen=True)
class UartOutputFrame:
    word_length: int = 5
    baud: int = 0
    stop_bits: float = 1.0
    parity: Parity = Parity.NONE
    tx: bool = False
    data: int = 0


def _check_simple(cmd) -> None:
    if not isinstance(cmd, SimpleCommand):
        raise RejectedInput(f"expected SimpleCommand, got {type(cmd).__name__}")
    if cmd.action not in (Action.SET, Action.CLEAR):
        raise RejectedInput(f"bad action {cmd.action!r}")
    if not 0 <= cmd.index < N_LATCHES:
        raise RejectedInput(f"latch index {cmd.index} out of range [0, 7]")


def _check_uart(cmd) -> None:
    if not isinstance(cmd, UartCommand):
        raise RejectedInput(f"expected UartCommand, got {type(cmd).__name__}")
    if cmd.op not in (Op.READ, Op.WRITE):
        raise RejectedInput(f"bad op {cmd.op!r}")
    if not 0 <= cmd.register < 8:
        raise RejectedInput(f"register {cmd.register} out of range [0, 7]")
    if not 0 <= cmd.data <= 0xFF:
        raise RejectedInput(f"data {cmd.data} out of range [0, 255]")


def simple_output(kind: MachineKind, latches: Sequence[int]) -> tuple:
    if kind is MachineKind.EIGHT_BIT:
        return tuple(latches)
    if kind is MachineKind.SINGLE_DIRECT:
        return (latches[0],)
    if kind is MachineKind.SINGLE_INVERT:
        return (1 - latches[0],)
    if kind is MachineKind.SIMPLE_XOR:
        return (latches[0] ^ latches[1],)
    if kind is MachineKind.PARITY:
        acc = 0
        for bit in latches:
            acc ^= bit
        return (acc,)
    raise RejectedInput(f"{kind.display_name} is not a simple machine")


def simple_step(kind: MachineKind, state: SimpleState, cmd: SimpleCommand) -> tuple[SimpleState, tuple]:
    """Apply one Set/Clear command; the output reflects the updated latches."""
    if not kind.is_simple:
        raise RejectedInput(f"{kind.display_name} is not a simple machine")
    _check_simple(cmd)
    latches = list(state)
    latches[cmd.index] = int(cmd.action)
    new_state = tuple(latches)
    return new_state, simple_output(kind, new_state)


def decode_lcr(lcr: int) -> tuple[int, float, Parity]:
    """Word length, stop bits and parity for a line control register value."""
    word_length = WORD_LENGTHS[lcr & 0x03]
    if lcr & 0x04:
        stop_bits = 1.5 if word_length == 5 else 2.0
    else:
        stop_bits = 1.0
    if not lcr & 0x08:
        parity = Parity.NONE
    elif lcr & 0x20:
        # stick parity: EPS=0 forces the parity bit to mark (1), EPS=1 to space (0)
        parity = Parity.LOW if lcr & 0x10 else Parity.HIGH
    else:
        parity = Parity.EVEN if lcr & 0x10 else Parity.ODD
    return word_length, stop_bits, parity


def baud_for_divisor(divisor: int) -> int:
    return 0 if divisor == 0 else BASE_CLOCK // divisor


def uart_frame(state: UartState, tx: bool = False, data: int = 0) -> UartOutputFrame:
    word_length, stop_bits, parity = decode_lcr(state.lcr)
    return UartOutputFrame(
        word_length=word_length,
        baud=baud_for_divisor(state.divisor),
        stop_bits=stop_bits,
        parity=parity,
        tx=tx,
        data=data if tx else 0,
    )


def uart_step(state: UartState, cmd: UartCommand) -> tuple[UartState, UartOutputFrame]:
    """Apply one register access and report the full line configuration."""
    _check_uart(cmd)
    if cmd.op is Op.READ:
        return state, uart_frame(state)

    tx = False
    registers = list(state.registers)
    dll, dlm = state.dll, state.dlm
    if cmd.register == REG_THR and state.dlab:
        dll = cmd.data
    elif cmd.register == REG_IER and state.dlab:
        dlm = cmd.data
    else:
        registers[cmd.register] = cmd.data
        tx = cmd.register == REG_THR
    new_state = UartState(tuple(registers), dll, dlm)
    return new_state, uart_frame(new_state, tx, cmd.data)


def reset_state(kind: MachineKind):
    return SIMPLE_RESET if kind.is_simple else UartState()


def step(kind: MachineKind, state, cmd: Command):
    if kind.is_simple:
        return simple_step(kind, state, cmd)
    return uart_step(state, cmd)


def run_sequence(kind: MachineKind, cmds: Sequence[Command]) -> list:
    """Run ``cmds`` from reset and return one output per command."""
    state = reset_state(kind)
    outputs = []
    for cmd in cmds:
        state, out = step(kind, state, cmd)
        outputs.append(out)
    return outputs


# Table of (input, output, internal) state-space exponents of two. Input is
# the number of binary input features; the UART output/internal figures
# count configuration plus divisor and data bits.
_STATE_SPACE = {
    MachineKind.EIGHT_BIT: (9, 8, 8),
    MachineKind.SINGLE_DIRECT: (9, 1, 1),
    MachineKind.SINGLE_INVERT: (9, 1, 1),
    MachineKind.SIMPLE_XOR: (9, 1, 2),
    MachineKind.PARITY: (9, 1, 8),
    MachineKind.SERIAL_PORT: (12, 37, 37),
}


def state_space(kind: MachineKind) -> tuple[int, int, int]:
    """Approximate (input, output, internal) state-space magnitudes as exponents of 2."""
    return _STATE_SPACE[kind]


# -- vectorized simulation over integer command codes -------------------------


@dataclass
class UartTrace:
    """Symbolic UART outputs for a batch of sequences, each field shaped (N, T).

    ``parity``, ``word_length`` and ``stop_bits`` hold category indices into
    :class:`Parity`, :data:`WORD_LENGTHS` and :data:`STOP_BITS`.
    """

    parity: np.ndarray
    word_length: np.ndarray
    stop_bits: np.ndarray
    baud: np.ndarray
    tx: np.ndarray
    data: np.ndarray

    def frame(self, n: int, t: int) -> UartOutputFrame:
        return UartOutputFrame(
            word_length=WORD_LENGTHS[self.word_length[n, t]],
            baud=int(self.baud[n, t]),
            stop_bits=STOP_BITS[self.stop_bits[n, t]],
            parity=Parity(int(self.parity[n, t])),
            tx=bool(self.tx[n, t]),
            data=int(self.data[n, t]),
        )


def simulate_simple_codes(kind: MachineKind, codes: np.ndarray) -> np.ndarray:
    """Vectorized simple-machine run; returns output bits shaped (N, T, width)."""
    codes = np.asarray(codes)
    n, t_len = codes.shape
    latches = np.zeros((n, N_LATCHES), dtype=np.uint8)
    out = np.empty((n, t_len, kind.output_width), dtype=np.uint8)
    rows = np.arange(n)
    for t in range(t_len):
        c = codes[:, t]
        latches[rows, c & 7] = c >> 3
        if kind is MachineKind.EIGHT_BIT:
            out[:, t] = latches
        elif kind is MachineKind.SINGLE_DIRECT:
            out[:, t, 0] = latches[:, 0]
        elif kind is MachineKind.SINGLE_INVERT:
            out[:, t, 0] = 1 - latches[:, 0]
        elif kind is MachineKind.SIMPLE_XOR:
            out[:, t, 0] = latches[:, 0] ^ latches[:, 1]
        else:
            out[:, t, 0] = np.bitwise_xor.reduce(latches, axis=1)
    return out


def simulate_uart_codes(codes: np.ndarray) -> UartTrace:
    """Vectorized UART run over (N, T) command codes."""
    codes = np.asarray(codes, dtype=np.int64)
    n, t_len = codes.shape
    lcr = np.zeros(n, dtype=np.int64)
    dll = np.zeros(n, dtype=np.int64)
    dlm = np.zeros(n, dtype=np.int64)
    fields = {name: np.zeros((n, t_len), dtype=np.int64)
              for name in ("parity", "word_length", "stop_bits", "baud", "tx", "data")}
    for t in range(t_len):
        c = codes[:, t]
        write = (c >> 11) == 1
        reg = (c >> 8) & 7
        data = c & 0xFF
        dlab = (lcr & LCR_DLAB) != 0
        dll = np.where(write & (reg == REG_THR) & dlab, data, dll)
        dlm = np.where(write & (reg == REG_IER) & dlab, data, dlm)
        lcr = np.where(write & (reg == REG_LCR), data, lcr)
        tx = write & (reg == REG_THR) & ~dlab

        divisor = dlm << 8 | dll
        fields["baud"][:, t] = np.where(divisor == 0, 0, BASE_CLOCK // np.maximum(divisor, 1))
        fields["word_length"][:, t] = lcr & 3
        stop2 = (lcr & 4) != 0
        fields["stop_bits"][:, t] = np.where(stop2, np.where((lcr & 3) == 0, 1, 2), 0)
        pen = (lcr & 8) != 0
        eps = (lcr & 0x10) != 0
        stick = (lcr & 0x20) != 0
        parity = np.where(stick, np.where(eps, Parity.LOW, Parity.HIGH),
                          np.where(eps, Parity.EVEN, Parity.ODD))
        fields["parity"][:, t] = np.where(pen, parity, Parity.NONE)
        fields["tx"][:, t] = tx
        fields["data"][:, t] = np.where(tx, data, 0)
    return UartTrace(**fields)


def commands_from_codes(kind: MachineKind, codes: Sequence[int]) -> list:
    factory = SimpleCommand.from_code if kind.is_simple else UartCommand.from_code
    return [factory(int(c)) for c in codes]


def hello_world_program(text: str, baud: int, word_length: int, parity: Parity,
                        stop_bits: float) -> list[UartCommand]:
    """Program divisor and line settings, then write each character to THR."""
    divisor = divisor_for_baud(baud)
    if word_length not in WORD_LENGTHS:
        raise RejectedInput(f"word length {word_length} not in {WORD_LENGTHS}")
    lcr = WORD_LENGTHS.index(word_length)
    if stop_bits == 1.5 and word_length != 5:
        raise RejectedInput("1.5 stop bits requires a 5-bit word length")
    if stop_bits not in STOP_BITS:
        raise RejectedInput(f"stop bits {stop_bits} not in {STOP_BITS}")
    if stop_bits != 1.0:
        lcr |= 0x04
    lcr |= {
        Parity.NONE: 0x00,
        Parity.ODD: 0x08,
        Parity.EVEN: 0x18,
        Parity.HIGH: 0x28,
        Parity.LOW: 0x38,
    }[Parity(parity)]
    program = [
        UartCommand.write(REG_LCR, LCR_DLAB),
        UartCommand.write(REG_THR, divisor & 0xFF),
        UartCommand.write(REG_IER, divisor >> 8),
        UartCommand.write(REG_LCR, lcr),
    ]
    for ch in text.encode("latin-1"):
        program.append(UartCommand.write(REG_THR, ch))
    return program


def divisor_for_baud(baud: int) -> int:
    """Smallest divisor producing exactly ``baud``; raises if none does."""
    if baud == 0:
        return 0
    if not 0 < baud <= BASE_CLOCK:
        raise RejectedInput(f"baud {baud} outside (0, {BASE_CLOCK}]")
    divisor = BASE_CLOCK // (baud + 1) + 1
    if divisor <= 0xFFFF and BASE_CLOCK // divisor == baud:
        return divisor
    raise RejectedInput(f"baud {baud} is not achievable with a 16-bit divisor")
