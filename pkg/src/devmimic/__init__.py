"""Learn functional models of black-box peripheral devices with stacked GRU networks."""

from devmimic.machines import (
    MachineKind,
    SimpleCommand,
    UartCommand,
    UartOutputFrame,
    UartState,
    run_sequence,
    simple_step,
    state_space,
    uart_step,
)

__version__ = "0.1.0"

__all__ = [
    "MachineKind",
    "SimpleCommand",
    "UartCommand",
    "UartOutputFrame",
    "UartState",
    "run_sequence",
    "simple_step",
    "state_space",
    "uart_step",
]
