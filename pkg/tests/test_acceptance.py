"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the session summary prints under
"acceptance criteria". The desk-scale learning runs (criteria 5, 6 and 9)
take several minutes in total on one CPU core.
"""

import contextlib
import shutil
import time

import numpy as np
import pytest

from devmimic import cli, encoding
from devmimic import dataset as D
from devmimic import evaluation as E
from devmimic.machines import (
    BASE_CLOCK,
    STOP_BITS,
    WORD_LENGTHS,
    MachineKind,
    Parity,
    SimpleCommand,
    UartCommand,
    UartOutputFrame,
    commands_from_codes,
    hello_world_program,
    run_sequence,
    simple_step,
    simulate_uart_codes,
    state_space,
)
from devmimic.rnn import GRUNetwork, NetworkConfig, msle_loss
from devmimic.training import (
    DECOMPOSED_GROUPS,
    CompositeModel,
    StopReason,
    Trainer,
    TrainingConfig,
    decomposed_datasets,
    network_config_for,
)

DESK_SEEDS = range(10)
DATA_SEED = 0
# 256 desk sequences at batch 32 give only 8 updates per epoch; batch 4 restores
# an update count per epoch closer to the 4096-sequence setting
DESK_BATCH = 4


@contextlib.contextmanager
def criterion(lines, number, title):
    detail = {"text": ""}
    passed = False
    try:
        yield detail
        passed = True
    finally:
        lines.append((number, title, passed, detail["text"] or ("ok" if passed else "error")))


# -- 1 -------------------------------------------------------------------------------


def _truth_table(kind, state_bits, code):
    action, index = code >> 3, code & 7
    new = state_bits | (1 << index) if action else state_bits & ~(1 << index)
    bit = lambda i: (new >> i) & 1  # noqa: E731
    if kind is MachineKind.EIGHT_BIT:
        return tuple(bit(i) for i in range(8))
    if kind is MachineKind.SINGLE_DIRECT:
        return (bit(0),)
    if kind is MachineKind.SINGLE_INVERT:
        return (bit(0) ^ 1,)
    if kind is MachineKind.SIMPLE_XOR:
        return (bit(0) ^ bit(1),)
    return (bin(new).count("1") & 1,)


def test_c01_simple_machines_exhaustive(acceptance_lines):
    with criterion(acceptance_lines, 1, "simple machines vs truth table") as d:
        started = time.perf_counter()
        checked = mismatches = 0
        for kind in (k for k in MachineKind if k.is_simple):
            for s in range(256):
                state = tuple((s >> i) & 1 for i in range(8))
                for code in range(16):
                    _, out = simple_step(kind, state, SimpleCommand.from_code(code))
                    mismatches += out != _truth_table(kind, s, code)
                    checked += 1
        elapsed = time.perf_counter() - started
        d["text"] = f"{checked} cases, {mismatches} mismatches, {elapsed:.3f}s"
        assert mismatches == 0 and checked == 5 * 256 * 16
        assert elapsed < 1.0


# -- 2 -------------------------------------------------------------------------------


def _ffill_last(mask, values, default):
    """values at the most recent True of mask at or before each step, else default."""
    n, t = mask.shape
    idx = np.where(mask, np.arange(t), -1)
    idx = np.maximum.accumulate(idx, axis=1)
    picked = np.take_along_axis(values, np.maximum(idx, 0), axis=1)
    return np.where(idx >= 0, picked, default)


def _uart_codes(n, t, rng):
    codes = rng.integers(0, 4096, size=(n, t))
    focus = rng.random((n, t)) < 0.6
    regs = rng.choice([0, 1, 3, 3], size=(n, t))
    data = rng.integers(0, 256, size=(n, t))
    # half the LCR writes set DLAB so divisor writes are common
    data = np.where((regs == 3) & (rng.random((n, t)) < 0.5), data | 0x80, data)
    return np.where(focus, (1 << 11) | (regs << 8) | data, codes)


def test_c02_uart_conformance(acceptance_lines):
    with criterion(acceptance_lines, 2, "UART properties and hello targets") as d:
        rng = np.random.default_rng(20240)
        n, t = 100_000, 12
        codes = _uart_codes(n, t, rng)
        trace = simulate_uart_codes(codes)
        write = (codes >> 11) == 1
        reg = (codes >> 8) & 7
        data = codes & 0xFF

        lcr_now = _ffill_last(write & (reg == 3), data, 0)
        lcr_before = np.concatenate([np.zeros((n, 1), dtype=lcr_now.dtype), lcr_now[:, :-1]], axis=1)
        dlab = (lcr_before & 0x80) != 0
        dll = _ffill_last(write & (reg == 0) & dlab, data, 0)
        dlm = _ffill_last(write & (reg == 1) & dlab, data, 0)
        divisor = dlm * 256 + dll

        violations = {}
        expect_tx = write & (reg == 0) & ~dlab
        violations["dlab_shadowing"] = int(np.sum(trace.tx != expect_tx)
                                           + np.sum(np.where(expect_tx, trace.data != data, trace.data != 0)))
        expect_baud = np.where(divisor == 0, 0, BASE_CLOCK // np.maximum(divisor, 1))
        violations["baud"] = int(np.sum(trace.baud != expect_baud))
        wl = np.array(WORD_LENGTHS)[trace.word_length]
        stop = np.array(STOP_BITS)[trace.stop_bits]
        expect_stop = np.where((lcr_now & 4) == 0, 1.0, np.where((lcr_now & 3) == 0, 1.5, 2.0))
        violations["stop_bits"] = int(np.sum(stop != expect_stop) + np.sum(wl != 5 + (lcr_now & 3)))
        reads = ~write
        violations["read_tx"] = int(np.sum(trace.tx[reads]))
        prev = {f: np.concatenate([np.zeros((n, 1), dtype=np.int64), getattr(trace, f)[:, :-1]], axis=1)
                for f in ("parity", "word_length", "stop_bits", "baud")}
        violations["read_changes_state"] = int(sum(np.sum(getattr(trace, f)[reads] != prev[f][reads])
                                                   for f in prev))
        # the scalar step function agrees with the batch simulator on a subset
        scalar = 0
        for i in range(2000):
            outs = run_sequence(MachineKind.SERIAL_PORT, commands_from_codes(MachineKind.SERIAL_PORT, codes[i]))
            scalar += sum(outs[j] != trace.frame(i, j) for j in range(t))
        violations["scalar_vs_batch"] = scalar

        truth = E.GroundTruthModel(MachineKind.SERIAL_PORT)
        rows = [E.hello_world(truth, target) for target in ("115200,8n1", "9600,7e1", "2400,7o2")]
        got = [(r.baud, r.word_length, r.parity, r.stop_bits, r.output) for r in rows]
        want = [(115200, 8, Parity.NONE, 1.0, "Hello World!"), (9600, 7, Parity.EVEN, 1.0, "Hello World!"),
                (2400, 7, Parity.ODD, 2.0, "Hello World!")]
        divisors = [hello_world_program("x", b, 7, Parity.NONE, 1.0)[1].data for b in (9600, 2400)]
        d["text"] = f"{n} sequences x {t}, violations {violations}, hello ok={got == want}, divisors {divisors}"
        assert not any(violations.values())
        assert got == want and divisors == [12, 48]


# -- 3 -------------------------------------------------------------------------------


def _fd_check(cfg, length, backend, rng, h=1e-3):
    """Worst relative error of BPTT against the 5-point central difference stencil."""
    net = GRUNetwork(cfg, dtype=np.float64, backend=backend)
    x = rng.random((2, length, cfg.input_width))
    target = rng.random((2, length, cfg.output_width))
    _, grads = net.loss_and_grads(x, target)
    worst = 0.0
    for name, block in net.params.items():
        flat = block.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            loss = []
            for k in (2, 1, -1, -2):
                flat[i] = keep + k * h
                loss.append(msle_loss(net.predict(x), target))
            flat[i] = keep
            fd = (-loss[0] + 8 * loss[1] - 8 * loss[2] + loss[3]) / (12 * h)
            bp = grads[name].reshape(-1)[i]
            worst = max(worst, abs(bp - fd) / max(abs(bp), abs(fd), 1e-7))
    return worst


def test_c03_gradient_check(acceptance_lines):
    with criterion(acceptance_lines, 3, "BPTT vs central differences (float64)") as d:
        rng = np.random.default_rng(3)
        worst = {}
        for backend in ("numpy", "numba"):
            for widths in ((3, 4, 2), (6, 6, 6), (2, 5, 1)):
                for layers in (1, 4):
                    for length in (1, 2, 5):
                        i, hdim, o = widths
                        cfg = NetworkConfig(i, o, layers, hdim, seed=length + 10 * layers)
                        worst[(backend, widths, layers, length)] = _fd_check(cfg, length, backend, rng)
        top = max(worst.values())
        d["text"] = f"{len(worst)} configurations, max relative error {top:.2e}"
        assert top < 1e-4


# -- 4 -------------------------------------------------------------------------------


def test_c04_round_trip(acceptance_lines):
    with criterion(acceptance_lines, 4, "encode/decode round trip") as d:
        rng = np.random.default_rng(4)
        n = 100_000
        divisors = rng.integers(0, 65536, size=n)
        bauds = np.where(divisors == 0, 0, BASE_CLOCK // np.maximum(divisors, 1))
        tx = rng.random(n) < 0.5
        data = np.where(tx, rng.integers(0, 256, size=n), 0)
        parity = rng.integers(0, 5, size=n)
        wl = rng.integers(0, 4, size=n)
        stop = rng.integers(0, 3, size=n)
        frame_failures = 0
        for k in range(n):
            frame = UartOutputFrame(WORD_LENGTHS[wl[k]], int(bauds[k]), STOP_BITS[stop[k]], Parity(int(parity[k])),
                                    bool(tx[k]), int(data[k]))
            frame_failures += encoding.decode_uart_output(encoding.encode_uart_output(frame)) != frame
        cmd_failures = 0
        for code in rng.integers(0, 4096, size=n):
            cmd = UartCommand.from_code(int(code))
            if cmd.op == 0:
                cmd = UartCommand.read(cmd.register)
            cmd_failures += encoding.decode_uart_command(encoding.encode_uart_command(cmd)) != cmd
        for code in rng.integers(0, 16, size=n):
            cmd = SimpleCommand.from_code(int(code))
            cmd_failures += encoding.decode_simple_command(encoding.encode_simple_command(cmd)) != cmd
        d["text"] = f"{n} frames, {2 * n} commands, failures {frame_failures + cmd_failures}"
        assert frame_failures == 0 and cmd_failures == 0


# -- 5 and 6: desk-scale learning -----------------------------------------------------------


_DESK_CACHE = {}


def _desk_run(kind, seed, budget, datasets):
    """Stopping-rule training, then continuation to exact mimicry, within one epoch budget."""
    net = GRUNetwork(network_config_for(kind, seed))
    trainer = Trainer(net, datasets, TrainingConfig(max_epochs=budget, batch_size=DESK_BATCH))
    record = trainer.fit()
    result = {"stop_epoch": record.epochs, "converged": record.stop_reason is StopReason.CONVERGED,
              "val_loss": record.val_loss[-1], "accuracy": record.eval_accuracy, "total_epochs": record.epochs}
    if result["converged"] and record.eval_accuracy < 1.0 and record.epochs < budget:
        trainer.config = trainer.config.updated(mimicry_budget=budget - record.epochs)
        extra = trainer.fit_mimicry()
        result["accuracy"] = extra.best_accuracy
        result["total_epochs"] += extra.epochs_plus
    result["success"] = result["converged"] and result["accuracy"] == 1.0
    return result


def desk_results(kind, budget):
    key = (kind, budget)
    if key not in _DESK_CACHE:
        datasets = D.generate_preset(kind, "desk", DATA_SEED)
        _DESK_CACHE[key] = [_desk_run(kind, seed, budget, datasets) for seed in DESK_SEEDS]
    return _DESK_CACHE[key]


@pytest.mark.parametrize("kind, budget, needed", [
    (MachineKind.SINGLE_INVERT, 300, 8),
    (MachineKind.SIMPLE_XOR, 800, 7),
])
def test_c05_desk_learning(acceptance_lines, kind, budget, needed):
    with criterion(acceptance_lines, 5, f"desk learning {kind.display_name}") as d:
        results = desk_results(kind, budget)
        wins = sum(r["success"] for r in results)
        d["text"] = (f"{wins}/10 seeds reach val MSLE < 0.001 and 100% eval accuracy within {budget} epochs "
                     f"(need {needed}); epochs used {[r['total_epochs'] for r in results]}")
        assert wins >= needed


def test_c06_difficulty_ordering(acceptance_lines):
    with criterion(acceptance_lines, 6, "Parity harder than SimpleXOR") as d:
        xor = desk_results(MachineKind.SIMPLE_XOR, 800)
        parity = desk_results(MachineKind.PARITY, 800)
        med_x = float(np.median([r["stop_epoch"] for r in xor]))
        med_p = float(np.median([r["stop_epoch"] for r in parity]))
        ok_x = sum(r["converged"] for r in xor)
        ok_p = sum(r["converged"] for r in parity)
        d["text"] = (f"median stop epoch Parity {med_p:g} vs SimpleXOR {med_x:g}; "
                     f"converged Parity {ok_p}/10 vs SimpleXOR {ok_x}/10 (budget 800, unconverged count as 800)")
        assert med_p > med_x or ok_p < ok_x


# -- 7 -------------------------------------------------------------------------------


def _scan_stop(series, eps=0.001, runs=20, cap=4096):
    """Independent oracle: first index whose run of losses below eps has length runs + 1."""
    below = np.asarray(series[:cap]) < eps
    # run length so far = position minus position of the last non-qualifying epoch
    last_break = np.maximum.accumulate(np.where(~below, np.arange(len(below)), -1))
    length = np.arange(len(below)) - last_break
    hits = np.flatnonzero(below & (length >= runs + 1))
    return int(hits[0]) + 1 if hits.size else min(len(below), cap)


class _ScriptedTrainer(Trainer):
    def __init__(self, series):
        ds = D.generate_preset(MachineKind.SINGLE_DIRECT, {s: (1, 1) for s in D.Split}, 0)
        super().__init__(GRUNetwork(NetworkConfig(9, 1, hidden_layers=1)), ds, TrainingConfig())
        self._series = iter(series)

    def run_epoch(self, rng):
        return 0.0

    def validate(self):
        return next(self._series), 0.0


def _synthetic_series(rng, k):
    length = 5000
    style = k % 4
    if style == 0:  # noisy decay crossing the threshold
        base = np.exp(-np.arange(length) / rng.uniform(50, 2000)) * 0.05
        return list(base * np.exp(rng.normal(0, 0.8, length)))
    if style == 1:  # runs of length 19..22 around the boundary
        out = []
        while len(out) < length:
            out += [0.0005] * int(rng.integers(18, 23)) + [0.002] * int(rng.integers(1, 3))
        return out[:length]
    if style == 2:  # never converges
        return list(rng.uniform(0.001, 0.5, length))
    vals = rng.choice([0.0009999, 0.001, 0.0010001, 0.0], size=length, p=[0.45, 0.1, 0.05, 0.4])
    return list(vals)


def test_c07_stopping_rule(acceptance_lines):
    with criterion(acceptance_lines, 7, "stopping rule vs independent scan") as d:
        rng = np.random.default_rng(7)
        mismatches, stops = 0, []
        for k in range(100):
            series = _synthetic_series(rng, k)
            record = _ScriptedTrainer(series).fit()
            expected = _scan_stop(series)
            stops.append(record.epochs)
            mismatches += record.epochs != expected
        d["text"] = (f"100 series, {mismatches} mismatches, stop epochs {min(stops)}..{max(stops)}, "
                     f"{stops.count(4096)} hit the 4096 cap")
        assert mismatches == 0


# -- 8 -------------------------------------------------------------------------------


def test_c08_mimicry_totals(acceptance_lines):
    with criterion(acceptance_lines, 8, "ground-truth mimicry totals at paper shape") as d:
        n, t = D.PRESETS["paper"][D.Split.EVALUATION]
        got = {}
        for kind in (MachineKind.EIGHT_BIT, MachineKind.PARITY, MachineKind.SERIAL_PORT):
            ds = D.generate(kind, n, t, DATA_SEED, D.Split.EVALUATION)
            report = E.mimicry(E.GroundTruthModel(kind), ds)
            got[kind.display_name] = (report.total_outputs, report.accuracy)
        d["text"] = ", ".join(f"{k} {v[0]} at {100 * v[1]:g}%" for k, v in got.items())
        assert [v[0] for v in got.values()] == [1_048_576, 131_072, 2_883_584]
        assert all(v[1] == 1.0 for v in got.values())


# -- 9 -------------------------------------------------------------------------------

DECOMP_BUDGET = 300


def test_c09_decomposed(acceptance_lines):
    with criterion(acceptance_lines, 9, "decomposed model slicing and word length") as d:
        datasets = D.generate_preset(MachineKind.SERIAL_PORT, "desk", DATA_SEED)
        parts = {name: decomposed_datasets(datasets, name) for name in DECOMPOSED_GROUPS}
        concatenated = np.concatenate([parts[name][D.Split.TRAIN].targets for name in DECOMPOSED_GROUPS], axis=-1)
        bit_equal = concatenated.tobytes() == datasets[D.Split.TRAIN].targets.tobytes()

        config = TrainingConfig(max_epochs=DECOMP_BUDGET)
        mono = GRUNetwork(network_config_for(MachineKind.SERIAL_PORT, 0))
        mono_record = Trainer(mono, datasets, config).fit()
        evaluation_set = datasets[D.Split.EVALUATION]
        mono_wl = E.mimicry(mono, evaluation_set).group_accuracy["word_length"]

        networks = {}
        for i, (name, (_, _, size)) in enumerate(DECOMPOSED_GROUPS.items()):
            networks[name] = GRUNetwork(NetworkConfig(12, size, 4, 23, seed=i))
        wl_net = networks["Word Length"]
        wl_record = Trainer(wl_net, parts["Word Length"], config).fit()
        composite = CompositeModel(networks)
        width = composite.predict(evaluation_set.inputs).shape[-1]
        wl_matches = E.value_matches(MachineKind.SERIAL_PORT, wl_net.predict(evaluation_set.inputs),
                                     parts["Word Length"][D.Split.EVALUATION].targets, (5, 9))
        decomp_wl = float(np.all(wl_matches, axis=-1).mean())
        d["text"] = (f"bit-equal={bit_equal}, composite width {width}, word length accuracy decomposed "
                     f"{100 * decomp_wl:.3f}% ({wl_record.epochs} epochs) vs monolithic {100 * mono_wl:.3f}% "
                     f"({mono_record.epochs} epochs), budget {DECOMP_BUDGET}")
        assert bit_equal and width == 22
        assert decomp_wl >= mono_wl


# -- 10 ------------------------------------------------------------------------------


def _run_cli(out, spec_path):
    common = ["--machine", "xor", "--preset", "tiny", "--seed", "3", "--out", str(out)]
    assert cli.main(["generate"] + common) == 0
    assert cli.main(["experiment"] + common + ["--data", str(out), "--n", "2", "--max-epochs", "5",
                                               "--serial"]) == 0
    assert cli.main(["decompose", "--spec", str(spec_path), "--out", str(out), "--serial"]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_c10_determinism(acceptance_lines, tmp_path, capsys):
    with criterion(acceptance_lines, 10, "serial runs are bit-identical") as d:
        spec = tmp_path / "decompose-spec.json"
        spec.write_text(cli.ExperimentSpec(machine="uart", preset={"train": [8, 6], "validation": [4, 6],
                                                                   "evaluation": [4, 6]},
                                           data_seed=1, training={"max_epochs": 2},
                                           network={"hidden_layers": 1}).to_json())
        out = tmp_path / "run"
        first = _run_cli(out, spec)
        shutil.rmtree(out)
        second = _run_cli(out, spec)
        capsys.readouterr()
        kinds = {suffix: sum(name.endswith(suffix) for name in first) for suffix in (".dset", ".ckpt", "-log.csv")}
        differing = [name for name in first if first[name] != second.get(name)]
        d["text"] = f"{len(first)} files ({kinds}), {len(differing)} differ"
        assert set(first) == set(second) and not differing
        assert all(v > 0 for v in kinds.values())


# -- 11 ------------------------------------------------------------------------------


def test_c11_state_space(acceptance_lines):
    with criterion(acceptance_lines, 11, "state-space calculator") as d:
        got = [state_space(k) for k in MachineKind]
        d["text"] = ", ".join(f"{k.display_name} {v}" for k, v in zip(MachineKind, got))
        assert got == [(9, 8, 8), (9, 1, 1), (9, 1, 1), (9, 1, 2), (9, 1, 8), (12, 37, 37)]
