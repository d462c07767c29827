import numpy as np
import pytest

from devmimic import dataset as D
from devmimic import evaluation as E
from devmimic.machines import MachineKind, Parity, RejectedInput
from devmimic.rnn import GRUNetwork, NetworkConfig, msle_loss
from devmimic.training import RunRecord


class _Noisy:
    """Ground truth with selected output values pushed across their decision boundary."""

    def __init__(self, kind, flips):
        self.truth = E.GroundTruthModel(kind)
        self.flips = flips

    def predict(self, inputs):
        out = self.truth.predict(inputs).astype(np.float64)
        for idx in self.flips:
            out[idx] = 1.0 - out[idx]
        return out


def test_ground_truth_is_perfect_for_every_machine():
    for kind in MachineKind:
        ds = D.generate(kind, 3, 20, seed=1, split=D.Split.EVALUATION)
        report = E.mimicry(E.GroundTruthModel(kind), ds)
        assert report.accuracy == 1.0
        assert report.total_outputs == kind.output_width * 20 * 3
        assert all(v == 1.0 for v in report.group_accuracy.values())


def test_single_flip_is_counted_once():
    ds = D.generate(MachineKind.EIGHT_BIT, 2, 10, seed=0)
    report = E.mimicry(_Noisy(MachineKind.EIGHT_BIT, [(1, 4, 6)]), ds)
    assert report.correct_outputs == report.total_outputs - 1
    assert report.group_accuracy["bit6"] == 19 / 20


def test_mimicry_is_monotone_under_perturbation():
    ds = D.generate(MachineKind.SERIAL_PORT, 2, 12, seed=4)
    flips = [(0, 3, 20), (1, 5, 13), (1, 7, 2)]
    previous = 1.0
    for k in range(1, len(flips) + 1):
        acc = E.mimicry(_Noisy(MachineKind.SERIAL_PORT, flips[:k]), ds).accuracy
        assert acc <= previous
        previous = acc
    assert previous < 1.0


def test_uart_groups():
    ds = D.generate(MachineKind.SERIAL_PORT, 1, 6, seed=4)
    report = E.mimicry(_Noisy(MachineKind.SERIAL_PORT, [(0, 2, 20)]), ds)
    assert set(report.group_accuracy) == {"parity", "word_length", "stop_bits", "baud", "tx", "data"}
    assert report.group_accuracy["data"] == 5 / 6 and report.group_accuracy["tx"] == 1.0


def test_sliced_value_matches():
    ds = D.generate(MachineKind.SERIAL_PORT, 2, 5, seed=3)
    part = ds.with_targets(slice(5, 9))
    pred = part.targets.copy()
    pred[0, 0] = [0.6, 0.7, 0.0, 0.0]
    matches = E.value_matches(MachineKind.SERIAL_PORT, pred, part.targets, part.columns)
    assert matches.shape == (2, 5, 4)
    assert E.decoded_accuracy(MachineKind.SERIAL_PORT, part.targets, part.targets, part.columns) == 1.0


def test_width_mismatch():
    ds = D.generate(MachineKind.PARITY, 1, 4, seed=0)
    with pytest.raises(E.WidthMismatch):
        E.mimicry(GRUNetwork(NetworkConfig(9, 8, hidden_layers=1)), ds)


def test_heatmap_mean_equals_loss(tmp_path):
    ds = D.generate(MachineKind.SERIAL_PORT, 4, 16, seed=2, split=D.Split.EVALUATION)
    net = GRUNetwork(NetworkConfig(12, 22, hidden_layers=1, seed=1))
    hm = E.heatmap(net, ds.inputs, ds.targets, MachineKind.SERIAL_PORT)
    assert hm.matrix.shape == (16, 22) and (hm.matrix >= 0).all()
    loss = msle_loss(net.predict(ds.inputs), ds.targets)
    assert hm.mean == pytest.approx(loss, rel=1e-5)
    hm.to_csv(tmp_path / "h.csv")
    hm.to_svg(tmp_path / "h.svg")
    assert (tmp_path / "h.csv").read_text().startswith("step,parity_none")
    assert (tmp_path / "h.svg").read_text().count("<rect") == 16 * 22
    perfect = E.heatmap(E.GroundTruthModel(MachineKind.SERIAL_PORT), ds.inputs[0], ds.targets[0])
    assert not perfect.matrix.any()


@pytest.mark.parametrize("text, expected", [
    ("115200,8n1", (115200, 8, Parity.NONE, 1.0)),
    ("9600,7e1", (9600, 7, Parity.EVEN, 1.0)),
    ("2400,7O2", (2400, 7, Parity.ODD, 2.0)),
    ("300,5h1.5", (300, 5, Parity.HIGH, 1.5)),
])
def test_parse_target(text, expected):
    t = E.parse_target(text)
    assert (t.baud, t.word_length, t.parity, t.stop_bits) == expected


def test_parse_target_rejects():
    for bad in ("115200", "9600,9n1", "9600,8x1", "9600,8n3"):
        with pytest.raises(RejectedInput):
            E.parse_target(bad)


def test_hello_world_ground_truth():
    model = E.GroundTruthModel(MachineKind.SERIAL_PORT)
    rows = [E.hello_world(model, t) for t in ("115200,8n1", "9600,7e1", "2400,7o2")]
    assert [(r.baud, r.word_length, r.parity, r.stop_bits, r.output) for r in rows] == [
        (115200, 8, Parity.NONE, 1.0, "Hello World!"),
        (9600, 7, Parity.EVEN, 1.0, "Hello World!"),
        (2400, 7, Parity.ODD, 2.0, "Hello World!"),
    ]
    with pytest.raises(RejectedInput):
        E.hello_world(model, "115201,8n1")


def test_tables():
    t = E.statespace_table()
    assert t.header == ["Machine", "Inputs", "Internal States", "Outputs"]
    assert t.rows[-1] == ["SerialPortMachine", "2^12", "2^37", "2^37"]
    assert E.fmt(None) == "N/A" and E.fmt(float("nan")) == "N/A"
    recs = {"Tx": RunRecord("U", 0, 1, train_loss=[0.1], val_loss=[0.02])}
    assert E.decomposed_table(recs).header == ["Output", "Encoding", "Output Size", "Epochs", "Val. Loss"]
    assert E.decomposed_table(recs).rows == [["Tx", "Binary", 1, 1, "0.02"]]
    with pytest.raises(ValueError):
        E.hello_table([])
    text = E.statespace_table().to_text()
    assert text.splitlines()[1].startswith("---")
