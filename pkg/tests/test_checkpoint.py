import numpy as np
import pytest

from crossmetric import checkpoint
from crossmetric.checkpoint import CheckpointError
from crossmetric.metricnet import MetricNetwork, score
from crossmetric.nn import DenseLayer, make_rng
from crossmetric.pathway import PathwayNetwork


def test_pathway_round_trip_is_bit_exact(tmp_path):
    net = PathwayNetwork.create(7, 5, make_rng(0), hidden_dims=(6, 4, 3))
    net.all_layers()[0].weights[0, 0] = 1 / 3
    p = tmp_path / "p.ckpt"
    checkpoint.save(p, "pathway", net.named_layers())
    back = PathwayNetwork.from_named_layers(checkpoint.load(p, "pathway"))
    for (na, a), (nb, b) in zip(net.named_layers(), back.named_layers()):
        assert na == nb and a.activation == b.activation
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.bias.tobytes() == b.bias.tobytes()
    # serialization is stable
    assert checkpoint.dumps("pathway", back.named_layers()) == p.read_text()


def test_metric_round_trip(tmp_path):
    net = MetricNetwork.create(make_rng(1), embed_dim=4, hidden_dim=6)
    p = tmp_path / "m.ckpt"
    checkpoint.save(p, "metric", net.named_layers())
    back = MetricNetwork.from_named_layers(checkpoint.load(p))
    x = make_rng(2).standard_normal(8)
    assert score(net, x[:4], x[4:]) == score(back, x[:4], x[4:])


def test_extreme_values_survive():
    w = np.array([[5e-324, -1.7976931348623157e308], [np.nextafter(1.0, 2.0), -0.0]])
    text = checkpoint.dumps("x", [("l", DenseLayer(w, np.array([1e-300, 3.0]), "relu"))])
    (_, layer), = checkpoint.loads(text)
    assert layer.weights.tobytes() == w.tobytes()


@pytest.fixture
def text():
    net = MetricNetwork.create(make_rng(0), embed_dim=2, hidden_dim=3, depth=1)
    return checkpoint.dumps("metric", net.named_layers())


def test_wrong_kind(text):
    with pytest.raises(CheckpointError, match="expected 'pathway'"):
        checkpoint.loads(text, "pathway")


def test_wrong_version(text):
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(text.replace("checkpoint 1", "checkpoint 2", 1))


def test_truncated(text):
    with pytest.raises(CheckpointError):
        checkpoint.loads("\n".join(text.splitlines()[:-3]))


def test_corrupt_value(text):
    lines = text.splitlines()
    w = next(i + 1 for i, line in enumerate(lines) if line.startswith("W "))
    lines[w] = "oops " + lines[w]
    with pytest.raises(CheckpointError):
        checkpoint.loads("\n".join(lines))
