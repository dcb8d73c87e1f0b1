import numpy as np
import pytest

from awgcn.graphgen import build_graph
from awgcn.ingest import CallSequence, Vocabulary
from awgcn.model import AwgcnConfig, backward, forward, init_params, loss_of

ACCEPTANCE_LINES: list[str] = []


def tiny_setup(num_classes=3, seed=0, names=("a", "b", "c", "a", "d", "b", "a", "c")):
    """|vocab| = 4, dims 3/3/2, one graph."""
    vocab = Vocabulary("abcd")
    g = build_graph(CallSequence.from_names("tiny", "x", names), vocab)
    config = AwgcnConfig(d=4, num_classes=num_classes, dims=(3, 3, 2), seed=seed)
    params = init_params(config)
    label = np.array([1])

    def loss_fn(p):
        return loss_of(forward(g, p, config), label, config)

    grads = backward(forward(g, params, config), params, label, config)
    return vocab, g, config, params, grads, loss_fn


@pytest.fixture
def tiny():
    return tiny_setup()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
