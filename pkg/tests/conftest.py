import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

import pytest

from solidrec import semantics
from solidrec.data import NegativeCounts, build_dataset
from solidrec.experiments import lift_dataset
from solidrec.synthetic import SyntheticConfig, generate

TINY_SEMANTICS = 3


@pytest.fixture(scope="session")
def tiny_data():
    """A small lifted dataset: 40 users, 30 items, 3 semantics, sequence length 4."""
    syn = generate(SyntheticConfig(users=40, items=30, semantics=TINY_SEMANTICS, min_len=4, max_len=8, seed=3))
    data = build_dataset(syn.log, seq_len=4, negatives=NegativeCounts(2, 5, 9), seed=3)
    smap = semantics.cluster_semantics(semantics.fuse_modalities(syn.modalities, ("id", "image", "text")), TINY_SEMANTICS)
    return lift_dataset(data, smap)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
