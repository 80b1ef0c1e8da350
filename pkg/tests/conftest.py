import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sasvjoint.protocol_io import Corpus  # noqa: E402
from sasvjoint.synth_corpus import CorpusConfig, generate_corpus  # noqa: E402

TINY = CorpusConfig(n_speakers=4, utts_per_speaker=5, n_attacks=2, seed=3, nontarget_per_speaker=4,
                    spoofs_per_speaker=3, duration_range=(1.5, 2.0))


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "corpus"
    generate_corpus(TINY, root)
    return root


@pytest.fixture
def tiny_corpus(tiny_corpus_dir):
    return Corpus(tiny_corpus_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, appended by test_acceptance
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
