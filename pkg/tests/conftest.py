import time

import pytest

from cs2.adain_gan import GanConfig, train_gan
from cs2.phantom import phantom_corpus
from cs2.pipeline import slab_sample, truth_guidance

# acceptance lines collected during the run, echoed in the terminal summary
CRITERIA: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(CRITERIA, key=lambda k: int(k.split()[1])):
            terminalreporter.write_line(CRITERIA[key])


@pytest.fixture(scope="session")
def criteria():
    return CRITERIA


class TrainedGan:
    def __init__(self, samples, result, cfg, seconds):
        self.samples = samples
        self.result = result
        self.cfg = cfg
        self.seconds = seconds


@pytest.fixture(scope="session")
def trained_gan():
    """2000 steps on 200 default 64x64 phantom slabs; timed from corpus build to last step."""
    t0 = time.perf_counter()
    samples = [slab_sample(p) for p in phantom_corpus(200, seed0=0)]
    corpus = [(truth_guidance(s), s.normalized()) for s in samples]
    cfg = GanConfig()
    result = train_gan(corpus, cfg)
    return TrainedGan(samples, result, cfg, time.perf_counter() - t0)
