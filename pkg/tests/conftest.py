import time

import pytest

from blockdiff.model import ModelConfig, init_params
from blockdiff.sequence import CorpusConfig, generate_corpus
from blockdiff.train import TrainConfig, train_loop

ACCEPTANCE = {}

COPY_PROMPT_LEN = (8, 8)


@pytest.fixture(scope="session")
def trained_copy():
    """Default-config model trained on the copy task, shared by the slow checks."""
    corpus = generate_corpus(CorpusConfig(vocab_size=64, num_samples=2000, prompt_len=COPY_PROMPT_LEN,
                                          task="copy", seed=1))
    held_out = generate_corpus(CorpusConfig(vocab_size=64, num_samples=50, prompt_len=COPY_PROMPT_LEN,
                                            task="copy", seed=999))
    cfg = TrainConfig(steps=2000, block_target=8)
    start = time.perf_counter()
    params, history = train_loop(init_params(ModelConfig(), 0), corpus, cfg)
    return {"params": params, "history": history, "held_out": held_out,
            "seconds": time.perf_counter() - start}


@pytest.fixture
def record_criterion(request):
    """Store a criterion's outcome; pass/fail lines are printed in the terminal summary."""
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
