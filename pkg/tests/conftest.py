import pytest

from valtiming.corpus import CorpusSpec, generate_corpus, load_split

TINY = dict(n_train=16, n_val=8, n_test=8, speakers=(4, 2, 2), min_duration=0.5, max_duration=0.8, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small cue-0.9 corpus shared by the model-level tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(CorpusSpec(cue_strength=0.9, **TINY), root)
    return root


@pytest.fixture(scope="session")
def tiny_splits(tiny_corpus):
    return {s: load_split(tiny_corpus, s) for s in ("train", "val", "test")}


_acceptance_lines = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_acceptance_lines, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_lines, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
