import pytest

from scout.manifest import Corpus, Manifest
from scout.synth import SynthConfig, synth_generate


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Factory for cached synthetic corpora keyed by (n, size, seed)."""
    cache = {}

    def make(n=12, size=16, seed=0, **kw):
        key = (n, size, seed, tuple(sorted(kw.items())))
        if key not in cache:
            out = tmp_path_factory.mktemp(f"synth{n}_{size}_{seed}")
            synth_generate(SynthConfig(size=size, seed=seed, **kw), n, out)
            cache[key] = out
        return cache[key]

    return make


@pytest.fixture
def corpus_of(synth_dir):
    def make(n=12, size=16, seed=0, **kw):
        d = synth_dir(n, size, seed, **kw)
        return Corpus(Manifest.load(d / "manifest.jsonl"), size)

    return make


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
