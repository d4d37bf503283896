"""Shared fixtures: a miniature end-to-end study run reused across test files."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Repeat the acceptance one-liners after the test summary."""
    if ACCEPTANCE_LINES:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)

    return record

MINI_YAML = """\
synth:
  n_channels: 2
  duration_s: 120
  onset_s: 80
  ramp_s: 20
cohort:
  n_episodes: 3
  test_episode: synth-002
  extra_test_episodes: 1
grid:
  h_s: [4]
  m_s: [2]
trainer:
  episodes: 4
  batch_size: 8
eval:
  trace_cell: {h_s: 4, m_s: 2}
study:
  n_seeds: 2
"""


@pytest.fixture(scope="session")
def mini_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mini.yaml"
    path.write_text(MINI_YAML)
    return path


@pytest.fixture(scope="session")
def mini_run(mini_config_path, tmp_path_factory):
    """One tiny but complete study run (1 cell, 3 models, 2 seeds)."""
    from metaictal.cli import main

    root = tmp_path_factory.mktemp("runs")
    rc = main(
        ["study", "--config", str(mini_config_path), "--out", str(root),
         "--name", "run-a", "--quiet"]
    )
    assert rc == 0
    return root / "run-a"
