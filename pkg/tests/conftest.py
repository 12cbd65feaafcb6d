import textwrap

import pytest

# small enough that a full gen-data -> ablate run takes seconds
TINY_CONFIG = textwrap.dedent("""\
    data:
      size: 32
      patients: 4
      slices_per_patient: 2
      split: [0.5, 0.25, 0.25]
    ae:
      width: 8
      steps: 3
      micro_batch: 2
      lr: 1.0e-3
    ldm:
      T: 50
      width: 8
      steps: 2
      batch: 2
      lr: 1.0e-3
    sampler:
      num_steps: 3
    eval:
      ssim_window: 7
      timing_repeats: 1
    """)


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_CONFIG)
    return p


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
