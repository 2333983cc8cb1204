import os
import re
from pathlib import Path

import pytest
import torch

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(re.search(r"criterion (\d+)", s)[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The full default-config desk run, shared by every test that needs it.

    Set LATENTSEG_DESK_DIR to keep the artefacts somewhere inspectable.
    """
    from latentseg.config import RunConfig
    from latentseg.workflow import run_desk

    torch.set_num_threads(1)
    where = os.environ.get("LATENTSEG_DESK_DIR")
    workdir = Path(where) if where else tmp_path_factory.mktemp("desk")
    if where and workdir.exists() and any(workdir.iterdir()):
        raise RuntimeError(f"{workdir} must be empty; the desk run always starts fresh")
    run = run_desk(RunConfig(), workdir, presets=["components", "dae"], control=True)
    run.stage1.save(workdir / "stores" / "stage1", run.cfg, "stage1", run.cfg.n1)
    run.stage2.save(workdir / "stores" / "stage2", run.cfg, "stage2", run.cfg.n2)
    return run
