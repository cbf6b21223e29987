"""Shared fixtures. Trained victims for the acceptance suite are cached under tests/.cache;
delete that directory to retrain from scratch."""
import json
from pathlib import Path

import pytest

from avlt.cli import run_command

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(__file__).resolve().parent / ".cache" / "acceptance"
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class Run:
    def __init__(self, root: Path):
        self.root = root
        self.out = root / "run"
        cfg = json.loads((ROOT / "configs" / "default.json").read_text())
        cfg["out_dir"] = str(self.out)
        self.config = root / "config.json"
        text = json.dumps(cfg, indent=1) + "\n"
        root.mkdir(parents=True, exist_ok=True)
        if not self.config.exists() or self.config.read_text() != text:
            self.config.write_text(text)

    def cli(self, *args) -> int:
        return run_command([args[0], "--config", str(self.config), *args[1:]])

    def model(self, name) -> Path:
        return self.out / "models" / f"{name}.avlt"


@pytest.fixture(scope="session")
def trained_run():
    run = Run(CACHE)
    if not all(run.model(v).exists() for v in ("monolithic", "attentive")):
        assert run.cli("train-vqa") == 0
    if not run.model("captioner").exists():
        assert run.cli("train-cap") == 0
    return run


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
