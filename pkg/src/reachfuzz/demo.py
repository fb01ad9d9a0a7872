"""Assemble a ready-to-run demo workspace for the shipped ppmcheck project.

Usage: ``python -m reachfuzz.demo <directory>`` then run the printed
prepare/fuzz/report commands. The workspace contains the corpus (program
source plus manual), the extracted call graph, the bug report, the scripted
response fixture, and a project config pointing at them.
"""

from __future__ import annotations

import shutil
import sys
from importlib import resources
from pathlib import Path

from .toys import toy_path

CONFIG_TEMPLATE = """\
# ppmcheck demo project
corpus_root = corpus
graph_file = callgraph.txt
bug_report_file = bug_report.txt
work_dir = work
fixture_file = ppmcheck.fixture
program_exec = {python} {toy}
opt_budget = 120s
trial_duration = 1500ms
campaign_duration = 60s
exec_timeout = 2s
refresh_period = 1h
mix_ratio = 0.8
rng_seed = 1
"""


def build_workspace(dest: str | Path) -> Path:
    """Create the demo workspace under ``dest``; returns the config path."""
    dest = Path(dest)
    corpus = dest / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    data = resources.files("reachfuzz") / "demo_data"
    for name in ("bug_report.txt", "callgraph.txt", "ppmcheck.fixture"):
        (dest / name).write_text((data / name).read_text(encoding="utf-8"),
                                 encoding="utf-8")
    (corpus / "manual.txt").write_text((data / "manual.txt").read_text(encoding="utf-8"),
                                       encoding="utf-8")
    shutil.copyfile(toy_path("ppmcheck"), corpus / "ppmcheck.py")
    config_path = dest / "project.conf"
    config_path.write_text(
        CONFIG_TEMPLATE.format(python=sys.executable, toy=toy_path("ppmcheck")),
        encoding="utf-8",
    )
    return config_path


def main(argv: list[str] | None = None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: python -m reachfuzz.demo <directory>", file=sys.stderr)
        return 2
    config_path = build_workspace(argv[0])
    print(f"demo workspace ready: {config_path}")
    print("next:")
    print(f"  reachfuzz prepare --config {config_path}")
    print(f"  reachfuzz fuzz --config {config_path} --duration 30s")
    print(f"  reachfuzz report --dir {config_path.parent / 'work'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
