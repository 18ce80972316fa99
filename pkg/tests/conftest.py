import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from cardioddx.gateway import Gateway, ScriptedBackend, TemplateStore, Transcript, TranscriptEntry
from cardioddx.model import PatientCase
from cardioddx.runtime import RuntimeConfig, build_pipeline, demo_config_path, packaged_data_dir

DEMO_DIR = Path(packaged_data_dir()) / "demo"


@pytest.fixture(scope="session")
def demo_case():
    with open(DEMO_DIR / "case.json", "r", encoding="utf-8") as fh:
        return PatientCase.from_json_dict(json.load(fh))


@pytest.fixture()
def demo_pipeline():
    cfg = RuntimeConfig.load(demo_config_path())
    return build_pipeline(cfg)


@pytest.fixture()
def demo_runtime_config():
    return RuntimeConfig.load(demo_config_path())


@pytest.fixture(scope="session")
def templates():
    return TemplateStore(Path(packaged_data_dir()) / "templates")


def scripted_gateway(entries, on_miss="error"):
    """Build a gateway over an in-memory transcript.

    entries: list of (kind, value, response) triples or TranscriptEntry.
    """
    built = [
        e if isinstance(e, TranscriptEntry) else TranscriptEntry(kind=e[0], value=e[1], response=e[2])
        for e in entries
    ]
    return Gateway(ScriptedBackend(Transcript(entries=built, on_miss=on_miss)))


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj, indent=2) + "\n```"
