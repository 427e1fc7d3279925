import sys
from pathlib import Path

import yaml

from promptens.gateway import BackendConfig, Gateway, MockBackend, PromptResponse

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "src" / "promptens" / "data"
GOLDEN_CONFIG = ROOT / "configs" / "mock_golden.yaml"


def make_response(p_yes, template_id=1, status="parsed", answer=None, explanation="", report_id="r1", label="L"):
    if answer is None:
        answer = "Yes" if p_yes > 0.5 else "No"
    return PromptResponse(report_id, label, template_id, answer, p_yes, explanation, status, "")


def write_config(tmp_path, **changes):
    """Copy of the golden config with absolute paths, writing into ``tmp_path``."""
    raw = yaml.safe_load(GOLDEN_CONFIG.read_text())
    raw["dataset"] = str(DATA / "mini_corpus.jsonl")
    raw["train_dataset"] = str(DATA / "mini_pool.jsonl")
    raw["output_dir"] = str(tmp_path / "out")
    for k, v in changes.items():
        if v is None:
            raw.pop(k, None)
        else:
            raw[k] = v
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def mock_gateway(truth=lambda rid, label: True, **mock):
    cfg = BackendConfig(kind="mock", model_name="m", mock=mock, backoff_base=0.0)
    backend = MockBackend(cfg, truth)
    return Gateway(cfg, backend, sleep=lambda s: None)


def pytest_terminal_summary(terminalreporter):
    test_acceptance = sys.modules.get("tests.test_acceptance")
    if test_acceptance is None or not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(test_acceptance.RESULTS):
        status, text, seconds = test_acceptance.RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {text} ({seconds:.2f}s)")
