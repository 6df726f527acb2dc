from __future__ import annotations

import shutil
import threading
import time
from pathlib import Path

import pytest

from refcheck.config import load_config
from refcheck.gateway import Gateway, RawCompletion

FIXTURES = Path(__file__).parent / "fixtures"
E2E = FIXTURES / "e2e"


class FakeBackend:
    """Scripted backend that counts calls and records peak concurrency."""

    def __init__(self, answer=None, provenance="live", delay=0.0, failures=0, error=None):
        self.answer = answer or (lambda req: ["Yes"] * req.n_samples)
        self.provenance = provenance
        self.delay = delay
        self.failures = failures
        self.error = error
        self.calls = 0
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def generate(self, request):
        with self.lock:
            self.calls += 1
            self.active += 1
            self.peak = max(self.peak, self.active)
            fail = self.failures > 0
            if fail:
                self.failures -= 1
        try:
            if self.delay:
                time.sleep(self.delay)
            if fail:
                raise self.error
            out = self.answer(request)
            if isinstance(out, RawCompletion):
                return out
            return RawCompletion(completions=list(out), prompt_tokens=3, completion_tokens=len(out))
        finally:
            with self.lock:
                self.active -= 1


@pytest.fixture
def fake_backend():
    return FakeBackend()


@pytest.fixture
def gateway(fake_backend):
    return Gateway(fake_backend)


@pytest.fixture
def e2e_config(tmp_path):
    def make(name="run"):
        cfg = load_config(E2E / "config.yaml")
        cfg.output_dir = str(tmp_path / name)
        return cfg

    return make


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
