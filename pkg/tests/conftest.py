import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """The default ``train-toy`` run (seed 0), trained once per session.

    Set DESKASR_TOY_MODEL to a directory produced by ``deskasr train-toy`` to
    reuse it; its train_log.json then supplies the recorded training time.
    """
    import json
    import time
    from types import SimpleNamespace

    from deskasr import cli
    from deskasr import pipeline as P
    from deskasr.features import make_voices

    reuse = os.environ.get("DESKASR_TOY_MODEL")
    if reuse:
        out = reuse
        log = json.loads(open(os.path.join(out, "train_log.json")).read())
        seconds = log["seconds"]
    else:
        out = str(tmp_path_factory.mktemp("toy"))
        t0 = time.perf_counter()
        assert cli.main(["train-toy", "--out", out, "--seed", "0"]) == 0
        seconds = time.perf_counter() - t0
        log = json.loads(open(os.path.join(out, "train_log.json")).read())
    synth = P.default_synth()
    return SimpleNamespace(
        dir=out,
        log=log,
        seconds=seconds,
        reused=bool(reuse),
        corpus=P.default_dataset(),
        synth=synth,
        voices=make_voices(synth),
        load=lambda: P.load_model(out),
    )


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok or self.detail else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _CRITERIA[self.number] = (ok, self.title, detail)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
