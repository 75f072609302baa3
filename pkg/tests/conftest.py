import time
from pathlib import Path
from types import SimpleNamespace

import pytest

from hsmm_attention import cli

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """Full default training on the smoke corpus, shared by the acceptance tests."""
    root = tmp_path_factory.mktemp("smoke")
    train_corpus, heldout = root / "train.jsonl", root / "heldout.jsonl"
    assert run_cli("gen-data", "--config", SMOKE_CONFIG, "--out", train_corpus) == 0
    assert run_cli("gen-data", "--config", SMOKE_CONFIG, "--out", heldout,
                   "--set", "gen.offset=32", "--set", "gen.n_utterances=8") == 0
    start = time.perf_counter()
    code = run_cli("train", "--config", SMOKE_CONFIG, "--corpus", train_corpus, "--out", root / "run")
    elapsed = time.perf_counter() - start
    assert code == 0
    return SimpleNamespace(root=root, corpus=train_corpus, heldout=heldout, run=root / "run",
                           seconds=elapsed)
