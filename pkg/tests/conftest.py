import numpy as np
import pytest

from kgdiff import trainer
from kgdiff.config import build_config
from kgdiff.kg import generate_synthetic

TINY = [
    "data.n_entities=24", "data.d_feat=4", "encoder.dim=8", "encoder.heads=2",
    "stage1.epochs=8", "stage1.batch_size=16", "stage2.epochs=4", "stage2.batch_size=16",
    "denoiser.hidden=16", "denoiser.mlp=24", "diffusion.steps=10", "diffusion.beta_end=0.5",
    "diffusion.chains=2",
]


def tiny_config(*extra, seed=0):
    return build_config(None, TINY + list(extra), seed=seed)


def graph_for(cfg):
    d = cfg["data"]
    return generate_synthetic(d["n_entities"], d["rules"], cfg["seed"], d["d_feat"])


@pytest.fixture(scope="session")
def tiny():
    """A tiny graph with a briefly trained encoder, shared read-only across tests."""
    cfg = tiny_config()
    graph = graph_for(cfg)
    cache = trainer.build_cache(cfg, graph)
    encoder, result = trainer.stage1_train(graph, cfg, cache=cache)
    return cfg, graph, cache, encoder, result


def param_bytes(store):
    return {n: p.data.tobytes() for n, p in store.items()}


def same_params(a, b):
    return list(a.names()) == list(b.names()) and all(np.array_equal(a[n].data, b[n].data) for n in a.names())


# verdict lines from test_acceptance.py, repeated at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
