import numpy as np
import pytest

from mmofl.datagen import RoundBatch
from mmofl.model import ModelConfig, ModelParams, forward


def random_batch(rng, cfg: ModelConfig, n: int, labels=None, client_id=0, round_index=0) -> RoundBatch:
    data = tuple(rng.standard_normal((n, d)) for d in cfg.input_dims)
    if labels is None:
        labels = rng.integers(0, cfg.num_classes, size=n)
    return RoundBatch(data, np.asarray(labels), (True,) * cfg.num_modalities, client_id, round_index)


def fd_gradient(params: ModelParams, batch, substitutes=None, step=1e-6) -> np.ndarray:
    """Central finite differences of the forward loss over the flat parameter vector."""
    base = params.flat()
    out = np.zeros_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += step
        dn[i] -= step
        f_up = forward(ModelParams.from_flat(params.config, up), batch, substitutes)[2]
        f_dn = forward(ModelParams.from_flat(params.config, dn), batch, substitutes)[2]
        out[i] = (f_up - f_dn) / (2 * step)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(strategy="PMM", rounds=20, lam=0.5, **sections):
    """A fast experiment: 3 clients, tiny windows, 4-dim modalities."""
    import dataclasses

    from mmofl.experiment import default_config

    base = default_config()
    syn = {"total_samples": 1500, "input_dims": (4, 4), "class_center_separation": 2.0}
    syn.update(sections.pop("synthetic", {}))
    model = {"input_dims": syn["input_dims"], "feature_dim": 4, "hidden_dim": 8}
    model.update(sections.pop("model", {}))
    cfg = base.with_overrides(
        data={"synthetic": dataclasses.replace(base.data.synthetic, **syn)},
        model=dataclasses.replace(base.model, **model),
        partition={"num_clients": 3, "initial_pool_per_client": 300, "window_size": 50, "churn_per_round": 5},
        schedule={"lam": lam},
        train={"rounds": rounds, "strategy": strategy},
        regret="off",
    )
    return cfg.with_overrides(**sections)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with the measured detail."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            lines.append((props.get("criterion", 0), f"criterion {props.get('criterion', '?'):>2} {outcome.upper():6} "
                          f"{props.get('title', rep.nodeid)}: {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
