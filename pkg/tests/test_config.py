import json

import pytest

from mvfuse.config import RunConfig
from mvfuse.errors import SpecInvalid


def test_defaults():
    r = RunConfig()
    assert (r.alpha, r.beta, r.gamma) == (30.0, 30.0, 0.5)
    assert (r.n_steps, r.T_s, r.delta_g, r.eta, r.lambda_contact) == (25, 15, 3, 0.1, 0.5)
    assert (r.iters, r.lr, r.lambda_col, r.lambda_con, r.tau) == (100, 0.01, 200.0, 50.0, 0.05)


def test_component_configs():
    r = RunConfig(alpha=5.0, n_steps=10, T_s=4, iters=7, lambda_reg=0.0)
    assert r.fusion().alpha == 5.0 and r.fusion(strategy="uniform").strategy == "uniform"
    s = r.schedule()
    assert s.n_steps == 10 and s.guidance_start == 4 and s.eta == 0.1
    c = r.refine(seed=3)
    assert c.iterations == 7 and c.lambda_reg == 0.0 and c.seed == 3


def test_round_trip():
    r = RunConfig(gamma=0.25, eta=0.0)
    assert RunConfig.from_dict(r.to_dict()) == r


def test_load(tmp_path):
    assert RunConfig.load(None) == RunConfig()
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"alpha": 10.0, "iters": 5}))
    r = RunConfig.load(p)
    assert r.alpha == 10.0 and r.iters == 5 and r.beta == 30.0


@pytest.mark.parametrize("data", [{"alphaa": 1.0}, {"gamma": 2.0}, {"n_steps": 5, "T_s": 9}, {"iters": 0},
                                  {"strategy": "median"}])
def test_invalid(tmp_path, data):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(data))
    with pytest.raises(SpecInvalid):
        RunConfig.load(p)


def test_invalid_json(tmp_path):
    p = tmp_path / "run.json"
    p.write_text("{not json")
    with pytest.raises(SpecInvalid):
        RunConfig.load(p)
    p.write_text("[1, 2]")
    with pytest.raises(SpecInvalid):
        RunConfig.load(p)
