import math

import pytest

from mlnnet.errors import ConfigError
from mlnnet.experiment import ExperimentConfig, build_datasets, run, verdicts

TINY = dict(seeds=(0,), n_train=4, n_test=2, n_target=2, n_selection_tiles=4, tile=(32, 32), epochs=1,
            net={"embed_dim": 8, "num_heads": [2, 4, 8], "window_size": 4})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"epochs": 1, "colour": 2})


def test_datasets_are_disjoint_streams():
    cfg = ExperimentConfig.from_dict(TINY)
    data = build_datasets(cfg, 0)
    assert [len(data[k]) for k in ("train", "source", "gamma", "inverted")] == [4, 2, 2, 2]
    assert not (data["train"][0][0] == data["source"][0][0]).all()


def test_tiny_run_reports_every_quantity():
    res = run(ExperimentConfig.from_dict(TINY))
    seed = res["per_seed"][0]
    for split in ("source", "gamma", "inverted"):
        for prefix in ("mln", "baseline", "sum", "branch0", "branch3"):
            v = seed[f"{prefix}_{split}_dsc"]
            assert math.isnan(v) or 0.0 <= v <= 1.0
        assert sum(seed[f"mln_{split}_branches"]) == 2
    assert seed["selection"]["n"] == 4
    assert set(res["verdicts"]) == {"source_dsc_ge_0.75", "target_gain_ge_5_points",
                                    "sum_between_baseline_and_mln_on_inverted", "selection_ge_80pct",
                                    "final_loss_lt_minus_half_k", "runtime_le_30min"}


def test_verdict_thresholds():
    agg = {"mln_source_dsc": 0.75, "target_gain": 0.05, "baseline_inverted_dsc": 0.2, "sum_inverted_dsc": 0.3,
           "mln_inverted_dsc": 0.3, "selection_rate_seed0": 0.8}
    v = verdicts(agg, [{"mln_final_loss": -2.1}], 1800.0)
    assert all(v.values())
    v = verdicts({**agg, "target_gain": 0.0499, "sum_inverted_dsc": 0.31}, [{"mln_final_loss": -2.0}], 1800.1)
    assert not any(v[k] for k in ("target_gain_ge_5_points", "sum_between_baseline_and_mln_on_inverted",
                                  "final_loss_lt_minus_half_k", "runtime_le_30min"))
