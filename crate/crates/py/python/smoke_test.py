"""Smoke test for the compiled extension: python python/smoke_test.py"""

import json
import math

import anastomosis as an


def main():
    cfg = an.default_config()
    assert cfg["controller"]["n_sutures"] == 8
    assert an.config_hash(cfg) == an.config_hash(json.dumps(cfg))

    out = an.run_procedure(seed=3)
    report = out["report"]
    assert report["outcome"]["status"] == "completed", report["outcome"]
    assert len(report["placements"]) == 16

    replayed = an.replay(out["log"])
    assert replayed["matched"], replayed
    tampered = out["log"].replace('"engaged":true', '"engaged":false', 1)
    assert not an.replay(tampered)["matched"]

    reports = an.simulate(3, seed=7, threads=2)
    assert reports == an.simulate(3, seed=7, threads=1)
    cmp = an.compare(reports)
    assert cmp["simulated"]["runs"] == 3

    assert math.isclose(an.lumen_reduction(3.5, 4.5), 39.5062, abs_tol=1e-4)
    assert math.isclose(an.cov_percent([1.0, 2.0, 3.0]), 50.0)
    anova = an.anova_oneway([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
    assert math.isclose(anova["f"], 27.0), anova
    assert math.isclose(an.q_critical_05(3, 6), 4.339, abs_tol=1e-3)

    acc = an.corpus_accuracy(0.0, seed=1)
    assert acc["accuracy"] == 1.0, acc

    try:
        an.run_procedure(config={"controller": {"n_sutures": 0}})
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    print("smoke test ok", an.__version__)


if __name__ == "__main__":
    main()
