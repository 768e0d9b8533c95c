"""Smoke test for the pfedafm extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
(or `maturin build -m crates/py/Cargo.toml` and pip-install the wheel).
"""

import json
import math
import tempfile

import pfedafm


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    # mixing: alpha = 1 keeps the local representation, alpha = 0 the global one
    rg, rf = [[1.0, 2.0]], [[3.0, 5.0]]
    check(pfedafm.mix_features(rg, rf, [1.0, 1.0]) == rf, "mix with alpha=1 is local")
    check(pfedafm.mix_features(rg, rf, [0.0, 0.0]) == rg, "mix with alpha=0 is global")
    check(pfedafm.mix_features(rg, rf, [0.5, 0.25]) == [[2.0, 2.75]], "per-dimension mix")

    check(pfedafm.aggregate([[0.0], [4.0]], [1, 3]) == [3.0], "weighted aggregate")
    try:
        pfedafm.aggregate([], [])
        check(False, "empty aggregate rejected")
    except ValueError:
        check(True, "empty aggregate rejected")

    data = pfedafm.generate_synthetic(10, 8, 20, 1.0, 0)
    check(len(data) == 200 and data.num_classes == 10, "synthetic dataset size")
    parts = pfedafm.pathological_partition(data, 5, 2, 42)
    labels = data.labels
    check(all(len({labels[i] for i in p}) == 2 for p in parts), "pathological: 2 labels per client")
    parts = pfedafm.dirichlet_partition(data, 4, 0.5, 1)
    check(sorted(i for p in parts for i in p) == list(range(200)), "dirichlet conserves samples")

    model = pfedafm.build_zoo_model(2, 8, 4, 3, 7)
    logits = model.forward([[0.1] * 8, [0.2] * 8])
    check(len(logits) == 2 and len(logits[0]) == 3, "zoo model logits shape")
    check(pfedafm.homo_param_count(64, 32) == 1584, "shared extractor size")

    check(math.isclose(pfedafm.mean_accuracy([0.9, 0.8, 0.7]), 0.8, abs_tol=1e-12), "mean accuracy")
    check(pfedafm.rounds_to_target([0.3, 0.6, 0.9], 0.9) == 3, "rounds to target")
    check(pfedafm.comm_cost(1, 20000) == 20000, "communication cost")

    try:
        pfedafm.Config("pfedafm", C=0)
        check(False, "C=0 rejected")
    except ValueError as e:
        check("participation fraction must be in (0,1]" in str(e), "C=0 rejected")

    cfg = pfedafm.Config("pfedafm", N=4, T=3, per_class=40)
    a = pfedafm.run_experiment(cfg)
    b = pfedafm.run_experiment(cfg)
    check(a.records_jsonl() == b.records_jsonl(), "reruns are byte-identical")
    records = a.records()
    check(len(records) == 3, "one record per round")
    K = cfg.clients_per_round
    check(records[0]["uplink_params"] + records[0]["downlink_params"] == 2 * K * pfedafm.homo_param_count(64, 32),
          "per-round communication")
    trace = a.alpha_trace()
    check(len(trace) == 4 and all(len(t) == 3 for t in trace), "alpha trace shape")

    solo = pfedafm.run_experiment(cfg.with_value("algorithm", "standalone"))
    check(all(r["uplink_params"] == 0 for r in solo.records()), "standalone communicates nothing")

    with tempfile.TemporaryDirectory() as out:
        summaries = pfedafm.run(cfg.with_value("T", 1), out, force=True)
        check(len(summaries) == 1 and "best_mean_accuracy" in summaries[0], "runner writes a summary")
        json.dumps(summaries)

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
