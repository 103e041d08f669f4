"""Smoke test for the irrigo extension module.

Build and install first, e.g. `pip install .` from the repository root,
then run `python python/smoke_test.py`.
"""

import math
import tempfile

import irrigo


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    check(irrigo.dryness_pct(2500) == 0 and irrigo.dryness_pct(3500) == 100, "dryness landmarks")

    rows = irrigo.generate(n_rows=500, seed=3)
    check(len(rows) == 500 and {"soil_adc", "need"} <= rows[0].keys(), "generate rows")
    s = irrigo.summarize(n_rows=30001, seed=7)
    check(abs(s["moisture"]["mean"] / 2674.98 - 1) < 0.02, f"moisture mean {s['moisture']['mean']:.1f}")

    model = irrigo.Model.train(task="water", kind="gb", n_rows=4000, seed=7, hp=["gb.n_estimators=40"])
    check(model.kind == "gb" and model.n_trees == 40, repr(model))
    again = irrigo.Model.from_json(model.to_json())
    row = [1.0, 0.4, 0.45, 0.0, 1.0, 0.4, 0.45, 0.18]
    check(again.predict([row]) == model.predict([row]), "json round trip")

    artifact = model.export()
    edge = irrigo.EdgeModel(artifact)
    check(abs(edge.infer(row) - model.predict([row])[0]) < 1e-5, "edge parity")
    check(edge.info()["n_trees"] == 40 and edge.n_features == 8, "edge info")
    small = irrigo.quantize(artifact, "i16")
    check(len(small) < len(artifact), f"i16 artifact {len(small)} < {len(artifact)} bytes")
    check(math.isfinite(irrigo.EdgeModel(small).infer(row)), "quantized inference")

    report = irrigo.compare(n_rows=3000, seed=7, hp=["rf.n_estimators=10", "gb.n_estimators=30"])
    check(report["n_test"] == 600 and report["favours"] in ("gradient_boosting", "random_forest", "none"), "compare report")

    timer = irrigo.simulate("timer", days=2)
    rule = irrigo.simulate("rule", days=2)
    check(timer["total_ml"] == 120.0 and rule["time_in_band_pct"] >= 0, "simulate")

    with tempfile.TemporaryDirectory() as d:
        r = irrigo.run_stack(d + "/store", policy="rule", days=1, kill_at=0.4, restart_at=0.6)
        check(all(c["passed"] for c in r["checks"]), f"stack checks, {r['events_stored']} events stored")

    check(irrigo.topic_matches("farm/+/event/#", "farm/n1/event/irrigation"), "topic match")
    try:
        irrigo.topic_matches("farm/#/x", "farm/a/x")
        check(False, "invalid filter rejected")
    except ValueError:
        check(True, "invalid filter rejected")

    broker = irrigo.Broker()
    check(broker.address.startswith("127.0.0.1:"), f"broker on {broker.address}")
    broker.stop()

    with tempfile.TemporaryDirectory() as d:
        store = irrigo.Store(d)
        store.append("telemetry", "n1", 1000, {"soil_adc": 2600})
        store.append("event", "n1", 2000, {"predicted_ml": 5.0})
        check(len(store) == 2 and len(store.query("n1", kind="event")) == 1, "store append and query")
        check(irrigo.Store(d).recovery()["records"] == 2, "store reopen")

    print("smoke test passed")


if __name__ == "__main__":
    main()
