"""Quick end-to-end check of the aid_py extension.

Build and install first:
    cd crates/py && maturin build --release && pip install ../../target/wheels/aid_py-*.whl
"""

import os
import sys
import tempfile

import aid_py


def main():
    sched = aid_py.build_schedule({"n_rounds": 2, "rng_seed": 3})
    assert sched.n_trials == 16, sched
    rec = aid_py.simulate(sched, {"erp_amplitude_uv": 8.0, "n_channels": 4, "rng_seed": 5})
    print(rec)
    assert rec.n_channels == 4 and len(rec.markers()) == 48

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "r.aid")
        rec.save(path)
        back = aid_py.Recording.load(path)
        assert back.channel(2) == rec.channel(2)

    epochs = aid_py.extract_epochs(rec)
    assert len(epochs) == 48 and epochs.n_targets == 16 and epochs.width == 410

    fast = {"max_epochs": 2}
    report = aid_py.evaluate(epochs, folds=4, permutations=100, seed=1, train=fast)
    assert len(report["per_fold_accuracy"]) == 4
    assert 0.0 < report["p_value"] <= 1.0
    print("accuracy", report["mean"], "p", report["p_value"])

    model, history = aid_py.train_model(epochs, seed=2, train=fast)
    assert history["epochs_run"] == 2
    probs = model.score(epochs)
    assert len(probs) == 48 and all(0.0 <= p <= 1.0 for p in probs)

    offline = aid_py.decode_offline(model, rec)
    online, summary = aid_py.replay_decode(model, rec, chunk=37)
    assert offline == online and summary["n_trials"] == 16

    sel = aid_py.decode_trial([0.1, 0.8, 0.3])
    assert sel["chosen_option"] == 1
    acc = aid_py.accumulate([[0.6, 0.5, 0.5], [0.6, 0.4, 0.5]])
    assert acc["chosen_option"] == 0

    perm = aid_py.permutation_test([True, False, True, False], [True, False, True, False], 200, 0)
    assert perm["n_at_least"] >= 1

    try:
        aid_py.build_schedule({"n_rounds": 0})
    except ValueError as e:
        assert "n_rounds" in str(e)
    else:
        raise AssertionError("expected ValueError")

    try:
        aid_py.Recording.load("/nonexistent/x.aid")
    except (ValueError, aid_py.DecodeError):
        pass
    else:
        raise AssertionError("expected an error for a missing file")

    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
