"""Smoke test for the saconv_py extension.

Build and install first:
    pip install maturin
    pip install -e crates/py --no-build-isolation
"""

import math
import tempfile
from pathlib import Path

import saconv_py as sc


def main() -> None:
    assert math.isclose(sc.percentile([10, 20, 30, 40, 50], 0.95), 48.0)
    labels, threshold = sc.label_extremes([float(v) for v in range(1, 101)], 0.95)
    assert math.isclose(threshold, 95.05) and sum(labels) == 5

    assert sc.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    m = sc.derive_metrics(tp=9, tn=87, fp=3, fn_=1)
    assert math.isclose(m["accuracy"], 0.96) and math.isclose(m["precision"], 0.75)
    assert sc.derive_metrics(tp=0, tn=5, fp=0, fn_=0)["precision"] is None
    mean, sem = sc.mean_sem([1.0, 2.0, 3.0])
    assert mean == 2.0 and math.isclose(sem, 1 / math.sqrt(3))

    ds = sc.Dataset.synthetic(seed=3, days=200, signal=3.0)
    assert len(ds) == 200 and ds.train_len == 160
    values, shape, _ = ds.sample(0)
    assert shape == [15, 35, 2] and len(values) == 15 * 35 * 2

    model = sc.Model("saconvnet-hw", seed=1)
    log = model.fit(ds, epochs=2, seed=1)
    assert [r["epoch"] for r in log] == [1, 2]
    p = model.predict_proba(values)
    assert 0.0 < p < 1.0
    report = model.evaluate(ds)
    print("test metrics:", {k: report[k] for k in ("Loss", "Accuracy", "AUC", "F1_Score")})

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        model.save(str(path))
        back = sc.Model.load(str(path))
        assert back.arch == "saconvnet-hw"
        assert back.num_parameters() == model.num_parameters()
        assert back.predict_proba(values) == p

    try:
        sc.percentile([], 0.5)
    except ValueError:
        pass
    else:
        raise AssertionError("empty percentile accepted")
    print("ok")


if __name__ == "__main__":
    main()
