import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from hcdlab.errors import ConfigError, FormatError
from hcdlab.harness import cli
from hcdlab.harness.ablate import ABLATION_COLUMNS, ablate, apply_axis, worker_count
from hcdlab.harness.config import ExperimentConfig
from hcdlab.harness.data import gen_dataset, read_dataset, write_dataset
from hcdlab.harness.train import METRIC_COLUMNS, accuracy, evaluate, read_metrics, train
from hcdlab.nn import SgdConfig


def quick(cfg, **kw):
    """Short, untimed run with narrow CFM heads."""
    hcd = replace(kw.pop("hcd", cfg.hcd), m=4)
    sgd = SgdConfig(epochs=kw.pop("epochs", 2), batch_size=32, lr_decay_epochs=(1,))
    return replace(cfg, sgd=sgd, hcd=hcd, timing=False, **kw)


# ---------------------------------------------------------------- datasets


def test_dataset_bytes_are_deterministic(tmp_path):
    gen_dataset("bars", 30, 4, 1, 8, 8, seed=3, path=tmp_path / "a.hcdx")
    gen_dataset("bars", 30, 4, 1, 8, 8, seed=3, path=tmp_path / "b.hcdx")
    gen_dataset("bars", 30, 4, 1, 8, 8, seed=4, path=tmp_path / "c.hcdx")
    a, b, c = ((tmp_path / f"{x}.hcdx").read_bytes() for x in "abc")
    assert a == b and a != c


def test_dataset_round_trip_and_layout(tmp_path):
    ds = gen_dataset("blobs", 12, 3, 2, 4, 4, seed=0)
    write_dataset(tmp_path / "d.hcdx", ds)
    blob = (tmp_path / "d.hcdx").read_bytes()
    assert blob[:4] == b"HCDX"
    assert len(blob) == 28 + 12 * 2 * 16 * 4 + 12 * 4 + 8
    back = read_dataset(tmp_path / "d.hcdx")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    (tmp_path / "bad.hcdx").write_bytes(blob[:-1])
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "bad.hcdx")


def test_dataset_needs_two_classes():
    with pytest.raises(ConfigError):
        gen_dataset("blobs", 10, 1, 1, 4, 4, seed=0)


def test_noiseless_blobs_are_nearest_mean_separable():
    ds = gen_dataset("blobs", 200, 5, 1, 8, 8, seed=2, noise=0.0)
    flat = ds.images.reshape(len(ds), -1)
    means = np.stack([flat[ds.labels == k].mean(axis=0) for k in range(5)])
    pred = np.argmin(((flat[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.labels) == 1.0


# ---------------------------------------------------------------- evaluation


def test_accuracy_examples():
    y = np.array([0, 1, 2, 3])
    assert accuracy(np.eye(4) * 5, y) == 100.0
    labels = np.arange(50) % 5
    assert accuracy(np.zeros((50, 5)), labels) == 100.0 * np.mean(labels == 0)


def test_accuracy_matches_loop(rng):
    z = rng.normal(size=(50, 7))
    y = rng.integers(0, 7, size=50)
    hits = 0
    for i in range(50):
        best = 0
        for k in range(1, 7):
            if z[i, k] > z[i, best]:
                best = k
        hits += best == y[i]
    assert accuracy(z, y) == 100.0 * hits / 50


# ---------------------------------------------------------------- config


def test_config_json_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=5, channels=(8, 8, 8, 8))
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_config_accepts_lambda_key_and_rejects_unknown():
    assert ExperimentConfig.from_dict({"hcd": {"lambda": 0.5}}).hcd.lam == 0.5
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"hcd": {"gamma": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"method": "svm"})


def test_hcd_requires_teacher(tiny_desk, tmp_path):
    with pytest.raises(ConfigError):
        train(quick(tiny_desk, teacher=""), tmp_path)


def test_teacher_width_mismatch_is_reported(tiny_desk, tmp_path):
    with pytest.raises(ConfigError, match="d="):
        train(quick(tiny_desk, hcd=replace(tiny_desk.hcd, d=7)), tmp_path)


# ---------------------------------------------------------------- training


def test_train_writes_outputs_and_is_deterministic(tiny_desk, tmp_path):
    cfg = quick(tiny_desk)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    header = a.metrics_path.read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    assert json.loads((tmp_path / "a" / "config.json").read_text())["method"] == "hcd"
    rows = read_metrics(a.metrics_path)
    assert [r["epoch"] for r in rows] == [1.0, 2.0]
    assert all(0.0 <= r["train_acc"] <= 100.0 and 0.0 <= r["test_acc"] <= 100.0 for r in rows)
    assert evaluate(a.checkpoint_path, cfg.test_data) == rows[-1]["test_acc"]


def test_breakdown_identity_every_epoch(tiny_desk, tmp_path):
    cfg = quick(tiny_desk)
    h = cfg.hcd
    for r in read_metrics(train(cfg, tmp_path).metrics_path):
        want = r["ce"] + r["sub_ce"] + h.lam * r["kl"] + h.beta * r["sub_kl"] + h.omega * r["orth"]
        assert abs(r["total"] - want) <= 1e-10


def test_switched_off_hcd_reports_only_ce_terms(tiny_desk, tmp_path):
    cfg = quick(tiny_desk, hcd=replace(tiny_desk.hcd, lam=0.0, beta=0.0, omega=0.0))
    for r in read_metrics(train(cfg, tmp_path).metrics_path):
        assert r["kl"] == r["sub_kl"] == r["orth"] == 0.0
        assert abs(r["total"] - (r["ce"] + r["sub_ce"])) <= 1e-12


@pytest.mark.parametrize("method", ["ce", "kd"])
def test_baseline_methods(tiny_desk, tmp_path, method):
    rows = read_metrics(train(quick(tiny_desk, method=method), tmp_path).metrics_path)
    assert rows[-1]["sub_ce"] == rows[-1]["orth"] == 0.0
    assert (rows[-1]["kl"] > 0) == (method == "kd")


def test_training_leaves_inputs_untouched(tiny_desk, tmp_path):
    paths = [tiny_desk.train_data, tiny_desk.test_data, tiny_desk.teacher]
    before = [open(p, "rb").read() for p in paths]
    train(quick(tiny_desk, epochs=1), tmp_path)
    assert [open(p, "rb").read() for p in paths] == before


@pytest.mark.slow
def test_ce_fits_blobs(tmp_path):
    from hcdlab.harness.desk import prepare

    cfg = prepare(tmp_path, kind="blobs", n_train=500, n_test=100, k=10, d=16)
    res = train(replace(cfg, method="ce", timing=False), tmp_path / "run")
    assert res.rows[-1].train_acc >= 95.0


# ---------------------------------------------------------------- ablation


def test_apply_axis_values(tiny_desk):
    assert apply_axis(tiny_desk, "n", "6").hcd.n == 6
    h = apply_axis(tiny_desk, "losses", "kd+sub").hcd
    assert (h.lam, h.beta, h.omega) == (1.0, 8.0, 0.0)
    assert apply_axis(tiny_desk, "stages", "1+2").hcd.stages == (1, 2)
    assert apply_axis(tiny_desk, "fusion", "ratio:0.25").hcd.fusion_weights == (0.25, 0.75)
    with pytest.raises(ConfigError):
        apply_axis(tiny_desk, "n", "x")
    with pytest.raises(ConfigError):
        apply_axis(tiny_desk, "losses", "kd+foo")


def test_worker_count_respects_env(monkeypatch):
    monkeypatch.setenv("HCD_THREADS", "2")
    assert worker_count(10) == 2
    assert worker_count(1) == 1


def test_ablate_losses_csv(tiny_desk, tmp_path):
    path = ablate(quick(tiny_desk, epochs=1), "losses", ["kd", "kd+sub", "kd+sub+orth"], seeds=[0, 1],
                  out_dir=tmp_path, workers=1)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [(r[1], r[2]) for r in rows[1:]] == [(v, s) for v in ("kd", "kd+sub", "kd+sub+orth") for s in "01"]
    m = {v: read_metrics(tmp_path / f"losses={v.replace('+', '-')}" / "seed=0" / "metrics.csv")[0]
         for v in ("kd", "kd+sub", "kd+sub+orth")}
    assert m["kd"]["sub_kl"] == m["kd"]["orth"] == 0.0 and m["kd"]["kl"] > 0
    assert m["kd+sub"]["sub_kl"] > 0 and m["kd+sub"]["orth"] == 0.0
    assert m["kd+sub+orth"]["orth"] > 0


# ---------------------------------------------------------------- CLI


def test_cli_usage_errors(capsys):
    assert cli.main(["train", "--bogus"]) == 1
    assert cli.main(["train", "--out", "x"]) == 1  # missing --seed
    assert cli.main([]) == 1


def test_cli_gen_train_eval(tmp_path, capsys):
    d = tmp_path
    assert cli.main(["gen-data", "--kind", "blobs", "--n", "40", "--k", "4", "--seed", "1",
                     "--out", str(d / "tr.hcdx")]) == 0
    assert cli.main(["gen-teacher", "--data", str(d / "tr.hcdx"), "--d", "8", "--out", str(d / "t.hcdt")]) == 0
    cfg = ExperimentConfig(hcd=replace(ExperimentConfig().hcd, d=8, m=4),
                           sgd=SgdConfig(epochs=1, batch_size=20, lr_decay_epochs=(1,)))
    (d / "c.json").write_text(cfg.to_json())
    args = ["train", "--config", str(d / "c.json"), "--method", "hcd", "--train-data", str(d / "tr.hcdx"),
            "--teacher", str(d / "t.hcdt"), "--seed", "0", "--no-timing"]
    assert cli.main(args + ["--out", str(d / "r1")]) == 0
    assert cli.main(args + ["--out", str(d / "r2")]) == 0
    assert (d / "r1" / "metrics.csv").read_bytes() == (d / "r2" / "metrics.csv").read_bytes()
    assert cli.main(["eval", "--checkpoint", str(d / "r1" / "student.hcdp"), "--data", str(d / "tr.hcdx")]) == 0
    assert "top1=" in capsys.readouterr().out


def test_cli_validation_and_runtime_exit_codes(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    base = ["train", "--seed", "0", "--out", str(tmp_path / "o")]
    assert cli.main(base + ["--config", str(tmp_path / "bad.json")]) == 1
    assert cli.main(base + ["--train-data", str(tmp_path / "missing.hcdx"), "--method", "ce"]) == 2
    (tmp_path / "junk.hcdx").write_bytes(b"JUNK" + bytes(40))
    assert cli.main(base + ["--train-data", str(tmp_path / "junk.hcdx"), "--method", "ce"]) == 1


def test_cli_gradcheck_small(capsys):
    assert cli.main(["gradcheck", "--batch", "2", "--coords", "40"]) == 0
    assert "max_rel_err=" in capsys.readouterr().out
