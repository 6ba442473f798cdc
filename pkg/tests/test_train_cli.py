import csv
import json

import numpy as np
import pytest

from fpcd import cli
from fpcd import train as train_mod
from fpcd.analysis import read_pgm
from fpcd.collab import schedule_weight
from fpcd.data import DatasetConfig, generate_dataset, make_arrays
from fpcd.losses import ConfigurationError
from fpcd.models import StagedBackbone, build_student, build_teacher
from fpcd.tensor import NonFiniteError
from fpcd.tensorio import save_tensor
from fpcd.train import (
    METRIC_COLUMNS,
    RunConfig,
    TrainingAborted,
    accuracy_report,
    distill,
    evaluate,
    read_metrics,
    train_baseline,
    train_teacher,
)

TINY = dict(teacher_widths=(4, 4, 8, 8), student_widths=(2, 2, 4, 4), shift_div=2, batch_size=8, lr=0.02)


@pytest.fixture(scope="module")
def data():
    return make_arrays(DatasetConfig(clips_per_class=6, noise=0.1))


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(RunConfig(mode="train-teacher", epochs=1, seed=1, **TINY), data).model


def run_cfg(tmp_path, name, **kw):
    base = dict(TINY, epochs=3, seed=0, out_dir=str(tmp_path / name))
    base.update(kw)
    return RunConfig(**base)


def test_metrics_header_exact(tmp_path, data):
    cfg = run_cfg(tmp_path, "b", mode="train-student-baseline", epochs=1)
    train_baseline(cfg, data)
    header = (tmp_path / "b" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,loss_cls,loss_s,loss_p,f_n,gate_fraction,train_top1,val_top1"
    assert tuple(header.split(",")) == METRIC_COLUMNS


def test_baseline_repeat_is_byte_identical(tmp_path, data):
    for name in ("a", "b"):
        train_baseline(run_cfg(tmp_path, name, mode="train-student-baseline"), data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_distill_repeat_is_byte_identical(tmp_path, data, teacher):
    for name in ("a", "b"):
        distill(run_cfg(tmp_path, name, mode="distill-fpcd"), teacher, data)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_all_flags_off_matches_baseline(tmp_path, data, teacher):
    base = train_baseline(run_cfg(tmp_path, "base", mode="train-student-baseline"), data)
    off = distill(run_cfg(tmp_path, "off", mode="distill-fpcd", fsd="off", pdd=False, cl=False), teacher, data)
    assert (tmp_path / "base" / "metrics.csv").read_bytes() == (tmp_path / "off" / "metrics.csv").read_bytes()
    for k in base.model.params:
        assert np.array_equal(base.model.params[k].data, off.model.params[k].data)


def test_metrics_columns_follow_flags(tmp_path, data, teacher):
    no_cl = distill(run_cfg(tmp_path, "x", mode="distill-fpcd", cl=False), teacher, data)
    assert all(r.gate_fraction == 1.0 and r.f_n == 1.0 for r in no_cl.metrics)
    assert all(r.loss_s > 0 and r.loss_p >= 0 for r in no_cl.metrics)
    cfg = run_cfg(tmp_path, "y", mode="distill-fpcd", epochs=4)
    with_cl = distill(cfg, teacher, data)
    for r in read_metrics(tmp_path / "y" / "metrics.csv"):
        assert r.f_n == schedule_weight(r.epoch, cfg.schedule())
        assert 0.0 <= r.gate_fraction <= 1.0
        assert 0.0 <= r.train_top1 <= 1.0 and 0.0 <= r.val_top1 <= 1.0
    assert (tmp_path / "y" / "confidence_profile.csv").exists()
    assert with_cl.profile is not None


def test_simple_kd_runs(tmp_path, data, teacher):
    res = distill(run_cfg(tmp_path, "kd", mode="distill-simple-kd", epochs=1), teacher, data)
    assert np.isfinite(res.metrics[0].loss_cls)


def test_zero_epochs_checkpoint_is_initialisation(tmp_path, data):
    a = train_teacher(run_cfg(tmp_path, "t0", mode="train-teacher", epochs=0), data)
    init = build_teacher(TINY["teacher_widths"], 8, 8, 0, 2)
    loaded = StagedBackbone.load(tmp_path / "t0" / "checkpoint")
    fresh = train_teacher(run_cfg(tmp_path, "t1", mode="train-teacher", epochs=0), data)
    for k in loaded.params:
        assert np.array_equal(loaded.params[k].data, fresh.model.params[k].data)
        assert np.array_equal(loaded.params[k].data, a.model.params[k].data)
    assert init.params["s1.conv1.w"].shape == loaded.params["s1.conv1.w"].shape
    assert (tmp_path / "t0" / "metrics.csv").read_text().strip() == ",".join(METRIC_COLUMNS)


def test_nan_aborts_with_last_good_checkpoint(tmp_path, data, monkeypatch):
    # no lr decay, so epoch 1 of a 1-epoch and of a 3-epoch run coincide
    one = train_baseline(run_cfg(tmp_path, "one", mode="train-student-baseline", epochs=1, lr_milestones=()), data)
    steps_per_epoch = -(-len(data["train"][1]) // TINY["batch_size"])
    real = train_mod.cross_entropy
    calls = []

    def failing(logits, labels, reduction="mean"):
        calls.append(1)
        if len(calls) > steps_per_epoch:
            raise NonFiniteError("injected")
        return real(logits, labels, reduction)

    monkeypatch.setattr(train_mod, "cross_entropy", failing)
    with pytest.raises(TrainingAborted, match="epoch 2"):
        train_baseline(run_cfg(tmp_path, "nan", mode="train-student-baseline", epochs=3, lr_milestones=()), data)
    loaded = StagedBackbone.load(tmp_path / "nan" / "checkpoint")
    for k, p in one.model.params.items():
        assert np.array_equal(loaded.params[k].data, p.data)
    assert len(read_metrics(tmp_path / "nan" / "metrics.csv")) == 1


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RunConfig(fsd="middle")
    with pytest.raises(ConfigurationError):
        RunConfig(mode="distill-fpcd", cl=True, epochs=10, n1=3, n2=12)
    with pytest.raises(ConfigurationError):
        RunConfig(mode="distill-fpcd", teacher_widths=(4, 4, 4, 4), student_widths=(8, 4, 4, 4))
    # a teacher run does not care about the (default) student widths
    RunConfig(mode="train-teacher", teacher_widths=(2, 4, 4, 4))
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigurationError):
        RunConfig(grad_clip=0.0)


def test_distill_rejects_narrow_teacher(tmp_path, data):
    narrow = build_teacher((2, 2, 2, 2), shift_div=2)
    with pytest.raises(ConfigurationError):
        distill(run_cfg(tmp_path, "n", mode="distill-fpcd", epochs=1), narrow, data)


def test_lr_schedule():
    cfg = RunConfig(epochs=60, lr=0.01)
    assert [cfg.lr_at(e) for e in (1, 30, 31, 45, 46)] == pytest.approx([0.01, 0.01, 0.001, 0.001, 0.0001])


# -- evaluation -------------------------------------------------------------------


def test_constant_predictor_scores_chance():
    data = make_arrays(DatasetConfig(clips_per_class=20))  # 3 test clips per class
    model = build_student((2, 2, 4, 4), shift_div=2)
    model.params["fc.w"].data[:] = 0.0
    model.params["fc.b"].data = np.eye(8)[3] * 5.0
    rep = evaluate(model, *data["test"])
    assert rep["top1"] == pytest.approx(0.125)
    assert rep["per_class"][3] == 1.0 and sum(rep["per_class"]) == 1.0


def test_top5_nests_top1():
    rng = np.random.default_rng(0)
    rep = accuracy_report(rng.standard_normal((50, 8)), rng.integers(0, 8, 50))
    assert rep["top5"] >= rep["top1"]


def test_evaluate_twice_identical(data, teacher):
    # repr so that NaN entries for classes absent from the split compare equal
    assert repr(evaluate(teacher, *data["val"])) == repr(evaluate(teacher, *data["val"]))


# -- command line -------------------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out-dir", str(root / "data"), "--set", "clips_per_class=6",
                     "--set", "noise=0.1"]) == 0
    cfg = dict(TINY, epochs=3, teacher_widths=list(TINY["teacher_widths"]),
               student_widths=list(TINY["student_widths"]), data_dir=str(root / "data"))
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def test_cli_training_pipeline(workspace):
    root = workspace
    common = ["--config", str(root / "cfg.json")]
    assert cli.main(["train-teacher", *common, "--seed", "1", "--out-dir", str(root / "teacher")]) == 0
    assert cli.main(["train-baseline", *common, "--seed", "0", "--out-dir", str(root / "base")]) == 0
    assert cli.main(["distill", *common, "--seed", "0", "--out-dir", str(root / "fpcd"),
                     "--teacher-dir", str(root / "teacher")]) == 0
    assert cli.main(["distill", *common, "--seed", "0", "--out-dir", str(root / "off"),
                     "--teacher-dir", str(root / "teacher"), "--set", "fsd=off", "--set", "pdd=false",
                     "--set", "cl=false"]) == 0
    assert (root / "base" / "metrics.csv").read_bytes() == (root / "off" / "metrics.csv").read_bytes()
    saved = json.loads((root / "fpcd" / "config.json").read_text())
    assert saved["seed"] == 0 and saved["mode"] == "distill-fpcd"

    out = root / "eval.csv"
    assert cli.main(["eval", "--checkpoint", str(root / "fpcd"), "--data-dir", str(root / "data"),
                     "--out", str(out)]) == 0
    rows = dict(csv.reader(out.open()))
    assert 0.0 <= float(rows["top1"]) <= float(rows["top5"]) <= 1.0

    params_dir = root / "params"
    assert cli.main(["analyze-params", "--teacher", str(root / "teacher"), "--student", str(root / "fpcd"),
                     "--baseline", str(root / "base"), "--out-dir", str(params_dir)]) == 0
    rows = list(csv.DictReader((params_dir / "param_distribution.csv").open()))
    assert {r["role"] for r in rows} == {"teacher", "student", "baseline"}
    for role in ("teacher", "student", "baseline"):
        for g in range(4):
            probs = [float(r["probability"]) for r in rows if r["role"] == role and r["group"] == str(g)]
            assert len(probs) == 32 and sum(probs) == pytest.approx(1.0)
    kls = dict(csv.reader((params_dir / "param_kl.csv").open()))
    assert float(kls["kl_student_teacher"]) >= 0


def test_cli_seed_is_mandatory(workspace, capsys):
    with pytest.raises(SystemExit):
        cli.main(["train-baseline", "--config", str(workspace / "cfg.json"), "--out-dir", "x"])


def test_cli_reports_config_errors(workspace, capsys):
    code = cli.main(["train-baseline", "--config", str(workspace / "cfg.json"), "--seed", "0",
                     "--out-dir", str(workspace / "bad"), "--set", "fsd=middle"])
    assert code == 2
    assert "fsd" in capsys.readouterr().err
    assert cli.main(["train-teacher", "--seed", "0", "--out-dir", "x", "--data-dir",
                     str(workspace / "missing")]) == 2


def test_parse_overrides():
    got = cli.parse_overrides(["lr=0.5", "pdd=false", "fsd=low", "student_widths=[1,2,3,4]"])
    assert got == {"lr": 0.5, "pdd": False, "fsd": "low", "student_widths": [1, 2, 3, 4]}
    with pytest.raises(ConfigurationError):
        cli.parse_overrides(["novalue"])


def spectrum_rows(path):
    return [(int(r["stage"]), int(r["bin"]), float(r["normalized_frequency"]), float(r["mean_energy"]))
            for r in csv.DictReader(path.open())]


def test_analyze_spectrum_static_and_alternating(tmp_path):
    model = build_student((2, 2, 4, 4), shift_div=2)
    model.save(tmp_path / "ck")
    frame = np.random.default_rng(0).random((32, 32, 1)) * 0.5 + 0.25
    save_tensor(tmp_path / "static.fpcd", np.repeat(frame[None], 8, axis=0))
    save_tensor(tmp_path / "alt.fpcd", np.stack([frame if p % 2 == 0 else 1 - frame for p in range(8)]))

    assert cli.main(["analyze-spectrum", "--checkpoint", str(tmp_path / "ck"), "--clip",
                     str(tmp_path / "static.fpcd"), "--out-dir", str(tmp_path / "s")]) == 0
    rows = spectrum_rows(tmp_path / "s" / "band_energy.csv")
    assert [r[2] for r in rows if r[0] == 0] == [k / 8 for k in range(5)]
    # the input level only: the temporal shift zero-fills boundary frames inside the network
    assert all(e < 1e-20 for st, k, _, e in rows if st == 0 and k > 0)
    img = read_pgm(tmp_path / "s" / "stage0_low.pgm")
    assert img.shape == (32, 8 * 32)
    assert (tmp_path / "s" / "stage4_high.pgm").exists()

    cli.main(["analyze-spectrum", "--checkpoint", str(tmp_path / "ck"), "--clip",
              str(tmp_path / "alt.fpcd"), "--out-dir", str(tmp_path / "a")])
    stage0 = [e for st, k, _, e in spectrum_rows(tmp_path / "a" / "band_energy.csv") if st == 0]
    # zero-mean alternation: everything off DC sits in the Nyquist bin
    ac = np.array(stage0[1:])
    assert np.argmax(ac) == 3 and ac[:3].sum() < 1e-20 * max(ac[3], 1)


def test_analyze_spectrum_missing_clip(tmp_path, capsys):
    model = build_student((2, 2, 4, 4), shift_div=2)
    model.save(tmp_path / "ck")
    assert cli.main(["analyze-spectrum", "--checkpoint", str(tmp_path / "ck"), "--clip",
                     str(tmp_path / "nope.fpcd"), "--out-dir", str(tmp_path / "o")]) == 2
    assert "nope.fpcd" in capsys.readouterr().err
