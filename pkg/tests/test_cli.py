import numpy as np
import pytest

from clipmap.checkpoint import load_bundle, load_model, save_model
from clipmap.cli import main, read_compare_csv
from clipmap.mapping import INIT_METHODS
from clipmap.training import read_loss_csv

TINY = """
model.width = 16
model.depth = 2
model.seq_len = 10
model.vocab = 32
model.embed_dim = 8
compress.d2 = 8
compress.l2 = 1
data.attributes = 4
data.values = 3
data.train_size = 128
data.val_size = 32
train.teacher.steps = 6
train.teacher.warmup = 1
train.teacher.batch = 16
train.map.steps = 6
train.map.warmup = 1
train.map.batch = 16
train.retrain.steps = 4
train.retrain.warmup = 1
train.retrain.batch = 16
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    assert main(["pretrain-teacher", "--config", str(d / "tiny.cfg"), "--out", str(d / "t"), "--quiet"]) == 0
    return d


def run(d, *args):
    return main([*args, "--config", str(d / "tiny.cfg"), "--quiet"])


def test_pretrain_outputs_and_determinism(run_dir, tmp_path):
    assert (run_dir / "t" / "teacher_loss.csv").exists()
    assert len(read_loss_csv(run_dir / "t" / "teacher_loss.csv")) == 6
    assert run(run_dir, "pretrain-teacher", "--out", str(tmp_path), "--deterministic") == 0
    a = (run_dir / "t" / "teacher.ckpt").read_bytes()
    assert (tmp_path / "teacher.ckpt").read_bytes() == a
    assert run(run_dir, "pretrain-teacher", "--out", str(tmp_path / "s"), "--seed", "5") == 0
    assert (tmp_path / "s" / "teacher.ckpt").read_bytes() != a


def test_map_then_retrain_then_eval(run_dir, capsys):
    teacher = str(run_dir / "t" / "teacher.ckpt")
    out = run_dir / "m"
    before = load_model(teacher).checksum()
    assert run(run_dir, "map", "--teacher", teacher, "--out", str(out)) == 0
    for name in ("maps.ckpt", "student_init.ckpt", "map_loss.csv"):
        assert (out / name).exists()
    epochs = sorted({p.name.split(".epoch")[1] for p in (out / "heatmaps").glob("*.csv")})
    assert epochs == ["0.csv", "3.csv", "6.csv"]
    capsys.readouterr()
    assert run(run_dir, "retrain", "--teacher", teacher, "--student", str(out / "student_init.ckpt"),
               "--out", str(out)) == 0
    assert "effective lambda = 1.0" in capsys.readouterr().out
    assert load_model(teacher).checksum() == before
    assert (out / "student_final.ckpt").exists() and (out / "retrain_loss.csv").exists()
    reports = []
    for _ in range(2):
        assert run(run_dir, "eval", "--student", str(out / "student_final.ckpt"), "--out", str(out)) == 0
        reports.append((out / "eval_report.csv").read_text())
    assert reports[0] == reports[1]
    assert "params.image" in reports[0] and "params.text" in reports[0]
    assert run(run_dir, "inspect-maps", "--maps", str(out / "maps.ckpt"), "--out", str(out / "inspect")) == 0


def test_identity_map_with_zero_steps_reproduces_teacher(run_dir):
    cfg = run_dir / "ident.cfg"
    cfg.write_text(TINY.replace("compress.d2 = 8", "compress.d2 = 16").replace("compress.l2 = 1", "compress.l2 = 2")
                   .replace("train.map.steps = 6", "train.map.steps = 0").replace("train.map.warmup = 1",
                                                                                   "train.map.warmup = 0"))
    out = run_dir / "ident"
    assert main(["map", "--config", str(cfg), "--teacher", str(run_dir / "t" / "teacher.ckpt"),
                 "--out", str(out), "--quiet"]) == 0
    t, _ = load_bundle(run_dir / "t" / "teacher.ckpt")
    s, _ = load_bundle(out / "student_init.ckpt")
    assert t.keys() == s.keys()
    assert max(float(np.max(np.abs(t[k] - s[k]))) for k in t) == 0.0


def test_compare_init_rows(run_dir):
    out = run_dir / "c"
    assert run(run_dir, "compare-init", "--teacher", str(run_dir / "t" / "teacher.ckpt"), "--out", str(out)) == 0
    rows = read_compare_csv(out / "compare_init.csv")
    assert [r["method"] for r in rows] == list(INIT_METHODS)
    assert len({(r["steps"], r["warmup"], r["lr"]) for r in rows}) == 1
    assert all((out / f"maps_{m}.ckpt").exists() and (out / f"map_loss_{m}.csv").exists() for m in INIT_METHODS)


def test_retrain_without_student_starts_from_random_init(run_dir, capsys):
    assert run(run_dir, "retrain", "--teacher", str(run_dir / "t" / "teacher.ckpt"), "--out",
               str(run_dir / "r")) == 0
    assert "random init" in capsys.readouterr().out


def test_exit_codes_and_no_partial_outputs(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY + "train.map.stepz = 3\n")
    out = tmp_path / "never"
    assert main(["pretrain-teacher", "--config", str(bad), "--out", str(out)]) == 2
    assert "train.map.stepz" in capsys.readouterr().err
    assert not out.exists()
    assert run(run_dir, "map", "--teacher", str(tmp_path / "missing.ckpt"), "--out", str(out)) == 3
    assert run(run_dir, "map", "--out", str(out)) == 2
    assert not out.exists()
    corrupt = tmp_path / "corrupt.ckpt"
    data = bytearray((run_dir / "t" / "teacher.ckpt").read_bytes())
    data[-10] ^= 1
    corrupt.write_bytes(bytes(data))
    assert run(run_dir, "eval", "--teacher", str(corrupt), "--out", str(out)) == 3
    # a teacher whose dims disagree with the config is a config error
    assert main(["map", "--teacher", str(run_dir / "t" / "teacher.ckpt"), "--out", str(out), "--quiet"]) == 2
    assert not out.exists()


def test_numeric_failure_exit_code(run_dir, tmp_path):
    model = load_model(run_dir / "t" / "teacher.ckpt")
    model.text.layers[0]["q_w"].data = np.full_like(model.text.layers[0]["q_w"].data, np.inf)
    save_model(tmp_path / "nan.ckpt", model)
    with np.errstate(all="ignore"):
        assert run(run_dir, "map", "--teacher", str(tmp_path / "nan.ckpt"), "--out", str(tmp_path / "o")) == 4
