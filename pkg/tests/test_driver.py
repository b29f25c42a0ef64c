import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from conftest import suite_config, suite_data
from pgl.data import SyntheticConfig, generate_synthetic, write_feature_file, write_truth_file
from pgl.driver import (ConfigError, RunConfig, config_from_mapping, evaluate, load_config,
                        parse_config_text, pretrain_source, report_from_dump, source_only_baseline,
                        train_pgl, train_sfpgl)
from pgl.gnn import read_checkpoint
from pgl.metrics import full_report

TINY = dict(C=3, alpha=0.5, beta=0.4, hidden=8, batch_size=2, epochs_per_step=1, iters_per_epoch=2,
            pretrain_epochs=2, lr_backbone=1e-3, lr_gnn=1e-3, lr_classifier=1e-3, lr_discriminator=1e-3)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SyntheticConfig(samples_per_class=20, dim=4, shift=1.0, seed=2))


@pytest.fixture
def files(tmp_path, tiny_data):
    d = tiny_data
    paths = {k: str(tmp_path / f"{k}.tsv") for k in ("source", "target", "truth")}
    write_feature_file(paths["source"], d.source)
    write_feature_file(paths["target"], d.target)
    write_truth_file(paths["truth"], d.target.ids, d.truth)
    return paths


# ---------------------------------------------------------------- config

def test_config_validation():
    for bad in (dict(alpha=0.0), dict(alpha=1.5), dict(beta=1.0), dict(mu=-1.0), dict(mode="x"),
                dict(dropout=1.0), dict(depth=0)):
        with pytest.raises(ConfigError):
            RunConfig(**bad).validate()
    with pytest.raises(ConfigError, match="source_path"):
        RunConfig().require("source_path")


def test_step_budget():
    assert RunConfig(alpha=0.05).steps == 20
    assert RunConfig(alpha=0.05, stop_step=7).steps == 7
    assert RunConfig(alpha=1.0).steps == 1
    assert [RunConfig(alpha=a).steps for a in (0.2, 0.1, 0.05)] == [5, 10, 20]


def test_config_text(tmp_path):
    text = "# comment\nC = 4\nalpha = 0.2  # trailing\nbalanced = false\nsource_path = a.tsv\n"
    assert parse_config_text(text)["alpha"] == "0.2"
    path = tmp_path / "run.cfg"
    path.write_text(text)
    cfg = load_config(str(path), {"alpha": "0.1"})
    assert (cfg.C, cfg.alpha, cfg.balanced, cfg.source_path) == (4, 0.1, False, "a.tsv")
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_mapping({"gamma": 1})
    with pytest.raises(ConfigError):
        config_from_mapping({"C": "three"})
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign")
    assert RunConfig(C=3).to_text().splitlines()[0] == "mode = pgl"


# ---------------------------------------------------------------- pretraining

def test_pretrain_checkpoint_has_no_gnn(tmp_path, tiny_data):
    path = str(tmp_path / "p.ckpt")
    pretrain_source(tiny(), tiny_data.source, path)
    meta, arrays = read_checkpoint(path)
    assert {g for g, _ in arrays.values()} == {"backbone", "classifier"}
    assert meta["stage"] == "pretrain"


def test_pretrain_fits_separable_source():
    d = generate_synthetic(SyntheticConfig(separation=6.0, noise=0.5, seed=4))
    model = pretrain_source(tiny(pretrain_epochs=15, hidden=16), d.source)
    acc = (model.classify(model.backbone(d.source.X)).data.argmax(1) == d.source.labels).mean()
    assert acc >= 0.95


def test_pretrain_deterministic_bytes(tmp_path, tiny_data):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    pretrain_source(tiny(seed=5), tiny_data.source, a)
    pretrain_source(tiny(seed=5), tiny_data.source, b)
    assert open(a, "rb").read() == open(b, "rb").read()


# ---------------------------------------------------------------- PGL

def test_pgl_run_directory(tmp_path, files):
    run = tmp_path / "run"
    cfg = tiny(source_path=files["source"], target_path=files["target"],
               truth_path=files["truth"], run_dir=str(run))
    res = train_pgl(cfg)
    for name in ("config.txt", "metrics.log", "pseudo/step_1.tsv", "pseudo/step_2.tsv",
                 "model.ckpt", "report.txt", "reliability.csv", "predictions.tsv"):
        assert (run / name).exists(), name
    assert res.state.m == 2 and res.state.labeled_count() == 100
    line = (run / "metrics.log").read_text().splitlines()[0].split("\t")
    assert line[0] == "step0.0" and float(line[2]) == float(line[2])
    dump = (run / "predictions.tsv").read_text()
    again = report_from_dump(dump, 3)
    assert again.H == pytest.approx(res.report.H, abs=1e-12)
    assert again.ECE == pytest.approx(res.report.ECE, abs=1e-12)


def test_pgl_progressive_counts_increase(tiny_data):
    counts = []
    train_pgl(tiny(alpha=0.25), tiny_data.source, tiny_data.target, tiny_data.truth,
              on_step=lambda st, probs: counts.append(st.labeled_count()))
    assert len(counts) == 4
    assert all(a < b for a, b in zip(counts, counts[1:]))
    assert counts[-1] == len(tiny_data.target)


def test_pgl_single_step_and_stop_step(tiny_data):
    res = train_pgl(tiny(alpha=1.0), tiny_data.source, tiny_data.target, tiny_data.truth)
    assert res.state.m == 1 and res.state.labeled_count() == len(tiny_data.target)
    res = train_pgl(tiny(alpha=0.25, stop_step=2), tiny_data.source, tiny_data.target, tiny_data.truth)
    assert res.state.m == 2 and res.state.labeled_count() == 50


def test_standard_minimax_flips_logged_adversarial_term(tiny_data):
    lit = train_pgl(tiny(alpha=1.0), tiny_data.source, tiny_data.target, tiny_data.truth)
    std = train_pgl(tiny(alpha=1.0, standard_minimax=True), tiny_data.source, tiny_data.target,
                    tiny_data.truth)

    def adv(res):
        return [float(l.split("\t")[2]) for l in res.logs if "\tadv\t" in l]
    assert all(v <= 0 for v in adv(lit)) and all(v >= 0 for v in adv(std))


def test_pgl_dimension_mismatch(tiny_data):
    other = generate_synthetic(SyntheticConfig(samples_per_class=5, dim=5))
    with pytest.raises(ConfigError):
        train_pgl(tiny(), tiny_data.source, other.target, other.truth)


def test_pgl_reproducible(tmp_path, files):
    outs = []
    for k in range(2):
        run = tmp_path / f"r{k}"
        train_pgl(tiny(source_path=files["source"], target_path=files["target"],
                       truth_path=files["truth"], run_dir=str(run), seed=3))
        outs.append([(run / n).read_bytes() for n in ("report.txt", "model.ckpt", "metrics.log",
                                                       "predictions.tsv")])
    assert outs[0] == outs[1]


@pytest.mark.slow
def test_pgl_no_shift_not_worse_than_baseline():
    d = suite_data(0, shift=0.0)
    cfg = suite_config(0, stop_step=2)
    base = source_only_baseline(cfg, d.source, d.target, d.truth)
    pgl = train_pgl(cfg, d.source, d.target, d.truth)
    pgl_h, base_h = pgl.report.H, base.report.H
    assert pgl_h >= base_h, f"PGL H {pgl_h:.4f} < source-only H {base_h:.4f}"


# ---------------------------------------------------------------- SF-PGL

@pytest.fixture
def pretrained(tmp_path, tiny_data):
    path = str(tmp_path / "pre.ckpt")
    pretrain_source(tiny(), tiny_data.source, path)
    return path


def test_sfpgl_iterations(pretrained, tiny_data):
    for alpha, steps in ((0.2, 5), (0.1, 10)):
        seen = []
        train_sfpgl(tiny(alpha=alpha, mode="sfpgl", iters_per_epoch=1), pretrained, tiny_data.target,
                    tiny_data.truth, on_step=lambda st, p: seen.append(st.m))
        assert seen == list(range(1, steps + 1))


def test_sfpgl_balanced_banks(pretrained, tiny_data):
    counts = []
    res = train_sfpgl(tiny(alpha=0.25, mode="sfpgl"), pretrained, tiny_data.target, tiny_data.truth,
                      on_step=lambda st, p: counts.append(st.per_class_counts().copy()))
    # 100 targets, step 1 capacity floor(0.6 * 0.25 * 100 / 3) = 5 per class
    assert counts[0].tolist() == [5, 5, 5]
    assert abs(res.state.weights.sum() - 1) < 1e-9
    assert res.report is not None


def test_sfpgl_global_variant_runs(pretrained, tiny_data):
    res = train_sfpgl(tiny(mode="sfpgl", balanced=False), pretrained, tiny_data.target, tiny_data.truth)
    assert res.state.weights is None and res.report.H >= 0


def test_sfpgl_checkpoint_mismatch(pretrained, tiny_data):
    with pytest.raises(ConfigError, match="classes"):
        train_sfpgl(tiny(C=4, mode="sfpgl"), pretrained, tiny_data.target, tiny_data.truth)
    other = generate_synthetic(SyntheticConfig(samples_per_class=5, dim=5))
    with pytest.raises(ConfigError, match="dim"):
        train_sfpgl(tiny(mode="sfpgl"), pretrained, other.target, other.truth)


def test_sfpgl_has_no_source_parameter():
    import inspect
    assert not any("source" in p for p in inspect.signature(train_sfpgl).parameters)


SOURCE_FREE_SCRIPT = textwrap.dedent("""
    import os, sys
    opened = []
    sys.addaudithook(lambda ev, args: opened.append(str(args[0])) if ev == "open" else None)
    from pgl.driver import RunConfig, train_sfpgl
    src = sys.argv[1]
    assert not os.path.exists(src)
    cfg = RunConfig(mode="sfpgl", C=3, alpha=0.5, beta=0.4, hidden=8, batch_size=2,
                    epochs_per_step=1, iters_per_epoch=2, source_path=src,
                    target_path=sys.argv[2], truth_path=sys.argv[3], run_dir=sys.argv[4])
    res = train_sfpgl(cfg, sys.argv[5])
    bad = [p for p in opened if os.path.basename(src) in p]
    print("H", res.report.H, "opens", len(opened), "source_opens", len(bad))
    sys.exit(1 if bad else 0)
""")


def test_sfpgl_source_free_process(tmp_path, files, pretrained):
    os.remove(files["source"])
    proc = subprocess.run([sys.executable, "-c", SOURCE_FREE_SCRIPT, files["source"], files["target"],
                           files["truth"], str(tmp_path / "sf"), pretrained],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr + proc.stdout
    assert "source_opens 0" in proc.stdout
    assert (tmp_path / "sf" / "report.txt").exists()


# ---------------------------------------------------------------- evaluation

def test_evaluate_twice_identical(tmp_path, files, pretrained):
    cfg = tiny(mode="eval", target_path=files["target"], truth_path=files["truth"])
    a = evaluate(pretrained, cfg)
    b = evaluate(pretrained, cfg)
    assert a.report.to_text() == b.report.to_text()
    with pytest.raises(ConfigError, match="truth"):
        evaluate(pretrained, tiny(mode="eval", target_path=files["target"]))


def test_perfect_dump_recomputes():
    from pgl.driver import prediction_dump
    truth = np.array([0, 1, 2, 3, 3])
    conf = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    report = report_from_dump(prediction_dump(list("abcde"), truth, truth, conf), 3)
    assert report.OS == report.H == 1.0
    assert report.ECE == pytest.approx(full_report(truth, truth, conf, 3).ECE, abs=1e-15)
