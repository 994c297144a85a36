"""Pipeline orchestration: artifacts, composition, determinism, exit codes."""

import filecmp
from pathlib import Path

import pytest

import synth
from kernelrules.cli import RunConfig, load_config, main, report, run_pipeline
from kernelrules.inference import Metrics
from kernelrules.rules import RuleSetStats, load_labelmap, parse_ruleset, stats


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    return synth.build_dataset(root), root


def make_config(paths, out_dir, **overrides):
    values = dict(
        norms_train=str(paths["norms_train"]),
        norms_test=str(paths["norms_test"]),
        masks_dir=str(paths["masks_dir"]),
        featmaps_dir=str(paths["featmaps_dir"]),
        out_dir=str(out_dir),
        ratio=0.0,
        tail=1e-9,
    )
    values.update(overrides)
    return RunConfig(**values)


def test_pipeline_end_to_end(dataset, tmp_path):
    paths, _ = dataset
    out_dir = tmp_path / "run"
    report_text = run_pipeline(make_config(paths, out_dir))
    assert "accuracy 1.0" in report_text
    assert "fidelity 1.0" in report_text

    for name in ("thresholds.csv", "bits_train.csv", "bits_test.csv",
                 "ruleset.lp", "labels.csv", "ruleset_labeled.lp",
                 "predictions.csv", "metrics.csv", "report.txt",
                 "manifest.json"):
        assert (out_dir / name).exists(), name

    labels = load_labelmap(out_dir / "labels.csv")
    assert labels.entries == synth.EXPECTED_LABELS

    rs = parse_ruleset((out_dir / "ruleset.lp").read_text())
    assert set(rs.kernel_universe) == {synth.KERNEL_A, synth.KERNEL_B}
    labelled = (out_dir / "ruleset_labeled.lp").read_text()
    assert "window1(X)" in labelled
    assert "carpet1(X)" in labelled


def test_pipeline_rerun_is_byte_identical(dataset, tmp_path):
    paths, _ = dataset
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_pipeline(make_config(paths, out_a))
    run_pipeline(make_config(paths, out_b))
    for artifact in sorted(out_a.iterdir()):
        other = out_b / artifact.name
        if artifact.name == "manifest.json":
            continue  # carries absolute paths of its own run directory
        assert other.exists()
        assert artifact.read_bytes() == other.read_bytes(), artifact.name


def test_pipeline_matches_stagewise_cli(dataset, tmp_path):
    paths, _ = dataset
    pipe_dir = tmp_path / "pipe"
    run_pipeline(make_config(paths, pipe_dir))

    stage_dir = tmp_path / "stages"
    stage_dir.mkdir()

    def cli(*argv):
        assert main([str(a) for a in argv]) == 0

    cli("quantize", "--norms", paths["norms_train"],
        "--alpha", "0.6", "--gamma", "0.7",
        "--out", stage_dir / "bits_train.csv",
        "--thresholds-out", stage_dir / "thresholds.csv")
    cli("quantize", "--norms", paths["norms_test"],
        "--thresholds", stage_dir / "thresholds.csv",
        "--out", stage_dir / "bits_test.csv")
    cli("learn", "--bits", stage_dir / "bits_train.csv",
        "--ratio", "0.0", "--tail", "1e-9",
        "--out", stage_dir / "ruleset.lp")
    cli("label", "--ruleset", stage_dir / "ruleset.lp",
        "--manifest", pipe_dir / "manifest.json",
        "--m", "10", "--margin", "0.05", "--tau", "0.5",
        "--out", stage_dir / "labels.csv",
        "--labeled-out", stage_dir / "ruleset_labeled.lp")
    cli("predict", "--ruleset", stage_dir / "ruleset.lp",
        "--bits", stage_dir / "bits_test.csv",
        "--out", stage_dir / "predictions.csv")
    cli("evaluate", "--ruleset", stage_dir / "ruleset.lp",
        "--bits", stage_dir / "bits_test.csv",
        "--out", stage_dir / "metrics.csv")

    for name in ("thresholds.csv", "bits_train.csv", "bits_test.csv",
                 "ruleset.lp", "labels.csv", "ruleset_labeled.lp",
                 "predictions.csv", "metrics.csv"):
        ours = (stage_dir / name).read_bytes()
        pipelines = (pipe_dir / name).read_bytes()
        assert ours == pipelines, name


def test_missing_masks_skips_label_stage(dataset, tmp_path, capsys):
    paths, _ = dataset
    config = RunConfig(
        norms_train=str(paths["norms_train"]),
        norms_test=str(paths["norms_test"]),
        out_dir=str(tmp_path / "nolabel"),
        ratio=0.0, tail=1e-9,
    )
    report_text = run_pipeline(config)
    err = capsys.readouterr().err
    assert "label skipped" in err
    assert "accuracy 1.0" in report_text
    assert not (tmp_path / "nolabel" / "labels.csv").exists()
    assert (tmp_path / "nolabel" / "metrics.csv").exists()


def test_report_row_format():
    metrics = Metrics(accuracy=0.92, fidelity=0.93, coverage_rate=1.0)
    row = report(metrics, RuleSetStats(16, 16, 28, 17))
    assert row == "Fid 0.93  Acc 0.92  Pred 16  Size 28"


def test_report_row_without_fidelity():
    metrics = Metrics(accuracy=0.5, fidelity=None, coverage_rate=1.0)
    row = report(metrics, RuleSetStats(0, 0, 0, 0))
    assert row == "Fid n/a  Acc 0.50  Pred 0  Size 0"


def test_report_subcommand(dataset, tmp_path, capsys):
    paths, _ = dataset
    out_dir = tmp_path / "run"
    run_pipeline(make_config(paths, out_dir))
    code = main([
        "report",
        "--metrics", str(out_dir / "metrics.csv"),
        "--ruleset", str(out_dir / "ruleset.lp"),
    ])
    assert code == 0
    row = capsys.readouterr().out.strip()
    assert row == "Fid 1.00  Acc 1.00  Pred 2  Size 4"


def test_config_file_parsing(tmp_path):
    config_path = tmp_path / "run.cfg"
    config_path.write_text(
        "# pipeline settings\n"
        "norms_train = train.csv\n"
        "out_dir = out\n"
        "alpha = 0.5\n"
        "m = 4\n"
    )
    config = load_config(config_path)
    assert config.norms_train == "train.csv"
    assert config.alpha == 0.5
    assert config.m == 4
    assert config.gamma == 0.7  # default


def test_config_rejects_unknown_key(tmp_path):
    config_path = tmp_path / "run.cfg"
    config_path.write_text("norms_train=x\nout_dir=y\nbogus=1\n")
    assert main(["run", "--config", str(config_path)]) == 2


def test_exit_codes(tmp_path):
    # usage: unknown flag
    assert main(["learn", "--nope"]) == 1
    # usage: no command
    assert main([]) == 1
    # data error: missing file
    assert main([
        "learn", "--bits", str(tmp_path / "absent.csv"),
        "--ratio", "0", "--tail", "0.5", "--out", str(tmp_path / "o.lp"),
    ]) == 2
    # data error: malformed csv
    bad = tmp_path / "bad.csv"
    bad.write_text("image_id,true_class,k_0\nx,a,7\n")
    assert main([
        "learn", "--bits", str(bad), "--ratio", "0", "--tail", "0.5",
        "--out", str(tmp_path / "o.lp"),
    ]) == 2


def test_justify_cli_prints_tree(dataset, tmp_path, capsys):
    paths, _ = dataset
    out_dir = tmp_path / "run"
    run_pipeline(make_config(paths, out_dir))
    code = main([
        "justify",
        "--ruleset", str(out_dir / "ruleset.lp"),
        "--bits", str(out_dir / "bits_test.csv"),
        "--image", "test0000",
    ])
    assert code == 0
    output = capsys.readouterr().out
    assert "image: test0000" in output
    assert "outcome: a" in output


def test_justify_cli_with_labelled_ruleset(dataset, tmp_path, capsys):
    paths, _ = dataset
    out_dir = tmp_path / "run"
    run_pipeline(make_config(paths, out_dir))
    code = main([
        "justify",
        "--ruleset", str(out_dir / "ruleset_labeled.lp"),
        "--bits", str(out_dir / "bits_test.csv"),
        "--labels", str(out_dir / "labels.csv"),
        "--image", "test0001",
    ])
    assert code == 0
    output = capsys.readouterr().out
    assert "outcome: b" in output
    assert "carpet1" in output
