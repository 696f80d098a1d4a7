import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selftrain_tta import checkpoint
from selftrain_tta.checkpoint import CheckpointError
from selftrain_tta.cli import main
from selftrain_tta.config import OUTPUT_ENV, ConfigError, RunConfig
from selftrain_tta.data import ShapeWorldConfig, generate, load_shard
from selftrain_tta.experiment import Row, sample_budget, split_label, target
from selftrain_tta.nets import ArchDescriptor, init_model
from selftrain_tta.reporting import COLUMNS, ReportError, append_rows, read_rows, report, summarize

METHODS = ["source_only", "test", "tent", "ttt"]
BUDGETS = [16, 32]
SEEDS = [0, 1]


def small_flags(out, **extra):
    flags = {"output-dir": str(out), "source-size": "192", "source-epochs": "1", "pool-size": "96",
             "eval-size": "48", "budgets": ",".join(map(str, BUDGETS)), "seeds": ",".join(map(str, SEEDS)),
             "methods": ",".join(METHODS), "adaptation": json.dumps({"teacher_steps": 2, "student_steps": 2})}
    flags.update(extra)
    return [a for k, v in flags.items() for a in (f"--{k}", v)]


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train-source", *small_flags(out)]) == 0
    assert main(["adapt", *small_flags(out)]) == 0
    return out


class TestRunConfig:
    def test_round_trip(self, tmp_path):
        c = RunConfig(task="detection", budgets=[64], seeds=[3], adaptation={"lam": 0.5})
        assert RunConfig.from_dict(json.loads(c.dumps())) == c
        c.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == c

    @pytest.mark.parametrize("d", [{"budget": [64]}, {"adaptation": {"temperature": 2}},
                                   {"budgets": "64"}, {"seeds": [0, True]}, {"severity": "high"},
                                   {"methods": ["shot"]}, {"adaptation": {"n": 64}}])
    def test_rejects(self, d):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)

    def test_bad_json_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{task: detection")
        with pytest.raises(ConfigError, match="JSON"):
            RunConfig.load(tmp_path / "c.json")

    def test_env_overrides_output_dir_only(self, monkeypatch, tmp_path):
        c = RunConfig(output_dir="runs")
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
        monkeypatch.setenv("SELFTRAIN_TTA_TASK", "detection")
        assert c.out == tmp_path
        assert c.checkpoint_path.parent == tmp_path
        assert c.task == "classification" and c.to_dict()["output_dir"] == "runs"

    def test_checkpoint_names(self):
        assert RunConfig().checkpoint_path.name == "source_classification_full.ttck"
        assert RunConfig(split="kcluster", k=10, holdout=3).checkpoint_path.name == \
            "source_classification_k10h3.ttck"

    def test_flags_override_file(self, tmp_path, capsys):
        RunConfig(budgets=[64], severity=0.2).save(tmp_path / "c.json")
        assert main(["show-config", "--config", str(tmp_path / "c.json"), "--severity", "0.9",
                     "--seeds", "4,5"]) == 0
        shown = json.loads(capsys.readouterr().out)
        assert (shown["severity"], shown["seeds"], shown["budgets"]) == (0.9, [4, 5], [64])


class TestCheckpoint:
    @pytest.fixture
    def model(self):
        return init_model(ArchDescriptor(task="detection", widths=(4, 8, 8)), 3)

    def test_round_trip_bitwise(self, model, tmp_path):
        checkpoint.save(model, tmp_path / "m.ttck", {"note": "x"})
        back, prov = checkpoint.load(tmp_path / "m.ttck")
        assert back.arch == model.arch and prov == {"note": "x"}
        assert list(back.params) == list(model.params)
        for k, t in model.params.items():
            assert back.params[k].data.tobytes() == t.data.tobytes()
        assert checkpoint.dumps(back, prov) == checkpoint.dumps(model, {"note": "x"})
        assert not list(tmp_path.glob("*.tmp"))

    def test_bad_magic(self, model):
        blob = checkpoint.dumps(model)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.loads(b"XXXX" + blob[4:])

    def test_bad_version(self, model):
        blob = bytearray(checkpoint.dumps(model))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(CheckpointError, match="version"):
            checkpoint.loads(bytes(blob))

    @pytest.mark.parametrize("where", [20, 200, -40])
    def test_flipped_byte(self, model, where):
        blob = bytearray(checkpoint.dumps(model))
        blob[where] ^= 0x10
        with pytest.raises(CheckpointError):
            checkpoint.loads(bytes(blob))

    @pytest.mark.parametrize("keep", [3, 10, 500])
    def test_truncated(self, model, keep):
        with pytest.raises(CheckpointError):
            checkpoint.loads(checkpoint.dumps(model)[:keep])

    def test_duplicate_names(self):
        m = init_model(ArchDescriptor(widths=(4, 8, 8)), 0)
        names = list(m.params)
        blob = checkpoint.dumps(m)[:-4]
        # rename the second tensor to the first one's name when the lengths allow it
        a, b = next((x, y) for x, y in zip(names, names[1:]) if len(x) == len(y))
        body = blob.replace(b.encode(), a.encode(), 1)
        with pytest.raises(CheckpointError, match="duplicate"):
            checkpoint.loads(body + struct.pack("<I", zlib.crc32(body)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            checkpoint.load(tmp_path / "nope.ttck")


class TestTrainSource:
    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["train-source", *small_flags(tmp_path / d)]) == 0
        name = "source_classification_full.ttck"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_ttt_variant_has_rotation_head(self, small_run):
        model, prov = checkpoint.load(small_run / "source_classification_full.ttck")
        assert {"rot.w", "rot.b"} <= set(model.params)
        assert "train_rotation_accuracy" in prov

    def test_plain_variant_has_no_rotation_head(self, tmp_path):
        assert main(["train-source", *small_flags(tmp_path, methods="test")]) == 0
        model, _ = checkpoint.load(tmp_path / "source_classification_full.ttck")
        assert not any(k.startswith("rot.") for k in model.params)

    @pytest.mark.slow
    def test_default_classification_source_fits_training_set(self, default_sources):
        _, prov = default_sources["classification"]
        assert prov["train_accuracy"] >= 0.95


class TestAdapt:
    def test_row_count(self, small_run):
        rows = read_rows(small_run / "results.csv")
        for metric in ("accuracy", "entropy"):
            sel = [r for r in rows if r.metric_name == metric]
            assert len(sel) == len(METHODS) * len(BUDGETS) * len(SEEDS)
            assert {(r.method, r.n, r.seed) for r in sel} == \
                {(m, n, s) for m in METHODS for n in BUDGETS for s in SEEDS}

    def test_source_only_budget_invariant(self, small_run):
        rows = [r for r in read_rows(small_run / "results.csv") if r.method == "source_only"]
        assert len({r.value for r in rows if r.metric_name == "accuracy"}) == 1
        assert all(r.step == 0 for r in rows)

    def test_entropy_bookkeeping_for_test_rows(self, small_run):
        names = {r.metric_name for r in read_rows(small_run / "results.csv") if r.method == "test"}
        assert {"budget_entropy_start", "budget_entropy_end", "teacher_embedding_std"} <= names

    def test_manifest_and_losses(self, small_run):
        m = json.loads((small_run / "manifest.json").read_text())
        assert m["config"]["budgets"] == BUDGETS
        losses = read_rows(small_run / "losses.csv")
        assert {r.metric_name for r in losses} >= {"loss_teacher", "loss_student", "loss_ttt", "loss_tent"}

    def test_rerun_appends_identical_values(self, tmp_path):
        assert main(["train-source", *small_flags(tmp_path)]) == 0
        for _ in range(2):
            assert main(["adapt", *small_flags(tmp_path, methods="source_only,test")]) == 0
        rows = read_rows(tmp_path / "results.csv")
        half = len(rows) // 2
        assert rows[:half] == rows[half:]
        assert (tmp_path / "results.csv").read_text().count("task,method") == 1

    def test_byte_identical_csv(self, small_run, tmp_path):
        assert main(["train-source", *small_flags(tmp_path)]) == 0
        assert main(["adapt", *small_flags(tmp_path)]) == 0
        for name in ("results.csv", "losses.csv"):
            assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes()

    def test_ablation_flags_column(self, small_run, tmp_path):
        ckpt = small_run / "source_classification_full.ttck"
        assert main(["adapt", *small_flags(tmp_path, methods="source_only", ablations="only_p,test_teacher",
                                           budgets="16", seeds="0", checkpoint=str(ckpt))]) == 0
        flags = {(r.method, r.flags) for r in read_rows(tmp_path / "results.csv")}
        assert flags == {("source_only", ""), ("test", "only_p"), ("test", "test_teacher")}

    def test_budget_larger_than_pool(self, small_run, capsys):
        assert main(["adapt", *small_flags(small_run, budgets="500")]) == 2
        assert "exceeds the adaptation pool" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["adapt", *small_flags(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_task_mismatch(self, small_run, capsys):
        ckpt = small_run / "source_classification_full.ttck"
        assert main(["adapt", *small_flags(small_run, task="detection", checkpoint=str(ckpt))]) == 2
        assert "classification model" in capsys.readouterr().err

    def test_ttt_needs_rotation_head(self, tmp_path, capsys):
        assert main(["train-source", *small_flags(tmp_path, methods="test")]) == 0
        assert main(["adapt", *small_flags(tmp_path, methods="ttt")]) == 2
        assert "rotation head" in capsys.readouterr().err

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        assert main(["adapt", *small_flags(tmp_path, methods="shot")]) == 2
        assert capsys.readouterr().err.startswith("error:")


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_budget_never_overlaps_eval(n, seed):
    t = _small_target()
    budget, ids = sample_budget(t, n, seed)
    assert len(budget) == n == len(np.unique(ids))
    assert not np.intersect1d(ids, t.eval_ids).size
    np.testing.assert_array_equal(budget.images, t.pool.images[np.searchsorted(t.pool_ids, ids)])


_TARGET = []


def _small_target():
    if not _TARGET:
        _TARGET.append(target(RunConfig(pool_size=40, eval_size=20)))
    return _TARGET[0]


def _rows(values, method="test", n=64, metric="accuracy"):
    return [Row("classification", method, "", n, s, metric, v, 10) for s, v in enumerate(values)]


class TestReport:
    def test_mean_matches_hand_computation(self, tmp_path):
        vals = [0.5, 0.625, 0.75]
        append_rows(tmp_path / "results.csv", _rows(vals) + _rows([0.25, 0.25], method="tent"))
        summary, _ = report(tmp_path)
        lines = summary.read_text().splitlines()
        assert lines[0] == "task,method,flags,n,metric_name,mean,std,count"
        test_line = next(line for line in lines if ",test," in line).split(",")
        assert float(test_line[5]) == pytest.approx(sum(vals) / 3)
        assert float(test_line[6]) == pytest.approx(math.sqrt(sum((v - 0.625) ** 2 for v in vals) / 3))
        assert test_line[7] == "3"

    def test_identical_runs_zero_std(self):
        (s,) = summarize(_rows([0.8125] * 5))
        assert s.std == 0.0 and s.mean == 0.8125 and s.count == 5

    def test_nan_excluded(self):
        (s,) = summarize(_rows([0.5, math.nan, 0.7]))
        assert s.count == 2 and s.mean == pytest.approx(0.6)

    def test_plot_per_task(self, tmp_path):
        rows = _rows([0.5, 0.6]) + _rows([0.7, 0.8], n=128)
        rows += [Row("detection", "test", "", 64, 0, m, 0.3, 1) for m in ("map_lite", "d_ece", "entropy")]
        append_rows(tmp_path / "results.csv", rows)
        _, plots = report(tmp_path)
        assert sorted(p.name for p in plots) == ["classification_accuracy.png", "detection_d_ece.png",
                                                 "detection_map_lite.png"]
        assert all(p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n" for p in plots)

    def test_merges_result_files(self, tmp_path):
        append_rows(tmp_path / "results.csv", _rows([0.5]))
        append_rows(tmp_path / "results_b.csv", [Row("classification", "test", "", 64, 1, "accuracy", 0.7, 10)])
        (s,) = summarize(read_rows(tmp_path / "results.csv") + read_rows(tmp_path / "results_b.csv"))
        assert s.count == 2
        summary, _ = report(tmp_path)
        assert ",2\n" in summary.read_text()

    def test_round_trip_preserves_floats(self, tmp_path):
        rows = _rows([0.1, 1 / 3, 2 / 7])
        append_rows(tmp_path / "r.csv", rows)
        assert read_rows(tmp_path / "r.csv") == rows

    def test_flags_with_separator_are_quoted(self, tmp_path):
        rows = [Row("classification", "test", "a,b", 64, 0, "accuracy", 0.5, 1)]
        append_rows(tmp_path / "r.csv", rows)
        assert read_rows(tmp_path / "r.csv") == rows

    def test_empty_dir(self, tmp_path, capsys):
        with pytest.raises(ReportError):
            report(tmp_path)
        assert main(["report", str(tmp_path)]) == 2
        assert "no results" in capsys.readouterr().err

    def test_header_only_file(self, tmp_path):
        (tmp_path / "results.csv").write_text(",".join(COLUMNS) + "\n")
        with pytest.raises(ReportError, match="no rows"):
            report(tmp_path)

    def test_cli_prints_summary_and_figures(self, small_run, capsys):
        assert main(["report", str(small_run)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("task,method,flags,n,metric_name")
        figures = [line.split(",", 1)[1] for line in out if line.startswith("# figure,")]
        assert [Path(f).name for f in figures] == ["classification_accuracy.png"]
        # mean over seeds of every (method, n) appears in the summary
        rows = [r for r in read_rows(small_run / "results.csv") if r.metric_name == "accuracy"]
        for method in METHODS:
            for n in BUDGETS:
                vals = [r.value for r in rows if r.method == method and r.n == n]
                line = next(x for x in out if x.startswith(f"classification,{method},,{n},accuracy,"))
                assert float(line.split(",")[5]) == pytest.approx(np.mean(vals))

    def test_env_default_results_dir(self, small_run, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ENV, str(small_run))
        assert main(["report"]) == 0
        assert capsys.readouterr().out.startswith("task,")


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    out = tmp_path_factory.mktemp("splits")
    enc = out / "enc.ttck"
    checkpoint.save(init_model(ArchDescriptor(widths=(4, 8, 8)), 0), enc)
    flags = small_flags(out, split="kcluster", k="5", holdout="1", **{"source-size": "200"})
    return out, enc, flags


class TestMakeSplits:
    def test_writes_shards_and_histogram(self, splits, capsys):
        out, enc, flags = splits
        assert main(["make-splits", *flags, "--encoder", str(enc)]) == 0
        printed = capsys.readouterr().out
        assert "configuration,4 train - 1 test" in printed
        d = out / "splits_classification_k5_s0"
        shards = [load_shard(d / f"cluster_{j}.ttad") for j in range(5)]
        # partition invariant: the clusters hold every universe image exactly once
        universe = generate(ShapeWorldConfig(seed=0), 200)
        got = sorted(x.tobytes() for s in shards for x in s.images)
        assert got == sorted(x.tobytes() for x in universe.images)
        hist = (d / "histogram.csv").read_text().splitlines()
        assert len(hist) == 6 and hist[2].startswith("1,ood")

    def test_kcluster_pipeline(self, splits):
        out, enc, flags = splits
        assert main(["make-splits", *flags, "--encoder", str(enc)]) == 0
        assert main(["train-source", *flags]) == 0
        assert (out / "source_classification_k5h1.ttck").exists()
        assert main(["adapt", *flags, "--methods", "source_only,test", "--budgets", "8", "--seeds", "0"]) == 0
        assert len(read_rows(out / "results.csv")) > 0

    def test_missing_shards(self, tmp_path, capsys):
        assert main(["train-source", *small_flags(tmp_path, split="kcluster")]) == 2
        assert "make-splits" in capsys.readouterr().err

    def test_missing_default_encoder(self, tmp_path):
        assert main(["make-splits", *small_flags(tmp_path, split="kcluster")]) == 2

    @pytest.mark.parametrize("k,label", [(5, "4 train - 1 test"), (10, "9 train - 1 test")])
    def test_preset_labels(self, k, label):
        assert split_label(k) == label

    def test_ten_clusters(self, tmp_path):
        enc = tmp_path / "enc.ttck"
        checkpoint.save(init_model(ArchDescriptor(widths=(4, 8, 8)), 0), enc)
        flags = small_flags(tmp_path, split="kcluster", k="10", **{"source-size": "400"})
        assert main(["make-splits", *flags, "--encoder", str(enc)]) == 0
        assert len(list((tmp_path / "splits_classification_k10_s0").glob("cluster_*.ttad"))) == 10
