import json
import shutil

import numpy as np
import polars as pl
import pytest

from prime_traffic import harness
from prime_traffic.config import config_from_dict
from prime_traffic.errors import ConfigError, LabelConflictError, PreconditionError, ScenarioMismatchError
from prime_traffic.features import Dataset
from prime_traffic.harness import (
    LabelManifest,
    compare,
    comparison_table,
    ingest_external,
    read_run,
    run_scenario,
    stage_epochs,
    sweep,
)
from prime_traffic.metrics import METRIC_NAMES
from prime_traffic.model import load_checkpoint


TINY = {
    "methods": ["base", "lwf", "ewc", "prime"],
    "seeds": [0, 1],
    "scenario": {"num_classes": 4, "samples_per_class": 20, "n_b": 16, "n_p": 4, "plan": [2, 2], "data_seed": 5},
    "model": {"token_width": 8, "d_model": 8, "heads": 2, "hidden": [8, 6], "dropout": 0.0},
    "train": {"epochs": 3, "batch_size": 16, "learning_rate": 5e-3},
    "stall": {"threshold": 1e-6, "patience": 2, "min_rel_improvement": 1.0},
    "ewc": {"fisher_samples": 16},
    "plasticity": {"trigger": 0.0, "probe_size": 32},
}


@pytest.fixture(scope="module")
def tiny_config():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def run_dir(tiny_config, tmp_path_factory):
    return run_scenario(tiny_config, tmp_path_factory.mktemp("runs"), name="tiny")


# ─── Run directories ─────────────────────────────────────────────────────────


def test_run_directory_layout(run_dir):
    assert run_dir.name == "tiny"
    for name in ("config.json", "manifest.json", "runs.csv", "aggregate.csv", "polar.csv"):
        assert (run_dir / name).is_file(), name
    for method in TINY["methods"]:
        for seed in TINY["seeds"]:
            sub = run_dir / method / f"seed-{seed}"
            for name in ("epochs.jsonl", "plasticity.jsonl", "events.jsonl", "norms.parquet", "accuracy.csv",
                         "accuracy.json", "metrics.json", "stages.json", "model.npz"):
                assert (sub / name).exists(), f"{method}/seed-{seed}/{name}"
    assert not [p for p in run_dir.parent.iterdir() if p.name.startswith(".")]


def test_manifest_records_the_scenario(run_dir, tiny_config):
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["fingerprint"] == tiny_config.fingerprint("synthetic")
    assert manifest["data_digest"] == "synthetic"
    assert manifest["input_dim"] == 16 + 4 * 4
    assert manifest["seeds"] == [0, 1]


def test_runs_table_has_one_row_per_sub_run(run_dir):
    runs = pl.read_csv(run_dir / "runs.csv")
    assert runs.height == 8
    assert set(METRIC_NAMES) <= set(runs.columns)
    for metric in ("AA", "FA"):
        assert runs[metric].is_between(0.0, 1.0).all()
    agg = pl.read_csv(run_dir / "aggregate.csv")
    assert agg.height == 4 * (len(METRIC_NAMES) + 1)


def test_prime_sub_runs_widen_and_baselines_do_not(run_dir):
    runs = pl.read_csv(run_dir / "runs.csv")
    for row in runs.iter_rows(named=True):
        if row["method"] == "prime":
            assert row["expansions"] == 1 and row["params_final"] > row["params_base"]
        else:
            assert row["expansions"] == 0
    events = pl.read_ndjson(run_dir / "prime" / "seed-0" / "events.jsonl")
    assert events["layer"].to_list() == [0, 1]
    stages = json.loads((run_dir / "prime" / "seed-0" / "stages.json").read_text())
    assert [s["path"] for s in stages] == ["base", "full"]


def test_accuracy_matrix_is_complete(run_dir):
    data = json.loads((run_dir / "lwf" / "seed-1" / "accuracy.json").read_text())
    metrics = json.loads((run_dir / "lwf" / "seed-1" / "metrics.json").read_text())
    assert set(METRIC_NAMES) <= set(metrics)
    assert metrics["widths"] == [8, 6]
    frame = pl.read_csv(run_dir / "lwf" / "seed-1" / "accuracy.csv")
    assert frame.columns == ["stage", "task_1", "task_2"] and frame.height == 3
    assert data


def test_stage_epochs_reads_back_the_log(run_dir):
    epochs = stage_epochs(run_dir, "prime", 0)
    assert {e.stage for e in epochs} == {1, 2}
    assert [e.phase for e in epochs if e.stage == 2][-1] == "D"
    assert all(np.isfinite(e.total) for e in epochs)


@pytest.mark.parametrize("method", ["lwf", "prime"])
def test_checkpoint_carries_the_final_optimizer_state(run_dir, method):
    model, optimizer = load_checkpoint(run_dir / method / "seed-0" / "model.npz")
    assert optimizer is not None and optimizer.step > 0
    assert optimizer.m and set(optimizer.m) <= set(model.params)
    assert set(model.head_keys(1)) <= set(optimizer.m)


def test_existing_run_directory_is_refused(run_dir, tiny_config):
    with pytest.raises(PreconditionError, match="already exists"):
        run_scenario(tiny_config, run_dir.parent, name=run_dir.name)


def test_failed_sub_run_leaves_nothing(tiny_config, tmp_path, monkeypatch):
    def boom(*args):
        raise RuntimeError("sub-run failed")

    monkeypatch.setattr(harness, "run_method", boom)
    with pytest.raises(RuntimeError):
        run_scenario(tiny_config, tmp_path, name="broken")
    assert list(tmp_path.iterdir()) == []


def test_unusable_plan_fails_before_writing(tmp_path):
    config = config_from_dict({**TINY, "scenario": {**TINY["scenario"], "num_classes": 4, "plan": [4]}})
    with pytest.raises(PreconditionError, match="at least 2 stages"):
        run_scenario(config, tmp_path / "out", name="single")
    assert not (tmp_path / "out").exists()


# ─── Comparison ──────────────────────────────────────────────────────────────


def test_compare_recomputes_from_seed_metrics(run_dir):
    df = compare([run_dir])
    assert df["method"].to_list() == TINY["methods"]
    assert (df["seeds"] == 2).all()
    per_seed = [json.loads((run_dir / "lwf" / f"seed-{s}" / "metrics.json").read_text())["AA"] for s in (0, 1)]
    row = df.filter(pl.col("method") == "lwf").row(0, named=True)
    assert row["AA"] == pytest.approx(np.mean(per_seed))
    assert row["AA_half_range"] == pytest.approx((max(per_seed) - min(per_seed)) / 2)
    assert comparison_table(df).row_count == 4


def test_compare_two_copies_of_a_run(run_dir, tmp_path):
    copy = tmp_path / "tiny-copy"
    shutil.copytree(run_dir, copy)
    df = compare([run_dir, copy])
    assert df.height == 8
    assert set(df["run"]) == {"tiny", "tiny-copy"}


def test_tampered_config_is_refused(run_dir, tmp_path):
    copy = tmp_path / "tampered"
    shutil.copytree(run_dir, copy)
    config = json.loads((copy / "config.json").read_text())
    config["scenario"]["data_seed"] = 99
    (copy / "config.json").write_text(json.dumps(config))
    with pytest.raises(ScenarioMismatchError, match="refusing"):
        read_run(copy)
    with pytest.raises(ScenarioMismatchError):
        compare([run_dir, copy])


def test_different_scenarios_are_not_compared(run_dir, tmp_path):
    copy = tmp_path / "other"
    shutil.copytree(run_dir, copy)
    config = json.loads((copy / "config.json").read_text())
    config["scenario"]["data_seed"] = 99
    (copy / "config.json").write_text(json.dumps(config))
    manifest = json.loads((copy / "manifest.json").read_text())
    manifest["fingerprint"] = config_from_dict(config).fingerprint("synthetic")
    (copy / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ScenarioMismatchError, match="different scenarios"):
        compare([run_dir, copy])


def test_compare_needs_a_run_directory(tmp_path):
    with pytest.raises(PreconditionError):
        compare([])
    with pytest.raises(FileNotFoundError):
        read_run(tmp_path)


# ─── External captures ───────────────────────────────────────────────────────


@pytest.fixture
def capture_dir(tmp_path, pcap_kit):
    root = tmp_path / "captures"
    root.mkdir()
    (root / "web.pcap").write_bytes(
        pcap_kit.capture(
            [
                (1.0, pcap_kit.tcp("10.0.0.1", 5000, "10.0.0.2", 443, b"GET /")),
                (1.1, pcap_kit.tcp("10.0.0.2", 443, "10.0.0.1", 5000, b"200 OK")),
            ]
        )
    )
    (root / "mixed.pcap").write_bytes(
        pcap_kit.capture(
            [
                (1.0, pcap_kit.tcp("10.0.0.3", 6000, "10.0.0.4", 22, b"SSH-2.0")),
                (1.5, pcap_kit.tcp("10.0.0.5", 7000, "10.0.0.6", 8080, b"x")),
                (2.0, pcap_kit.udp("10.0.0.1", 5353, "10.0.0.53", 53, b"query")),
            ]
        )
    )
    (root / "notes.txt").write_text("not a capture")
    return root


def test_ingest_labels_by_file_and_rule(capture_dir):
    manifest = LabelManifest(
        files={"web.pcap": "web"},
        rules=[harness.LabelRule(label="dns", dport=53), harness.LabelRule(label="ssh", sport=22, proto=6)],
        classes=["web", "dns", "ssh"],
    )
    dataset, report = ingest_external(capture_dir, manifest, n_b=16, n_p=4)
    assert report.captures == 2 and report.flows == 4
    assert report.labeled == 3 and report.unlabeled == 1
    assert report.per_class == {"web": 1, "dns": 1, "ssh": 1}
    assert dataset.width == 32 and len(dataset) == 3
    assert sorted(dataset.labels.tolist()) == [0, 1, 2]
    assert dataset.class_names == ["web", "dns", "ssh"]


def test_conflicting_rules_are_an_error(capture_dir):
    manifest = LabelManifest(
        rules=[harness.LabelRule(label="a", dport=53), harness.LabelRule(label="b", src="10.0.0.1")],
        classes=["a", "b"],
    )
    with pytest.raises(LabelConflictError):
        ingest_external(capture_dir, manifest, n_b=16, n_p=4)


def test_rule_disagreeing_with_the_capture_label_is_an_error(capture_dir):
    manifest = LabelManifest(files={"web.pcap": "web"}, rules=[harness.LabelRule(label="https", dport=443)])
    with pytest.raises(LabelConflictError, match="capture is labeled `web`"):
        ingest_external(capture_dir, manifest, n_b=16, n_p=4)

    agreeing = LabelManifest(files={"web.pcap": "web"}, rules=[harness.LabelRule(label="web", dport=443)], classes=["web"])
    dataset, report = ingest_external(capture_dir, agreeing, n_b=16, n_p=4)
    assert report.per_class == {"web": 1} and len(dataset) == 1


def test_empty_manifest_yields_empty_dataset(capture_dir, caplog):
    dataset, report = ingest_external(capture_dir, n_b=16, n_p=4)
    assert len(dataset) == 0 and report.unlabeled == 4
    assert "No labeled flows" in caplog.text


def test_ingest_dataset_file_drops_unlabeled(tmp_path):
    features = np.random.default_rng(0).random((5, 8 + 4 * 2))
    path = Dataset(features, np.array([0, -1, 1, 1, -1]), 8, 2, class_names=["a", "b"]).write(tmp_path / "d.ptds")
    dataset, report = ingest_external(path)
    assert len(dataset) == 3 and report.unlabeled == 2
    assert report.per_class == {"a": 1, "b": 2}


def test_manifest_file_is_validated(tmp_path):
    path = tmp_path / "labels.json"
    path.write_text(json.dumps({"files": {"a.pcap": "web"}, "rules": [{"label": "dns", "dport": 53}]}))
    manifest = LabelManifest.read(path)
    assert manifest.classes == ["web", "dns"]
    path.write_text(json.dumps({"rules": [{"dport": 53}], "extra": 1}))
    with pytest.raises(ConfigError) as err:
        LabelManifest.read(path)
    assert len(err.value.problems) == 2


def test_missing_capture_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_external(tmp_path / "nowhere")


# ─── Width sweep ─────────────────────────────────────────────────────────────


def test_sweep_reports_every_width_and_seed(tiny_config):
    df = sweep(tiny_config, [8, 16], seeds=[0])
    assert df["width"].to_list() == [8, 16]
    assert df["pr1"].is_between(0.0, 1.0).all()
    assert df["test_acc"].is_between(0.0, 1.0).all()


@pytest.mark.slow
def test_process_pool_matches_serial_run(run_dir, tmp_path):
    pooled = config_from_dict({**TINY, "workers": 2})
    other = run_scenario(pooled, tmp_path, name="pooled")
    serial = pl.read_csv(run_dir / "runs.csv").sort("method", "seed")
    parallel = pl.read_csv(other / "runs.csv").sort("method", "seed")
    assert serial.select("method", "seed", "expansions").equals(parallel.select("method", "seed", "expansions"))
    for metric in METRIC_NAMES:
        np.testing.assert_allclose(parallel[metric].to_numpy(), serial[metric].to_numpy(), atol=1e-9)


# ─── Desk-scale behaviour ────────────────────────────────────────────────────


DESK = {
    "methods": ["base", "lwf", "prime"],
    "seeds": [0, 1, 2, 3, 4],
    "scenario": {"num_classes": 14, "samples_per_class": 60, "n_b": 64, "n_p": 8, "plan": [10, 2, 2], "data_seed": 1},
    "model": {"hidden": [64, 32], "dropout": 0.0},
    "train": {"epochs": 8, "batch_size": 64, "learning_rate": 5e-3},
    "stall": {"threshold": 1e-6, "patience": 2, "min_rel_improvement": 1.0},
    "plasticity": {"trigger": 0.4},
}


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    run = run_scenario(config_from_dict(DESK), tmp_path_factory.mktemp("desk"), name="desk")
    return pl.read_csv(run / "runs.csv")


@pytest.mark.slow
def test_backward_transfer_ordering(desk_runs):
    bwt = dict(desk_runs.group_by("method").agg(pl.col("BWT").mean()).iter_rows())
    assert bwt["prime"] > bwt["lwf"] > bwt["base"]


@pytest.mark.slow
def test_prime_expands_sparingly(desk_runs):
    prime = desk_runs.filter(pl.col("method") == "prime")
    assert prime.height == 5
    assert prime["expansions"].is_between(1, 2).all()
    assert (prime["params_final"] <= 2.5 * prime["params_base"]).all()


@pytest.mark.slow
def test_wide_model_never_expands(tmp_path):
    config = config_from_dict({**DESK, "methods": ["prime"], "model": {"hidden": [512, 32], "dropout": 0.0}})
    runs = pl.read_csv(run_scenario(config, tmp_path, name="wide") / "runs.csv")
    assert runs["expansions"].to_list() == [0] * 5


@pytest.mark.slow
def test_effective_rank_ratio_falls_with_width():
    config = config_from_dict({**DESK, "model": {"d_model": 16, "hidden": [16, 8], "dropout": 0.0}})
    widths = [16, 32, 64, 128]
    df = sweep(config, widths, seeds=[0, 1, 2, 3, 4]).sort("seed", "width")
    for seed, group in df.group_by("seed"):
        pr1 = group.sort("width")["pr1"].to_numpy()
        assert int(np.sum(np.diff(pr1) > 0)) <= 1, f"seed {seed}: {pr1}"
    means = df.group_by("width").agg(pl.col("pr1").mean()).sort("width")["pr1"].to_numpy()
    assert means[0] > means[-1]
