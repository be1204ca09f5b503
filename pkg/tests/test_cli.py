import json

import pytest

from prime_traffic.__main__ import cli, main
from prime_traffic.features import Dataset

SMALL = {
    "methods": ["base", "lwf"],
    "seeds": [0],
    "scenario": {"num_classes": 4, "samples_per_class": 16, "n_b": 16, "n_p": 4, "plan": [2, 2]},
    "model": {"token_width": 8, "d_model": 8, "heads": 2, "hidden": [8], "dropout": 0.0},
    "train": {"epochs": 1, "batch_size": 16},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_gen_writes_a_dataset(config_file, tmp_path):
    out = tmp_path / "synth.ptds"
    main(["-q", "gen", "-c", str(config_file), "-o", str(out), "--set", "scenario.num_classes=3", "--set", "scenario.plan=[2,1]"])
    dataset = Dataset.read(out)
    assert len(dataset) == 3 * 16 and dataset.width == 32


def test_run_compare_and_inspect(config_file, tmp_path, capsys):
    main(["-q", "run", "-c", str(config_file), "--out", str(tmp_path / "runs"), "--name", "cli"])
    run_dir = tmp_path / "runs" / "cli"
    assert capsys.readouterr().out.strip() == str(run_dir)

    table = tmp_path / "table.csv"
    main(["-q", "compare", str(run_dir), "-o", str(table)])
    assert "Method comparison" in capsys.readouterr().out
    assert table.read_text().startswith("run,method,seeds")

    main(["-q", "inspect", str(run_dir), "--plain"])
    assert "aggregate" in capsys.readouterr().out

    main(["-q", "inspect", str(run_dir / "lwf" / "seed-0" / "model.npz"), "--plain"])
    assert "partitions" in capsys.readouterr().out


def test_output_root_from_environment(config_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PRIME_TRAFFIC_OUTPUT", str(tmp_path / "env-runs"))
    main(["-q", "run", "-c", str(config_file), "--name", "env", "--set", "methods=[\"lwf\"]"])
    assert (tmp_path / "env-runs" / "env" / "manifest.json").is_file()


def test_config_errors_exit_with_code_one(config_file, capsys):
    with pytest.raises(SystemExit) as err:
        main(["-q", "run", "-c", str(config_file), "--set", "lwf.temperature=0"])
    assert err.value.code == 1
    assert "lwf.temperature" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["-v", "-q", "compare", "."],
        ["run", "-c", "missing.json"],
        ["compare", ".", "-o", "table.docx"],
        ["compare", "no-such-run"],
        ["ingest", "no-such-dir", "-o", "x.ptds"],
        ["ingest", ".", "-o", "x.ptds", "--n-b", "0"],
        ["sweep", "--widths", "16", "0"],
    ],
)
def test_invalid_arguments_exit(argv):
    with pytest.raises(SystemExit) as err:
        cli(argv)
    assert err.value.code == 1


def test_command_is_required():
    with pytest.raises(SystemExit) as err:
        cli([])
    assert err.value.code == 2


def test_ingest_command(tmp_path, pcap_kit):
    captures = tmp_path / "captures"
    captures.mkdir()
    (captures / "dns.pcap").write_bytes(
        pcap_kit.capture([(0.0, pcap_kit.udp("10.0.0.1", 5353, "10.0.0.53", 53, b"query"))])
    )
    manifest = tmp_path / "labels.json"
    manifest.write_text(json.dumps({"files": {"dns.pcap": "dns"}}))
    out = tmp_path / "flows.ptds"
    main(["-q", "ingest", str(captures), "-m", str(manifest), "-o", str(out), "--n-b", "8", "--n-p", "2"])
    dataset = Dataset.read(out)
    assert len(dataset) == 1 and dataset.class_names == ["dns"]
