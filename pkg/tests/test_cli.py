import json

import pytest

from coelab.cli import main
from coelab.json_utils import read_json_lines, write_json_file


@pytest.fixture
def config_path(tmp_path, run_document):
    return write_json_file(run_document, tmp_path / "run.json")


def output_of(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def test_missing_config_is_usage_error(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "absent.json" in capsys.readouterr().err


def test_invalid_config_is_usage_error(tmp_path, run_document, capsys):
    run_document["model"]["coe"]["total_k"] = 3
    path = write_json_file(run_document, tmp_path / "bad.json")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
    assert "model.coe" in capsys.readouterr().err


def test_train_then_eval(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_path), "--out", str(out), "--seed", "5"]) == 0
    trained = output_of(capsys)
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["seed"] == 5
    assert len([r for r in read_json_lines(out / "metrics.jsonl") if r["split"] == "train"]) == 8

    analysis = tmp_path / "analysis"
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--out", str(analysis)]) == 0
    evaluated = output_of(capsys)
    assert evaluated["val_loss"] == trained["final_val_loss"]
    assert (analysis / "coactivation_layer0.csv").exists()
    assert (analysis / "routing_summary.json").exists()


def bytes_document(run_document) -> dict:
    run_document["model"]["vocab_size"] = 256
    run_document["data"] = {"task": "bytes"}
    return run_document


def test_bytes_run_replays_from_its_snapshot(tmp_path, run_document, corpus_file, capsys):
    config = write_json_file(bytes_document(run_document), tmp_path / "run.json")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--data", str(corpus_file)]) == 0
    trained = output_of(capsys)
    resolved = out / "config.resolved.json"
    assert json.loads(resolved.read_text())["data"]["path"] == str(corpus_file.resolve())

    assert main(["train", "--config", str(resolved), "--out", str(tmp_path / "replay")]) == 0
    assert output_of(capsys)["final_val_loss"] == trained["final_val_loss"]
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--out", str(tmp_path / "analysis")]) == 0
    assert output_of(capsys)["val_loss"] == trained["final_val_loss"]


def test_eval_defaults_come_from_analysis_section(tmp_path, run_document, capsys):
    routing = tmp_path / "routing"
    run_document["analysis"] = {"output_dir": str(routing), "emit_summary": False}
    config = write_json_file(run_document, tmp_path / "run.json")
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert main(["eval", "--ckpt", str(out / "final.ckpt")]) == 0
    assert (routing / "coactivation_layer0.csv").exists()
    assert not (routing / "routing_summary.json").exists()


def test_eval_default_output_directory(tmp_path, config_path, capsys, monkeypatch):
    out = tmp_path / "run"
    main(["train", "--config", str(config_path), "--out", str(out)])
    monkeypatch.chdir(tmp_path)
    assert main(["eval", "--ckpt", str(out / "final.ckpt")]) == 0
    assert (tmp_path / "analysis" / "routing_summary.json").exists()


def test_output_path_that_is_a_file_is_usage_error(tmp_path, capsys):
    blocker = tmp_path / "taken"
    blocker.write_text("")
    assert main(["train", "--out", str(blocker)]) == 2
    assert "is not a directory" in capsys.readouterr().err


def test_eval_without_summary(tmp_path, config_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config_path), "--out", str(out)])
    analysis = tmp_path / "analysis"
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--out", str(analysis), "--no-summary"]) == 0
    assert not (analysis / "routing_summary.json").exists()


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"\x10\x00")
    assert main(["eval", "--ckpt", str(path)]) == 2
    assert "manifest_length" in capsys.readouterr().err


def test_count_combos(capsys):
    assert main(["count-combos", "--n", "64", "--k", "4", "--c", "2"]) == 0
    report = output_of(capsys)
    assert report["combos_coe"] == 403702661376
    assert report["combos_moe"] == 4426165368
    assert report["ratio_exact"] == "403702661376/4426165368"


def test_count_combos_domain_error(capsys):
    assert main(["count-combos", "--n", "4", "--k", "3", "--c", "2"]) == 2


def test_cost_model(tmp_path, run_document, capsys):
    a = write_json_file(run_document, tmp_path / "a.json")
    run_document["model"]["coe"].update({"total_k": 4, "num_iterations": 1})
    b = write_json_file(run_document, tmp_path / "b.json")
    assert main(["cost-model", "--config-a", str(a), "--config-b", str(b)]) == 0
    report = output_of(capsys)
    assert report["dominant"]["invocations_per_token"] == "a"
    assert report["delta_percent"]["routed_expert_parameters"] == 0.0


def test_gradcheck_passes_and_corruption_fails(tmp_path, capsys):
    assert main(["gradcheck", "--samples", "200", "--seeds", "0,1,2"]) == 0
    report = output_of(capsys)
    assert report["passed"] is True
    assert report["checked"] + report["skipped_routing_ties"] == 600
    assert main(["gradcheck", "--samples", "20", "--seeds", "0", "--corrupt-backward"]) == 1
    assert output_of(capsys)["passed"] is False


def test_gradcheck_rejects_zero_samples(capsys):
    assert main(["gradcheck", "--samples", "0"]) == 2


def test_bad_seed_list(capsys):
    assert main(["gradcheck", "--seeds", "0,x"]) == 2


def test_grid(tmp_path, run_document, capsys):
    run_document["model"]["coe"]["num_experts"] = 8
    path = write_json_file(run_document, tmp_path / "base.json")
    out = tmp_path / "grid"
    args = ["grid", "--config", str(path), "--out", str(out), "--preset", "compare", "--seeds", "0", "--steps", "2"]
    assert main(args) == 0
    assert [arm["arm"] for arm in output_of(capsys)["arms"]] == ["coe-k4c2", "moe-k8c1"]
    assert (out / "grid_report.json").exists()


def test_unknown_command_exits_with_usage():
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 2
