"""Command-line surface: exit codes, JSON contracts, full session flow."""

import json
from pathlib import Path

import pytest

from credtrace.cli import main
from credtrace.config import Config, PATH_FIELDS, load_config, save_config


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    # path overrides leak between tests otherwise
    for name in PATH_FIELDS:
        monkeypatch.delenv(f"CREDTRACE_{name.upper()}", raising=False)


def run_cli(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def payload(text: str) -> dict:
    return json.loads(text)


# ---------------------------------------------------------------------------
# Config plumbing and error contract
# ---------------------------------------------------------------------------

class TestErrorContract:
    def test_missing_named_config_fails_with_json(self, tmp_path, capsys):
        code, out, err = run_cli(
            ["--config", str(tmp_path / "absent.ini"), "ingest"], capsys)
        assert code == 1
        assert out == ""
        body = payload(err)
        assert body["error"] == "ConfigError"
        assert "absent.ini" in body["message"]

    def test_usage_error_exits_two_with_json(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2
        _, err = capsys.readouterr()
        assert payload(err)["error"] == "UsageError"

    def test_bad_set_flag(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code, _, err = run_cli(["--set", "top_k", "ingest"], capsys)
        assert code == 1
        assert payload(err)["error"] == "UsageError"
        code, _, err = run_cli(["--set", "warp_speed=9", "ingest"], capsys)
        assert code == 1
        assert payload(err)["error"] == "ConfigError"

    def test_missing_asset_reported(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code, _, err = run_cli(
            ["verify-provenance", "--asset", "ghost.png"], capsys)
        assert code == 1
        assert payload(err)["error"] == "FileNotFoundError"


class TestInitConfig:
    def test_writes_loadable_defaults(self, tmp_path, capsys):
        path = tmp_path / "run.ini"
        code, out, _ = run_cli(["--config", str(path), "init-config"], capsys)
        assert code == 0
        assert payload(out)["configFile"] == str(path)
        assert load_config(path) == Config().resolve(tmp_path)

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        path = tmp_path / "run.ini"
        run_cli(["--config", str(path), "init-config"], capsys)
        code, _, err = run_cli(["--config", str(path), "init-config"], capsys)
        assert code == 1
        assert payload(err)["error"] == "ConfigError"
        code, _, _ = run_cli(
            ["--config", str(path), "init-config", "--force"], capsys)
        assert code == 0


class TestOverrides:
    def test_env_var_redirects_path_field(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        custom = tmp_path / "elsewhere"
        monkeypatch.setenv("CREDTRACE_CORPUS_DIR", str(custom))
        code, out, _ = run_cli(
            ["--set", "corpus_size=6", "--set", "image_size=32", "ingest"],
            capsys)
        assert code == 0
        assert payload(out)["corpusDir"] == str(custom)
        assert len(list(custom.glob("*.png"))) == 6

    def test_set_flag_beats_config_file(self, tmp_path, capsys):
        path = tmp_path / "run.ini"
        save_config(Config(corpus_size=50), path)
        code, out, _ = run_cli(
            ["--config", str(path), "--set", "corpus_size=4",
             "--set", "image_size=32", "ingest"], capsys)
        assert code == 0
        assert payload(out)["written"] == 4


# ---------------------------------------------------------------------------
# Full session: every subcommand once, against one tiny corpus
# ---------------------------------------------------------------------------

# A few training epochs at 64px give a verifier whose true-pair scores sit
# around 0.4-0.7, so the credit threshold drops to 0.4 here. Attribution
# quality at the real threshold is covered at full scale elsewhere; this
# session only has to exercise the command plumbing end to end.
SESSION_SETTINGS = dict(corpus_size=100, image_size=64, input_size=64,
                        encoder_epochs=2, verifier_epochs=4, auc_floor=0.5,
                        lambda_threshold=0.4)


def test_full_session(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    save_config(Config(**SESSION_SETTINGS), ini)
    base = ["--config", str(ini)]

    code, out, _ = run_cli(base + ["ingest"], capsys)
    assert code == 0
    assert payload(out)["written"] == 100

    code, out, _ = run_cli(base + ["train-encoder"], capsys)
    assert code == 0
    encoder_digest = payload(out)["digest"]
    assert Path(tmp_path / "encoder.ckpt").exists()

    code, out, _ = run_cli(base + ["train-verifier"], capsys)
    assert code == 0
    assert payload(out)["valAuc"] >= 0.5

    code, out, _ = run_cli(base + ["build-index"], capsys)
    assert code == 0
    first = payload(out)
    assert first["vectors"] == 100 * 21
    # rebuilding from the same checkpoints is byte-identical
    code, out, _ = run_cli(base + ["build-index"], capsys)
    assert code == 0
    assert payload(out)["sha256"] == first["sha256"]
    # so is building from an exported fingerprint table
    table = tmp_path / "fingerprints.bin"
    code, _, _ = run_cli(
        base + ["build-index", "--export-embeddings", str(table)], capsys)
    assert code == 0
    code, out, _ = run_cli(
        base + ["build-index", "--embeddings", str(table)], capsys)
    assert code == 0
    assert payload(out)["sha256"] == first["sha256"]

    code, out, _ = run_cli(
        base + ["compose-queries", "--count", "2"], capsys)
    assert code == 0
    names = payload(out)["written"]
    assert len(names) == 2

    query = tmp_path / "queries" / names[0]
    report_path = tmp_path / "reports" / "q0.report.json"
    code, out, _ = run_cli(
        base + ["attribute", "--query", str(query),
                "--report", str(report_path), "--query-id", "q0"], capsys)
    assert code == 0
    attribution = payload(out)
    assert attribution["queryId"] == "q0"
    assert report_path.exists()
    weights = attribution["royaltyWeights"]
    assert weights, "clean composite should credit at least one source"

    # mint the top-credited corpus image, grant the service a right, fund it
    top_image = max(weights, key=weights.get)
    asset = tmp_path / "corpus" / f"{top_image}.png"
    code, out, _ = run_cli(base + ["mint-ora", "--asset", str(asset)], capsys)
    assert code == 0
    minted = payload(out)
    assert minted["creator"] == top_image
    assert Path(minted["sidecar"]).exists()

    code, out, _ = run_cli(
        base + ["issue-right", "--asset", str(asset), "--holder", "service"],
        capsys)
    assert code == 0
    assert payload(out)["rightKind"] == "GenerateImage"

    code, out, _ = run_cli(
        base + ["deposit", "--asset", str(asset), "--amount", "50000"], capsys)
    assert code == 0
    deposit = payload(out)
    assert deposit["escrow"] == 50000
    assert deposit["fauceted"] == 50000

    code, out, _ = run_cli(
        base + ["settle", "--report", str(report_path)], capsys)
    assert code == 0
    settlement = payload(out)
    by_image = {p["imageId"]: p for p in settlement["payouts"]}
    assert set(by_image) == set(weights)
    top = by_image[top_image]
    assert top["status"] == "paid"
    assert top["payout"] == round(1000 * weights[top_image])
    # unminted images cannot be paid, and the summary only counts successes
    for image_id, row in by_image.items():
        if image_id != top_image:
            assert row["status"] == "failed"
    assert settlement["paid"] == top["payout"]

    code, out, _ = run_cli(
        base + ["verify-provenance", "--asset", str(asset), "--json"], capsys)
    assert code == 0
    graph = payload(out)
    assert graph["manifests"] == 1
    assert graph["nodes"][0]["valid"] is True
    assert graph["nodes"][0]["creator"] == top_image

    code, out, _ = run_cli(
        base + ["verify-provenance", "--asset", str(asset)], capsys)
    assert code == 0
    assert "1 manifests reachable" in out


def test_demo_subcommand(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    save_config(Config(corpus_size=100, image_size=32, input_size=32,
                       encoder_epochs=1, verifier_epochs=1, auc_floor=0.5),
                ini)
    out_path = tmp_path / "demo.json"
    code, out, err = run_cli(
        ["--config", str(ini), "demo-mnist-scale", "--queries", "1",
         "--out", str(out_path)], capsys)
    assert code == 0
    summary = payload(out)
    assert summary["conservationOk"] is True
    assert summary["minted"] == 100
    assert "queries" not in summary  # per-query detail lives in the file
    saved = json.loads(out_path.read_text())
    assert len(saved["queries"]) == 1
    assert "corpus: 100 synthetic images" in err
