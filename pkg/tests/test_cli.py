import json

import pytest

from evovit.cli import load_run_config, main
from evovit.errors import ConfigError


def write_config(tmp_path, **extra):
    cfg = {
        "encoder": {"depth": 2, "embed_dim": 8, "heads": 2},
        "train": {"epochs": 2, "batch_size": 4, "model": "evo"},
        "dataset": {"synthetic": {"classes": 3, "samples": 12, "side": 16,
                                  "seed": 1}},
    }
    cfg.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(argv):
    try:
        return main(argv)
    except SystemExit as e:  # argparse errors
        return e.code


class TestConfig:
    def test_defaults_merged(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path))
        assert cfg["encoder"]["depth"] == 2
        assert cfg["encoder"]["patch_side"] == 4   # default preserved
        assert cfg["evo"]["keep_ratio"] == 0.5

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(
            {"evo": {"keep_ration": 0.5}}))
        with pytest.raises(ConfigError, match="keep_ration"):
            load_run_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "absent.json"))

    def test_override_dot_path_json_values(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path),
                              overrides=["evo.keep_ratio=0.25",
                                         "train.model=vanilla"])
        assert cfg["evo"]["keep_ratio"] == 0.25
        assert cfg["train"]["model"] == "vanilla"

    def test_override_unknown_path(self, tmp_path):
        with pytest.raises(ConfigError, match="evo.keep_ration"):
            load_run_config(write_config(tmp_path),
                            overrides=["evo.keep_ration=0.25"])

    def test_seed_and_out_flags_win(self, tmp_path):
        cfg = load_run_config(write_config(tmp_path), seed=9, out="elsewhere")
        assert cfg["train"]["seed"] == 9 and cfg["out_dir"] == "elsewhere"


class TestTrainCommand:
    def test_produces_outputs(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli(["train", "--config", write_config(tmp_path),
                        "--out", str(out)])
        assert code == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "manifest.json").exists()
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert {"epoch", "mode", "loss", "acc_train", "acc_eval"} <= rec.keys()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["end_time"]

    def test_deterministic_checkpoints(self, tmp_path):
        cfgp = write_config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["train", "--config", cfgp, "--out", str(a)]) == 0
        assert run_cli(["train", "--config", cfgp, "--out", str(b)]) == 0
        assert (a / "checkpoint.bin").read_bytes() == \
            (b / "checkpoint.bin").read_bytes()

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"trian": {}}))
        code = run_cli(["train", "--config", str(path)])
        assert code == 2
        assert "trian" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert run_cli(["train", "--config",
                        str(tmp_path / "nope.json")]) == 2


class TestBenchCommand:
    def test_keep_all_no_reduction(self, tmp_path):
        out = tmp_path / "bench"
        code = run_cli(["bench", "--config", write_config(tmp_path),
                        "--out", str(out),
                        "--override", "evo.keep_ratio=1.0",
                        "--repeats", "5", "--batch", "1"])
        assert code == 0
        report = json.loads((out / "bench.json").read_text())
        assert report["flops"]["reduction_fraction"] == 0.0
        assert report["speedup_p50"] > 0


class TestAnalyzeCommand:
    @pytest.fixture()
    def trained(self, tmp_path):
        cfgp = write_config(tmp_path)
        out = tmp_path / "run"
        assert run_cli(["train", "--config", cfgp, "--out", str(out)]) == 0
        return cfgp, str(out / "checkpoint.bin"), tmp_path

    def test_curves_and_strategies(self, trained, tmp_path):
        cfgp, ckpt, _ = trained
        out = tmp_path / "an"
        code = run_cli(["analyze", "--config", cfgp, "--checkpoint", ckpt,
                        "--out", str(out), "--cka", "--pcc", "--strategies",
                        "--samples", "4"])
        assert code == 0
        cka = (out / "cka.csv").read_text().splitlines()
        assert cka[0] == "layer,cka" and len(cka) == 3
        assert all(0.0 <= float(r.split(",")[1]) <= 1.0 + 1e-12
                   for r in cka[1:])
        pcc = (out / "pcc.csv").read_text().splitlines()
        assert pcc[0] == "layer,pcc_mean,pcc_variance" and len(pcc) == 3
        table = json.loads((out / "strategies.json").read_text())
        assert set(table) == {"global-class-attention", "random",
                              "last-class-attention",
                              "attention-column-mean"}
        assert all(0.0 <= v <= 1.0 for v in table.values())

    def test_checkpoint_dataset_mismatch_exit_2(self, trained, tmp_path):
        cfgp, ckpt, _ = trained
        code = run_cli(["analyze", "--config", cfgp, "--checkpoint", ckpt,
                        "--out", str(tmp_path / "an2"), "--cka",
                        "--override",
                        'dataset={"synthetic": {"classes": 3, "samples": 6, '
                        '"side": 32, "seed": 1}}'])
        assert code == 2


class TestVisualizeCommand:
    def test_masks_written(self, tmp_path):
        cfgp = write_config(tmp_path)
        run_dir = tmp_path / "run"
        assert run_cli(["train", "--config", cfgp,
                        "--out", str(run_dir)]) == 0
        out = tmp_path / "viz"
        code = run_cli(["visualize", "--config", cfgp,
                        "--checkpoint", str(run_dir / "checkpoint.bin"),
                        "--out", str(out), "--count", "2"])
        assert code == 0
        pgms = sorted(out.glob("*.pgm"))
        # depth 2, start layer 2: one selective layer per image
        assert len(pgms) == 2 and len(list(out.glob("*.ppm"))) == 2
        blob = pgms[0].read_bytes()
        assert blob.startswith(b"P5\n4 4\n255\n")
        payload = blob[len(b"P5\n4 4\n255\n"):]
        assert sorted(set(payload)) == [0, 255]
        assert sum(1 for b in payload if b == 255) == 8  # k of 16 patches
