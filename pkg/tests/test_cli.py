import csv
import json
import os

import numpy as np
import pytest

from gale import __version__
from gale.cli import RunConfig, parse_config, run_command
from gale.data import generate_case, CaseSpec, write_csv_pointcloud
from gale.errors import ConfigError
from gale.metrics import read_metric_report_csv
from gale.model import Checkpoint, ModelConfig, StreamSpec, checkpoint_save, init_model


SMALL_DATA = [
    "--set", "data.n_cases=10",
    "--set", "data.surface_count=48",
    "--set", "data.volume_count=64",
]
SMALL_MODEL = [
    "--set", "model.d_model=12",
    "--set", "model.d_c=6",
    "--set", "model.d_bq=3",
    "--set", "model.L=1",
    "--set", "model.m_state=3",
    "--set", "model.ffn_hidden=16",
    "--set", "model.head_hidden=8",
    "--set", "model.gate_hidden=4",
    "--set", "model.query_token_cap=48",
    "--set", "model.geom_token_cap=12",
    '--set', 'model.schedule=[[0.7,4],[2.0,6]]',
]
SMALL_TRAIN = ["--set", "train.epochs=2", "--set", "train.eval_interval=2"]


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("")
        cfg = parse_config(path, [])
        default = RunConfig(model=ModelConfig(), train=__import__("gale.training", fromlist=["TrainConfig"]).TrainConfig(), data=__import__("gale.data", fromlist=["DataConfig"]).DataConfig())
        assert cfg.to_dict()["model"] == default.to_dict()["model"]
        assert cfg.to_dict()["train"] == default.to_dict()["train"]
        assert cfg.to_dict()["data"] == default.to_dict()["data"]

    def test_file_then_override_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": {"L": 7, "d_model": 24}}))
        cfg = parse_config(path, ["model.L=20"])
        assert cfg.model.L == 20
        assert cfg.model.d_model == 24

    def test_unknown_key_named_in_error(self, tmp_path):
        with pytest.raises(ConfigError, match="model.Lx"):
            parse_config(None, ["model.Lx=3"])
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"Lx": 3}}))
        with pytest.raises(ConfigError, match="Lx"):
            parse_config(path, [])

    def test_type_mismatch_reports_expected_type(self):
        with pytest.raises(ConfigError, match="integer"):
            parse_config(None, ["model.L=deep"])
        with pytest.raises(ConfigError, match="number"):
            parse_config(None, ["train.lr=fast"])

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"models": {}}))
        with pytest.raises(ConfigError):
            parse_config(path, [])

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["model.L"])


class TestCommands:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run_command(["frobnicate"])
        assert exc.value.code == 2

    def test_generate_data_writes_manifest_and_cases(self, tmp_path):
        out = str(tmp_path / "out")
        rc = run_command(["generate-data", *SMALL_DATA, "--set", f"out_dir={out}"])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "config.json"))
        assert os.path.exists(os.path.join(out, "version.txt"))
        manifest = os.path.join(out, "manifest.tsv")
        assert os.path.exists(manifest)
        cases = os.listdir(os.path.join(out, "cases"))
        assert len(cases) == 20  # surface + volume file per case
        from gale.data import load_csv_pointcloud

        sample = sorted(cases)[0]
        stream, _, _ = load_csv_pointcloud(os.path.join(out, "cases", sample))
        assert stream.n_tokens > 0

    def test_bench_neighbors(self, tmp_path):
        out = str(tmp_path / "bench")
        rc = run_command(["bench-neighbors", "--points", "200", "--queries", "20", "--set", f"out_dir={out}"])
        assert rc == 0
        with open(os.path.join(out, "bench_neighbors.csv")) as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == "n_points"
        assert rows[1][3] == "True"

    def test_train_then_eval_roundtrip(self, tmp_path):
        out = str(tmp_path / "train")
        rc = run_command(["train", *SMALL_DATA, *SMALL_MODEL, *SMALL_TRAIN, "--set", f"out_dir={out}"])
        assert rc == 0
        ckpt = os.path.join(out, "best.ckpt")
        assert os.path.exists(ckpt)
        assert os.path.exists(os.path.join(out, "train_log.csv"))
        echoed = json.load(open(os.path.join(out, "config.json")))
        assert echoed["model"]["L"] == 1
        assert open(os.path.join(out, "version.txt")).read().strip() == __version__

        out2 = str(tmp_path / "eval")
        rc = run_command(["eval", "--checkpoint", ckpt, *SMALL_DATA, "--set", f"out_dir={out2}"])
        assert rc == 0
        report = read_metric_report_csv(os.path.join(out2, "metrics.csv"))
        assert report["summary"]["surface_cp_rel_l1"] is not None
        with open(os.path.join(out2, "trend_j.csv")) as f:
            trend_rows = list(csv.reader(f))
        assert trend_rows[0][0] == "case_id"
        assert len(trend_rows) >= 2

    def test_eval_with_mismatched_checkpoint_fails(self, tmp_path, capsys):
        bad_cfg = ModelConfig(
            d_model=12,
            d_c=6,
            d_bq=3,
            L=1,
            m_state=3,
            ffn_hidden=16,
            head_hidden=8,
            gate_hidden=4,
            schedule=[[0.7, 4], [2.0, 6]],
            streams=[StreamSpec("surface", 2), StreamSpec("volume", 2)],  # wrong widths
            query_token_cap=48,
            geom_token_cap=12,
        )
        model = init_model(bad_cfg)
        ckpt_path = str(tmp_path / "bad.ckpt")
        checkpoint_save(ckpt_path, Checkpoint(config=bad_cfg, params=model.params, normalizer={
            "surface.features": {"mean": [0.0] * 4, "scale": [1.0] * 4},
            "surface.targets": {"mean": [0.0] * 2, "scale": [1.0] * 2},
            "volume.features": {"mean": [0.0] * 4, "scale": [1.0] * 4},
            "volume.targets": {"mean": [0.0] * 2, "scale": [1.0] * 2},
            "params": {"mean": [0.0] * 4, "scale": [1.0] * 4},
        }))
        rc = run_command(["eval", "--checkpoint", ckpt_path, *SMALL_DATA, "--set", f"out_dir={tmp_path / 'evalbad'}"])
        assert rc == 1
        err = capsys.readouterr().err
        assert "error:" in err

    def test_ablate_two_layer_values(self, tmp_path):
        out = str(tmp_path / "abl")
        rc = run_command(
            ["ablate", "--axis", "model.L=1,2", *SMALL_DATA, *SMALL_MODEL, *SMALL_TRAIN, "--set", f"out_dir={out}"]
        )
        assert rc == 0
        with open(os.path.join(out, "ablation_summary.csv")) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert int(rows[0]["param_count"]) < int(rows[1]["param_count"])

    def test_ablate_schedule_axis(self, tmp_path):
        out = str(tmp_path / "abl_s")
        rc = run_command(
            ["ablate", "--axis", "schedule=1scale,2scale", *SMALL_DATA, *SMALL_MODEL, *SMALL_TRAIN, "--set", f"out_dir={out}"]
        )
        assert rc == 0
        with open(os.path.join(out, "ablation_summary.csv")) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2
        assert int(rows[0]["param_count"]) < int(rows[1]["param_count"])

    def test_predict_writes_pointwise_csvs(self, tmp_path):
        out = str(tmp_path / "t2")
        rc = run_command(["train", *SMALL_DATA, *SMALL_MODEL, *SMALL_TRAIN, "--set", f"out_dir={out}"])
        assert rc == 0
        case = generate_case(CaseSpec(surface_count=32, volume_count=16, seed=4, case_id="p"))
        surf_csv = str(tmp_path / "surf.csv")
        vol_csv = str(tmp_path / "vol.csv")
        write_csv_pointcloud(
            surf_csv,
            case.surface_positions,
            {
                "nx": case.surface_normals[:, 0],
                "ny": case.surface_normals[:, 1],
                "nz": case.surface_normals[:, 2],
                "area": case.surface_area,
            },
        )
        write_csv_pointcloud(vol_csv, case.volume_positions, {})
        out2 = str(tmp_path / "pred")
        rc = run_command(
            [
                "predict",
                "--checkpoint", os.path.join(out, "best.ckpt"),
                "--surface", surf_csv,
                "--volume", vol_csv,
                "--set", f"out_dir={out2}",
            ]
        )
        assert rc == 0
        from gale.data import load_csv_pointcloud

        stream, _, targets = load_csv_pointcloud(
            os.path.join(out2, "predictions_surface.csv"),
            target_columns=("pred_0", "pred_1", "pred_2", "pred_3"),
        )
        assert stream.n_tokens == 32
        assert np.isfinite(targets).all()

    def test_gradcheck_command_passes(self, tmp_path):
        rc = run_command(["gradcheck", "--set", f"out_dir={tmp_path / 'gc'}"])
        assert rc == 0
