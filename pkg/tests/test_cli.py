import hashlib
import json

import numpy as np
import pytest

from qseg import cli, dataset, store, training
from qseg.model import ModelConfig, PromptSegModel
from qseg.tensor import Tape


def run(args):
    return cli.main(args)


def sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    specs = [dataset.ModalitySpec("a", 12, shape="ellipse"),
             dataset.ModalitySpec("b", 8, shape="rect")]
    return dataset.generate_synthetic(specs, out / "d.qseg", seed=1)


@pytest.fixture(scope="module")
def small_model(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("model")
    m = PromptSegModel(ModelConfig(embed_dim=16, encoder_depth=1, num_heads=2,
                                   decoder_dim=16), seed=0)
    vs = dataset.VolumeStore(small_data)
    chw, _ = dataset.preprocess(vs.read_slice(0, 0))
    vs.close()
    with Tape():
        m.forward(chw, (10.0, 10.0, 100.0, 120.0), "qat")
    path = out / "m.qsmf"
    store.export(m, path, "quantized")
    return str(path)


class TestGenData:
    def test_rerun_identical_hashes(self, tmp_path, capsys):
        for sub in ("r1", "r2"):
            assert run(["gen-data", "--spec", "default", "--seed", "7",
                        "--out", str(tmp_path / sub)]) == 0
        assert sha256(tmp_path / "r1/dataset.qseg") == \
            sha256(tmp_path / "r2/dataset.qseg")

    def test_effective_config_printed(self, tmp_path, capsys):
        run(["gen-data", "--out", str(tmp_path / "x"), "--name", "n.qseg"])
        head = capsys.readouterr().out.lstrip()
        cfg = json.loads(head[:head.index("}\n") + 1])
        assert cfg["name"] == "n.qseg" and cfg["seed"] == 0

    def test_writes_only_inside_out_dir(self, tmp_path):
        before = set(p.name for p in tmp_path.iterdir())
        run(["gen-data", "--out", str(tmp_path / "only")])
        after = set(p.name for p in tmp_path.iterdir())
        assert after - before == {"only"}


class TestExitCodes:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            run(["gen-data", "--bogus"])
        assert e.value.code == 2

    def test_runtime_error_exits_1_with_module_tag(self, tmp_path, capsys,
                                                   small_data):
        code = run(["qat", "--data", str(small_data), "--stage", "2",
                    "--out", str(tmp_path)])
        assert code == 1
        assert "[config]" in capsys.readouterr().err

    def test_bad_model_file_tagged_store(self, tmp_path, capsys, small_data):
        bad = tmp_path / "bad.qsmf"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code = run(["eval", "--data", str(small_data), "--model", str(bad),
                    "--out", str(tmp_path)])
        assert code == 1
        assert "[store]" in capsys.readouterr().err


class TestConfigFile:
    def test_file_overrides_defaults_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 5\nname = \"fromfile.qseg\"\n")
        run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o"),
             "--name", "fromflag.qseg"])
        eff = capsys.readouterr().out
        assert '"seed": 5' in eff
        assert (tmp_path / "o/fromflag.qseg").exists()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("nonsense = 1\n")
        assert run(["gen-data", "--config", str(cfg),
                    "--out", str(tmp_path / "o")]) == 1


class TestInspectInferBench:
    def test_inspect_prints_totals(self, small_model, capsys):
        assert run(["inspect", "--model", small_model]) == 0
        out = capsys.readouterr().out
        assert "image_encoder" in out and "prompt_encoder" in out

    def test_infer_writes_masks_and_timing(self, tmp_path, small_data,
                                           small_model):
        assert run(["infer", "--data", str(small_data), "--model", small_model,
                    "--case", "0", "--out", str(tmp_path)]) == 0
        timing = json.loads((tmp_path / "case0_timing.json").read_text())
        assert timing["decoder_calls"] >= 1
        pngs = list(tmp_path.glob("case0_box*.png"))
        assert pngs and pngs[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bench_writes_json(self, tmp_path, small_data, small_model):
        assert run(["bench", "--data", str(small_data), "--model", small_model,
                    "--cases", "0", "--repetitions", "1",
                    "--out", str(tmp_path)]) == 0
        rows = json.loads((tmp_path / "bench.json").read_text())
        assert rows[0]["float_wall_s"] > 0 and rows[0]["int_wall_s"] > 0

    def test_export_reencodes(self, tmp_path, small_model):
        assert run(["export", "--model", small_model, "--mode", "float",
                    "--name", "f.qsmf", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "f.qsmf").stat().st_size > 0


class TestSeedStreams:
    def test_rng_streams_independent_and_stable(self):
        a1 = cli.rng_for(3, "train").random(4)
        a2 = cli.rng_for(3, "train").random(4)
        b = cli.rng_for(3, "eval").random(4)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_qseg_threads_env(self, monkeypatch):
        args = cli.build_parser().parse_args(["gen-data", "--out", "/tmp/x"])
        monkeypatch.setenv("QSEG_THREADS", "3")
        assert cli.thread_count(args) == 3
        monkeypatch.setenv("QSEG_THREADS", "zebra")
        with pytest.raises(Exception):
            cli.thread_count(args)

    def test_deterministic_flag_forces_one(self, monkeypatch):
        monkeypatch.setenv("QSEG_THREADS", "8")
        args = cli.build_parser().parse_args(
            ["gen-data", "--out", "/tmp/x", "--deterministic"])
        assert cli.thread_count(args) == 1
