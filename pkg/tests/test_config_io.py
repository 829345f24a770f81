"""Config text format, on-disk formats and the experiment runner verbs."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpotseg import cli, io
from mpotseg.config import ConfigError, ExperimentConfig, format_config, load_config, parse_config
from mpotseg.training import DivergenceError

TINY = """\
world.n_classes=2
world.n_seen=1
world.n_prompts=4
world.dim=8
world.ctx_dim=4
world.ctx_len=2
world.n_layers=3
world.height=8
world.width=8
pipeline.start_layer=2
schedule.total_iters=6
schedule.eval_every=3
schedule.n_train_scenes=2
schedule.n_eval_scenes=2
"""
SHORT = TINY.replace("total_iters=6", "total_iters=2").replace("eval_every=3", "eval_every=2")


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


class TestConfigFormat:
    def test_round_trip_of_defaults(self):
        cfg = ExperimentConfig()
        assert parse_config(format_config(cfg)) == cfg

    def test_round_trip_of_overrides(self, tiny_config):
        cfg = load_config(tiny_config).with_seed(7).with_matcher("hungarian")
        assert parse_config(format_config(cfg)) == cfg
        assert cfg.schedule.seed == 7 and cfg.pipeline.matcher == "hungarian"

    def test_values_and_comments(self):
        cfg = parse_config("# a comment\n\nseed=3\nsinkhorn.epsilon=0.1\nablation.seeds=1,2\n"
                           "pipeline.joint_plans=true\n")
        assert cfg.seed == 3 and cfg.sinkhorn.epsilon == 0.1 and cfg.pipeline.sinkhorn.epsilon == 0.1
        assert cfg.ablation.seeds == (1, 2) and cfg.pipeline.joint_plans

    @pytest.mark.parametrize("text", [
        "world.colour=3", "nosection=1", "world.n_classes=eight", "seed=1\nseed=2", "just text",
        "sinkhorn.epsilon=-1", "pipeline.matcher=greedy", "pipeline.start_layer=9",
        "ablation.variants=sinkhorn", "pipeline.joint_plans=maybe", "schedule.seed=4",
    ])
    def test_rejects_bad_input(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    @given(st.floats(1e-3, 10.0), st.integers(1, 500), st.sampled_from(["sinkhorn", "hungarian", "none"]))
    def test_round_trip_property(self, eps, iters, matcher):
        cfg = parse_config(f"sinkhorn.epsilon={eps!r}\nschedule.total_iters={iters}\npipeline.matcher={matcher}")
        assert parse_config(format_config(cfg)) == cfg


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"b": rng.standard_normal((2, 3, 4)), "a": rng.standard_normal(5), "s": np.array(2.5)}
        io.save_checkpoint(tmp_path / "c.bin", arrays, "meta=1\n")
        back, meta = io.load_checkpoint(tmp_path / "c.bin")
        assert meta == "meta=1\n" and set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_documented_layout(self, tmp_path):
        io.save_checkpoint(tmp_path / "c.bin", {"w": np.array([[1.0, 2.0]])}, "m")
        buf = (tmp_path / "c.bin").read_bytes()
        want = (b"MPCKPT01" + struct.pack("<II", 1, 1) + b"m" + struct.pack("<I", 1)
                + struct.pack("<H", 1) + b"w" + struct.pack("<BQQ", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0))
        assert buf == want

    @pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
    def test_corruption_is_detected(self, tmp_path, damage):
        path = tmp_path / "c.bin"
        io.save_checkpoint(path, {"w": np.ones((3, 3))}, "meta")
        buf = bytearray(path.read_bytes())
        if damage == "magic":
            buf[0:1] = b"X"
        elif damage == "version":
            buf[8:12] = struct.pack("<I", 9)
        elif damage == "truncate":
            buf = buf[:-5]
        else:
            buf += b"\0"
        path.write_bytes(bytes(buf))
        with pytest.raises(io.FormatError):
            io.load_checkpoint(path)


class TestGraymaps:
    def test_constant_map(self):
        img, lo, hi = io.scale_to_bytes(np.full((3, 4), 0.7))
        assert np.all(img == 0) and lo == hi == 0.7

    @given(st.integers(0, 10**6))
    def test_values_round_trip_within_one_level(self, seed):
        v = np.random.default_rng(seed).uniform(-1, 1, (5, 6))
        img, lo, hi = io.scale_to_bytes(v)
        assert img.min() == 0 and img.max() == 255
        assert np.all(np.abs(io.bytes_to_values(img, lo, hi) - v) <= (hi - lo) / 255)

    def test_pgm_and_sidecar_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, (7, 5)).astype(np.uint8)
        io.write_pgm(tmp_path / "a.pgm", img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n5 7\n255\n")
        np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), img)
        io.write_scale_sidecar(tmp_path / "s.txt", {"a": (-0.25, 0.5)})
        assert io.read_scale_sidecar(tmp_path / "s.txt") == {"a": (-0.25, 0.5)}
        with pytest.raises(io.FormatError):
            io.write_pgm(tmp_path / "b.pgm", img.astype(np.int32))

    def test_csv_refuses_non_finite(self, tmp_path):
        io.write_csv(tmp_path / "ok.csv", ["a", "b"], [{"a": 1, "b": 0.5}])
        assert io.read_csv(tmp_path / "ok.csv") == [{"a": "1", "b": "0.5"}]
        with pytest.raises(io.FormatError):
            io.write_csv(tmp_path / "bad.csv", ["a"], [{"a": float("nan")}])


class TestRunnerVerbs:
    def test_train_writes_artifacts(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
        rows = io.read_csv(out / "metrics.csv")
        assert list(rows[0]) == cli.METRICS_HEADER
        assert [r["step"] for r in rows] == ["3", "6"]
        assert parse_config((out / "config.txt").read_text()) == replace_out(load_config(tiny_config), out)
        arrays, meta = io.load_checkpoint(out / "checkpoint.bin")
        assert "prompts.contexts" in arrays and parse_config(meta).out == str(out)

    def test_repeated_seed_is_byte_identical(self, tiny_config, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["train", "--config", str(tiny_config), "--seed", "3", "--out", str(tmp_path / name)]) == 0
        for f in ("metrics.csv", "checkpoint.bin"):
            a = (tmp_path / "a" / f).read_bytes()
            b = (tmp_path / "b" / f).read_bytes()
            if f == "checkpoint.bin":  # the echoed output directory differs
                a, b = a.replace(b"/a\n", b"/b\n"), b
            assert a == b

    def test_matcher_none_runs(self, tiny_config, tmp_path):
        tiny_config.write_text(TINY + "pipeline.matcher=none\n")
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0

    def test_checkpoint_verbs(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
        assert cli.main(["eval", "--out", str(out)]) == 0
        assert list(io.read_csv(out / "eval.csv")[0]) == cli.EVAL_HEADER
        assert cli.main(["dump-maps", "--out", str(out), "--scene-seed", "4"]) == 0
        maps = sorted(p.name for p in (out / "maps").glob("*.pgm"))
        assert len(maps) == 2 * 4 + 2 and "class1_fused.pgm" in maps
        scales = io.read_scale_sidecar(out / "maps" / "scales.txt")
        assert set(scales) == {m[:-4] for m in maps}
        assert cli.main(["diagnose", "--out", str(out), "--classes", "1"]) == 0
        rows = io.read_csv(out / "diagnostics.csv")
        assert [r["kind"] for r in rows] == ["dispersion"] + ["alignment"] * 3
        assert all(np.isfinite(float(r["value"])) for r in rows)

    def test_dumped_maps_decode_to_scores(self, tiny_config, tmp_path):
        from mpotseg.alignment import forward
        from mpotseg.autodiff import no_grad
        from mpotseg.synthetic import World

        out = tmp_path / "run"
        cli.main(["train", "--config", str(tiny_config), "--out", str(out)])
        cli.main(["dump-maps", "--out", str(out), "--scene-seed", "4"])
        cfg, model = cli.load_trained(out / "checkpoint.bin")
        world = World(cfg.world)
        with no_grad():
            s = forward(world.generate_scene(4), model, world.text_encoder, cfg.pipeline).scores.data[-1]
        lo, hi = io.read_scale_sidecar(out / "maps" / "scales.txt")["class1_prompt2"]
        img = io.read_pgm(out / "maps" / "class1_prompt2.pgm")
        decoded = io.bytes_to_values(img, lo, hi).reshape(-1)
        assert np.all(np.abs(decoded - s[:, 1 * 4 + 2]) <= (hi - lo) / 255)

    def test_ablation_bookkeeping(self, tiny_config, tmp_path):
        tiny_config.write_text(SHORT + "ablation.variants=sinkhorn,none\nablation.seeds=0,1,2,3,4\n")
        out = tmp_path / "abl"
        assert cli.main(["ablate", "--config", str(tiny_config), "--out", str(out)]) == 0
        rows = io.read_csv(out / "ablation.csv")
        assert len(rows) == 12
        assert [r["seed"] for r in rows if r["variant"] == "none"] == ["0", "1", "2", "3", "4", "mean"]
        assert (out / "sinkhorn" / "seed3" / "metrics.csv").exists()

    def test_parallel_ablation_matches_serial(self, tiny_config, tmp_path):
        cfg = parse_config(SHORT)
        serial = cli.run_ablation(replace_out(cfg, tmp_path / "s"), seeds=(0, 1), variants=("sinkhorn", "none"))
        parallel = cli.run_ablation(replace_out(cfg, tmp_path / "p"), seeds=(0, 1), variants=("sinkhorn", "none"),
                                    workers=2)
        assert serial == parallel


def replace_out(cfg, out):
    from dataclasses import replace

    return replace(cfg, out=str(out))


class TestExitCodes:
    def test_config_errors(self, tmp_path, tiny_config, monkeypatch):
        bad = tmp_path / "bad.cfg"
        bad.write_text("world.unknown=1\n")
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
        assert cli.main(["explode"]) == cli.EXIT_CONFIG
        assert cli.main(["train", "--seed", "x"]) == cli.EXIT_CONFIG
        monkeypatch.setenv("MPOT_THREADS", "zero")
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_io_errors(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
        assert cli.main(["eval", "--out", str(tmp_path)]) == cli.EXIT_IO
        (tmp_path / "checkpoint.bin").write_bytes(b"garbage")
        assert cli.main(["diagnose", "--out", str(tmp_path)]) == cli.EXIT_IO

    def test_divergence(self, tiny_config, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise DivergenceError("loss became non-finite at step 1")

        monkeypatch.setattr(cli, "fit", diverge)
        assert cli.main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == cli.EXIT_DIVERGED

    def test_bad_probe_class(self, tiny_config, tmp_path):
        cli.main(["train", "--config", str(tiny_config), "--out", str(tmp_path)])
        assert cli.main(["diagnose", "--out", str(tmp_path), "--classes", "7"]) == cli.EXIT_CONFIG
        assert cli.main(["diagnose", "--out", str(tmp_path), "--classes", "a"]) == cli.EXIT_CONFIG

    def test_module_entry_point(self, tmp_path):
        import subprocess
        import sys

        res = subprocess.run([sys.executable, "-m", "mpotseg", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "dump-maps" in res.stdout
