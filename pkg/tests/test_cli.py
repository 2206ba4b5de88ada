"""End-to-end checks of the command line front end.

Every test drives cli.main() in-process with a scaled-down world so the full
chain (gen, train, pool, stage-2, reconstruct, evaluate, gradcheck) stays
fast; the quantitative training claims at full scale live in the acceptance
suite.
"""

import os
import re

import numpy as np
import pytest

from mixmem import cli, pipeline as P, storage, tensor as T
from mixmem.brain import BrainModel, BrainModelConfig
from mixmem.diffusion import NoiseSchedule
from mixmem.errors import ConfigError
from mixmem.memory import pool_merge

TINY = [
    "gen.latent_dim=6", "gen.n_voxels=24", "gen.d_clip=12", "gen.d_act=6",
    "gen.n_train=12", "gen.n_test=6", "gen.frames=3", "gen.height=8",
    "gen.width=8", "model.n_layers=1", "model.d_model=8", "model.n_tokens=3",
    "decoder.hidden=16", "pipeline.top_k=2", "schedule.timesteps=8",
]


def run(cmd, out, seed=3, sets=(), config=None):
    argv = [cmd, "--seed", str(seed), "--out", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    for item in list(TINY) + list(sets):
        argv += ["--set", item]
    return cli.main(argv)


def make_dataset(out, seed=3):
    assert run("gen", out, seed=seed) == 0
    return os.path.join(str(out), "dataset.momd")


def make_stage1(out, seed=3, steps=5):
    make_dataset(out, seed=seed)
    assert run("train-stage1", out, seed=seed,
               sets=[f"stage1.steps={steps}", "stage1.batch_size=4"]) == 0
    return os.path.join(str(out), "stage1.momc")


def make_stage2(out, seed=3, steps=4):
    make_stage1(out, seed=seed)
    assert run("build-pool", out, seed=seed) == 0
    assert run("train-stage2", out, seed=seed,
               sets=[f"stage2.steps={steps}", "stage2.batch_size=3"]) == 0
    return out


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# -- config resolution ---------------------------------------------------------


def test_unknown_config_key_exits_2(tmp_path, capsys):
    code = cli.main(["gen", "--out", str(tmp_path), "--set", "gen.bogus=1"])
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_bad_value_exits_2(tmp_path, capsys):
    code = cli.main(["gen", "--out", str(tmp_path), "--set", "gen.n_train=lots"])
    assert code == 2
    assert "cannot parse" in capsys.readouterr().err


def test_missing_equals_rejected(tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), "--set", "gen.n_train"]) == 2


def test_unknown_preset_rejected(tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), "--set", "preset=huge"]) == 2


def test_config_file_and_set_precedence(tmp_path, capsys):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment line\n\ngen.n_train = 7\ngen.n_test = 5\n")
    out = tmp_path / "out"
    code = cli.main(["gen", "--out", str(out), "--config", str(cfg_file),
                     "--set", "gen.n_test=4"] +
                    [a for item in TINY if not item.startswith("gen.n_t")
                     for a in ("--set", item)])
    assert code == 0
    logged = capsys.readouterr().out
    assert "config gen.n_train = 7" in logged
    assert "config gen.n_test = 4" in logged
    cfg, train, test = storage.load_dataset(str(out / "dataset.momd"))
    assert len(train) == 7 and len(test) == 4


def test_seed_flag_overrides_config_file(tmp_path, capsys):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 11\n")
    assert run("gen", tmp_path / "o", seed=9, config=cfg_file) == 0
    assert "config seed = 9" in capsys.readouterr().out


def test_paper_preset_changes_training_lengths(tmp_path, capsys):
    code = cli.main(["gen", "--out", str(tmp_path), "--set", "preset=paper"]
                    + [a for item in TINY for a in ("--set", item)])
    assert code == 0
    logged = capsys.readouterr().out
    assert "config stage1.steps = 8000" in logged
    assert "config stage1.batch_size = 144" in logged
    assert "config stage2.epochs = 20" in logged


def test_resolved_config_logged_for_every_key(tmp_path, capsys):
    assert run("gen", tmp_path) == 0
    logged = capsys.readouterr().out
    for key in cli.DEFAULTS:
        assert f"config {key} = " in logged


# -- gen ----------------------------------------------------------------------


def test_gen_same_seed_byte_identical(tmp_path):
    a = make_dataset(tmp_path / "a", seed=21)
    b = make_dataset(tmp_path / "b", seed=21)
    assert read_bytes(a) == read_bytes(b)


def test_gen_different_seed_differs(tmp_path):
    a = make_dataset(tmp_path / "a", seed=21)
    b = make_dataset(tmp_path / "b", seed=22)
    assert read_bytes(a) != read_bytes(b)


def test_gen_output_loads_with_consistent_shapes(tmp_path):
    path = make_dataset(tmp_path)
    cfg, train, test = storage.load_dataset(path)
    assert len(train) == 12 and len(test) == 6
    for s in train[:3] + test[:3]:
        assert s.signal.shape == (24,)
        assert s.clip.shape == (3, 3, 8, 8)
        assert s.labels.shape == (cfg.n_classes,)
        assert s.labels.sum() >= 1


def test_gen_rejects_empty_train_split(tmp_path, capsys):
    code = cli.main(["gen", "--out", str(tmp_path), "--set", "gen.n_train=0"])
    assert code == 2
    assert "gen.n_train" in capsys.readouterr().err


# -- train-stage1 -------------------------------------------------------------


def test_stage1_training_reduces_loss_through_cli(tmp_path, capsys):
    make_dataset(tmp_path)
    assert run("train-stage1", tmp_path,
               sets=["stage1.steps=120", "stage1.batch_size=8"]) == 0
    losses = [float(m.group(1)) for m in re.finditer(
        r"stage1 step \d+ lr \S+ loss (\S+)", capsys.readouterr().out)]
    assert len(losses) == 120
    assert losses[-1] < losses[0]


def test_stage1_zero_steps_writes_loadable_init_checkpoint(tmp_path):
    make_dataset(tmp_path, seed=5)
    assert run("train-stage1", tmp_path, seed=5, sets=["stage1.steps=0"]) == 0
    loaded = storage.load_checkpoint(str(tmp_path / "stage1.momc"))
    gen_cfg, _, _ = storage.load_dataset(str(tmp_path / "dataset.momd"))
    model = BrainModel(
        BrainModelConfig(n_voxels=24, n_layers=1, d_model=8, n_tokens=3,
                         d_clip=12, d_act=6, n_classes=15),
        T.Rng(5).split("init").split("brain"))
    for name, p in model.named_parameters():
        assert loaded[name].tobytes() == p.data.tobytes()


def test_stage1_missing_dataset_exits_2(tmp_path, capsys):
    assert run("train-stage1", tmp_path) == 2
    assert "not found" in capsys.readouterr().err


def test_stage1_checkpoint_deterministic(tmp_path):
    a = make_stage1(tmp_path / "a", seed=8)
    b = make_stage1(tmp_path / "b", seed=8)
    assert read_bytes(a) == read_bytes(b)


# -- build-pool ---------------------------------------------------------------


def test_pool_has_one_entry_per_training_sample(tmp_path):
    make_stage1(tmp_path)
    assert run("build-pool", tmp_path) == 0
    pool = storage.load_pool(str(tmp_path / "pool.momp"))
    assert len(pool) == 12
    assert [e.source_tag for e in pool.entries[:2]] == ["train:0", "train:1"]


def test_pool_matches_in_memory_build(tmp_path):
    make_stage1(tmp_path)
    assert run("build-pool", tmp_path) == 0
    pool = storage.load_pool(str(tmp_path / "pool.momp"))
    gen_cfg, train, _ = storage.load_dataset(str(tmp_path / "dataset.momd"))
    model = BrainModel(
        BrainModelConfig(n_voxels=24, n_layers=1, d_model=8, n_tokens=3,
                         d_clip=12, d_act=6, n_classes=15),
        T.Rng(3).split("init").split("brain"))
    storage.assign_checkpoint(model.named_parameters(),
                              storage.load_checkpoint(str(tmp_path / "stage1.momc")))
    oracle = P.build_pool(model, train)
    for got, want in zip(pool.entries, oracle.entries):
        assert got.id == want.id
        assert np.array_equal(got.e_txt, want.e_txt)
        assert np.array_equal(got.e_img, want.e_img)
        assert np.array_equal(got.e_act, want.e_act)


def test_pool_merge_flag_reassigns_ids(tmp_path):
    make_stage1(tmp_path)
    assert run("build-pool", tmp_path) == 0
    first = str(tmp_path / "pool.momp")
    out2 = tmp_path / "merged"
    assert run("build-pool", out2, sets=[
        f"dataset={tmp_path / 'dataset.momd'}",
        f"stage1_checkpoint={tmp_path / 'stage1.momc'}",
        f"pool.merge={first}", "pool.tag_prefix=extra"]) == 0
    merged = storage.load_pool(str(out2 / "pool.momp"))
    assert len(merged) == 24
    ids = [e.id for e in merged.entries]
    assert len(set(ids)) == 24
    tags = {e.source_tag.split(":")[0] for e in merged.entries}
    assert tags == {"train", "extra"}
    base = storage.load_pool(first)
    oracle = pool_merge(storage.load_pool(first), base)
    assert [e.id for e in oracle.entries] == ids


# -- train-stage2 -------------------------------------------------------------


def test_stage2_checkpoint_deterministic(tmp_path):
    make_stage2(tmp_path / "a", seed=6)
    make_stage2(tmp_path / "b", seed=6)
    assert (read_bytes(tmp_path / "a" / "stage2.momc")
            == read_bytes(tmp_path / "b" / "stage2.momc"))


def test_stage2_zero_steps_keeps_warm_started_queries(tmp_path):
    make_stage1(tmp_path)
    assert run("build-pool", tmp_path) == 0
    assert run("train-stage2", tmp_path, sets=["stage2.steps=0"]) == 0
    loaded = storage.load_checkpoint(str(tmp_path / "stage2.momc"))
    s1 = storage.load_checkpoint(str(tmp_path / "stage1.momc"))
    assert loaded["query.clip.weight"].tobytes() == s1["brain.out.weight"].tobytes()
    assert np.all(loaded["fusion.gate_txt.weight"] == 0.0)


def test_stage2_epochs_override_steps(tmp_path, capsys):
    make_stage1(tmp_path)
    assert run("build-pool", tmp_path) == 0
    capsys.readouterr()
    assert run("train-stage2", tmp_path,
               sets=["stage2.epochs=2", "stage2.batch_size=5"]) == 0
    steps = re.findall(r"stage2 step (\d+) ", capsys.readouterr().out)
    # 2 epochs of ceil(12 / 5) = 3 batches each
    assert len(steps) == 6


# -- reconstruct --------------------------------------------------------------


def test_reconstruct_writes_one_clip_per_input(tmp_path):
    make_stage2(tmp_path)
    assert run("reconstruct", tmp_path, sets=["recon.count=3"]) == 0
    for i in range(3):
        clip = storage.load_clip(str(tmp_path / f"recon_{i:04d}.momr"))
        assert clip.shape == (3, 3, 8, 8)
        assert clip.min() >= -1.0 and clip.max() <= 1.0
    assert not os.path.exists(tmp_path / "recon_0003.momr")


def test_reconstruct_explicit_indices(tmp_path):
    make_stage2(tmp_path)
    assert run("reconstruct", tmp_path, sets=["recon.indices=1,4"]) == 0
    assert os.path.exists(tmp_path / "recon_0001.momr")
    assert os.path.exists(tmp_path / "recon_0004.momr")
    assert not os.path.exists(tmp_path / "recon_0000.momr")


def test_reconstruct_same_seed_reproducible(tmp_path):
    make_stage2(tmp_path)
    assert run("reconstruct", tmp_path, sets=["recon.count=1"]) == 0
    first = read_bytes(tmp_path / "recon_0000.momr")
    os.remove(tmp_path / "recon_0000.momr")
    assert run("reconstruct", tmp_path, sets=["recon.count=1"]) == 0
    assert read_bytes(tmp_path / "recon_0000.momr") == first


def test_reconstruct_rejects_bad_split_and_indices(tmp_path, capsys):
    make_stage2(tmp_path)
    assert run("reconstruct", tmp_path, sets=["recon.split=val"]) == 2
    assert run("reconstruct", tmp_path, sets=["recon.indices=99"]) == 2
    assert run("reconstruct", tmp_path, sets=["recon.indices=a,b"]) == 2


# -- evaluate -----------------------------------------------------------------


def parse_report(path):
    out = {}
    for line in open(path):
        m = re.match(r"metric (\S+) = (\S+) std (\S+) trials (\d+)", line)
        assert m, line
        out[m.group(1)] = (float(m.group(2)), float(m.group(3)), int(m.group(4)))
    return out


def test_evaluate_report_matches_direct_call(tmp_path):
    make_stage2(tmp_path, seed=4)
    assert run("evaluate", tmp_path, seed=4, sets=[
        "eval.subset_size=6", "eval.nway_trials=2", "eval.recon_count=1"]) == 0
    report = parse_report(str(tmp_path / "report.txt"))

    gen_cfg, train, test = storage.load_dataset(str(tmp_path / "dataset.momd"))
    pipe = P.Pipeline(P.PipelineConfig(
        brain=BrainModelConfig(n_voxels=24, n_layers=1, d_model=8, n_tokens=3,
                               d_clip=12, d_act=6, n_classes=15),
        decoder=__import__("mixmem.diffusion", fromlist=["DecoderConfig"])
        .DecoderConfig(frames=3, channels=3, height=8, width=8,
                       d_cond=12, hidden=16),
        top_k=2), T.Rng(4).split("init"))
    storage.assign_checkpoint(pipe.named_parameters(),
                              storage.load_checkpoint(str(tmp_path / "stage2.momc")))
    pool = storage.load_pool(str(tmp_path / "pool.momp"))
    oracle = P.evaluate_battery(pipe, pool, test, NoiseSchedule(timesteps=8),
                                T.Rng(4).split("eval"), subset_size=6,
                                nway_trials=2, recon_count=1)
    assert set(report) == {r.name for r in oracle}
    for r in oracle:
        value, std, trials = report[r.name]
        assert value == r.value
        assert std == r.std
        assert trials == r.n_trials


def test_evaluate_report_byte_identical_across_runs(tmp_path):
    make_stage2(tmp_path, seed=4)
    sets = ["eval.subset_size=6", "eval.nway_trials=2"]
    assert run("evaluate", tmp_path, seed=4, sets=sets) == 0
    first = read_bytes(tmp_path / "report.txt")
    assert run("evaluate", tmp_path, seed=4, sets=sets) == 0
    assert read_bytes(tmp_path / "report.txt") == first


# -- gradcheck ----------------------------------------------------------------


def test_gradcheck_all_paths_pass(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "gradcheck all paths pass" in out
    assert "FAIL" not in out
    assert "quadratic_self_test" in out
    assert "stage2_composite" in out


def test_gradcheck_detects_injected_fault(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path),
                     "--set", "gradcheck.inject_fault=true"]) == 0
    assert "fault_injection" in capsys.readouterr().out


def test_gradcheck_fault_rig_raises_without_fd_disagreement():
    # the corrupted closure must disagree with the analytic gradient
    name, err = cli._fault_injection_row()
    assert name == "fault_injection"
    assert err > 1e-3


# -- coercion helpers ---------------------------------------------------------


def test_coerce_bool_variants():
    assert cli._coerce("gradcheck.inject_fault", "true") is True
    assert cli._coerce("gradcheck.inject_fault", "0") is False
    with pytest.raises(ConfigError):
        cli._coerce("gradcheck.inject_fault", "maybe")


def test_coerce_respects_default_types():
    assert cli._coerce("stage1.steps", "17") == 17
    assert cli._coerce("loss.tau", "0.2") == 0.2
    assert cli._coerce("recon.split", " train ") == "train"
