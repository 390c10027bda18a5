import json

import numpy as np
import pytest

from latmol.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from latmol.cli import main
from latmol.config import ConfigError, RunConfig, parse_config
from latmol.data import parse_manifest, parse_xyz
from latmol.rng import derive_rng


# --- checkpoint container -------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    named = {
        "encoder.w": rng.normal(size=(7, 3)),
        "decoder.bias": rng.normal(size=5),
        "scalar": np.array(3.25),
    }
    meta = {"k": 1, "sigma0": 0.01, "vocabulary": ["H", "C"], "seed": 9}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, named, meta)
    loaded, meta_back = load_checkpoint(path)
    assert meta_back == meta
    for name, arr in named.items():
        assert loaded[name].tobytes() == np.asarray(arr, dtype="<f8").tobytes()


def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    named = {"a": np.arange(6.0).reshape(2, 3)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, named, {"seed": 1})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert "magic" in str(err.value)


def test_checkpoint_version_mismatch_detected_before_tensors(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"a": np.ones(3)}, {})
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # bump the version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path)
    assert "version" in str(err.value)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"a": np.ones(100)}, {})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# --- config ----------------------------------------------------------------------


def test_config_defaults_follow_reference_settings():
    config = RunConfig()
    assert config.k == 1
    assert config.lr == 1e-4
    assert config.kl_weight == 0.01
    assert config.es_warmup == 1000


def test_config_file_grammar():
    text = """
    # training setup
    seed = 11
    hidden_width = 24
    lr = 0.0003
    conditional = true
    regularizer = kl
    """
    config = parse_config(text)
    assert config.seed == 11
    assert config.hidden_width == 24
    assert config.lr == 3e-4
    assert config.conditional is True
    assert config.regularizer == "kl"


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as err:
        parse_config("learnig_rate = 0.1\n")
    assert "learnig_rate" in str(err.value)


def test_config_rejects_bad_value():
    with pytest.raises(ConfigError):
        parse_config("seed = notanumber\n")


def test_config_rejects_invalid_regularizer():
    with pytest.raises(ConfigError):
        parse_config("regularizer = dropout\n")


# --- seed streams ------------------------------------------------------------------


def test_derived_streams_are_deterministic_and_independent():
    a1 = derive_rng(5, "alpha").normal(size=4)
    a2 = derive_rng(5, "alpha").normal(size=4)
    b = derive_rng(5, "beta").normal(size=4)
    other = derive_rng(6, "alpha").normal(size=4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.allclose(a1, b)
    assert not np.allclose(a1, other)


def test_derived_streams_support_counters():
    first = derive_rng(5, "sample", 0).normal(size=3)
    second = derive_rng(5, "sample", 1).normal(size=3)
    assert not np.allclose(first, second)


# --- commands ----------------------------------------------------------------------


def test_cmd_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "CHECK-SUMMARY" in out
    assert "status=OK" in out


def test_cmd_check_detects_injected_cog_fault(capsys):
    assert main(["check", "--inject-fault", "cog"]) == 1
    out = capsys.readouterr().out
    assert "status=FAIL" in out


def _tiny_config(tmp_path, **extra):
    lines = {
        "seed": 3,
        "k": 1,
        "hidden_width": 8,
        "encoder_layers": 1,
        "decoder_layers": 1,
        "denoiser_layers": 1,
        "batch_size": 4,
        "iterations": 8,
        "timesteps": 6,
        "regularizer": "kl",
    }
    lines.update(extra)
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    return str(path)


def test_full_cli_pipeline(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    data = tmp_path / "data.txt"
    ae_ckpt = tmp_path / "ae.ckpt"
    ldm_ckpt = tmp_path / "ldm.ckpt"
    samples = tmp_path / "samples.xyz"
    report = tmp_path / "report.json"

    assert main(["gen-synthetic", "--count", "24", "--seed", "3",
                 "--out", str(data)]) == 0
    mols = parse_manifest(data.read_text())
    assert len(mols) == 24
    meta = json.loads((tmp_path / "data.txt.meta.json").read_text())
    assert len(meta["template_ids"]) == 24

    assert main(["train-ae", "--data", str(data), "--config", cfg,
                 "--out", str(ae_ckpt)]) == 0
    assert ae_ckpt.exists() and (tmp_path / "ae.ckpt.log.jsonl").exists()

    assert main(["train-ldm", "--data", str(data), "--ae", str(ae_ckpt),
                 "--config", cfg, "--out", str(ldm_ckpt)]) == 0

    assert main(["sample", "--ae", str(ae_ckpt), "--ldm", str(ldm_ckpt),
                 "-n", "5", "--seed", "12", "--out", str(samples)]) == 0
    sampled = parse_xyz(samples.read_text())
    assert len(sampled) == 5
    assert "seed=12" in samples.read_text()

    assert main(["eval", "--samples", str(samples), "--out", str(report)]) == 0
    body = json.loads(report.read_text())
    assert set(body) >= {"atom_stability", "molecule_stability", "validity",
                         "uniqueness", "validity_times_uniqueness", "sample_count"}
    assert body["sample_count"] == 5


def test_sample_zero_molecules_writes_empty_file(tmp_path):
    cfg = _tiny_config(tmp_path)
    data, ae_ckpt, ldm_ckpt = tmp_path / "d.txt", tmp_path / "a.ckpt", tmp_path / "l.ckpt"
    assert main(["gen-synthetic", "--count", "12", "--seed", "1", "--out", str(data)]) == 0
    assert main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(ae_ckpt)]) == 0
    assert main(["train-ldm", "--data", str(data), "--ae", str(ae_ckpt),
                 "--config", cfg, "--out", str(ldm_ckpt)]) == 0
    out = tmp_path / "none.xyz"
    assert main(["sample", "--ae", str(ae_ckpt), "--ldm", str(ldm_ckpt),
                 "-n", "0", "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_sample_is_bitwise_reproducible(tmp_path):
    cfg = _tiny_config(tmp_path)
    data, ae_ckpt, ldm_ckpt = tmp_path / "d.txt", tmp_path / "a.ckpt", tmp_path / "l.ckpt"
    main(["gen-synthetic", "--count", "12", "--seed", "1", "--out", str(data)])
    main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(ae_ckpt)])
    main(["train-ldm", "--data", str(data), "--ae", str(ae_ckpt), "--config", cfg,
          "--out", str(ldm_ckpt)])
    one, two = tmp_path / "one.xyz", tmp_path / "two.xyz"
    assert main(["sample", "--ae", str(ae_ckpt), "--ldm", str(ldm_ckpt),
                 "-n", "4", "--seed", "7", "--out", str(one)]) == 0
    assert main(["sample", "--ae", str(ae_ckpt), "--ldm", str(ldm_ckpt),
                 "-n", "4", "--seed", "7", "--out", str(two)]) == 0
    assert one.read_bytes() == two.read_bytes()


def test_sample_refuses_condition_on_unconditional_checkpoint(tmp_path, capsys):
    cfg = _tiny_config(tmp_path)
    data, ae_ckpt, ldm_ckpt = tmp_path / "d.txt", tmp_path / "a.ckpt", tmp_path / "l.ckpt"
    main(["gen-synthetic", "--count", "12", "--seed", "1", "--out", str(data)])
    main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(ae_ckpt)])
    main(["train-ldm", "--data", str(data), "--ae", str(ae_ckpt), "--config", cfg,
          "--out", str(ldm_ckpt)])
    code = main(["sample", "--ae", str(ae_ckpt), "--ldm", str(ldm_ckpt),
                 "-n", "1", "--condition", "0.5", "--out", str(tmp_path / "x.xyz")])
    assert code == 1


def test_train_ldm_refuses_mismatched_k(tmp_path):
    cfg = _tiny_config(tmp_path)
    data, ae_ckpt = tmp_path / "d.txt", tmp_path / "a.ckpt"
    main(["gen-synthetic", "--count", "12", "--seed", "1", "--out", str(data)])
    main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(ae_ckpt)])
    cfg2 = _tiny_config(tmp_path, k=2)
    code = main(["train-ldm", "--data", str(data), "--ae", str(ae_ckpt),
                 "--config", cfg2, "--out", str(tmp_path / "l.ckpt")])
    assert code == 1


def test_eval_duplicated_file_halves_uniqueness(tmp_path):
    from latmol.data import default_templates, format_xyz, Molecule

    tpl = default_templates()[2]
    mol = Molecule(tpl.elements, tpl.coords, np.zeros(len(tpl.elements), dtype=np.int64))
    samples = tmp_path / "dup.xyz"
    samples.write_text(format_xyz([mol, mol]))
    report = tmp_path / "rep.json"
    assert main(["eval", "--samples", str(samples), "--out", str(report)]) == 0
    body = json.loads(report.read_text())
    assert body["uniqueness"] == 0.5


def test_eval_malformed_file_fails_validation(tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("not a number\n\nH 0 0 0\n")
    assert main(["eval", "--samples", str(bad), "--out", str(tmp_path / "r.json")]) == 1


def test_missing_input_is_io_error(tmp_path):
    assert main(["eval", "--samples", str(tmp_path / "nope.xyz"),
                 "--out", str(tmp_path / "r.json")]) == 2


def test_train_ae_seed_reproducible_checkpoints(tmp_path):
    cfg = _tiny_config(tmp_path)
    data = tmp_path / "d.txt"
    main(["gen-synthetic", "--count", "12", "--seed", "1", "--out", str(data)])
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(a)]) == 0
    assert main(["train-ae", "--data", str(data), "--config", cfg, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
