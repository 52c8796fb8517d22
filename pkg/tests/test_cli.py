import json

import pytest

from sparsespike.checkpoint import load
from sparsespike.cli import main


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture()
def pretrain_cfg(tmp_path):
    return write_cfg(
        tmp_path / "pre.cfg",
        """
        dataset.kind = glyphs
        dataset.n = 192
        dataset.classes = 4
        epochs = 1
        loss = ce
        lr = 0.05
        tag = ann
        """,
    )


def test_pretrain_roundtrip(pretrain_cfg, tmp_path, capsys):
    rc = main(["pretrain", "--config", pretrain_cfg, "--out", str(tmp_path), "--seed", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "checkpoint:" in out and "sha256:" in out
    ckpt = load(tmp_path / "ann.ckpt")
    assert ckpt.metadata["seed"] == 3  # --seed override reached the request


def test_seed_flag_changes_hash(pretrain_cfg, tmp_path, capsys):
    hashes = []
    for seed, sub in (("1", "a"), ("2", "b"), ("1", "c")):
        rc = main(["pretrain", "--config", pretrain_cfg, "--out", str(tmp_path / sub),
                   "--seed", seed])
        assert rc == 0
        out = capsys.readouterr().out
        hashes.append([l for l in out.splitlines() if l.startswith("sha256:")][0])
    assert hashes[0] != hashes[1]
    assert hashes[0] == hashes[2]


def test_set_flag_overrides_config(pretrain_cfg, tmp_path, capsys):
    rc = main(["pretrain", "--config", pretrain_cfg, "--out", str(tmp_path),
               "--set", "epochs=0", "--json"])
    assert rc == 0
    body = json.loads(capsys.readouterr().out)
    assert body["metrics"]["epochs"] == 0


def test_env_override(pretrain_cfg, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SPARSESPIKE_EPOCHS", "0")
    rc = main(["pretrain", "--config", pretrain_cfg, "--out", str(tmp_path), "--json"])
    assert rc == 0
    body = json.loads(capsys.readouterr().out)
    assert body["metrics"]["epochs"] == 0


def test_unknown_config_key_fails_with_name(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", "dataset.kind = glyphs\nbogus_key = 1\n")
    rc = main(["pretrain", "--config", cfg, "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "bogus_key" in err


def test_missing_required_key_fails_with_name(tmp_path, capsys):
    rc = main(["convert", "--out", str(tmp_path)])
    assert rc == 1
    assert "checkpoint" in capsys.readouterr().err


def test_malformed_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "m.cfg", "this is not a key value line\n")
    rc = main(["pretrain", "--config", cfg])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_full_chain_via_cli(tmp_path, capsys):
    out = str(tmp_path)
    pre = write_cfg(
        tmp_path / "p.cfg",
        "dataset.kind = glyphs\ndataset.n = 192\nepochs = 1\nloss = ce\ntag = ann\n",
    )
    assert main(["pretrain", "--config", pre, "--out", out, "--seed", "0"]) == 0
    conv = write_cfg(
        tmp_path / "c.cfg",
        f"checkpoint = {out}/ann.ckpt\ndataset.kind = glyphs\ndataset.n = 192\n"
        "t_c = 12\ncalib_batches = 2\nbatch_size = 32\ntag = snn\n",
    )
    assert main(["convert", "--config", conv, "--out", out, "--seed", "0"]) == 0
    ev = write_cfg(
        tmp_path / "e.cfg",
        f"checkpoint = {out}/snn.ckpt\ndataset.kind = glyphs\ndataset.n = 192\n"
        "attacks = fgsm\neps_grid = 8/255\nsample_cap = 16\n"
        "ensemble_members = pcw:1.0, ste\nbatch_stats = true\ntag = ev\n",
    )
    capsys.readouterr()  # drain prior stage summaries
    assert main(["evaluate", "--config", ev, "--out", out, "--seed", "0", "--json"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert body["rows"][0]["attack"] == "fgsm"


def test_single_member_list_coercion(tmp_path, capsys):
    # a single-element config list parses as a scalar; the schema coerces it
    out = str(tmp_path)
    pre = write_cfg(
        tmp_path / "p.cfg",
        "dataset.kind = glyphs\ndataset.n = 192\nepochs = 1\nloss = ce\ntag = ann\n",
    )
    assert main(["pretrain", "--config", pre, "--out", out]) == 0
    capsys.readouterr()
    ev = write_cfg(
        tmp_path / "e.cfg",
        f"checkpoint = {out}/ann.ckpt\ndataset.kind = glyphs\ndataset.n = 192\n"
        "attacks = fgsm\neps_grid = 4/255\nsample_cap = 8\ntag = ev\n",
    )
    assert main(["evaluate", "--config", ev, "--out", out, "--json"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert len(body["rows"]) == 1
