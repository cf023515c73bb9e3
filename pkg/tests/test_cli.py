import csv
from dataclasses import replace

import pytest

from uniadapt import tensor as T
from uniadapt.checkpoint import load_checkpoint
from uniadapt.cli import main
from uniadapt.config import render_config

from conftest import tiny_run


def write_cfg(path, cfg):
    path.write_text(render_config(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data -> pretrain -> adapt on a tiny config, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_run()
    cfg = replace(cfg, task=replace(cfg.task, max_steps=20, pretrain_epochs=3, epochs=2))
    conf = write_cfg(root / "run.cfg", cfg)
    data, bb, ad = root / "data", root / "bb.uadc", root / "ad.uadc"
    assert main(["gen-data", "--config", conf, "--out", str(data)]) == 0
    assert main(["pretrain", "--config", conf, "--data", str(data), "--out", str(bb)]) == 0
    assert main(["adapt", "--config", conf, "--backbone-ckpt", str(bb), "--data", str(data), "--out", str(ad),
                 "--eval-step0"]) == 0
    return dict(root=root, cfg=cfg, conf=conf, data=str(data), bb=str(bb), ad=str(ad))


def test_gen_data_is_idempotent(workspace, tmp_path):
    out = tmp_path / "again"
    assert main(["gen-data", "--config", workspace["conf"], "--out", str(out)]) == 0
    for f in ("pretrain.bin", "train.bin", "test.bin", "manifest.json"):
        assert (out / f).read_bytes() == (workspace["root"] / "data" / f).read_bytes()


def test_adapted_checkpoint_holds_only_trainable_tensors(workspace):
    ck = load_checkpoint(workspace["ad"])
    assert ck.meta["kind"] == "adapted" and ck.meta["variant"] == "uniadapter"
    assert all(n.startswith(("adapter.", "head.")) for n in ck.tensors)
    assert ck.meta["backbone_checksum"]
    rows = list(csv.DictReader(open(workspace["root"] / "metrics.csv")))
    assert rows[0]["split"] == "pretrain" and any(r["step"] == "0" and r["r1"] for r in rows)


def test_eval_twice_identical(workspace, capsys):
    args = ["eval", "--config", workspace["conf"], "--ckpt", workspace["ad"], "--data", workspace["data"]]
    assert main(args) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert main(args) == 0
    assert capsys.readouterr().out.splitlines()[0] == first
    assert first.startswith("test: R@1")


def test_eval_of_backbone_checkpoint(workspace, capsys):
    assert main(["eval", "--config", workspace["conf"], "--ckpt", workspace["bb"], "--data", workspace["data"]]) == 0
    assert "R@1" in capsys.readouterr().out


def test_task_mismatch_refused(workspace, tmp_path, capsys):
    cfg = replace(workspace["cfg"], task=replace(workspace["cfg"].task, task="vqa"))
    conf = write_cfg(tmp_path / "vqa.cfg", cfg)
    assert main(["eval", "--config", conf, "--ckpt", workspace["ad"], "--data", workspace["data"]]) == 2
    assert "task mismatch" in capsys.readouterr().err


def test_backbone_hash_mismatch_refused(workspace, tmp_path, capsys):
    cfg = replace(workspace["cfg"], backbone=replace(workspace["cfg"].backbone, ffn_mult=3))
    conf = write_cfg(tmp_path / "other.cfg", cfg)
    rc = main(["adapt", "--config", conf, "--backbone-ckpt", workspace["bb"], "--data", workspace["data"],
               "--out", str(tmp_path / "x.uadc")])
    assert rc == 2 and "backbone hash mismatch" in capsys.readouterr().err


def test_adaptation_config_mismatch_refused(workspace, tmp_path, capsys):
    cfg = replace(workspace["cfg"], adaptation=replace(workspace["cfg"].adaptation, r=2))
    conf = write_cfg(tmp_path / "r2.cfg", cfg)
    assert main(["eval", "--config", conf, "--ckpt", workspace["ad"], "--data", workspace["data"]]) == 2
    assert "adaptation config differs" in capsys.readouterr().err


def test_adapted_checkpoint_is_not_a_backbone(workspace, tmp_path, capsys):
    rc = main(["adapt", "--config", workspace["conf"], "--backbone-ckpt", workspace["ad"],
               "--data", workspace["data"], "--out", str(tmp_path / "x.uadc")])
    assert rc == 2 and "not a backbone" in capsys.readouterr().err


def test_gallery_smaller_than_k_is_an_error(workspace, tmp_path, capsys):
    cfg = workspace["cfg"]
    small = replace(cfg, world=replace(cfg.world, n_test=6))
    conf = write_cfg(tmp_path / "small.cfg", small)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", conf, "--out", str(data)]) == 0
    assert main(["eval", "--config", conf, "--ckpt", workspace["bb"], "--data", str(data)]) == 2
    assert "exceeds gallery size" in capsys.readouterr().err


def test_missing_paths_and_bad_config(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("UNIADAPT_DATA", raising=False)
    assert main(["pretrain"]) == 2
    assert "no data path" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[adaptation]\nsharing = sideways\n")
    assert main(["params", "--config", str(bad)]) == 2


def test_params_published_cells(capsys):
    assert main(["params", "--full-scale", "--r", "512"]) == 0
    assert capsys.readouterr().out.startswith("18874368 (18.9M)")
    assert main(["params", "--full-scale", "--r", "128", "--expect", "4718592"]) == 0
    capsys.readouterr()
    assert main(["params", "--full-scale", "--variant", "sequential_adapter", "--modalities", "V",
                 "--r", "512", "--expect", "9437184"]) == 0
    capsys.readouterr()
    assert main(["params", "--full-scale", "--r", "512", "--expect", "9437185"]) == 1
    assert "expected 9437185" in capsys.readouterr().err


def test_params_audit(capsys):
    assert main(["params", "--audit"]) == 0
    out = capsys.readouterr().out
    assert "sharing.share_down" in out and "MISMATCH" not in out


def test_gradcheck_passes_and_negative_control_names_op(capsys):
    assert main(["gradcheck", "--op", "layer_norm", "--op", "adapter.relu"]) == 0
    capsys.readouterr()
    with T.corrupt_backward("layer_norm"):
        assert main(["gradcheck", "--op", "layer_norm"]) == 1
    out = capsys.readouterr().out
    assert "layer_norm" in out and "FAIL" in out
