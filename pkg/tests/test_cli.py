import json

import pytest
import torch
import yaml

from stinet.cli import build_parser, main
from stinet.data import degrade_bicubic, generate_synthetic_clip, load_clip, save_clip, write_manifest
from stinet.flow import FlowEstimator


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    torch.manual_seed(0)
    torch.save(FlowEstimator().state_dict(), root / "flow.pt")
    cfg = {"model": {"channels": 4}, "flow": {"checkpoint": str(root / "flow.pt")},
           "data": {"crop_lr": 4, "synthetic": {"T": 3, "H": 16, "W": 16, "num_clips": 2}},
           "train": {"total_iters": 2, "batch_size": 1, "log_every": 0}}
    (root / "tiny.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(root / "tiny.yaml"), "--out", str(root / "run"), "--seed", "3"]) == 0
    return root


def test_train_writes_checkpoint_and_config(run):
    assert (run / "run" / "last.ckpt").exists()
    saved = yaml.safe_load((run / "run" / "config.yaml").read_text())
    assert saved["train"]["seed"] == 3 and saved["model"]["channels"] == 4


@pytest.mark.parametrize("n", [1, 3])
def test_infer_writes_frames(run, n):
    lr = degrade_bicubic(generate_synthetic_clip(5, T=3, H=16, W=24))
    save_clip(lr, run / f"in{n}")
    main(["infer", "--ckpt", str(run / "run" / "last.ckpt"), "--in", str(run / f"in{n}"),
          "--n-interp", str(n), "--out", str(run / f"out{n}")])
    out = load_clip(run / f"out{n}")
    assert out.frames.shape == (3 + 2 * n, 3, 16, 24)


def test_eval_report_and_plot(run, capsys):
    clips = [save_clip(generate_synthetic_clip(k, T=3, H=16, W=16), run / f"hr{k}") for k in range(2)]
    write_manifest(clips, run / "manifest.txt")
    report = run / "report.json"
    main(["eval", "--ckpt", str(run / "run" / "last.ckpt"), "--data", str(run / "manifest.txt"),
          "--report", str(report)])
    assert "PSNR" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert len(data["clips"]) == 2 and data["baseline"] is not None and len(data["curves"]) == 2
    main(["plot", "--report", str(report), "--out", str(run / "curves.png")])
    assert (run / "curves.png").stat().st_size > 0


def test_ablate_from_matrix(run, capsys):
    matrix = {"base": yaml.safe_load((run / "tiny.yaml").read_text()),
              "variants": {"full": [], "wo_stgr": ["model.stgr.enabled=false"]}}
    (run / "matrix.yaml").write_text(yaml.safe_dump(matrix))
    main(["ablate", "--matrix", str(run / "matrix.yaml"), "--out", str(run / "abl")])
    out = capsys.readouterr().out
    assert "full" in out and "wo_stgr" in out
    table = json.loads((run / "abl" / "table.json").read_text())
    assert set(table["variants"]) == {"full", "wo_stgr"}


def test_parser_rejects_bad_n_interp():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["infer", "--ckpt", "x", "--in", "y", "--n-interp", "2", "--out", "z"])
