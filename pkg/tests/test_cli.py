import json

import numpy as np
import pytest

from flowseg.cli import main
from flowseg.data import load_checkpoint, load_dataset, read_pgm
from flowseg.metrics import evaluate
from flowseg.net import init_params


def same_tree(a, b):
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / f).read_bytes() == (b / f).read_bytes() for f in fa)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "4", "--size", "8", "--seed", "3"]) == 0
    ckpt = root / "model" / "m.ckpt"
    args = ["train", "--data", str(root / "data"), "--out", str(ckpt), "--iters", "4", "--batch", "4"]
    assert main(args + ["--width", "4", "--temb-dim", "8", "--seed", "1"]) == 0
    return root, ckpt


def test_synth_defaults(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert (len(m["samples"]), m["height"], m["width"], m["annotators"]) == (200, 32, 32, 4)


def test_synth_deterministic_and_validated(tmp_path):
    for name in "ab":
        assert main(["synth", "--out", str(tmp_path / name), "--n", "10", "--seed", "7"]) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert main(["synth", "--out", str(tmp_path / "c"), "--p-empty", "1.5"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["synth"])
    assert e.value.code == 1


def test_train_zero_iters_is_init(tmp_path, workspace):
    root, _ = workspace
    out = tmp_path / "z.ckpt"
    assert main(["train", "--data", str(root / "data"), "--out", str(out), "--iters", "0", "--width", "4",
                 "--temb-dim", "8", "--seed", "5"]) == 0
    params, _, it = load_checkpoint(out)
    init = init_params(params.config, 5)
    assert it == 0 and all(np.array_equal(params.tensors[k], init.tensors[k]) for k in init.tensors)


def test_train_repeatable(tmp_path, workspace):
    root, ckpt = workspace
    out = tmp_path / "again.ckpt"
    args = ["train", "--data", str(root / "data"), "--out", str(out), "--iters", "4", "--batch", "4"]
    assert main(args + ["--width", "4", "--temb-dim", "8", "--seed", "1"]) == 0
    assert out.read_bytes() == ckpt.read_bytes()
    loss = out.with_suffix(".loss.csv").read_text()
    assert loss == ckpt.with_suffix(".loss.csv").read_text()
    assert loss.splitlines()[0] == "iteration,loss" and len(loss.splitlines()) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_loss_exit(tmp_path, workspace, capsys):
    root, _ = workspace
    rc = main(["train", "--data", str(root / "data"), "--out", str(tmp_path / "x.ckpt"), "--iters", "50",
               "--batch", "4", "--width", "4", "--temb-dim", "8", "--lr", "1e200"])
    assert rc == 2
    assert "iteration" in capsys.readouterr().err


def test_resolved_config_round_trip(tmp_path, workspace):
    root, ckpt = workspace
    resolved = ckpt.parent / "resolved.json"
    out = tmp_path / "r.ckpt"
    assert main(["train", "--data", str(root / "data"), "--out", str(out), "--config", str(resolved)]) == 0
    assert out.read_bytes() == ckpt.read_bytes()
    bad = json.loads(resolved.read_text())
    bad["training"]["momentum"] = 0.9
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["train", "--data", str(root / "data"), "--out", str(out), "--config", str(tmp_path / "bad.json")]) == 1


def sample_args(root, ckpt, out, *extra):
    return ["sample", "--ckpt", str(ckpt), "--data", str(root / "data"), "--image-id", "s00001",
            "--out", str(out), "--step", "0.1", *extra]


def test_sample_outputs(tmp_path, workspace):
    root, ckpt = workspace
    assert main(sample_args(root, ckpt, tmp_path / "s", "--num", "15", "--guidance", "0.3")) == 0
    masks = sorted((tmp_path / "s").glob("mask_*.pgm"))
    assert len(masks) == 15
    assert (tmp_path / "s" / "mean.pgm").exists() and (tmp_path / "s" / "variance.pgm").exists()
    assert np.load(tmp_path / "s" / "fields.npy").shape == (15, 1, 8, 8)
    assert set(np.unique(read_pgm(masks[0]))) <= {0, 255}
    assert main(sample_args(root, ckpt, tmp_path / "t", "--num", "15", "--guidance", "0.3")) == 0
    assert same_tree(tmp_path / "s", tmp_path / "t")


def test_sample_guidance_zero_matches_conditional_only(tmp_path, workspace):
    root, ckpt = workspace
    assert main(sample_args(root, ckpt, tmp_path / "g0", "--num", "6", "--guidance", "0")) == 0
    assert main(sample_args(root, ckpt, tmp_path / "co", "--num", "6", "--conditional-only")) == 0
    for i in range(6):
        name = f"mask_{i:03d}.pgm"
        assert (tmp_path / "g0" / name).read_bytes() == (tmp_path / "co" / name).read_bytes()


def test_sample_unknown_id(tmp_path, workspace):
    root, ckpt = workspace
    args = sample_args(root, ckpt, tmp_path / "u")
    args[args.index("s00001")] = "nope"
    assert main(args) != 0


def test_eval_oracle(tmp_path, workspace):
    root, _ = workspace
    assert main(["eval", "--oracle", "--data", str(root / "data"), "--out", str(tmp_path / "o.csv")]) == 0
    header, *rows = (tmp_path / "o.csv").read_text().splitlines()
    mean = dict(zip(header.split(","), rows[-1].split(",")))
    assert mean["image_id"] == "mean"
    assert float(mean["ged"]) == 0.0 and float(mean["d_max"]) == 1.0


def test_eval_oracle_dice_one_on_unanimous_data(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--out", str(data), "--n", "3", "--size", "8", "--p-empty", "0", "--sigma-r", "0"]) == 0
    assert main(["eval", "--oracle", "--data", str(data), "--out", str(tmp_path / "o.csv")]) == 0
    header, *rows = (tmp_path / "o.csv").read_text().splitlines()
    mean = dict(zip(header.split(","), rows[-1].split(",")))
    assert (float(mean["ged"]), float(mean["dice"]), float(mean["d_max"])) == (0.0, 1.0, 1.0)


def test_eval_rows_and_offline_recompute(tmp_path, workspace):
    root, ckpt = workspace
    csv = tmp_path / "e.csv"
    args = ["eval", "--ckpt", str(ckpt), "--data", str(root / "data"), "--out", str(csv),
            "--num", "5", "10", "15", "--step", "0.25", "--dump", str(tmp_path / "dump")]
    assert main(args) == 0
    header, *rows = csv.read_text().splitlines()
    means = [r for r in rows if r.startswith("mean,")]
    assert [int(r.split(",")[1]) for r in means] == [5, 10, 15]
    dataset = load_dataset(root / "data")
    assert len(rows) == 3 * (len(dataset) + 1)
    for block, n in enumerate((5, 10, 15)):
        for k, s in enumerate(dataset):
            masks = np.load(tmp_path / "dump" / f"{s.id}.npy")
            expect = evaluate(list(masks[:n]), s.masks, s.id).row()
            assert rows[block * (len(dataset) + 1) + k] == expect


def test_eval_empty_dataset(tmp_path):
    from flowseg.data import save_dataset

    save_dataset(tmp_path / "empty", [])
    assert main(["eval", "--oracle", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "x.csv")]) != 0


def test_eval_thread_count_does_not_change_output(tmp_path, workspace, monkeypatch):
    root, ckpt = workspace
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("FLOWSEG_THREADS", threads)
        csv = tmp_path / f"t{threads}.csv"
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(root / "data"), "--out", str(csv),
                     "--num", "4", "--step", "0.25"]) == 0
        outs.append(csv.read_text())
    assert outs[0] == outs[1]
