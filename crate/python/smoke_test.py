"""Smoke test for the fba extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import fba


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def check_tensor_io(tmp):
    t = fba.Tensor.from_rows([[1.0, -2.5], [0.25, 4.0]])
    assert t.shape == [2, 2]
    path = str(Path(tmp) / "t.fbt")
    t.write_fbt(path)
    back = fba.Tensor.read_fbt(path)
    assert back.rows() == t.rows()
    with open(path, "rb") as f:
        assert f.read(4) == b"FBT1"


def check_ops():
    assert close(fba.lr_at(0, 3e-4, 30, 5), 3e-7, 1e-15)
    assert fba.lr_at(5, 3e-4, 30, 5) == 3e-4
    assert close(fba.lr_at(29, 3e-4, 30, 5), 3e-6, 1e-15)

    w_f = fba.Tensor.from_rows([[0.0, 1.0], [1.0, 0.0]])
    w_b = fba.Tensor.from_rows([[0.0, 1.0], [1.0, 1.0]])
    s = fba.attention_similarity(w_f, w_b)
    assert close(s[0], 1.0) and close(s[1], 1.0 / math.sqrt(2.0))
    assert all(close(a, b) for a, b in zip(fba.minmax_mask([0.2, 0.5, 0.8]), [0.0, 0.5, 1.0]))
    eye = fba.Tensor.from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    pooled = fba.pooled_feature([0.0, 0.5, 1.0], eye)
    assert all(close(a, b) for a, b in zip(pooled, [0.0, 0.5 / 1.5, 1.0 / 1.5]))

    same = fba.Tensor.from_rows([[1.0, 2.0], [3.0, 4.0]])
    assert close(fba.tri_div_loss(same, same, same, same, 0.3), 1.2)
    assert close(fba.con_loss(same, same, same, same), 0.0)
    feats = fba.Tensor.from_rows([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [9.0, 9.0]])
    assert fba.triplet_loss(feats, [0, 0, 1, 1], 0.3, "all_valid") >= 0.0

    q = fba.map_cmc(
        fba.Tensor.from_rows([[1.0], [0.9], [0.5], [0.1]]),
        [7, 7, 3, 7],
        [0, 1, 1, 1],
        [True, False, False, False],
    )
    assert close(q["mAP"], (1.0 + 2.0 / 3.0) / 2.0) and q["rank1"] == 1.0


def check_config():
    cfg = fba.Config()
    cfg.set("loss.lambda", "0")
    assert cfg.get("loss.lambda") in ("0.0", "0")
    try:
        cfg.set("loss.nope", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    keys = dict(cfg.keys())
    assert "train.base_lr" in keys and "eval.composition" in keys


def check_pipeline(tmp):
    cfg = fba.Config()
    root = str(Path(tmp) / "corpus")
    for key, value in [
        ("data.root", root),
        ("data.num_ids", "8"),
        ("data.images_per_id", "4"),
        ("data.train_ids", "4"),
        ("train.p", "2"),
        ("train.k", "2"),
        ("train.epochs", "2"),
        ("train.warmup", "1"),
        ("encoder.d_v", "16"),
        ("encoder.d_t", "8"),
        ("encoder.heads", "2"),
        ("crossmodal.heads", "2"),
        ("crossmodal.stack_layers", "1"),
    ]:
        cfg.set(key, value)
    assert fba.generate_corpus(cfg, root) == 32
    run = str(Path(tmp) / "run")
    cfg.set("train.out", run)
    log = fba.train(cfg, run)
    assert len(log) == 4 and all(math.isfinite(r["total"]) for r in log)
    report = fba.evaluate(cfg)
    assert 0.0 <= report["mAP"] <= 1.0
    assert report["rank1"] <= report["rank5"] <= report["rank10"]
    assert fba.run_cli(["train", "--bogus"]) == 1


def main():
    with tempfile.TemporaryDirectory() as tmp:
        check_tensor_io(tmp)
        check_ops()
        check_config()
        check_pipeline(tmp)
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
