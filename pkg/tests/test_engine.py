import csv

import numpy as np
import pytest
import torch

from cbmt import engine
from cbmt.data_io import SynthSpec, synthesize
from cbmt.datamodel import CbmtConfig, ParamSnapshot
from cbmt.models import build_model

CFG = CbmtConfig(roi_size=(32, 32), batch_size=2, epochs_source=2, epochs_adapt=2)


@pytest.fixture(scope="module")
def data():
    spec = SynthSpec(n_images=4, n_test=2, image_size=(32, 32), seed=3)
    return {k: synthesize(spec, *k.split("_")) for k in ("source_train", "target_train", "target_test")}


@pytest.fixture(scope="module")
def source_ckpt(data):
    snap, _ = engine.train_source(data["source_train"], CFG)
    return snap


def test_source_lr_schedule():
    cfg = CbmtConfig()
    assert engine.source_lr(cfg, 0) == 1e-3
    assert engine.source_lr(cfg, 1) == pytest.approx(9.8e-4, rel=1e-12)
    assert engine.source_lr(cfg, 10) == pytest.approx(1e-3 * 0.98 ** 10, rel=1e-12)


def test_one_source_epoch_lowers_loss(data):
    model = build_model()
    before = engine.dataset_loss(model, data["source_train"])
    engine.train_source(data["source_train"], CFG.replace(epochs_source=1, batch_size=4), model=model)
    assert engine.dataset_loss(model, data["source_train"]) < before


def test_source_training_is_deterministic(data, source_ckpt):
    again, _ = engine.train_source(data["source_train"], CFG)
    assert again == source_ckpt


def test_unlabeled_source_sample_rejected(data):
    bad = [s.replace(mask=None) for s in data["source_train"]]
    with pytest.raises(ValueError, match="no mask"):
        engine.train_source(bad, CFG)


def test_adapt_runlog_and_warm_start(data, source_ckpt, tmp_path):
    teacher, log = engine.adapt(data["target_train"], source_ckpt, CFG.replace(checkpoint_every=1),
                                eval_set=data["target_test"], out_dir=tmp_path)
    assert [r.epoch for r in log.records] == [1, 2]
    assert log.records[0].bg_weight == [1.0, 1.0]
    assert teacher.is_finite() and teacher.step == 4
    assert teacher != source_ckpt
    for name in ("ckpt_epoch1.bin", "ckpt_epoch2.bin", "teacher_final.bin", "calibration.csv"):
        assert (tmp_path / name).exists()
    rows = list(csv.DictReader(open(tmp_path / "calibration.csv")))
    first_cup = [r for r in rows if r["epoch"] == "0" and r["class"] == "1"][0]
    # the weight finalized after the first epoch is the one applied in the second
    assert log.records[1].bg_weight[1] == pytest.approx(float(first_cup["bg_weight"]))


def test_adapt_reproducible(data, source_ckpt):
    a_snap, a = engine.adapt(data["target_train"], source_ckpt, CFG)
    b_snap, b = engine.adapt(data["target_train"], source_ckpt, CFG)
    np.testing.assert_allclose(a.column("loss"), b.column("loss"), rtol=1e-6)
    assert a_snap == b_snap


def test_frozen_teacher_gives_fixed_predictions(data, source_ckpt):
    cfg = CFG.replace(lambda_ema=1.0, calibration=False)
    teacher, _ = engine.adapt(data["target_train"], source_ckpt, cfg)
    model, ref = build_model(), build_model()
    model.write_params(ParamSnapshot(teacher.entries))
    ref.write_params(source_ckpt)
    samples = data["target_test"]
    np.testing.assert_array_equal(engine.predict_probs(model, samples), engine.predict_probs(ref, samples))


def test_ablation_rows():
    base = CbmtConfig()
    full = engine.ablation_config(base, "full")
    assert full.lambda_ema == 0.98 and full.strong_aug and full.calibration
    pl = engine.ablation_config(base, "PL")
    assert pl.lambda_ema == 0.0 and not pl.strong_aug and not pl.calibration
    assert pl.lr_adapt * pl.lr_factor == pytest.approx(5e-4 / 20)
    row = engine.ablation_config(base, "+EMA+Calib")
    assert row.calibration and not row.strong_aug
    with pytest.raises(ValueError):
        engine.ablation_config(base, "+Calib")


def test_empty_target_rejected(source_ckpt):
    with pytest.raises(ValueError, match="empty"):
        engine.adapt([], source_ckpt, CFG)


def test_nan_loss_aborts_with_location(data, source_ckpt):
    entries = dict(source_ckpt.entries)
    entries["head.bias"] = np.full_like(entries["head.bias"], np.nan)
    with pytest.raises(FloatingPointError, match="epoch 0 batch 0"):
        engine.adapt(data["target_train"], ParamSnapshot(entries), CFG)


def test_runlog_csv_roundtrip(tmp_path):
    log = engine.RunLog()
    for e in (1, 2):
        log.append(engine.EpochRecord(e, 0.5 / e, [0.9, 0.7], [1.0, 0.4], [0.8, 0.3], [0.06, 0.01], [10, 3],
                                      [20, 40], 1.5 * e))
    log.write_csv(tmp_path / "r.csv")
    back = engine.RunLog.read_csv(tmp_path / "r.csv")
    np.testing.assert_allclose(back.column("mean_dice"), [0.8, 0.8])
    np.testing.assert_allclose(back.column("fg_fraction", 1), [0.01, 0.01])
    with pytest.raises(ValueError):
        log.append(engine.EpochRecord(2, 0, [], [], [], [], [], [], 0))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join([lines[0], lines[1], "x" + lines[2]]))
    with pytest.raises(ValueError, match="bad.csv:3"):
        engine.RunLog.read_csv(tmp_path / "bad.csv")


def test_batch_norm_teacher_forward_leaves_buffers():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3, padding=1), torch.nn.BatchNorm2d(4))
    net.eval()
    before = {k: v.clone() for k, v in net.state_dict().items()}
    x = torch.randn(2, 3, 8, 8) * 3 + 1
    out = engine._forward_batch_norm(net, x)
    # batch statistics: each channel comes out centred
    assert torch.allclose(out.mean(dim=(0, 2, 3)), torch.zeros(4), atol=1e-5)
    assert not net.training and net[1].track_running_stats
    for k, v in net.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert not torch.allclose(net(x), out)
