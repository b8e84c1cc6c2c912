import numpy as np
import pytest

from ramnet.data import build_training_sequence, make_scene, random_scene_spec
from ramnet.model import ModelConfig
from ramnet.trainer import (DivergenceError, EvalCurve, TrainConfig, eval_frame_index_curve, load_model,
                            plateau_ratio, predict_stream, save_model, sequence_loss, train)

TINY = ModelConfig(num_scales=2, base_channels=4)


@pytest.fixture(scope="module")
def sequences():
    out = []
    for seed in range(4):
        spec = random_scene_spec(np.random.default_rng(seed), height=16, width=16, duration_s=0.4,
                                 parallax=150.0)
        out.append(build_training_sequence(make_scene(spec, seed), scene_id=f"s{seed}"))
    return out


def config(**kw):
    base = dict(kind="ram", lr=1e-3, batch_size=2, iterations=3, unroll=2, crop=16, model=TINY)
    return TrainConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(kind="rnn")
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig.from_profile("eventscape").lr == 3e-4
    assert TrainConfig.from_profile("mvsec-ft").unroll == 8
    with pytest.raises(ValueError):
        TrainConfig.from_profile("imagenet")


def test_lr_zero_keeps_parameters_bitwise(sequences):
    res = train(config(lr=0.0, iterations=3), sequences)
    fresh = train(config(lr=0.0, iterations=1), sequences[:1]).model
    for k, v in res.model.state_dict().items():
        assert v.tobytes() == fresh.state_dict()[k].tobytes()


@pytest.mark.parametrize("kind", ["ram", "E", "I", "E+I", "E+I-noRNN"])
def test_same_seed_same_loss_log(sequences, kind, tmp_path):
    a = train(config(kind=kind), sequences, log_path=tmp_path / "a.csv", checkpoint_path=tmp_path / "a.ckp")
    train(config(kind=kind), sequences, log_path=tmp_path / "b.csv", checkpoint_path=tmp_path / "b.ckp")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.ckp").read_bytes() == (tmp_path / "b.ckp").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,total,si,grad"
    assert len(a.losses) == 3


def test_divergence_guard(sequences):
    from dataclasses import replace
    bad = [replace(s, voxels=s.voxels.copy()) for s in sequences]
    bad[0].voxels[0, 0, 0, 0] = np.nan
    bad[1].voxels[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(config(iterations=2), bad[:2])


def test_unroll_too_long(sequences):
    with pytest.raises(ValueError):
        train(config(unroll=3), sequences)
    with pytest.raises(ValueError):
        train(config(), [])


def test_dual_prediction_loss_counts_labels(sequences):
    from ramnet.model import build_model
    model = build_model("ram", TINY)
    total, si, grad = sequence_loss(model, "ram", sequences[:2])
    assert float(total.data) == pytest.approx(float(si.data) + 0.25 * float(grad.data), rel=1e-5)


def test_tiny_ram_overfits_fixed_sequences(sequences):
    cfg = config(iterations=300, batch_size=4, unroll=2, lr=3e-3, flip=False,
                 model=ModelConfig(num_scales=2, base_channels=8))
    res = train(cfg, sequences)
    first = np.mean([l[1] for l in res.losses[:5]])
    last = np.mean([l[1] for l in res.losses[-5:]])
    assert last < 0.2 * first


def test_checkpoint_round_trip_gives_identical_curves(sequences, tmp_path):
    res = train(config(iterations=2), sequences)
    save_model(tmp_path / "m.ckp", res.model)
    back = load_model(tmp_path / "m.ckp")
    a = eval_frame_index_curve(res.model, sequences, crop=16)
    b = eval_frame_index_curve(back, sequences, crop=16)
    assert a.to_csv() == b.to_csv() and a.metrics_csv() == b.metrics_csv()


def test_curve_indices_per_model(sequences):
    expected = {"ram": list(range(6)), "E": list(range(5)), "E+I": list(range(5)), "I": [0], "E+I-noRNN": [0]}
    for kind, idx in expected.items():
        model = train(config(kind=kind, iterations=1), sequences).model
        curve = eval_frame_index_curve(model, sequences, crop=16)
        assert curve.indices == idx and all(c > 0 for c in curve.counts)


def test_curve_csv_round_trip():
    curve = EvalCurve("ram", "5hz", [0, 1], [0.1, 0.2], [3, 4], [("a", 0, 0.1, 1.0, None, 2.0)])
    assert EvalCurve.from_csv(curve.to_csv()).abs_rel == [0.1, 0.2]
    assert curve.metrics_csv().splitlines() == ["sequence_id,frame_index,abs_rel,mae_10,mae_20,mae_30",
                                                "a,0,0.1,1,,2"]


def test_plateau_ratio():
    curve = EvalCurve("ram", "1hz", list(range(10)), [1.0] * 5 + [1.05] * 5, [1] * 10)
    assert plateau_ratio(curve) == pytest.approx(1.05)
    with pytest.raises(ValueError):
        plateau_ratio(EvalCurve("ram", "1hz", [0], [1.0], [1]))


def test_predictions_are_clamped(sequences):
    model = train(config(iterations=1), sequences).model
    for _, pred in predict_stream(model, "ram", sequences[0]):
        assert pred.min() >= 0.0 and pred.max() <= 1.0
