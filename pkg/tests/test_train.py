import numpy as np
import pytest
import torch
from sklearn.base import clone

import imdistill.train as train_mod
from imdistill.checkpoint import load_checkpoint
from imdistill.config import DistillConfig, config_from_ini, config_to_ini, load_config
from imdistill.core import sample_latent
from imdistill.counterfactual import generate_counterfactuals
from imdistill.losses import LossWeights
from imdistill.nets import build_generator, generate, profile_specs
from imdistill.teachers import ProceduralTeacher, generate_teacher_dataset
from imdistill.train import (
    METRIC_COLUMNS,
    IMDistiller,
    baseline_config,
    distill_im,
    heldout_l1,
    read_metrics,
    train_baseline,
)
from imdistill.validation import TrainingDivergenceError


def _pairs(mechanism, n, seed=0):
    t = ProceduralTeacher(mechanism)
    z = sample_latent(n, 128, 2.0, seed)
    y = torch.arange(n) % 10
    return z, y, t.query(z, y)


@pytest.fixture(scope="module")
def texture_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("teacher")
    return generate_teacher_dataset(ProceduralTeacher("texture"), per_class=8, seed=0, out_dir=root / "texture")


def _recompute_total(row, w: LossWeights):
    total = row["feature"] + w.lambda_pix * row["pixel"] + w.lambda_adv * row["adv_g"]
    return total + (row["kl"] if w.use_kl else 0.0)


def test_zero_epochs_keeps_initialisation(tmp_path):
    z, y, t = _pairs("texture", 16)
    est = IMDistiller(epochs=0, random_state=3).fit(z, y, t, checkpoint_dir=tmp_path)
    assert est.report_.rows == []
    g_spec, _ = profile_specs("mnist28")
    torch.manual_seed(3)
    fresh = build_generator(g_spec)
    saved, _ = load_checkpoint(est.report_.checkpoint)
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, saved.state_dict()[k]), k


def test_logged_total_matches_components():
    z, y, t = _pairs("texture", 64)
    for w in (dict(), dict(lambda_pix=2.5, lambda_adv=0.3, use_kl=True)):
        est = IMDistiller(epochs=2, batch_size=16, random_state=0, **w).fit(z, y, t)
        weights = est.loss_weights()
        assert len(est.report_.rows) == 2
        for row in est.report_.rows:
            assert set(row) == set(METRIC_COLUMNS)
            assert all(np.isfinite(v) for v in row.values())
            assert abs(row["total_g"] - _recompute_total(row, weights)) < 1e-6


def test_annihilated_weights_train_on_features_only():
    z, y, t = _pairs("texture", 32)
    est = IMDistiller(epochs=1, batch_size=16, lambda_pix=0, lambda_adv=0, use_kl=False).fit(z, y, t)
    row = est.report_.rows[0]
    assert row["pixel"] > 0 and row["kl"] > 0 and row["adv_g"] != 0
    assert abs(row["total_g"] - row["feature"]) < 1e-6


def test_loss_trajectory_is_deterministic():
    z, y, t = _pairs("background", 32)
    a = IMDistiller(epochs=2, batch_size=16, random_state=1).fit(z, y, t)
    b = IMDistiller(epochs=2, batch_size=16, random_state=1).fit(z, y, t)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(a.report_.rows) == strip(b.report_.rows)


def test_divergence_names_the_term(monkeypatch):
    z, y, t = _pairs("texture", 16)
    monkeypatch.setattr(train_mod, "pixel_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingDivergenceError) as exc:
        IMDistiller(epochs=1, batch_size=8).fit(z, y, t)
    assert exc.value.term == "pixel"


def test_input_validation():
    z, y, t = _pairs("texture", 8)
    with pytest.raises(ValueError):
        IMDistiller(im="shape", epochs=1).fit(z, y, t)  # rgb targets for a mask student
    with pytest.raises(ValueError):
        IMDistiller(epochs=1).fit(z, y[:4], t)
    with pytest.raises(ValueError):
        IMDistiller(epochs=1).fit(z, y, t * 3)


def test_estimator_api():
    est = IMDistiller(lambda_pix=3.0, epochs=1)
    assert clone(est).get_params() == est.get_params()
    z, y, t = _pairs("texture", 16)
    with pytest.raises(Exception):
        est.predict(z, y)
    est.set_params(batch_size=8).fit(z, y, t)
    out = est.predict(z, y)
    assert isinstance(out, np.ndarray) and out.shape == tuple(t.shape)
    assert abs(est.score(z, y, t) + heldout_l1(est, z, y, t)) < 1e-7


def test_smoke_run_reduces_pixel_loss():
    # 200 generator steps at desk scale
    z, y, t = _pairs("texture", 640)
    est = IMDistiller(epochs=10, batch_size=32, random_state=0).fit(z, y, t)
    rows = est.report_.rows
    assert sum(len(range(0, 640, 32)) for _ in rows) == 200
    assert rows[-1]["pixel"] < rows[0]["pixel"]


def test_pixel_only_objective_decreases_monotonically():
    z, y, t = _pairs("texture", 1000)
    est = IMDistiller(
        epochs=20, lambda_adv=0.0, alpha=[0.0, 0.0, 0.0], disc_steps_per_gen_step=0, random_state=0
    ).fit(z, y, t)
    pix = np.array(est.report_.column("pixel"))
    ma = np.convolve(pix, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) < 0), ma


def test_distill_im_writes_run_directory(tmp_path, texture_data):
    cfg = DistillConfig(im="texture", dataset=str(texture_data.root), epochs=2, batch_size=16)
    report = distill_im(cfg, tmp_path / "run")
    out = tmp_path / "run"
    assert (out / "config.ini").exists() and (out / "metrics.csv").exists()
    assert load_config(out / "config.ini") == cfg
    logged = read_metrics(out / "metrics.csv")
    assert len(logged) == 2
    for a, b in zip(logged, report.rows):
        for k in METRIC_COLUMNS:
            assert abs(a[k] - b[k]) < 1e-9 * max(1.0, abs(b[k])) or k == "seconds"
    gen, extra = load_checkpoint(report.checkpoint)
    z, y = texture_data.latents(), texture_data.labels()
    # inference determinism after reloading
    assert torch.equal(generate(gen, z, y), report.estimator.generate(z, y))
    assert torch.equal(generate(gen, z, y), generate(load_checkpoint(report.checkpoint)[0], z, y))


def test_checkpoint_cadence(tmp_path, texture_data):
    cfg = DistillConfig(dataset=str(texture_data.root), epochs=3, batch_size=16, checkpoint_every=1)
    distill_im(cfg, tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir())
    assert names == ["discriminator", "generator", "generator_epoch0001", "generator_epoch0002"]


def test_distill_rejects_mismatched_teacher(tmp_path, texture_data):
    with pytest.raises(ValueError):
        distill_im(DistillConfig(im="shape", dataset=str(texture_data.root), epochs=1), tmp_path / "r")


def test_baseline_equals_zeroed_distillation(tmp_path, texture_data):
    cfg = DistillConfig(dataset=str(texture_data.root), epochs=2, batch_size=16, seed=4)
    base = train_baseline(cfg, tmp_path / "base")
    zeroed = cfg.with_weights(lambda_pix=0.0, use_kl=False, alpha=[0.0, 0.0, 0.0])
    ref = distill_im(zeroed, tmp_path / "ref")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(base.rows) == strip(ref.rows)
    assert list(base.rows[0]) == list(ref.rows[0])
    assert baseline_config(cfg).mode == "baseline"
    for row in base.rows:
        assert abs(row["total_g"] - cfg.weights.lambda_adv * row["adv_g"]) < 1e-6


def test_baseline_smoke_run_is_finite():
    z, y, t = _pairs("texture", 640)
    est = IMDistiller(epochs=10, batch_size=32, lambda_pix=0.0, alpha=[0.0] * 3).fit(z, y, t)
    assert all(np.isfinite(v) for r in est.report_.rows for v in r.values())


def test_student_composite_consistency():
    # train a shape student, then swap it in for its teacher in shared mode
    shape_t = ProceduralTeacher("shape")
    z, y, m = _pairs("shape", 1000)
    est = IMDistiller(im="shape", epochs=8, learning_rate=1e-3, random_state=0).fit(z, y, m)
    final_pixel = est.report_.rows[-1]["pixel"]
    tex, bg = ProceduralTeacher("texture"), ProceduralTeacher("background")
    kw = dict(count=500, seed=11, mask_weight=1.0, label_mode="shared")
    teacher_cf = generate_counterfactuals(shape_t, tex, bg, **kw)

    class Student(ProceduralTeacher):
        def _query(self, z, y):
            return est.generate(z, y)

    student_cf = generate_counterfactuals(Student("shape"), tex, bg, **kw)
    l1 = float((teacher_cf.images.pixels - student_cf.images.pixels).abs().mean())
    assert l1 < final_pixel


def test_config_ini_round_trip():
    cfg = DistillConfig(im="shape", epochs=3, weights=LossWeights(lambda_pix=2.0, alpha=[0.1, 0.2, 0.7]))
    assert config_from_ini(config_to_ini(cfg)) == cfg
    with pytest.raises(ValueError):
        config_from_ini(config_to_ini(cfg).replace("[run]", "[run]\nbogus = 1"))
    with pytest.raises(ValueError):
        config_from_ini(config_to_ini(cfg) + "\n[run]\nepochs = 1\n")
    with pytest.raises(ValueError):
        DistillConfig(batch_size=1)
