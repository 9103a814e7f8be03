"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 3-5 train networks and take minutes on a CPU.
"""

import filecmp
import math
import time

import numpy as np
import pytest
import torch

from imdistill.checkpoint import load_checkpoint, save_checkpoint
from imdistill.cli import main as cli_main
from imdistill.config import DistillConfig, OptimizerConfig
from imdistill.core import IMTriple, LabeledImageBatch, compose, mask_scale_opacity, sample_latent
from imdistill.counterfactual import generate_counterfactuals
from imdistill.datasets import DatasetManifest, build_double_colored_mnist, write_synthetic_mnist
from imdistill.losses import (
    LossWeights,
    adv_disc_loss,
    adv_gen_loss,
    feature_loss,
    generator_objective,
    kl_loss,
    pixel_loss,
)
from imdistill.nets import build_generator, param_count, profile_specs
from imdistill.study import run_shape_study
from imdistill.teachers import ProceduralTeacher, ReplayTeacher, generate_teacher_dataset
from imdistill.train import DESK_RECIPE, IMDistiller, distill_im, heldout_l1

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    """Run ``check`` and print one PASS/FAIL line; failures are re-raised."""

    def run(number, title, check):
        t0 = time.perf_counter()
        try:
            detail = check()
            ok, err = True, None
        except AssertionError as exc:
            ok, err, detail = False, exc, str(exc).splitlines()[0] if str(exc) else "assertion failed"
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\n[{status}] criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) -- {detail}")
        if err is not None:
            raise err

    return run


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


# -- 1 ------------------------------------------------------------------------------


def _fd_rel_error(fn, x, step=1e-3):
    x = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = torch.zeros_like(x)
    flat = x.detach().clone()
    view = flat.view(-1)
    for i in range(view.numel()):
        old = view[i].item()
        view[i] = old + step
        hi = fn(flat).item()
        view[i] = old - step
        lo = fn(flat).item()
        view[i] = old
        numeric.view(-1)[i] = (hi - lo) / (2 * step)
    return float((analytic - numeric).abs().max()) / max(float(numeric.abs().max()), 1e-12)


def test_criterion_1_loss_oracles(report):
    def check():
        n = 1 * 3 * 4 * 4
        t = torch.zeros(1, 3, 4, 4)
        s = t.clone()
        s[0, 0, 1, 1] = 0.4
        const_a, const_b = torch.randn(2, 4, 3, 3), torch.randn(2, 8, 2, 2)
        cases = {
            "pixel L1": (float(pixel_loss(t, s, "L1")), 0.4 / n),
            "pixel L2": (float(pixel_loss(t, s, "L2")), 0.16 / n),
            "gen hinge [1,3]": (float(adv_gen_loss(torch.tensor([1.0, 3.0]))), -2.0),
            "gen bce 0": (float(adv_gen_loss(torch.tensor([0.0]), "bce")), math.log(2)),
            "disc hinge 2/-2": (float(adv_disc_loss(torch.tensor([2.0]), torch.tensor([-2.0]))), 0.0),
            "disc hinge 0/0": (float(adv_disc_loss(torch.tensor([0.0]), torch.tensor([0.0]))), 2.0),
            "disc literal 0/0": (float(adv_disc_loss(torch.tensor([0.0]), torch.tensor([0.0]), "hinge_literal")), -2.0),
            "feature [0.2,0.5]x[1,2]": (
                float(feature_loss([const_a, const_b], [const_a + 0.2, const_b - 0.5], [1.0, 2.0])),
                1.2,
            ),
            "kl limit": (float(kl_loss(torch.tensor([[[[60.0, 0.0]]]]), torch.zeros(1, 1, 1, 2))), math.log(2)),
        }
        parts = {k: torch.tensor(v) for k, v in zip(("feature", "pixel", "adv_gen", "kl"), (1.0, 2.0, 3.0, 4.0))}
        cases["objective kl"] = (float(generator_objective(parts, LossWeights(use_kl=True))), 10.0)
        cases["objective no kl"] = (float(generator_objective(parts, LossWeights())), 6.0)
        worst = max(abs(a - b) for a, b in cases.values())
        bad = [k for k, (a, b) in cases.items() if abs(a - b) > 1e-6]
        assert not bad, f"analytic mismatches: {bad}"

        g = torch.Generator().manual_seed(0)
        tt = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
        sign = torch.where(torch.rand(2, 3, 4, 4, generator=g) < 0.5, -1.0, 1.0).double()
        ss = tt + sign * (0.05 + torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64))
        fns = {
            "pixel L1": lambda x: pixel_loss(tt, x, "L1"),
            "pixel L2": lambda x: pixel_loss(tt, x, "L2"),
            "kl": lambda x: kl_loss(tt, x, 1.5),
            "feature L1": lambda x: feature_loss([tt], [x], [0.7]),
            "feature kl": lambda x: feature_loss([tt], [x], [0.7], "per_layer_kl"),
        }
        errs = {k: _fd_rel_error(f, ss) for k, f in fns.items()}
        scores = torch.tensor([-2.3, -0.4, 0.3, 1.7, 0.55, -1.6], dtype=torch.float64)
        errs["gen hinge"] = _fd_rel_error(lambda x: adv_gen_loss(x), scores)
        errs["gen bce"] = _fd_rel_error(lambda x: adv_gen_loss(x, "bce"), scores)
        errs["disc hinge"] = _fd_rel_error(lambda x: adv_disc_loss(x, -scores * 0.3 - 3.0), scores)
        errs["disc bce"] = _fd_rel_error(lambda x: adv_disc_loss(x, scores.flip(0), "bce"), scores)
        worst_grad = max(errs.values())
        assert worst_grad <= 1e-3, f"gradient check failed: {errs}"
        return f"max analytic error {worst:.2e}, max FD relative error {worst_grad:.2e}"

    report(1, "loss-formula oracle suite", check)


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_composition_invariants(report):
    def check():
        g = torch.Generator().manual_seed(1)
        m = torch.rand(4, 1, 28, 28, generator=g)
        f = torch.rand(4, 3, 28, 28, generator=g) * 2 - 1
        b = torch.rand(4, 3, 28, 28, generator=g) * 2 - 1
        y = torch.zeros(4, dtype=torch.long)

        def c(mask, fg, bg, w):
            return compose(IMTriple(mask, LabeledImageBatch(fg, y), LabeledImageBatch(bg, y)), w).pixels

        assert torch.equal(c(torch.ones_like(m), f, b, 1.0), f), "m=1 does not return f"
        assert torch.equal(c(torch.zeros_like(m), f, b, 0.75), b), "m=0 does not return b"
        err_fb = float((c(m, f, f, 0.75) - f).abs().max())
        assert err_fb <= 1e-6, f"f=b case error {err_fb}"
        out = c(m, f, b, 0.75).double()
        md, fd, bd = m.double(), f.double(), b.double()
        ref = 0.75 * md * fd + (1.0 - 0.75 * md) * bd
        err = float((out - ref).abs().max())
        assert err <= 1e-6, f"0.75 path error {err}"
        err_commute = float((c(mask_scale_opacity(m, 0.75), f, b, 1.0) - c(m, f, b, 0.75)).abs().max())
        assert err_commute <= 1e-6
        return f"identities bit-exact, f=b error {err_fb:.1e}, weight-0.75 error {err:.1e}"

    report(2, "composition invariants", check)


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_distillation_convergence(report, tmp_path):
    def check():
        teacher = ProceduralTeacher("texture")
        train = generate_teacher_dataset(teacher, per_class=500, seed=0, out_dir=tmp_path / "train")
        held = generate_teacher_dataset(teacher, per_class=100, seed=99, out_dir=tmp_path / "held")
        cfg = DistillConfig(
            im="texture",
            dataset=str(train.root),
            epochs=20,
            optimizer=OptimizerConfig(learning_rate=DESK_RECIPE["learning_rate"]),
            seed=0,
        ).with_weights(lambda_adv=DESK_RECIPE["lambda_adv"])
        rep = distill_im(cfg, tmp_path / "run")
        first, last = rep.rows[0]["pixel"], rep.rows[-1]["pixel"]
        replay = ReplayTeacher(held)
        z, y = held.latents(), held.labels()
        l1 = heldout_l1(rep.estimator, z, y, replay.query(z, y))
        detail = f"pixel {first:.4f} -> {last:.4f} (ratio {last / first:.3f}), held-out L1 {l1:.4f}"
        assert last <= 0.5 * first, f"{detail}; ratio > 0.5"
        assert l1 < 0.15, f"{detail}; held-out L1 >= 0.15"
        return detail

    report(3, "distillation convergence (mnist28, texture, 20 epochs, 5k pairs)", check)


# -- 4 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_mnist(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_mnist")
    write_synthetic_mnist(root / "idx", n_train=10000, n_test=10000, seed=0)
    return build_double_colored_mnist(root / "idx", seed=0, out_dir=root / "colored")


def test_criterion_4_shape_study_ordering(report, desk_mnist):
    def check():
        base = {k: ProceduralTeacher(k) for k in ("shape", "texture", "background")}
        params = {"noise": {"sigma": 0.1}, "rotation": {"max_degrees": 30.0}, "transparency": {"weight": 0.75}}
        med = {}
        for name, p in params.items():
            accs = [
                run_shape_study(name, p, base, desk_mnist, seed=s, n_generated=10000, n_real=10000, epochs=5)
                .test_accuracy
                for s in range(3)
            ]
            med[name] = float(np.median(accs))
        detail = ", ".join(f"{k} {v:.2f}%" for k, v in med.items())
        assert med["transparency"] >= 2 * med["noise"], f"{detail}; transparency < 2x noise"
        assert med["transparency"] >= 2 * med["rotation"], f"{detail}; transparency < 2x rotation"
        return "median test accuracy " + detail

    report(4, "shape-study ordering (transparency >= 2x noise and rotation)", check)


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_kl_first_epoch(report):
    def check():
        teacher = ProceduralTeacher("shape")
        z = sample_latent(5000, 128, 2.0, 0)
        y = torch.arange(10).repeat_interleave(500)
        t = teacher.query(z, y)
        zh = sample_latent(1000, 128, 2.0, 99)
        yh = torch.from_numpy(np.random.default_rng(99).integers(0, 10, 1000))
        th = teacher.query(zh, yh)
        rows = []
        for seed in range(3):
            l1 = {}
            for use_kl in (False, True):
                est = IMDistiller(im="shape", epochs=1, use_kl=use_kl, random_state=seed, **DESK_RECIPE)
                l1[use_kl] = heldout_l1(est.fit(z, y, t), zh, yh, th)
            rows.append((seed, l1[True], l1[False]))
        detail = "; ".join(f"seed {s}: kl {a:.4f} vs no-kl {b:.4f}" for s, a, b in rows)
        assert all(a <= b + 0.02 for _, a, b in rows), detail
        return detail

    report(5, "KL term no worse after the first epoch (shape IM, 3 seeds)", check)


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_parameter_budget(report):
    def check():
        big, _ = profile_specs("imagenet256")
        small, _ = profile_specs("mnist28")
        n_big, n_small = param_count(big), param_count(small)
        assert 5_000_000 <= n_big <= 8_000_000, f"imagenet256 generator has {n_big:,}"
        assert n_small < 500_000, f"mnist28 generator has {n_small:,}"
        assert n_small == param_count(build_generator(small))
        return f"imagenet256 {n_big:,}, mnist28 {n_small:,}"

    report(6, "parameter budget", check)


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_determinism_and_io(report, tmp_path):
    def check():
        write_synthetic_mnist(tmp_path / "idx", n_train=500, n_test=200, seed=0)
        a = build_double_colored_mnist(tmp_path / "idx", seed=3, out_dir=tmp_path / "a")
        b = build_double_colored_mnist(tmp_path / "idx", seed=3, out_dir=tmp_path / "b")
        assert _same_tree(a.root, b.root), "dataset builds differ"
        for name in ("t1", "t2"):
            code = cli_main(["teacher-sample", "--mechanism", "shape", "--per-class", "5", "--seed", "2",
                             "--out", str(tmp_path / name)])
            assert code == 0
        assert _same_tree(tmp_path / "t1", tmp_path / "t2"), "teacher-sample runs differ"

        g, _ = profile_specs("mnist28")
        torch.manual_seed(0)
        gen = build_generator(g)
        gen(sample_latent(8, 128, 2.0, 0), torch.arange(8))
        save_checkpoint(gen, tmp_path / "ckpt")
        back, _ = load_checkpoint(tmp_path / "ckpt")
        for k, v in gen.state_dict().items():
            assert torch.equal(v, back.state_dict()[k]), f"checkpoint tensor {k} differs"

        from imdistill.teachers import TeacherDataset

        ds = TeacherDataset(tmp_path / "t1" / "data")
        z, y, imgs = ds.arrays()
        assert torch.equal(ReplayTeacher(ds).query(z, y), imgs), "replay differs from stored images"
        return f"dataset trees, teacher-sample runs, {len(gen.state_dict())} checkpoint tensors, {len(ds)} replays"

    report(7, "determinism and IO", check)


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_label_independence(report):
    def check():
        base = [ProceduralTeacher(k) for k in ("shape", "texture", "background")]
        cf = generate_counterfactuals(*base, 10_000, seed=0, label_mode="independent")
        same = (cf.shape_labels == cf.texture_labels) & (cf.texture_labels == cf.background_labels)
        rate = float(same.float().mean())
        expected = 1 / 10**2
        assert abs(rate - expected) <= 0.003, f"collision rate {rate:.4f}"
        return f"collision rate {100 * rate:.2f}% (oracle {100 * expected:.1f}%)"

    report(8, "counterfactual label independence", check)
