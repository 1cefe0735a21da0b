import json
import math

import numpy as np
import pytest
import torch

from carsr.degradation import bicubic_upscale, jpeg_roundtrip
from carsr.dihedral import NUM_TRANSFORMS, apply_dihedral, invert_dihedral
from carsr.errors import DomainError, ShapeError
from carsr.fixtures import synthetic_image
from carsr.metrics import (
    EvalResult,
    evaluate_dataset,
    psnr_y,
    rgb_to_y,
    self_ensemble,
    ssim_y,
    write_eval_report_csv,
    write_eval_report_json,
)
from carsr.model import CARSRNet, ModelConfig, bilinear_upsample, build_model

# ---------------------------------------------------------------------------
# luma conversion


def test_rgb_to_y_reference_points():
    white = np.ones((3, 2, 2), dtype=np.float32)
    black = np.zeros((3, 2, 2), dtype=np.float32)
    green = np.zeros((3, 2, 2), dtype=np.float32)
    green[1] = 1.0
    assert np.allclose(rgb_to_y(white), 235.0, atol=1e-9)
    assert np.allclose(rgb_to_y(black), 16.0, atol=1e-9)
    assert np.allclose(rgb_to_y(green), 16.0 + 128.553, atol=1e-9)


def test_rgb_to_y_shape_check():
    with pytest.raises(ShapeError):
        rgb_to_y(np.zeros((4, 8, 8), dtype=np.float32))


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_identical_is_inf():
    img = synthetic_image(0, 32, 32)
    assert math.isinf(psnr_y(img, img, shave=0))


def test_psnr_uniform_difference_exact():
    # Y planes differing by exactly a tenth of the dynamic range: 20 dB.
    a = np.full((16, 16), 100.0)
    b = np.full((16, 16), 125.5)
    assert psnr_y(a, b, shave=0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_symmetry():
    x, y = synthetic_image(1, 40, 40), synthetic_image(2, 40, 40)
    assert psnr_y(x, y) == pytest.approx(psnr_y(y, x), rel=1e-12)


def test_psnr_matches_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.random((3, 24, 24)).astype(np.float32)
        b = rng.random((3, 24, 24)).astype(np.float32)
        ya, yb = rgb_to_y(a), rgb_to_y(b)
        mse = float(np.mean((ya - yb) ** 2))
        want = 10.0 * math.log10(255.0**2 / mse)
        assert psnr_y(a, b, shave=0) == pytest.approx(want, rel=1e-9)


def test_psnr_shave_changes_region():
    a = synthetic_image(4, 32, 32)
    b = a.copy()
    b[:, 0, 0] = 1.0 - b[:, 0, 0]  # corrupt one border pixel
    assert math.isinf(psnr_y(a, b, shave=4))
    assert not math.isinf(psnr_y(a, b, shave=0))


def test_psnr_domain_errors():
    a = synthetic_image(0, 16, 16)
    with pytest.raises(ShapeError):
        psnr_y(a, synthetic_image(0, 16, 18))
    with pytest.raises(DomainError):
        psnr_y(a, a, shave=8)
    with pytest.raises(DomainError):
        psnr_y(a, a, shave=-1)


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_self_is_one():
    img = synthetic_image(5, 48, 48)
    assert ssim_y(img, img, shave=0) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry():
    x, y = synthetic_image(6, 48, 48), synthetic_image(7, 48, 48)
    assert ssim_y(x, y) == pytest.approx(ssim_y(y, x), rel=1e-12)


def test_ssim_inverted_is_low():
    img = synthetic_image(8, 48, 48)
    assert ssim_y(img, 1.0 - img, shave=0) < 0.2


def test_ssim_matches_reference_implementation():
    skimage_metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = rng.random((3, 40, 40)).astype(np.float32)
        b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1).astype(np.float32)
        ours = ssim_y(a, b, shave=0)
        ref = skimage_metrics.structural_similarity(
            rgb_to_y(a),
            rgb_to_y(b),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255.0,
        )
        assert ours == pytest.approx(ref, abs=1e-6)


def test_ssim_too_small_raises():
    img = synthetic_image(0, 12, 12)
    with pytest.raises(DomainError):
        ssim_y(img, img, shave=1)  # 10 px < 11-tap window


# ---------------------------------------------------------------------------
# self-ensemble


def _zero_residual_model(scale=2):
    cfg = ModelConfig(scale=scale, n_f=8, num_rrdb=1)
    model = build_model(cfg, seed=0)
    with torch.no_grad():
        model.upsample.enhance2.weight.zero_()
        model.upsample.enhance2.bias.zero_()
    return model


def test_self_ensemble_of_pure_skip_is_bilinear():
    model = _zero_residual_model()
    x = torch.rand(3, 12, 12)
    out = self_ensemble(model, x)
    assert torch.allclose(out, bilinear_upsample(x, 2), atol=1e-6)


def test_self_ensemble_equivariance_small_model():
    model = build_model(ModelConfig(scale=2, n_f=8, num_rrdb=1), seed=1)
    x = torch.rand(3, 16, 16)
    base = self_ensemble(model, x)
    for tid in range(NUM_TRANSFORMS):
        lhs = self_ensemble(model, apply_dihedral(x, tid))
        rhs = apply_dihedral(base, tid)
        assert torch.allclose(lhs, rhs, atol=1e-5), f"transform {tid}"


def test_self_ensemble_mse_bounded_by_member_mean(overfit_run):
    """The ensemble is the mean of the eight re-aligned predictions, so by
    convexity its luma MSE cannot exceed the members' average luma MSE.

    Mean PSNR against plain inference is NOT such a bound: a model that
    handles some orientations poorly (an overfit one memorizing patches in
    their stored orientation, say) can lose dB to ensembling even though
    the per-member inequality holds.
    """
    model = overfit_run["model"]
    for _, lr, hr in overfit_run["pairs"][:3]:
        x = torch.from_numpy(lr)
        with torch.no_grad():
            members = [
                invert_dihedral(model(apply_dihedral(x, tid)), tid)
                for tid in range(NUM_TRANSFORMS)
            ]
        ens = self_ensemble(model, x)
        assert torch.allclose(ens, torch.stack(members).mean(dim=0), atol=1e-6)
        y_gt = rgb_to_y(hr)
        mse_ens = float(np.mean((rgb_to_y(ens) - y_gt) ** 2))
        member_mses = [float(np.mean((rgb_to_y(m) - y_gt) ** 2)) for m in members]
        assert mse_ens <= np.mean(member_mses) * (1.0 + 1e-9) + 1e-12


# ---------------------------------------------------------------------------
# dataset evaluation


class _UpsampleStub(torch.nn.Module):
    """Bilinear reference restorer used to exercise the harness."""

    def __init__(self, scale):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return bilinear_upsample(x, self.scale)


def _identity_pairs(n=3):
    pairs = []
    for i in range(n):
        hr = synthetic_image(20 + i, 48, 48)
        pairs.append((f"img_{i}", hr, hr))
    return pairs


def test_evaluate_dataset_identity_hits_cap():
    stub = _UpsampleStub(1)
    res = evaluate_dataset(stub, _identity_pairs(), shave=4)
    assert len(res.per_image) == 3
    for row in res.per_image:
        assert row.psnr_y == math.inf
        assert row.ssim_y == pytest.approx(1.0)
    assert res.mean_psnr_y == pytest.approx(100.0)  # inf capped for the mean
    assert res.mean_ssim_y == pytest.approx(1.0)


def test_evaluate_dataset_exclude_inf():
    pairs = _identity_pairs(2)
    noisy_hr = synthetic_image(30, 48, 48)
    noisy_lr = np.clip(noisy_hr + 0.05, 0, 1).astype(np.float32)
    pairs.append(("noisy", noisy_lr, noisy_hr))
    res = evaluate_dataset(_UpsampleStub(1), pairs, exclude_inf=True)
    finite = [r.psnr_y for r in res.per_image if math.isfinite(r.psnr_y)]
    assert len(finite) == 1
    assert res.mean_psnr_y == pytest.approx(finite[0])


def test_evaluate_dataset_records_failures():
    pairs = _identity_pairs(2)
    pairs.append(("bad", np.zeros((3, 7, 9), dtype=np.float32), synthetic_image(0, 48, 48)))
    res = evaluate_dataset(_UpsampleStub(1), pairs)
    assert res.had_failures
    assert len(res.failures) == 1 and res.failures[0][0] == "bad"
    assert len(res.per_image) == 2


def test_evaluate_dataset_real_model(tiny_run):
    model = tiny_run["model"]
    hr = synthetic_image(40, 64, 64)
    lr = jpeg_roundtrip(
        np.ascontiguousarray(hr[:, ::4, ::4]), 40
    )  # crude but shape-correct LR
    res = evaluate_dataset(model, [("a", lr, hr)], ensembled=True)
    assert res.ensembled
    assert res.model_params > 0
    assert math.isfinite(res.mean_ssim_y)


def test_eval_result_json_safe():
    res = evaluate_dataset(_UpsampleStub(1), _identity_pairs(1))
    doc = res.to_dict()
    text = json.dumps(doc)  # must not hit NaN/inf serialization errors
    assert "inf" in text
    assert doc["per_image"][0]["psnr_y"] == "inf"


def test_eval_report_writers(tmp_path):
    res = evaluate_dataset(_UpsampleStub(1), _identity_pairs(2))
    jpath = tmp_path / "r.json"
    cpath = tmp_path / "r.csv"
    write_eval_report_json(res, jpath, meta={"command": "test"})
    write_eval_report_csv(res, cpath)
    doc = json.loads(jpath.read_text())
    assert doc["meta"]["command"] == "test"
    assert doc["result"]["mean_ssim_y"] == pytest.approx(1.0)
    lines = cpath.read_text().strip().splitlines()
    assert lines[0].startswith("name,")
    assert lines[-1].startswith("mean,")
    assert len(lines) == 1 + 2 + 1  # header, two images, mean row


def test_eval_result_runtime_positive():
    res = evaluate_dataset(_UpsampleStub(1), _identity_pairs(2))
    assert res.runtime_total_s >= 0.0
    assert isinstance(res, EvalResult)
