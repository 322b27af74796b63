import numpy as np
import pytest

from bcmda import backbone
from bcmda.backbone import BackboneArch
from bcmda.rng import Rng
from bcmda.tensor import ContractError, DimensionError, Tensor, precision


def _params(arch=BackboneArch(), seed=0):
    return backbone.init_backbone(arch, Rng(seed))


def test_output_shape_full_resolution():
    feats = backbone.forward(_params(), np.zeros((1, 64, 64), np.float32), BackboneArch())
    assert feats.shape == (16, 64, 64)
    batched = backbone.forward(_params(), np.zeros((3, 1, 32, 16), np.float32), BackboneArch())
    assert batched.shape == (3, 16, 32, 16)


def test_zero_params_zero_image():
    params = {k: Tensor(np.zeros_like(v.data)) for k, v in _params().items()}
    feats = backbone.forward(params, np.zeros((1, 16, 16)), BackboneArch())
    np.testing.assert_array_equal(feats.data, 0.0)


def test_indivisible_extent_names_multiple():
    with pytest.raises(DimensionError, match="divisible by 8"):
        backbone.forward(_params(), np.zeros((1, 20, 16)), BackboneArch())


def test_forward_is_deterministic_and_pure(rng):
    params = _params()
    before = {k: v.data.copy() for k, v in params.items()}
    img = rng.uniform(-1, 1, (1, 16, 16)).astype(np.float32)
    a = backbone.forward(params, img, BackboneArch()).data
    b = backbone.forward(params, img, BackboneArch()).data
    np.testing.assert_array_equal(a, b)
    for k, v in params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_flip_equivariance_with_symmetric_kernels(rng):
    arch = BackboneArch(levels=2, base=4, feat_channels=3)
    params = _params(arch, seed=5)
    for name, p in params.items():
        if name.endswith(".w"):
            p.data = 0.5 * (p.data + p.data[..., ::-1])
    img = rng.normal(size=(1, 16, 16))
    with precision(np.float64):
        out = backbone.forward(params, img, arch).data
        flipped = backbone.forward(params, img[..., ::-1].copy(), arch).data
    np.testing.assert_allclose(flipped, out[..., ::-1], rtol=1e-10, atol=1e-12)


def test_ema_decay_zero_copies_student():
    teacher, student = _params(seed=1), _params(seed=2)
    backbone.ema_update(teacher, student, 0.0)
    for k in student:
        np.testing.assert_array_equal(teacher[k].data, student[k].data)


def test_ema_fixed_point_bit_exact():
    with precision(np.float64):
        student = _params(seed=3)
    teacher = backbone.clone_params(student)
    backbone.ema_update(teacher, student, 0.99)
    for k in student:
        np.testing.assert_array_equal(teacher[k].data, student[k].data)


def test_ema_geometric_decay():
    with precision(np.float64):
        teacher, student = _params(seed=4), _params(seed=5)
    d = 0.9
    gap = lambda: np.sqrt(sum(((teacher[k].data - student[k].data) ** 2).sum() for k in student))  # noqa: E731
    prev = gap()
    for _ in range(10):
        backbone.ema_update(teacher, student, d)
        cur = gap()
        assert cur == pytest.approx(d * prev, rel=1e-9)
        prev = cur


def test_ema_structure_mismatch():
    teacher, student = _params(), _params()
    del teacher["head.b"]
    with pytest.raises(ContractError, match="head.b"):
        backbone.ema_update(teacher, student, 0.5)
    teacher = _params()
    teacher["head.w"] = Tensor(np.zeros((2, 2)))
    with pytest.raises(ContractError, match="head.w"):
        backbone.ema_update(teacher, student, 0.5)
