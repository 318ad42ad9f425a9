import numpy as np
import pytest
import torch

from patchreg import diffcore as dc
from patchreg import volumes as v
from patchreg.errors import ParseError


def _taylor_exp(a, terms=20):
    out = np.eye(4)
    term = np.eye(4)
    for n in range(1, terms):
        term = term @ a / n
        out = out + term
    return out


def test_sample_volume_matches_numpy_trilinear():
    rng = np.random.default_rng(0)
    data = rng.random((6, 7, 8))
    coords = rng.uniform(-1.5, 8.5, size=(4, 5, 3, 3))

    vol = dc.to_tensor(data, torch.float64)[None, None]
    pts = dc.to_tensor(coords, torch.float64)[None]
    got = dc.sample_volume(vol, pts)[0, 0].numpy()
    want = v.trilinear_sample(data, coords, mode="zero")
    np.testing.assert_allclose(got, want, atol=1e-12)

    got_b = dc.sample_volume(vol, pts, padding="border")[0, 0].numpy()
    want_b = v.trilinear_sample(data, coords, mode="border")
    np.testing.assert_allclose(got_b, want_b, atol=1e-12)


def test_sample_volume_multichannel_and_batch():
    rng = np.random.default_rng(1)
    data = rng.random((2, 3, 5, 5, 5))
    coords = rng.uniform(0, 4, size=(2, 4, 4, 4, 3))
    out = dc.sample_volume(dc.to_tensor(data, torch.float64), dc.to_tensor(coords, torch.float64))
    assert out.shape == (2, 3, 4, 4, 4)
    for b in range(2):
        for c in range(3):
            want = v.trilinear_sample(data[b, c], coords[b])
            np.testing.assert_allclose(out[b, c].numpy(), want, atol=1e-12)


def test_sample_volume_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    data = torch.as_tensor(rng.random((1, 1, 5, 5, 5)))
    coords = torch.as_tensor(rng.uniform(0.5, 3.5, size=(1, 3, 3, 3, 3)))

    def f(vol, pts):
        return (dc.sample_volume(vol, pts) ** 2).sum()

    err = dc.finite_diff_gradcheck(f, [data, coords], rng, n_probes=10)
    assert err < 1e-6


def test_matrix_exp_approx_close_to_series():
    # the (I + A/k)^k error is O(|A|^2 / k); small exponents as in the
    # damped affine layer land well under 1e-3
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.normal(size=(4, 4))
        a[3] = 0.0
        a *= 0.125 / max(np.linalg.norm(a, 2), 1e-9)
        got = dc.matrix_exp_approx(torch.as_tensor(a)[None].double())[0].numpy()
        np.testing.assert_allclose(got, _taylor_exp(a), atol=1e-3)


def test_matrix_exp_zero_is_identity():
    got = dc.matrix_exp_approx(torch.zeros(1, 4, 4))[0]
    np.testing.assert_array_equal(got.numpy(), np.eye(4, dtype=np.float32))


def test_matrix_exp_exact_for_pure_translation():
    # A translation generator is nilpotent: (I + A/k)^k = I + A exactly.
    a = np.zeros((4, 4))
    a[:3, 3] = (4.0, -2.0, 1.0)
    got = dc.matrix_exp_approx(torch.as_tensor(a)[None].double())[0].numpy()
    want = np.eye(4)
    want[:3, 3] = (4.0, -2.0, 1.0)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_matrix_exp_is_differentiable():
    rng = np.random.default_rng(4)
    a = torch.as_tensor(rng.normal(size=(1, 4, 4)) * 0.2)

    def f(x):
        return dc.matrix_exp_approx(x).pow(2).sum()

    assert dc.finite_diff_gradcheck(f, [a], rng, n_probes=10) < 1e-6


def test_integrate_velocity_constant_field_is_exact():
    vel = torch.zeros(1, 3, 8, 8, 8, dtype=torch.float64)
    vel[:, 0] = 2.5
    vel[:, 2] = -1.0
    disp = dc.integrate_velocity(vel)
    np.testing.assert_allclose(disp.numpy(), vel.numpy(), atol=1e-12)


def test_integrate_velocity_zero_is_zero():
    disp = dc.integrate_velocity(torch.zeros(2, 3, 6, 6, 6))
    assert float(disp.abs().max()) == 0.0


def test_integrate_velocity_matches_rotation_flow():
    # A rigid-rotation velocity field integrates to the rotation itself.
    n = 17
    c = (n - 1) / 2.0
    grid = dc.base_grid((n, n, n), dtype=torch.float64) - c
    omega = 0.25
    vel = torch.stack([-omega * grid[..., 1], omega * grid[..., 0], torch.zeros_like(grid[..., 0])], dim=0)
    disp = dc.integrate_velocity(vel[None])[0].permute(1, 2, 3, 0)

    rot = np.array([[np.cos(omega), -np.sin(omega)], [np.sin(omega), np.cos(omega)]])
    xy = grid[..., :2].numpy()
    want = np.zeros((n, n, n, 3))
    want[..., :2] = xy @ rot.T - xy
    inner = np.linalg.norm(grid.numpy(), axis=-1) < c - 3  # away from clamped border
    err = np.abs(disp.numpy() - want)[inner].max()
    assert err < 0.02


def test_integrate_velocity_is_differentiable():
    rng = np.random.default_rng(5)
    vel = torch.as_tensor(rng.normal(size=(1, 3, 5, 5, 5)) * 0.5)

    def f(x):
        return dc.integrate_velocity(x, steps=4).pow(2).sum()

    assert dc.finite_diff_gradcheck(f, [vel], rng, n_probes=10) < 1e-5


def test_normalize_instance():
    rng = np.random.default_rng(6)
    x = dc.to_tensor(rng.normal(3.0, 5.0, size=(2, 2, 4, 4, 4)))
    out = dc.normalize_instance(x)
    means = out.mean(dim=(2, 3, 4))
    stds = out.std(dim=(2, 3, 4), unbiased=False)
    np.testing.assert_allclose(means.numpy(), 0.0, atol=1e-5)
    np.testing.assert_allclose(stds.numpy(), 1.0, atol=1e-3)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {
        "head/affine/w": torch.as_tensor(rng.normal(size=(3, 4)).astype(np.float32)),
        "head/affine/b": torch.as_tensor(rng.normal(size=(4,)).astype(np.float64)),
        "step": torch.as_tensor(np.array([123], dtype=np.int64)),
    }
    meta = {"schedule": [4.0, 2.0, 1.0], "patch_size": 16}
    path = tmp_path / "model.ckpt"
    dc.save_checkpoint(path, tensors, meta)
    back, meta2 = dc.load_checkpoint(path)
    assert meta2 == meta
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        np.testing.assert_array_equal(back[name].numpy(), tensors[name].numpy())


def test_checkpoint_bytes_are_deterministic(tmp_path):
    tensors = {"b": torch.ones(3), "a": torch.arange(4.0)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    dc.save_checkpoint(p1, tensors, {"k": 1})
    dc.save_checkpoint(p2, dict(reversed(list(tensors.items()))), {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(ParseError):
        dc.load_checkpoint(path)


def test_gradcheck_tool_accepts_true_gradients():
    rng = np.random.default_rng(8)
    x = torch.as_tensor(rng.normal(size=(5,)))

    def f(t):
        return (t**3).sum()

    assert dc.finite_diff_gradcheck(f, [x], rng, n_probes=20) < 1e-8


def test_optimizer_and_clipping_wrappers():
    w = torch.nn.Parameter(torch.ones(4))
    opt = dc.make_optimizer([w], lr=0.1)
    (w.sum() * 100.0).backward()
    norm = dc.clip_gradients([w], max_norm=2.0)
    assert norm == pytest.approx(200.0)
    assert float(w.grad.norm()) == pytest.approx(2.0, rel=1e-5)
    opt.step()
    assert not torch.equal(w.detach(), torch.ones(4))
