import numpy as np
import pytest
import torch

from salad.losses import dice_loss, disc_loss, focal_loss, one_hot, recon_loss

from . import oracles


def _instance(rng, n=2, c=4, h=8, w=8):
    logits = torch.from_numpy(rng.normal(size=(n, c, h, w)) * 2)
    target = torch.from_numpy(rng.integers(0, c, (n, h, w)))
    return logits, target


def test_focal_multiclass_matches_loop():
    rng = np.random.default_rng(0)
    logits, target = _instance(rng)
    probs = torch.softmax(logits, 1)
    got = focal_loss(probs, target, 2.0).item()
    assert oracles.rel_err(got, oracles.focal_multiclass(probs.numpy(), target.numpy(), 2.0)) < 1e-10


def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(1)
    logits, target = _instance(rng)
    ce = torch.nn.functional.cross_entropy(logits, target).item()
    assert focal_loss(torch.softmax(logits, 1), target, 0.0).item() == pytest.approx(ce, rel=1e-10)


def test_binary_focal_and_l1_match_loop():
    rng = np.random.default_rng(2)
    pred = torch.from_numpy(rng.random((2, 8, 8)))
    gt = torch.from_numpy(rng.random((2, 8, 8)) > 0.7)
    want = 5 * oracles.focal_binary(pred.numpy(), gt.numpy(), 2.0) + oracles.l1(pred.numpy(), gt.numpy())
    assert oracles.rel_err(disc_loss(gt, pred, 5.0, 2.0).item(), want) < 1e-10


def test_dice_matches_loop():
    rng = np.random.default_rng(3)
    logits, target = _instance(rng)
    probs = torch.softmax(logits, 1)
    got = dice_loss(probs, one_hot(target, 4, probs.dtype)).item()
    assert oracles.rel_err(got, oracles.dice(probs.numpy(), target.numpy())) < 1e-10


def test_dice_perfect_prediction_is_zero():
    target = torch.tensor([[[0, 1], [2, 1]]])
    oh = one_hot(target, 3, torch.float64)
    assert dice_loss(oh, oh).item() == pytest.approx(0.0, abs=1e-12)


def test_recon_loss_is_focal_plus_dice():
    rng = np.random.default_rng(4)
    logits, target = _instance(rng)
    probs = oracles.softmax(logits.numpy())
    want = oracles.focal_multiclass(probs, target.numpy(), 2.0) + oracles.dice(probs, target.numpy())
    assert oracles.rel_err(recon_loss(target, logits).item(), want) < 1e-10


def test_one_hot():
    t = torch.tensor([[[0, 2], [1, 1]]])
    oh = one_hot(t, 3)
    assert oh.shape == (1, 3, 2, 2)
    assert torch.equal(oh.argmax(1), t)
    assert torch.equal(oh.sum(1), torch.ones(1, 2, 2))


def test_loss_input_validation():
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([[np.nan]]), torch.tensor([[1]]), mode="binary")
    with pytest.raises(ValueError):
        focal_loss(torch.ones(1, 2), torch.ones(1, 2), mode="nope")
    with pytest.raises(ValueError):
        disc_loss(torch.zeros(2, 2), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        recon_loss(torch.zeros(1, 3, 3, dtype=torch.long), torch.zeros(1, 2, 4, 4))


def numeric_gradient(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradient_rel_error(fn, x: torch.Tensor) -> float:
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = numeric_gradient(fn, x.detach().clone())
    return float((analytic - numeric).norm() / max(numeric.norm().item(), 1e-12))


def test_recon_loss_gradient():
    rng = np.random.default_rng(5)
    logits, target = _instance(rng, n=1, c=3)
    assert gradient_rel_error(lambda z: recon_loss(target, z), logits) <= 1e-3


def test_disc_loss_gradient():
    rng = np.random.default_rng(6)
    pred = torch.from_numpy(rng.uniform(0.05, 0.95, (1, 8, 8)))
    gt = torch.from_numpy(rng.random((1, 8, 8)) > 0.5)
    assert gradient_rel_error(lambda p: disc_loss(gt, p), pred) <= 1e-3
