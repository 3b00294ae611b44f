import math

import numpy as np
import pytest

from bita import autodiff as ad
from bita.autodiff import ContractError, Tensor
from bita.objectives import (
    ItcConfig,
    Pooling,
    itc_from_similarity,
    itc_loss,
    pair_similarity,
    pclm_loss,
    similarity_matrix,
)

RNG = np.random.default_rng(11)


def test_pair_similarity_examples():
    e = np.eye(4)
    assert pair_similarity(e[:3], e[1]) == pytest.approx(1.0, abs=1e-15)
    assert pair_similarity(e[:3], e[3]) == 0.0
    cls = (e[0] + e[1]) / math.sqrt(2)
    assert pair_similarity(e[:2], cls) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert pair_similarity(e[:2], cls, Pooling.MEAN) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_pair_similarity_rejects_zero_vectors():
    with pytest.raises(ContractError):
        pair_similarity(np.zeros((2, 3)), np.ones(3))


def test_itc_uniform_batch_is_two_ln_b():
    prompts = Tensor(np.tile(RNG.standard_normal((1, 5, 8)), (4, 1, 1)))
    cls = Tensor(np.tile(RNG.standard_normal((1, 8)), (4, 1)))
    loss, sim = itc_loss(prompts, cls)
    assert abs(float(loss.data) - 2 * math.log(4)) < 1e-9
    assert sim.shape == (4, 4)


def test_itc_identity_similarity_closed_forms():
    eye = Tensor(np.eye(2))
    one_dir = -math.log(math.e / (math.e + 1))
    assert abs(float(itc_from_similarity(eye, 1.0).data) - 2 * one_dir) < 1e-12
    assert abs(float(itc_from_similarity(eye, 1.0).data) - 0.6266) < 1e-4
    sharp = float(itc_from_similarity(eye, 0.07).data)
    expected = 2 * math.log1p(math.exp(-1 / 0.07))
    assert abs(sharp - expected) < 1e-15
    assert 1.1e-6 < sharp < 1.3e-6


def test_itc_rejects_bad_config_and_batch():
    with pytest.raises(ValueError):
        ItcConfig(temperature=0.0)
    with pytest.raises(ContractError):
        itc_from_similarity(Tensor(np.eye(1)))


def test_itc_symmetric_under_joint_permutation():
    prompts = RNG.standard_normal((6, 4, 8))
    cls = RNG.standard_normal((6, 8))
    base = float(itc_loss(Tensor(prompts), Tensor(cls))[0].data)
    perm = RNG.permutation(6)
    permuted = float(itc_loss(Tensor(prompts[perm]), Tensor(cls[perm]))[0].data)
    assert abs(base - permuted) < 1e-12


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_itc_invariant_to_positive_rescaling(c):
    prompts = RNG.standard_normal((4, 4, 8))
    cls = RNG.standard_normal((4, 8))
    base = float(itc_loss(Tensor(prompts), Tensor(cls))[0].data)
    assert abs(float(itc_loss(Tensor(prompts * c), Tensor(cls))[0].data) - base) < 1e-12


def test_itc_decreases_as_diagonal_grows():
    for b in (2, 3, 5):
        off = RNG.uniform(-0.5, 0.2, (b, b))
        values = []
        for diag in (0.3, 0.5, 0.7, 0.9):
            s = off.copy()
            np.fill_diagonal(s, diag)
            values.append(float(itc_from_similarity(Tensor(s)).data))
        assert all(a > b_ for a, b_ in zip(values, values[1:]))


def test_similarity_matrix_max_and_mean_pooling():
    prompts = RNG.standard_normal((3, 5, 8))
    cls = RNG.standard_normal((3, 8))
    zn = prompts / np.linalg.norm(prompts, axis=-1, keepdims=True)
    cn = cls / np.linalg.norm(cls, axis=-1, keepdims=True)
    raw = np.einsum("bpd,kd->bpk", zn, cn)
    np.testing.assert_allclose(similarity_matrix(Tensor(prompts), Tensor(cls), "max").data,
                               raw.max(axis=1), atol=1e-14)
    np.testing.assert_allclose(similarity_matrix(Tensor(prompts), Tensor(cls), "mean").data,
                               raw.mean(axis=1), atol=1e-14)


def test_pclm_closed_forms():
    assert float(pclm_loss(Tensor(np.zeros((5, 1))), np.full(5, 0), pad_id=-1).data) == 0.0
    uniform = pclm_loss(Tensor(np.zeros((2, 6, 10))), RNG.integers(1, 10, (2, 6)))
    assert abs(float(uniform.data) - math.log(10)) < 1e-12
    targets = np.array([3, 1, 4, 1, 5])
    logits = np.zeros((5, 10))
    logits[np.arange(5), targets] = 100.0
    assert float(pclm_loss(Tensor(logits), targets).data) < 1e-40


def test_pclm_ignores_prefix_and_pad_rows():
    p, t, v = 3, 4, 7
    logits = Tensor(RNG.standard_normal((2, p + t, v)), requires_grad=True)
    targets = np.array([[5, 2, 0, 0], [1, 6, 3, 0]])
    loss = pclm_loss(logits, targets, prefix_len=p)
    ad.backward(loss)
    assert np.all(logits.grad[:, :p] == 0)
    assert np.all(logits.grad[0, p + 2:] == 0) and np.all(logits.grad[1, p + 3:] == 0)
    assert np.all(np.abs(logits.grad[0, p:p + 2]).sum(axis=-1) > 0)
    # same value as scoring the text rows alone
    text_only = pclm_loss(Tensor(logits.data[:, p:]), targets)
    assert float(loss.data) == float(text_only.data)


def test_pclm_errors():
    with pytest.raises(ContractError):
        pclm_loss(Tensor(np.zeros((3, 4))), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        pclm_loss(Tensor(np.zeros((3, 4))), np.ones(5, dtype=int))
