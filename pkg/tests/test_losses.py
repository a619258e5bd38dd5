import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _fd import numeric_grad, rel_error
from haan import losses as L
from haan import tensor as T
from haan.errors import ConfigError, DimensionError, NumericError
from haan.tensor import Tensor


def full(v, shape=(1, 1, 6, 6)):
    return Tensor(np.full(shape, v))


@pytest.mark.parametrize("fn", [L.adv_loss_removal, L.adv_loss_ctr, L.adv_loss_synth])
def test_adversarial_scalar_cases(fn):
    assert fn(full(1.0)).item() == 0.0
    assert fn(full(0.0), full(1.0), side="discriminator").item() == 0.0
    assert fn(full(0.5), full(0.5), side="discriminator").item() == pytest.approx(0.5, abs=1e-15)
    assert fn(full(0.0)).item() == 1.0


def test_adversarial_bad_side():
    with pytest.raises(ValueError):
        L.adversarial_loss(full(0.0), side="both")


def test_cycle_losses():
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 3, 4, 4)))
    for fn in (L.cycle_loss_fog, L.cycle_loss_fogfree):
        assert fn(x, x, x).item() == 0.0
        off = x + 0.1
        assert fn(x, off, x).item() == pytest.approx(0.01, rel=1e-12)
        assert fn(x, off, x).item() == fn(x, x, off).item()
        with pytest.raises(DimensionError):
            fn(x, x, Tensor(np.zeros((2, 3, 4, 5))))


@pytest.fixture(scope="module")
def extractor():
    return L.PerceptualExtractor(dtype=np.float64)


def test_extractor_is_seeded_and_fixed(extractor):
    other = L.PerceptualExtractor(dtype=np.float64)
    for a, b in zip(extractor.weights, other.weights):
        assert a.data.tobytes() == b.data.tobytes()
        assert not a.requires_grad
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 3, 16, 16)))
    f2, f5 = extractor.features(x)
    assert f2.shape == (1, 32, 8, 8) and f5.shape == (1, 64, 4, 4)


def test_perceptual_identical_pairs_zero(extractor):
    r = np.random.default_rng(2)
    pairs = [(Tensor(a), Tensor(a.copy())) for a in r.uniform(-1, 1, (4, 1, 3, 8, 8))]
    assert L.perceptual_loss(extractor, pairs).item() == 0.0


def test_perceptual_local_quadratic(extractor):
    r = np.random.default_rng(3)
    a = r.uniform(-1, 1, (1, 3, 16, 16))
    direction = r.normal(size=a.shape)

    def term(eps):
        return L.perceptual_loss(extractor, [(Tensor(a), Tensor(a + eps * direction))]).item()

    eps = 1e-4
    assert term(2 * eps) / term(eps) == pytest.approx(4.0, rel=0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_non_negative(seed):
    r = np.random.default_rng(seed)
    ext = L.PerceptualExtractor(dtype=np.float64)
    t = [Tensor(r.uniform(-1, 1, (1, 3, 8, 8))) for _ in range(3)]
    logits = [Tensor(r.normal(size=(1, 1, 6, 6))) for _ in range(2)]
    assert L.adversarial_loss(logits[0]).item() >= 0
    assert L.adversarial_loss(logits[0], logits[1], "discriminator").item() >= 0
    assert L.cycle_loss_fog(*t).item() >= 0
    assert L.cycle_loss_fogfree(*t).item() >= 0
    assert L.perceptual_loss(ext, [(t[0], t[1]), (t[1], t[2])]).item() >= 0


def test_total_loss_examples():
    w = L.LossWeights()
    assert w.as_tuple() == (10, 10, 10, 5, 5, 1)
    assert L.total_loss(w, [0] * 6).item() == 0.0
    assert L.total_loss(w, [1] * 6).item() == 41.0
    assert L.total_loss(L.LossWeights(0, 0, 0, 0, 0, 0), [3, 1, 4, 1, 5, 9]).item() == 0.0


def test_total_loss_is_linear_per_component():
    w = L.LossWeights()
    base = [0.3, 0.2, 0.7, 0.1, 0.4, 0.9]
    t0 = L.total_loss(w, base).item()
    for k, lam in enumerate(w.as_tuple()):
        bumped = list(base)
        bumped[k] += 0.5
        assert L.total_loss(w, bumped).item() - t0 == pytest.approx(0.5 * lam, rel=1e-12)


def test_total_loss_rejects_nan():
    with pytest.raises(NumericError, match="cyc1"):
        L.total_loss(L.LossWeights(), [0, 0, 0, float("nan"), 0, 0])
    with pytest.raises(ConfigError):
        L.LossWeights(lambda3=-1.0)


def test_total_loss_backpropagates():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(3.0), requires_grad=True)
    T.backward(L.total_loss(L.LossWeights(), [a, 0.0, 0.0, b, 0.0, 0.0]))
    assert a.grad == 10.0 and b.grad == 5.0


LOSS_CASES = {
    "adv_generator": lambda x, y: L.adversarial_loss(x),
    "adv_discriminator": lambda x, y: L.adversarial_loss(x, y, "discriminator"),
    "cycle_fog": lambda x, y: L.cycle_loss_fog(x, y, y * 0.5),
    "cycle_fogfree": lambda x, y: L.cycle_loss_fogfree(y, x, x * x),
}


@pytest.mark.parametrize("name", sorted(LOSS_CASES) + ["perceptual"])
def test_loss_input_gradients(name, extractor):
    r = np.random.default_rng(4)
    xa, ya = r.uniform(-1, 1, (2, 1, 3, 8, 8))
    if name == "perceptual":

        def fn(x, y):
            return L.perceptual_loss(extractor, [(x, y), (y, x * 0.7)])

    else:
        fn = LOSS_CASES[name]
    x, y = Tensor(xa, requires_grad=True), Tensor(ya, requires_grad=True)
    T.backward(fn(x, y))
    for t, arr in ((x, xa), (y, ya)):
        idx = r.choice(arr.size, 20, replace=False).tolist()
        fd = numeric_grad(lambda: fn(Tensor(xa), Tensor(ya)).item(), arr, eps=1e-6, indices=idx)
        g = t.grad.ravel() if t.grad is not None else np.zeros(arr.size)
        assert rel_error([g[i] for i in idx], [fd[i] for i in idx]) < 1e-4
