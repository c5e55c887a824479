import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transmem import autodiff as ad
from transmem.cells import TmuStepOutput
from transmem.errors import ConfigError, ShapeError
from transmem.objective import MemoryBank, combine, distill_loss, final_loss, prediction_loss


def _records(distilled, m):
    """``distilled[s][k]`` arrays -> step records carrying them."""
    return [[TmuStepOutput(None, None, ad.constant(d), None, m) for d in row] for row in distilled]


def _bank(stacked, m):
    return MemoryBank(stacked, m)


def test_distill_zero_when_equal(rng):
    d = rng.normal(size=(2, 4, 3, 3))
    assert distill_loss(_records([[d]], 2), _bank([[d.copy()]], 2))[0].value == 0.0


def test_distill_single_element():
    d = np.zeros((1, 2, 2, 2))
    c = d.copy()
    c[0, 1, 0, 1] = 2.0
    assert distill_loss(_records([[d]], 1), _bank([[c]], 1))[0].value == 4.0


def test_distill_two_sources_two_steps():
    # source-major blocks of one element: step 0 = {1, 1}, step 1 = {0, 0}
    d = [[np.array([1.0, 1.0]).reshape(1, 2, 1, 1)], [np.zeros((1, 2, 1, 1))]]
    c = [[np.zeros((1, 2, 1, 1))], [np.zeros((1, 2, 1, 1))]]
    assert distill_loss(_records(d, 2), _bank(c, 2))[0].value == 2.0


def test_distill_batch_mean():
    d = np.zeros((2, 1, 1, 1))
    c = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    assert distill_loss(_records([[d]], 1), _bank([[c]], 1))[0].value == 5.0


def test_distill_index_mismatch(rng):
    d = rng.normal(size=(1, 2, 2, 2))
    with pytest.raises(ShapeError):
        distill_loss(_records([[d], [d]], 1), _bank([[d]], 1))
    with pytest.raises(ShapeError):
        distill_loss(_records([[d, d]], 1), _bank([[d]], 1))


def test_distill_per_source_separable(rng):
    d = rng.normal(size=(2, 6, 2, 2))
    c = rng.normal(size=(2, 6, 2, 2))
    full = distill_loss(_records([[d]], 2), _bank([[c]], 2))[0].value
    c0 = c.copy()
    c0[:, :3] = d[:, :3]
    rest = distill_loss(_records([[d]], 2), _bank([[c0]], 2))[0].value
    brute = ((d[:, :3] - c[:, :3]) ** 2).sum() / 2
    assert np.isclose(full - rest, brute)


def test_final_loss_values():
    assert combine(2.0, [1.0, 3.0], 0.1).total == pytest.approx(2.4, abs=1e-15)
    assert combine(2.0, [1.0, 3.0], 0.0).total == 2.0
    with pytest.raises(ConfigError):
        combine(1.0, [], -0.1)


@settings(max_examples=50)
@given(st.floats(0, 1e3), st.lists(st.floats(0, 1e3), min_size=1, max_size=4), st.floats(0, 1), st.floats(0, 1))
def test_beta_is_monotone(pred, distill, b1, b2):
    lo, hi = sorted((b1, b2))
    assert combine(pred, distill, lo).total <= combine(pred, distill, hi).total


def test_final_loss_graph(rng):
    frames = rng.uniform(size=(2, 3, 1, 2, 2))
    preds = [ad.constant(frames[:, 1]), ad.constant(frames[:, 2])]
    total, report = final_loss(preds, frames)
    assert total.value == 0.0 and report.distill_loss == []
    assert "beta" not in report.as_fields()
    off = [ad.constant(frames[:, 1] + 1.0), ad.constant(frames[:, 2])]
    assert prediction_loss(off, frames).value == 4.0
    d = rng.normal(size=(2, 2, 2, 2))
    recs = _records([[d], [d]], 1)
    total, report = final_loss(off, frames, recs, _bank([[np.zeros_like(d)]] * 2, 1), beta=0.5)
    assert np.isclose(total.value, 4.0 + 0.5 * 2 * (d ** 2).sum() / 2)
    assert set(report.as_fields()) >= {"loss", "pred", "beta", "distill", "distill_l0"}


def test_bank_from_sources(rng):
    a = [[rng.normal(size=(1, 2, 2, 2)) for _ in range(3)] for _ in range(4)]
    b = [[rng.normal(size=(1, 2, 2, 2)) for _ in range(3)] for _ in range(4)]
    bank = MemoryBank.from_sources([a, b], 4, 3)
    assert bank.stacked(1, 2).shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(bank.memory(3, 1, 1), b[3][1])
    with pytest.raises(ShapeError):
        MemoryBank.from_sources([a[:3]], 4, 3)
    assert MemoryBank.from_sources([], 4, 3).num_sources == 0


def test_distillers_separate_toward_distinct_banks():
    """Two distillers fed the same memory track two distinct constant banks
    rather than their average."""
    from transmem.cells import LN_EPSILON
    from transmem.optim import AdamState, adam_step

    r = np.random.default_rng(0)
    c_tilde = ad.constant(r.normal(size=(4, 2, 3, 3)))
    t1 = np.full((4, 2, 3, 3), 0.8)
    t2 = np.full((4, 2, 3, 3), -0.5)
    bank = _bank([[np.concatenate([t1, t2], axis=1)]], 2)
    p = {"w": r.normal(scale=0.5, size=(4, 2, 1, 1)), "g": np.ones(4), "s": np.zeros(4)}
    state = AdamState(lr=0.05)
    for _ in range(300):
        pv = {k: ad.parameter(v, name=k) for k, v in p.items()}
        d = ad.layer_norm(ad.conv2d(c_tilde, pv["w"]), pv["g"], pv["s"], LN_EPSILON, groups=2)
        loss = distill_loss([[TmuStepOutput(None, None, d, None, 2)]], bank)[0]
        p, state = adam_step(p, ad.backward(loss, pv), state)
    out = d.value
    mean = 0.5 * (t1 + t2)
    assert np.abs(out[:, :2] - t1).max() < 0.1 * np.abs(mean - t1).max()
    assert np.abs(out[:, 2:] - t2).max() < 0.1 * np.abs(mean - t2).max()
