import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from nmsnn.errors import DimensionError, DomainError, RefusalError, StateError
from nmsnn.masks import (
    AnnealSchedule,
    BlockLogits,
    MaskConfig,
    anneal_tau,
    apply_mask,
    argmax_basis,
    compose_mask,
    enumerate_mask_space,
    expected_loss_enumeration,
    export_masks,
    finalize_hard_masks,
    gumbel_draw,
    import_masks,
    prob_sum,
    straight_through,
    verify_representation,
)
from nmsnn.oracles import central_difference, relative_error


unit_vecs = st.integers(1, 8).flatmap(
    lambda m: st.tuples(*[st.lists(st.floats(0, 1), min_size=m, max_size=m) for _ in range(3)])
)


@settings(max_examples=200)
@given(unit_vecs)
def test_prob_sum_algebra(vs):
    a, b, c = (np.array(v) for v in vs)
    np.testing.assert_allclose(prob_sum(a, b), prob_sum(b, a), atol=1e-12)
    np.testing.assert_allclose(prob_sum(prob_sum(a, b), c), prob_sum(a, prob_sum(b, c)), atol=1e-12)
    np.testing.assert_allclose(prob_sum(a, np.zeros_like(a)), a, atol=1e-12)
    bits = np.round(a)
    np.testing.assert_array_equal(prob_sum(bits, bits), bits)


def test_prob_sum_algebra_randomized_bulk():
    rng = np.random.default_rng(0)
    a, b, c = (rng.random((10_000, 6)) for _ in range(3))
    assert np.max(np.abs(prob_sum(a, b) - prob_sum(b, a))) <= 1e-12
    assert np.max(np.abs(prob_sum(prob_sum(a, b), c) - prob_sum(a, prob_sum(b, c)))) <= 1e-12


def test_prob_sum_examples_and_domain():
    e = np.eye(4)
    np.testing.assert_array_equal(prob_sum(e[0], e[1]), [1, 1, 0, 0])
    with pytest.raises(DomainError):
        prob_sum(np.array([1.5]), np.array([0.0]))
    with pytest.raises(DomainError):
        prob_sum(np.array([np.nan]), np.array([0.0]))


def test_compose_mask_cases():
    e = np.eye(4)
    np.testing.assert_array_equal(compose_mask([e[0], e[2]]), [1, 0, 1, 0])
    np.testing.assert_array_equal(compose_mask([e[1], e[1]]), [0, 1, 0, 0])
    rng = np.random.default_rng(1)
    soft = rng.random((3, 4))
    loop = []
    for j in range(4):
        prod = 1.0
        for k in range(3):
            prod *= 1.0 - soft[k, j]
        loop.append(1.0 - prod)
    np.testing.assert_allclose(compose_mask(soft), loop, rtol=0, atol=1e-12)
    np.testing.assert_allclose(compose_mask(list(soft)), loop, rtol=0, atol=1e-12)


def test_mask_space_cardinalities():
    assert len(enumerate_mask_space(MaskConfig(2, 4))) == 10
    assert len(enumerate_mask_space(MaskConfig(2, 8))) == 36
    assert enumerate_mask_space(MaskConfig(1, 3)) == {(0, 0, 1), (0, 1, 0), (1, 0, 0)}
    for n, m in [(1, 2), (3, 5), (4, 6)]:
        assert len(enumerate_mask_space(MaskConfig(n, m))) == sum(math.comb(m, k) for k in range(1, n + 1))
    with pytest.raises(RefusalError):
        enumerate_mask_space(MaskConfig(1, 25))


@pytest.mark.parametrize("n,m", [(1, 2), (1, 4), (2, 4), (2, 8), (3, 5)])
def test_representation(n, m):
    assert verify_representation(MaskConfig(n, m))


def test_representation_one_hot_case():
    space = enumerate_mask_space(MaskConfig(1, 5))
    assert space == {tuple(int(i == j) for j in range(5)) for i in range(5)}


def test_mask_config_validation():
    with pytest.raises(DomainError):
        MaskConfig(0, 4)
    with pytest.raises(DomainError):
        MaskConfig(5, 4)


def test_layout_padding_and_round_trip():
    lay = MaskConfig(2, 4).layout((3, 10))
    assert lay.blocks_per_row == 3 and lay.num_blocks == 9 and lay.pad == 2
    valid = lay.valid()
    assert valid.sum() == 30 and not valid[2, 2:].any()
    w = np.arange(30.0).reshape(3, 10)
    np.testing.assert_array_equal(lay.from_blocks(lay.to_blocks(w)), w)
    with pytest.raises(DimensionError):
        lay.to_blocks(np.zeros((3, 9)))


def test_uniform_sampler_frequencies():
    rng = np.random.default_rng(2)
    lg = BlockLogits(np.zeros((100_000, 4)))
    freq = gumbel_draw(lg, rng, 1.0, 1).hard[:, 0].mean(axis=0)
    np.testing.assert_allclose(freq, 0.25, atol=0.01)


def test_degenerate_logits_always_pick_the_peak():
    rng = np.random.default_rng(3)
    theta = np.full((10_000, 4), -50.0)
    theta[:, 2] = 50.0
    hard = gumbel_draw(BlockLogits(theta), rng, 0.5, 1).hard
    assert hard[:, 0, 2].mean() == 1.0


def test_sampler_is_deterministic_given_seed():
    lg = BlockLogits(np.random.default_rng(0).normal(size=(20, 4)))
    a = gumbel_draw(lg, np.random.default_rng(9), 0.7, 2)
    b = gumbel_draw(lg, np.random.default_rng(9), 0.7, 2)
    assert a.hard.tobytes() == b.hard.tobytes() and a.soft.tobytes() == b.soft.tobytes()


def test_padding_positions_are_never_sampled():
    lay = MaskConfig(2, 4).layout((5, 7))
    lg = BlockLogits.initial(lay, np.random.default_rng(0))
    assert np.all(lg.probs()[~lay.valid()] == 0.0)
    s = gumbel_draw(lg, np.random.default_rng(1), 1.0, 2)
    assert not s.hard[~np.broadcast_to(lay.valid()[:, None, :], s.hard.shape)].any()


def test_without_replacement_gives_exactly_n():
    lg = BlockLogits(np.random.default_rng(0).normal(size=(500, 8)))
    s = gumbel_draw(lg, np.random.default_rng(1), 1.0, 3, replacement=False)
    assert np.all(finalize_hard_masks(s).sum(axis=1) == 3)
    with pytest.raises(DomainError):
        gumbel_draw(BlockLogits(np.zeros((2, 2))), np.random.default_rng(0), 1.0, 3, replacement=False)


def test_stgs_low_temperature_limit():
    lg = BlockLogits(np.random.default_rng(0).normal(size=(64, 4)))
    s = gumbel_draw(lg, np.random.default_rng(1), 1e-4, 2)
    assert np.max(np.abs(s.soft - s.hard)) < 1e-6


def test_bad_temperature():
    with pytest.raises(DomainError):
        gumbel_draw(BlockLogits(np.zeros((1, 4))), np.random.default_rng(0), 0.0, 1)


def test_straight_through_forward_is_the_hard_sample():
    s = gumbel_draw(BlockLogits(np.zeros((6, 4))), np.random.default_rng(0), 0.5, 2)
    st_ = straight_through(s)
    assert np.array_equal(st_.value, s.hard)
    assert np.array_equal(st_.mask(), compose_mask(s.hard))


def test_stgs_gradient_m2_quadratic_by_hand():
    # one block, M=2, N=1, loss = sum_k (w_k m_k - t_k)^2
    rng = np.random.default_rng(4)
    theta = rng.normal(size=(1, 2))
    w = np.array([0.8, -1.3])
    t = np.array([0.5, 0.4])
    tau = 0.6
    s = gumbel_draw(BlockLogits(theta), rng, tau, 1)
    st_ = straight_through(s)
    m = st_.mask()[0]
    G = 2 * (w * m - t) * w
    y0, y1 = s.soft[0, 0]
    d0 = (G[0] - G[1]) * y0 * y1 / tau
    np.testing.assert_allclose(st_.mask_vjp(G[None]), [[d0, -d0]], rtol=1e-12)


def test_straight_through_gradient_equals_soft_path_derivative():
    rng = np.random.default_rng(5)
    lg = BlockLogits(rng.normal(size=(3, 4)))
    s = gumbel_draw(lg, rng, 0.8, 2)
    st_ = straight_through(s)
    target = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def loss_of_mask(m):
        return float(np.sum((w * m - target) ** 2))

    G = 2 * (w * st_.mask() - target) * w
    analytic = st_.mask_vjp(G)

    def relaxed():
        soft = softmax((lg.log_probs()[:, None, :] + s.noise) / s.tau, axis=-1)
        yhat = s.hard + soft - s.soft
        return loss_of_mask(1 - np.prod(1 - yhat, axis=-2))

    numeric = central_difference(relaxed, lg.theta, h=1e-6)
    assert relative_error(analytic, numeric) < 1e-6


def test_anneal_schedule():
    s = AnnealSchedule(1.0, 0.1, 10)
    assert anneal_tau(s, 0) == 1.0
    assert anneal_tau(s, 10) == 0.1
    assert anneal_tau(s, 5) == pytest.approx(10 ** -0.5)
    assert anneal_tau(s, 5) == pytest.approx(0.3162, abs=1e-4)
    taus = [anneal_tau(s, t) for t in range(11)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    with pytest.raises(DomainError):
        anneal_tau(s, 11)
    with pytest.raises(DomainError):
        AnnealSchedule(0.1, 1.0, 3)
    assert anneal_tau(AnnealSchedule(1.0, 0.1, 0), 0) == 0.1


@settings(max_examples=100)
@given(st.floats(0.01, 10), st.floats(0.01, 1), st.integers(1, 100))
def test_anneal_endpoints_exact(hi, frac, T):
    lo = hi * frac
    s = AnnealSchedule(hi, lo, T)
    assert anneal_tau(s, 0) == hi and anneal_tau(s, T) == lo


def test_apply_mask_cases():
    lay = MaskConfig(2, 4).layout((3, 8))
    w = np.random.default_rng(0).normal(size=(3, 8))
    np.testing.assert_array_equal(apply_mask(w, np.ones((6, 4)), lay), w)
    half = apply_mask(w, np.tile([1, 1, 0, 0], (6, 1)), lay)
    assert not half[:, [2, 3, 6, 7]].any()
    bits = (np.random.default_rng(1).random((6, 4)) < 0.5).astype(np.uint8)
    assert np.count_nonzero(apply_mask(w, bits, lay)) == bits.sum()
    with pytest.raises(DimensionError):
        apply_mask(w, np.ones((5, 4)), lay)


def test_finalize_popcounts():
    e = np.eye(4)
    distinct = np.stack([[e[0], e[3]]])
    colliding = np.stack([[e[1], e[1]]])
    assert finalize_hard_masks(distinct).sum() == 2
    assert finalize_hard_masks(colliding).sum() == 1
    with pytest.raises(StateError):
        finalize_hard_masks(None)


def test_finalized_masks_keep_at_most_n_per_block_on_a_random_net():
    rng = np.random.default_rng(6)
    cfg = MaskConfig(2, 8)
    for shape in [(16, 64), (10, 16), (7, 13)]:
        lay = cfg.layout(shape)
        lg = BlockLogits.initial(lay, rng)
        bits = finalize_hard_masks(gumbel_draw(lg, rng, 0.5, 2))
        pop = bits.sum(axis=1)
        assert np.all((pop >= 1) & (pop <= 2))
        masked = lay.to_blocks(apply_mask(rng.normal(size=shape), bits, lay))
        assert np.all(np.count_nonzero(masked, axis=1) <= 2)


def test_argmax_basis():
    lg = BlockLogits(np.array([[0.1, 2.0, 0.5, -1.0]]))
    assert finalize_hard_masks(argmax_basis(lg, 2)).tolist() == [[0, 1, 0, 0]]
    assert finalize_hard_masks(argmax_basis(lg, 2, replacement=False)).tolist() == [[0, 1, 1, 0]]


def test_enumeration_one_hot_and_uniform_cases():
    popcount = lambda masks: float(sum(m.sum() for m in masks))  # noqa: E731
    assert expected_loss_enumeration([np.zeros(2)], popcount, 2) == pytest.approx(1.5)
    sharp = np.array([-60.0, 60.0, -60.0, -60.0])
    assert expected_loss_enumeration([sharp], popcount, 2) == pytest.approx(1.0)
    with pytest.raises(RefusalError):
        expected_loss_enumeration([np.zeros(5)], popcount, 2)
    with pytest.raises(RefusalError):
        expected_loss_enumeration([np.zeros(2)] * 3, popcount, 1)


def test_enumeration_by_hand_two_blocks():
    th = [np.array([0.3, -0.2, 0.0]), np.array([1.0, 0.0, 0.5])]
    loss = lambda ms: float(ms[0] @ [1, 2, 3] + 10 * ms[1] @ [1, 0, 2])  # noqa: E731
    p = [softmax(t) for t in th]
    want = 0.0
    eye = np.eye(3)
    for a, b in itertools.product(range(3), repeat=2):
        want += p[0][a] * p[1][b] * loss([eye[a], eye[b]])
    assert expected_loss_enumeration(th, loss, 1) == pytest.approx(want, rel=1e-12)


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    cfg = MaskConfig(2, 4)
    recs = {}
    for name, shape in [("layer0", (5, 10)), ("layer1", (3, 5))]:
        lay = cfg.layout(shape)
        recs[name] = (cfg, lay, finalize_hard_masks(gumbel_draw(BlockLogits.initial(lay, rng), rng, 1.0, 2)))
    path = tmp_path / "m.nmm"
    nbytes = export_masks(path, recs)
    header = 8 + 4 + 4
    want = header + sum(2 + len(n) + 24 + math.ceil(l.num_blocks * 4 / 8) for n, (_, l, _) in recs.items())
    assert nbytes == want == path.stat().st_size
    back = import_masks(path)
    for name, (c, lay, bits) in recs.items():
        c2, lay2, bits2 = back[name]
        assert c2 == c and lay2 == lay
        np.testing.assert_array_equal(bits2, bits)
        assert np.bincount(bits2.sum(axis=1), minlength=3).tolist() == np.bincount(bits.sum(axis=1), minlength=3).tolist()


def test_import_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"not a mask file at all")
    with pytest.raises(ValueError):
        import_masks(p)
