import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kirs import infomax
from kirs.preference import (
    PreferenceModel, attention_weights, bpr_from_distances, link_distance_from, projection_vectors,
)

from .oracles import central_gradient, relative_error

f64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=f64)


def test_attention_examples():
    # sims (1, 0)
    w = attention_weights(t([[0.0, 0.0]]), t([[1.0, 0.0]]), t([[1.0, 0.0], [0.0, 0.0]]))
    e = math.e
    np.testing.assert_allclose(w[0].numpy(), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    assert w[0, 0].item() == pytest.approx(0.7311, abs=1e-4)

    prefs = t([[1.0, 0.0], [0.0, 1.0]])
    w = attention_weights(t([[0.5, 0.0]]), t([[0.0, 0.5]]), prefs)
    np.testing.assert_allclose(w.numpy(), [[0.5, 0.5]])
    np.testing.assert_allclose((w @ prefs).numpy(), [[0.5, 0.5]])

    w = attention_weights(t([[3.0, -1.0]]), t([[0.2, 0.1]]), t([[0.3, 0.7]]))
    assert w.item() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_attention_sums_to_one_and_is_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    u, i = t(rng.normal(size=(1, 5))), t(rng.normal(size=(1, 5)))
    prefs = t(rng.normal(size=(4, 5)))
    w = attention_weights(u, i, prefs)
    assert abs(w.sum().item() - 1) < 1e-9
    assert ((w > 0) & (w < 1)).all()
    # moving every preference by c*q/|q|^2 shifts every similarity by c
    q = u + i
    shifted = attention_weights(u, i, prefs + c * q / (q @ q.T))
    np.testing.assert_allclose(shifted.numpy(), w.numpy(), atol=1e-9)


def test_projection_vector_examples(caplog):
    np.testing.assert_allclose(projection_vectors(t([[1.0]]), t([[3.0, 4.0]])).numpy(), [[0.6, 0.8]])
    s = 1 / math.sqrt(2)
    half = t([[0.5, 0.5]])
    np.testing.assert_allclose(projection_vectors(half, t([[1.0, 0.0], [0.0, 1.0]])).numpy(), [[s, s]])
    with caplog.at_level("WARNING"):
        w = projection_vectors(half, t([[1.0, 2.0], [-1.0, -2.0]]))
    assert "zero-norm" in caplog.text
    np.testing.assert_allclose(w.numpy(), [[1 / math.sqrt(5), 2 / math.sqrt(5)]])


def test_projection_refinement_adds_plane():
    prefs = t([[1.0, 0.0], [0.0, 1.0]])
    weights = t([[0.75, 0.25]])
    planes = t([[0.0, 0.0], [5.0, 5.0]])
    # dominant is preference 0, whose plane is zero
    np.testing.assert_allclose(projection_vectors(weights, prefs, planes).numpy(),
                               projection_vectors(weights, prefs).numpy())
    w = projection_vectors(weights, prefs, planes, refinement="weighted")
    v = np.array([0.75 + 1.25, 0.25 + 1.25])
    np.testing.assert_allclose(w.numpy()[0], v / np.linalg.norm(v))


def test_link_distance_hand_case():
    # one preference p=(0,0,1) gives W=p; u_perp=(1,1,0), i_perp=(1,1,0): |p|_1 = 1
    d, w = link_distance_from(t([[1.0, 1.0, 1.0]]), t([[1.0, 1.0, 5.0]]), t([[0.0, 0.0, 1.0]]))
    assert d.item() == pytest.approx(1.0) and w.item() == 1.0


def test_link_distance_exact_translation_is_zero():
    # unrefined W is parallel to p, so exactness needs a plane: W = normalize((1,0,0) + (-1,0,1)) = e3
    prefs, planes = t([[1.0, 0.0, 0.0]]), t([[-1.0, 0.0, 1.0]])
    d, _ = link_distance_from(t([[2.0, -1.0, 3.0]]), t([[3.0, -1.0, -4.0]]), prefs, planes)
    assert d.item() == pytest.approx(0.0, abs=1e-12)


def test_bpr_examples():
    assert bpr_from_distances(t([1.0]), t([3.0])).item() == pytest.approx(math.log1p(math.exp(-2)), rel=1e-12)
    assert bpr_from_distances(t([1.0]), t([3.0])).item() == pytest.approx(0.1269, abs=1e-4)
    assert bpr_from_distances(t([2.5, 0.1]), t([2.5, 0.1])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bpr_from_distances(t([0.0]), t([1e4])).item() < 1e-12


def bpr_of(u, i, j, prefs):
    dp, _ = link_distance_from(u, i, prefs)
    dn, _ = link_distance_from(u, j, prefs)
    return bpr_from_distances(dp, dn)


def test_bpr_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 20:
        arrs = [rng.normal(size=(3, 6)) for _ in range(3)] + [rng.normal(size=(4, 6))]
        # skip points with an L1 coordinate near its kink
        with torch.no_grad():
            u, i, j, p = (t(a) for a in arrs)
            near = False
            for items in (i, j):
                w_att = attention_weights(u, items, p)
                w = projection_vectors(w_att, p)
                diff = (u - (u * w).sum(-1, keepdim=True) * w) + w_att @ p - (items - (items * w).sum(-1, keepdim=True) * w)
                near |= bool((diff.abs() < 1e-3).any())
        if near:
            continue
        leaves = [t(a).requires_grad_() for a in arrs]
        bpr_of(*leaves).backward()
        for k in range(4):
            def f(x, k=k):
                args = [t(a) for a in arrs]
                args[k] = t(x)
                return bpr_of(*args).item()
            assert relative_error(leaves[k].grad.numpy(), central_gradient(f, arrs[k])) < 1e-4
        checked += 1


def zero_store(dim_e, dim_s, n_ent, n_rel):
    return infomax.InfomaxStore(
        dim_e, dim_s, np.arange(n_ent), np.zeros((n_ent, dim_e + dim_s), np.float32),
        np.arange(n_rel), np.zeros((n_rel, dim_e + dim_s), np.float32), np.zeros((n_rel, dim_s), np.float32),
    )


def small_model(seed=0, n_pref=3, dim=6):
    torch.manual_seed(seed)
    return PreferenceModel(5, 7, n_pref, dim, dtype=f64)


def test_zero_infomax_update_leaves_scores_and_parameters():
    m = small_model()
    before = m.user_distances(2)
    n_params = sum(p.numel() for p in m.parameters())
    m.apply_infomax_update(zero_store(2, 4, 10, 3), np.arange(7))
    assert m.augmented
    np.testing.assert_array_equal(m.user_distances(2), before)
    assert sum(p.numel() for p in m.parameters()) == n_params


def test_infomax_update_once_and_dim_checked():
    m = small_model()
    with pytest.raises(ValueError):
        m.apply_infomax_update(zero_store(2, 2, 10, 3), np.arange(7))
    m.apply_infomax_update(zero_store(2, 4, 10, 3), np.arange(7))
    with pytest.raises(RuntimeError):
        m.apply_infomax_update(zero_store(2, 4, 10, 3), np.arange(7))


def test_augmented_items_are_shifted_and_gradient_passes_through():
    m = small_model()
    rng = np.random.default_rng(0)
    ent = rng.normal(size=(10, 6)).astype(np.float32)
    rel = rng.normal(size=(3, 6)).astype(np.float32)
    planes = rng.normal(size=(3, 4)).astype(np.float32)
    store = infomax.InfomaxStore(2, 4, np.arange(10), ent, np.arange(3), rel, planes)
    links = np.array([0, 1, 2, -1, 4, 5, 6])
    m.apply_infomax_update(store, links)
    np.testing.assert_allclose(m.item_vectors()[3].detach().numpy(), m.item[3].detach().numpy())
    np.testing.assert_allclose(m.item_vectors()[1].detach().numpy(), m.item[1].detach().numpy() + ent[1])

    users, items = torch.tensor([0, 1, 2]), torch.tensor([1, 3, 5])
    m.link_distance(users, items)[0].sum().backward()
    shifted = m.item_vectors(items).detach().clone().requires_grad_()
    d, _ = link_distance_from(m.user[users].detach(), shifted, m.pref_vectors().detach(), m.preference_planes)
    d.sum().backward()
    np.testing.assert_allclose(m.item.grad[items].numpy(), shifted.grad.numpy(), atol=1e-12)


def test_user_distances_deterministic_and_checkpoint_round_trip():
    m = small_model(seed=4)
    m.apply_infomax_update(zero_store(2, 4, 10, 3), np.arange(7))
    data = infomax.checkpoint_bytes(m.state_tables(), {"dim": 6})
    tables, meta = infomax.checkpoint_from_bytes(data)
    other = small_model(seed=99).load_tables(tables)
    assert other.augmented and meta == {"dim": 6}
    for k, v in m.state_dict().items():
        assert torch.equal(v, other.state_dict()[k])
    np.testing.assert_array_equal(other.user_distances(1), m.user_distances(1))
    np.testing.assert_array_equal(m.user_distances(1), m.user_distances(1))


def test_constructor_rejects_bad_options():
    with pytest.raises(ValueError):
        PreferenceModel(2, 2, 0, 4)
    with pytest.raises(ValueError):
        PreferenceModel(2, 2, 1, 4, similarity="euclid")
