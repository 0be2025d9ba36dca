import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molct import autodiff as ad
from molct.autodiff import Tensor
from molct.featurize import (
    DegeneracyError,
    FeaturizerConfig,
    GraphBatch,
    MolecularGraph,
    VocabularyError,
    cutoff_weight,
    embed_nodes,
    embed_relations,
    featurize,
    log_rbf,
)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def feats_of(graph, cfg=None):
    return featurize(GraphBatch.from_graphs([graph]), cfg or FeaturizerConfig())


def test_defaults():
    cfg = FeaturizerConfig()
    assert (cfg.d, cfg.r_min, cfg.r_cut) == (32, 0.5, 10.0)
    assert np.allclose(cfg.mu, np.linspace(math.log(0.5), math.log(10.0), 32))
    assert cfg.width == pytest.approx(cfg.mu[1] - cfg.mu[0])


@pytest.mark.parametrize("kw", [dict(r_min=0.0), dict(r_min=5.0, r_cut=4.0), dict(d=1), dict(sigma=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FeaturizerConfig(**kw)


def test_log_rbf_is_one_at_centres():
    cfg = FeaturizerConfig()
    for k in (0, 7, 31):
        e = log_rbf(math.exp(cfg.mu[k]), cfg)
        assert e[k] == pytest.approx(1.0, abs=1e-15)


def test_log_rbf_midpoint_symmetry_and_adjacent_value():
    cfg = FeaturizerConfig()
    mid = math.exp(0.5 * (cfg.mu[4] + cfg.mu[5]))
    e = log_rbf(mid, cfg)
    assert e[4] == pytest.approx(e[5], rel=1e-12)
    e = log_rbf(math.exp(cfg.mu[10]), cfg)
    assert e[11] == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert e[11] == pytest.approx(0.60653, abs=1e-5)


def test_log_rbf_components_unimodal():
    cfg = FeaturizerConfig()
    r = np.linspace(0.3, 15.0, 2000)
    e = log_rbf(r, cfg)
    assert e.shape == (2000, 32)
    for k in range(32):
        peak = int(np.argmax(e[:, k]))
        assert np.all(np.diff(e[: peak + 1, k]) >= 0) and np.all(np.diff(e[peak:, k]) <= 0)


def test_log_rbf_domain_error():
    with pytest.raises(ValueError):
        log_rbf(0.0, FeaturizerConfig())
    with pytest.raises(ValueError):
        log_rbf(np.array([1.0, -2.0]), FeaturizerConfig())


def test_log_rbf_lipschitz_sweep():
    cfg = FeaturizerConfig()
    r = np.linspace(cfg.r_min, cfg.r_cut, 5000)
    delta = 1e-6
    step = np.abs(log_rbf(r + delta, cfg) - log_rbf(r, cfg)).max(axis=-1)
    bound = 1.0 / (cfg.width * math.exp(0.5) * r)
    assert np.all(step <= bound * delta * (1 + 1e-4))


def test_cutoff_examples_and_monotone():
    assert cutoff_weight(0.0, 10.0) == 1.0
    assert cutoff_weight(10.0, 10.0) == 0.0
    assert cutoff_weight(12.0, 10.0) == 0.0
    assert cutoff_weight(5.0, 10.0) == pytest.approx(0.5, abs=1e-15)
    w = cutoff_weight(np.linspace(0, 12, 1000), 10.0)
    assert np.all(np.diff(w) <= 0) and np.all((w >= 0) & (w <= 1))


def test_cutoff_derivative_continuous_at_cut():
    r = Tensor(np.array([10.0 - 1e-7, 10.0 + 1e-7]), requires_grad=True)
    (g,) = ad.grad(ad.tsum(cutoff_weight(r, 10.0)), [r])
    assert np.all(np.abs(g.data) < 1e-6)


def test_embed_nodes_lookup_and_vocabulary():
    table = Tensor(np.random.default_rng(0).normal(size=(10, 4)))
    z = embed_nodes([8, 1, 1], table)
    assert z.shape == (3, 4) and np.array_equal(z.data[1], z.data[2])
    with pytest.raises(VocabularyError):
        embed_nodes([1, 10], table)


def test_embed_nodes_gradient_accumulates_per_occurrence():
    rng = np.random.default_rng(1)
    t0 = rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))
    species = np.array([1, 3, 1, 1])
    table = Tensor(t0.copy(), requires_grad=True)
    (g,) = ad.grad(ad.tsum(ad.mul(embed_nodes(species, table), w)), [table])
    num = ad.finite_diff_grad(lambda t: float(np.sum(t[species] * w)), t0.copy())
    assert np.allclose(g.data, num, atol=1e-9)
    assert np.allclose(g.data[1], w[[0, 2, 3]].sum(axis=0))


def test_embed_relations_absent_edges_and_distinct_rows():
    table = Tensor(np.random.default_rng(2).normal(0, 0.1, size=(4, 6)))
    g = MolecularGraph([6, 6, 8], np.eye(3) * 1.4, [(0, 1, 0), (1, 2, 1)])
    v, has = embed_relations(g.relation_matrix(), table)
    assert np.array_equal(has, g.relation_matrix() >= 0)
    assert np.all(v.data[~has] == 0.0)
    assert not np.allclose(v.data[0, 1], v.data[1, 2])
    with pytest.raises(VocabularyError):
        embed_relations(np.array([[-1, 7], [7, -1]]), table)


def test_no_relations_gives_self_only_neighbour_mask():
    g = MolecularGraph([1, 1, 8], np.eye(3) * 1.2)
    f = feats_of(g)
    assert np.array_equal(f.neighbor_mask[0], np.eye(3, dtype=bool))
    assert not f.has_relation.any()


def test_directed_relations_are_one_way():
    g = MolecularGraph([1, 1], [[0, 0, 0], [1, 0, 0]], [(0, 1, 2)], directed=True)
    rel = g.relation_matrix()
    assert rel[0, 1] == 2 and rel[1, 0] == -1
    u = MolecularGraph([1, 1], [[0, 0, 0], [1, 0, 0]], [(0, 1, 2)])
    assert u.relation_matrix()[1, 0] == 2


def test_graph_invariants():
    with pytest.raises(ValueError):
        MolecularGraph([1, 1], np.zeros((2, 3)), [(0, 0, 0)])
    with pytest.raises(ValueError):
        MolecularGraph([1, 1], np.zeros((2, 3)), [(0, 2, 0)])
    with pytest.raises(ValueError):
        MolecularGraph([1], [[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        MolecularGraph([], np.zeros((0, 3)))


def test_coincident_particles_rejected():
    g = MolecularGraph([1, 1], [[0, 0, 0], [0.01, 0, 0]])
    with pytest.raises(DegeneracyError):
        feats_of(g)


def test_equilateral_triangle_rows_equal():
    x = np.array([[0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
    f = feats_of(MolecularGraph([1, 1, 1], x))
    e = f.positional.data[0]
    off = e[~np.eye(3, dtype=bool)]
    assert np.allclose(off, off[0], atol=1e-15)
    assert np.all(e[np.arange(3), np.arange(3)] == 0.0)


def test_positional_entries_symmetric_in_unit_interval():
    rng = np.random.default_rng(3)
    g = MolecularGraph(rng.integers(1, 9, 6), rng.uniform(-3, 3, (6, 3)))
    f = feats_of(g)
    e = f.positional.data[0]
    assert np.allclose(e, e.transpose(1, 0, 2), atol=0)
    off = e[~np.eye(6, dtype=bool)]
    assert np.all((off > 0) & (off <= 1))
    fc = f.cutoff.data[0]
    assert np.all((fc >= 0) & (fc <= 1)) and np.all(np.diag(fc) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_rigid_motion_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 3, (n, 3))
    if np.min(np.linalg.norm(x[:, None] - x[None], axis=-1) + np.eye(n) * 9) < 0.1:
        return
    g = MolecularGraph(rng.integers(1, 9, n), x, [(k, k + 1, int(rng.integers(3))) for k in range(n - 1)])
    f0 = feats_of(g)
    R = random_rotation(rng)
    f1 = feats_of(g.with_coords(x @ R.T + rng.normal(size=3) * 5))
    assert np.max(np.abs(f0.positional.data - f1.positional.data)) < 1e-12
    assert np.max(np.abs(f0.cutoff.data - f1.cutoff.data)) < 1e-12
    perm = rng.permutation(n)
    fp = feats_of(g.permuted(perm))
    assert np.allclose(fp.positional.data[0], f0.positional.data[0][np.ix_(perm, perm)], atol=1e-15)
    assert np.array_equal(fp.neighbor_mask[0], f0.neighbor_mask[0][np.ix_(perm, perm)])
    assert np.array_equal(fp.rel_types[0], f0.rel_types[0][np.ix_(perm, perm)])


def test_featurize_deterministic():
    g = MolecularGraph([6, 8], [[0, 0, 0], [1.2, 0.1, 0]], [(0, 1, 1)])
    a, b = feats_of(g), feats_of(g)
    assert a.positional.data.tobytes() == b.positional.data.tobytes()
