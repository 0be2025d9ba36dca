import numpy as np
import pytest

from molct import autodiff as ad
from molct.autodiff import Tensor
from molct.ego_attention import EaParams, ea_block
from molct.featurize import FeaturizerConfig, GraphBatch, MolecularGraph, featurize
from molct.niu import ModelConfig, MolCtModel, NiuParams, halting_prob, molct_forward, niu_forward, time_embedding

D, d = 8, 6


def make(seed=0, T=3, n_atoms=5):
    rng = np.random.default_rng(seed)
    params = NiuParams(rng, D, d, 2, ponder_hidden=4, T_max_train=T)
    x = rng.uniform(-2, 2, size=(n_atoms, 3))
    b = GraphBatch.from_graphs([MolecularGraph(np.ones(n_atoms, dtype=int), x)])
    feats = featurize(b, FeaturizerConfig(d=d, D=D))
    n0 = Tensor(rng.normal(size=(1, n_atoms, D)))
    return params, feats, n0


def force_halting(params, logit):
    last = params.ponder.mlp.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = logit


def test_time_embedding_examples():
    e0 = time_embedding(0, 8)
    assert np.array_equal(e0[0::2], np.zeros(4)) and np.array_equal(e0[1::2], np.ones(4))
    for t in (1, 2, 7):
        assert time_embedding(t, 8)[0] == np.sin(t)
        assert time_embedding(t, 8)[1] == np.cos(t)
    w = 1.0 / 10000 ** (2 * 2 / 8)
    assert time_embedding(3, 8)[4] == pytest.approx(np.sin(3 * w), abs=1e-15)
    with pytest.raises(ValueError):
        time_embedding(-1, 8)


@pytest.mark.parametrize("D_", [8, 9, 16, 64])
def test_time_embedding_injective(D_):
    vecs = np.stack([time_embedding(t, D_) for t in range(65)])
    dist = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1) + np.eye(65)
    assert dist.min() > 1e-6


def test_halting_prob_examples():
    params, _, n0 = make()
    for p in params.ponder.parameters():
        p.data[:] = 0.0
    assert np.all(halting_prob(n0, 1, params.ponder).data == 0.5)
    params, _, n0 = make(seed=1)
    p1 = halting_prob(n0, 1, params.ponder).data
    p2 = halting_prob(n0, 2, params.ponder).data
    assert np.all((p1 > 0) & (p1 < 1)) and not np.allclose(p1, p2)
    big = Tensor(n0.data * 1e3)
    pb = halting_prob(big, 1, params.ponder).data
    assert np.all((pb >= 0) & (pb <= 1))


def test_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        NiuParams(rng, D, d, 2, 4, T_max_train=0)
    with pytest.raises(ValueError):
        NiuParams(rng, D, d, 2, 4, halt_epsilon=0.5)


def test_forced_halt_gives_one_application():
    params, feats, n0 = make()
    force_halting(params, 50.0)
    res = niu_forward(n0, feats, params)
    assert np.all(res.steps == 1) and len(res.alphas) == 1
    once = ea_block(n0, feats, params.ea).data
    assert res.nodes.data.tobytes() == once.tobytes()


def test_never_halting_runs_t_max():
    params, feats, n0 = make(T=4)
    force_halting(params, -50.0)
    res = niu_forward(n0, feats, params)
    assert np.all(res.steps == 4) and len(res.alphas) == 4
    ref = n0
    for _ in range(4):
        ref = ea_block(ref, feats, params.ea)
    assert np.allclose(res.nodes.data, ref.data, atol=1e-13)


def heterogeneous(T=6):
    """Search a few seeds for a configuration in which nodes halt at different steps."""
    for seed in range(50):
        params, feats, n0 = make(seed=seed, T=T)
        last = params.ponder.mlp.layers[-1]
        last.bias.data[:] = 0.3
        last.weight.data *= 10.0
        res = niu_forward(n0, feats, params, keep_history=True)
        if len(np.unique(res.steps)) > 1 and res.steps.min() < T:
            return params, feats, n0, res
    raise AssertionError("no heterogeneous halting found")


def test_halted_nodes_frozen_and_halting_monotone():
    params, feats, n0, res = heterogeneous()
    hist = res.history
    steps = res.steps[0]
    for i, t_i in enumerate(steps):
        for t in range(t_i, len(hist)):
            assert hist[t][0, i].tobytes() == hist[t_i][0, i].tobytes()
        if t_i > 1:
            assert hist[t_i][0, i].tobytes() != hist[t_i - 1][0, i].tobytes()
    halted_by = [set(np.flatnonzero(steps <= t)) for t in range(1, len(hist))]
    assert all(a <= b for a, b in zip(halted_by, halted_by[1:]))
    assert np.all(steps <= params.T_max_train)


def test_inference_cap_above_training_only_moves_unhalted_nodes():
    params, feats, n0, res = heterogeneous(T=2)
    longer = niu_forward(n0, feats, params, T_max=8)
    early = np.flatnonzero(res.steps[0] < 2)
    forced = np.flatnonzero(res.steps[0] == 2)
    assert early.size and forced.size
    for i in early:
        assert longer.nodes.data[0, i].tobytes() == res.nodes.data[0, i].tobytes()
    assert np.all(longer.steps[0, forced] >= 2)


def test_tied_parameter_count_independent_of_cap():
    counts = {MolCtModel(ModelConfig(D=16, d=8, heads=2, T_max=t)).num_parameters() for t in (1, 3, 10)}
    assert len(counts) == 1


def test_niu_is_ea_plus_small_ponder_net():
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    niu = NiuParams(rng, cfg.D, cfg.d, cfg.heads, max(2, cfg.D // 8)).num_parameters()
    ea = EaParams(rng, cfg.D, cfg.d, cfg.heads).num_parameters()
    assert ea < niu < 1.05 * ea


def test_ponder_cost_is_differentiable():
    params, feats, n0 = make(T=4)
    params.ponder.mlp.layers[-1].bias.data[:] = -1.0
    res = niu_forward(n0, feats, params)
    grads = ad.grad(ad.tsum(res.ponder), params.ponder.parameters())
    assert any(g is not None and np.any(g.data != 0) for g in grads)


def test_forward_variants_and_relation_sensitivity():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1.5, 1.5, size=(4, 3))
    g1 = MolecularGraph([6, 6, 8, 1], x, [(0, 1, 0), (1, 2, 1)])
    g2 = MolecularGraph([6, 6, 8, 1], x, [(0, 2, 1), (1, 3, 0)])
    model = MolCtModel(ModelConfig(D=8, d=4, heads=2), seed=1)
    a = molct_forward(GraphBatch.from_graphs([g1]), model).nodes.data
    b = molct_forward(GraphBatch.from_graphs([g2]), model).nodes.data
    assert not np.allclose(a, b)
    blind = MolCtModel(ModelConfig(D=8, d=4, heads=2, rme_blocks=0), seed=1)
    a = molct_forward(GraphBatch.from_graphs([g1]), blind).nodes.data
    b = molct_forward(GraphBatch.from_graphs([g2]), blind).nodes.data
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        MolCtModel(ModelConfig(unit="lstm"))


def test_diagnostics_rows():
    from molct.niu import diagnostics_rows

    model = MolCtModel(ModelConfig(D=8, d=4, heads=2), seed=0)
    g = MolecularGraph([6, 8, 1], np.array([[0, 0, 0], [1.2, 0, 0], [0, 1.1, 0.2]]), [(0, 1, 0)])
    rows = diagnostics_rows(molct_forward(GraphBatch.from_graphs([g]), model))
    assert [r["node"] for r in rows[:3]] == [0, 1, 2]
    assert all(1 <= r["halting_step"] <= 3 for r in rows)
    assert all(len(r["attention"]) == 3 for r in rows)
