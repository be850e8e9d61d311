import numpy as np
import pytest

from msnet.analysis import count_params_macs
from msnet.blocks import (IBM, SIBM, BranchOperator, GlobalQuery, MSBlock, apply_branch_gates,
                          branch_forward, gql_gates, ms_block_forward)
from msnet.core import Tensor, no_grad, ops
from msnet.core.nn import Linear
from msnet.gradsuite import run_suite

from oracles import scalar_sigmoid, straight_line_block


def randomize(module, rng, positive=False):
    for name, p in module.named_parameters():
        if name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(("beta", "bias")):
            p.data = np.zeros(p.shape) if positive else rng.standard_normal(p.shape) * 0.1
        else:
            p.data = rng.standard_normal(p.shape) * 0.3
            if positive:
                p.data = np.abs(p.data)
    for m in module.modules():
        if hasattr(m, "running_var") and not positive:
            m.running_mean = rng.standard_normal(m.running_mean.shape) * 0.1
            m.running_var = rng.uniform(0.5, 2.0, m.running_var.shape)


def _random_config(rng):
    n = int(rng.integers(2, 5))
    return dict(in_ch=int(rng.integers(1, 9)), out_ch=int(rng.integers(2, 17)),
                kernel=int(rng.choice([1, 3, 5, 7])), mode=str(rng.choice([IBM, SIBM])),
                n_branches=n, branch_width=int(rng.integers(1, 6)), expansion=int(rng.integers(1, 4)),
                gql_dim=int(rng.integers(2, 9)) if rng.random() < 0.5 else None)


@pytest.mark.parametrize("seed", range(20))
def test_block_matches_straight_line_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = _random_config(rng)
    blk = MSBlock(**cfg, rng=rng)
    randomize(blk, rng)
    blk.train(bool(rng.random() < 0.5))
    z = Tensor(rng.standard_normal((int(rng.integers(1, 3)), cfg["in_ch"], 7, 6)))
    query = None
    if cfg["gql_dim"]:
        query = GlobalQuery(cfg["n_branches"], cfg["gql_dim"], rng=rng).query
        query.data = rng.standard_normal(query.shape)
    with no_grad():
        got = ms_block_forward(z, blk, query).data
        ref = straight_line_block(z, blk, query).data
    np.testing.assert_array_equal(got, ref)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_identity_branches_give_prefix_sums(n):
    rng = np.random.default_rng(n)
    blk = MSBlock(5, 8, mode=IBM, n_branches=n, branch_width=3, rng=rng).eval()
    randomize(blk, rng)
    z = Tensor(rng.standard_normal((2, 5, 4, 4)))
    blk._recorder = []
    ms_block_forward(z, blk, branch_fn=lambda i, x, y: ops.add(y, x))
    outs = blk._recorder[0]
    xs = np.split(blk.entry(z).data, n, axis=1)
    acc = xs[0]
    for i in range(n):
        if i:
            acc = acc + xs[i]
        np.testing.assert_array_equal(outs[i], acc)


def test_ibm_identity_wiring_is_triple_silu():
    w = 3
    op = BranchOperator(w, 3, IBM, expansion=2).eval()
    for m in (op.expand, op.depthwise, op.project):
        # var + eps == 1 exactly, so eval-mode normalization is the identity
        m.bn.running_var = np.full_like(m.bn.running_var, 1 - m.bn.eps)
    op.expand.conv.weight.data = np.zeros((2 * w, w, 1, 1))
    op.expand.conv.weight.data[:w, :, 0, 0] = np.eye(w)
    op.depthwise.conv.weight.data = np.zeros((2 * w, 1, 3, 3))
    op.depthwise.conv.weight.data[:, 0, 1, 1] = 1.0
    op.project.conv.weight.data = np.zeros((w, 2 * w, 1, 1))
    op.project.conv.weight.data[:, :w, 0, 0] = np.eye(w)
    x = Tensor(np.random.default_rng(0).standard_normal((1, w, 5, 5)))
    np.testing.assert_array_equal(branch_forward(x, op).data, ops.silu(ops.silu(ops.silu(x))).data)


def test_sibm_widens_by_expansion():
    op = BranchOperator(4, 5, SIBM, expansion=2)
    assert op.out_width == 8
    assert branch_forward(Tensor(np.ones((1, 4, 6, 6))), op).shape == (1, 8, 6, 6)
    assert BranchOperator(4, 5, IBM).out_width == 4


@pytest.mark.parametrize("mode,n,w,r,expect", [(IBM, 3, 4, 2, 12), (SIBM, 3, 4, 2, 20), (SIBM, 4, 2, 3, 20)])
def test_concat_width(mode, n, w, r, expect):
    blk = MSBlock(4, 6, mode=mode, n_branches=n, branch_width=w, expansion=r)
    assert blk.concat_width == expect
    assert blk.exit.conv.in_ch == expect


def test_block_rejects_bad_configuration():
    with pytest.raises(ValueError):
        MSBlock(4, 4, n_branches=1)
    with pytest.raises(ValueError):
        MSBlock(4, 4, mode="fancy")
    with pytest.raises(ValueError):
        BranchOperator(4, 4)
    with pytest.raises(ValueError):
        BranchOperator(4, 3, expansion=0)
    blk = MSBlock(4, 6, branch_width=2)
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 3, 4, 4))))
    with pytest.raises(ValueError, match="no gating"):
        blk(Tensor(np.zeros((1, 4, 4, 4))), GlobalQuery(3, 4).query)
    gated = MSBlock(4, 6, branch_width=2, gql_dim=4)
    with pytest.raises(ValueError, match="rows"):
        gated(Tensor(np.zeros((1, 4, 4, 4))), GlobalQuery(2, 4).query)
    with pytest.raises(ValueError, match="carry"):
        branch_forward(Tensor(np.zeros((1, 2, 3, 3))), BranchOperator(2, 3, SIBM),
                       Tensor(np.zeros((1, 2, 3, 3))))


# ---------------------------------------------------------------------------
# gating


def _gate_inputs(rng, n=3, d=16, c=9, batch=2):
    y = Tensor(rng.standard_normal((batch, c, 4, 4)))
    proj = Linear(c, d, rng=rng)
    proj.bias.data = rng.standard_normal(d) * 0.1
    q = Tensor(rng.standard_normal((n, d)))
    return y, proj, q


def test_zero_query_gives_half():
    rng = np.random.default_rng(0)
    y, proj, q = _gate_inputs(rng)
    g = gql_gates(y, Tensor(np.zeros(q.shape)), proj).data
    assert g.shape == (2, 3)
    assert np.all(g == 0.5)


def test_gates_match_hand_rolled_matvec():
    rng = np.random.default_rng(1)
    y, proj, q = _gate_inputs(rng, batch=1)
    c, d = proj.weight.shape[1], proj.weight.shape[0]
    gap = [float(np.sum(y.data[0, ch])) / y.data[0, ch].size for ch in range(c)]
    key = [sum(proj.weight.data[o, i] * gap[i] for i in range(c)) + proj.bias.data[o] for o in range(d)]
    expect = [scalar_sigmoid(sum(q.data[b, o] * key[o] for o in range(d))) for b in range(q.shape[0])]
    np.testing.assert_allclose(gql_gates(y, q, proj).data[0], expect, rtol=1e-13)


def test_saturated_query_gives_unit_gates():
    rng = np.random.default_rng(2)
    y, proj, _ = _gate_inputs(rng, batch=1)
    key = proj(ops.global_avg_pool(y)).data[0]
    q = Tensor(np.tile(50 * key / np.dot(key, key), (3, 1)))
    g = gql_gates(y, q, proj).data
    assert np.all(np.abs(1 - g) <= 1e-20)


def test_gates_strictly_inside_unit_interval():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        y, proj, q = _gate_inputs(rng, n=3, d=4, c=3, batch=1)
        g = gql_gates(y, q, proj).data
        assert np.all((g > 0) & (g < 1))


def test_gate_monotone_and_decoupled():
    rng = np.random.default_rng(4)
    y, proj, q = _gate_inputs(rng, batch=1)
    key = proj(ops.global_avg_pool(y)).data[0]
    base = gql_gates(y, q, proj).data[0]
    for i in range(3):
        bumped = q.data.copy()
        bumped[i] += 0.3 * key / np.dot(key, key)
        g = gql_gates(y, Tensor(bumped), proj).data[0]
        assert g[i] > base[i]
        others = [j for j in range(3) if j != i]
        np.testing.assert_array_equal(g[others], base[others])


def test_gate_dimension_checks():
    rng = np.random.default_rng(5)
    y, proj, q = _gate_inputs(rng)
    with pytest.raises(ValueError):
        gql_gates(Tensor(np.zeros((1, 4, 2, 2))), q, proj)
    with pytest.raises(ValueError):
        gql_gates(y, Tensor(np.zeros((3, 5))), proj)
    with pytest.raises(ValueError):
        gql_gates(y, Tensor(np.zeros(16)), proj)


def test_apply_branch_gates_examples():
    branches = [Tensor(np.full((2, 2, 3, 3), v)) for v in (1.0, 2.0, 4.0)]
    ones = apply_branch_gates(branches, Tensor(np.ones((2, 3))))
    for a, b in zip(ones, branches):
        np.testing.assert_array_equal(a.data, b.data)
    assert all(np.all(o.data == 0) for o in apply_branch_gates(branches, Tensor(np.zeros((2, 3)))))
    g = Tensor(np.array([[0.5, 1.0, 0.25], [2.0, 0.0, 1.0]]))
    out = apply_branch_gates(branches, g)
    assert [float(o.data[0, 0, 0, 0]) for o in out] == [0.5, 2.0, 1.0]
    assert [float(o.data[1, 1, 2, 2]) for o in out] == [2.0, 0.0, 4.0]
    with pytest.raises(ValueError):
        apply_branch_gates(branches, Tensor(np.ones((2, 2))))


def test_saturated_gating_reproduces_ungated_block():
    rng = np.random.default_rng(6)
    blk = MSBlock(6, 8, kernel=5, mode=SIBM, gql_dim=16, rng=rng).eval()
    randomize(blk, rng)
    z = Tensor(rng.standard_normal((1, 6, 6, 6)))
    key = blk.gql_proj(ops.global_avg_pool(blk.entry(z))).data[0]
    q = Tensor(np.tile(50 * key / np.dot(key, key), (3, 1)))
    gated = blk(z, q).data
    plain = blk(z).data
    assert np.max(np.abs(gated - plain) / np.maximum(np.abs(plain), 1e-300)) <= 1e-12


# ---------------------------------------------------------------------------
# structure


@pytest.mark.parametrize("mode", [IBM, SIBM])
def test_impulse_support_widens_per_branch(mode):
    rng = np.random.default_rng(7)
    k = 3
    blk = MSBlock(2, 6, kernel=k, mode=mode, n_branches=4, branch_width=2, rng=rng).eval()
    randomize(blk, rng, positive=True)
    z = np.zeros((1, 2, 21, 21))
    z[0, :, 10, 10] = 1.0
    blk._recorder = []
    blk(Tensor(z))
    widths = []
    for out in blk._recorder[0]:
        rows = np.nonzero(np.any(out[0] != 0, axis=(0, 2)))[0]
        widths.append(rows.max() - rows.min() + 1)
    # branch 1 is the 1x1 entry; SIBM's branch 2 starts the chain without a carry
    expect = [1, k, 2 * k - 1, 3 * k - 2]
    assert widths == expect
    assert all(a < b for a, b in zip(widths, widths[1:]))


def _closed_form_params(cin, cout, n, w, r, k, mode, d):
    rw = r * w
    total = cin * n * w + 2 * n * w
    for _ in range(n - 1):
        total += w * rw + 2 * rw + rw * k * k + 2 * rw
        if mode == IBM:
            total += rw * w + 2 * w
    concat = w + (n - 1) * (w if mode == IBM else rw)
    total += concat * cout + 2 * cout
    if d:
        total += n * w * d + d
    return total


@pytest.mark.parametrize("cfg", [(8, 8, 3, 3, 2, 5, SIBM, None), (4, 12, 3, 4, 2, 3, IBM, 16),
                                 (6, 10, 4, 2, 3, 7, SIBM, 8), (3, 5, 2, 1, 1, 9, IBM, None)])
def test_parameter_count_closed_form(cfg):
    cin, cout, n, w, r, k, mode, d = cfg
    blk = MSBlock(cin, cout, kernel=k, mode=mode, n_branches=n, branch_width=w, expansion=r, gql_dim=d)
    expect = _closed_form_params(*cfg)
    assert blk.num_parameters() == expect
    assert count_params_macs(blk, (8, 8), in_channels=cin).total_params == expect


def test_block_gradients_with_and_without_gating():
    report = run_suite(seed=3, cases=["ms_block", "ms_block_gql"])
    assert report["passed"], report["max_rel_err"]
    assert "query" in report["cases"]["ms_block_gql"]["leaves"]
