import math

import numpy as np
import pytest

from msnet.analysis import count_params_macs
from msnet.analysis.bench import STAGE_SPECS, bench_conv, time_cell, to_csv
from msnet.analysis.diversity import branch_diversity, collect_branch_features, diversity_metric
from msnet.analysis.erf import (THETAS, calibrate_batch_norm, contribution_matrix, erf_report, erf_score,
                                noise_inputs, normalize, seed_averaged_hbar, write_pgm16)
from msnet.architecture import SPP, HeadLevel, KernelProtocol, build_model
from msnet.blocks import IBM, SIBM, MSBlock
from msnet.core import Module, Tensor, ops
from msnet.core.nn import Conv2d, ConvBNAct, Linear
from msnet.io import read_pnm

from oracles import MacCounter, naive_conv2d, naive_matmul_linear


# ---------------------------------------------------------------------------
# cost model


def test_single_conv_closed_form():
    conv = Conv2d(16, 32, 3, bias=True)
    report = count_params_macs(conv, (10, 10), in_channels=16)
    assert report.total_macs == 460_800
    assert report.total_params == 4_640


def test_depthwise_closed_form():
    conv = Conv2d(64, 64, 5, groups=64)
    assert count_params_macs(conv, (20, 20), in_channels=64).total_macs == 640_000


def test_macs_scale_quadratically_with_extent():
    blk = MSBlock(4, 8, kernel=3, branch_width=2)
    a = count_params_macs(blk, (8, 8), in_channels=4).total_macs
    b = count_params_macs(blk, (16, 16), in_channels=4).total_macs
    assert b == 4 * a


def test_totals_equal_sum_of_parts():
    report = count_params_macs(build_model("tiny"), (64, 64))
    assert report.total_params == sum(s["params"] for s in report.stages.values())
    assert report.total_macs == sum(s["macs"] for s in report.stages.values())
    assert report.total_params == build_model("tiny").num_parameters()
    d = report.to_dict()
    assert d["input_size"] == [64, 64] and len(d["layers"]) == len(report.layers)


class _Wrap(Module):
    def __init__(self, inner, fn):
        super().__init__()
        self.inner, self._fn = inner, fn

    def forward(self, x):
        return self._fn(self.inner, x)


def _instrumented_macs(monkeypatch, module, x, forward=None):
    """Run the real forward with conv/linear replaced by counting loops."""
    counter = MacCounter()

    def conv(x, w, b=None, stride=1, padding=0, groups=1):
        out = naive_conv2d(x.data, w.data, None if b is None else b.data, stride, padding, groups, counter)
        return Tensor(out)

    def linear(x, w, b=None):
        return Tensor(naive_matmul_linear(x.data, w.data, None if b is None else b.data, counter))

    monkeypatch.setattr(ops, "conv2d", conv)
    monkeypatch.setattr(ops, "linear", linear)
    (forward or (lambda m, t: m(t)))(module, x)
    monkeypatch.undo()
    return counter.macs


def _gated(blk, q):
    return _Wrap(blk, lambda m, x: m(x, q))


LAYER_CASES = {
    "conv3x3": (lambda: Conv2d(3, 5, 3, bias=True), 3, 8),
    "conv_stride2": (lambda: Conv2d(4, 6, 3, stride=2), 4, 7),
    "grouped": (lambda: Conv2d(4, 6, 3, groups=2), 4, 6),
    "depthwise": (lambda: Conv2d(6, 6, 5, groups=6), 6, 8),
    "pointwise": (lambda: Conv2d(5, 3, 1), 5, 8),
    "conv_bn_act": (lambda: ConvBNAct(3, 4, 3, stride=2), 3, 8),
    "ibm_block": (lambda: MSBlock(4, 6, kernel=3, mode=IBM, branch_width=2), 4, 6),
    "sibm_block": (lambda: MSBlock(3, 8, kernel=5, mode=SIBM, branch_width=2, n_branches=4), 3, 5),
    "spp": (lambda: SPP(2), 2, 8),
    "head_level": (lambda: HeadLevel(4, 3, units=2, num_classes=3, towers=2), 4, 4),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_mac_counter_matches_instrumented_forward(name, monkeypatch):
    make, cin, size = LAYER_CASES[name]
    module = make().eval()
    x = Tensor(np.random.default_rng(0).standard_normal((1, cin, size, size)))
    counted = _instrumented_macs(monkeypatch, module, x)
    assert counted > 0
    assert count_params_macs(module, (size, size), in_channels=cin).total_macs == counted


def test_mac_counter_linear_and_gated_block(monkeypatch):
    lin = Linear(7, 5)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 7)))
    fwd = _Wrap(lin, lambda m, t: m(ops.reshape(ops.global_avg_pool(t), (1, 7))))
    assert count_params_macs(fwd, (3, 3), in_channels=7).total_macs == 35
    assert _instrumented_macs(monkeypatch, lin, x) == 35

    blk = MSBlock(4, 6, kernel=3, branch_width=2, gql_dim=4).eval()
    q = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    gated = _gated(blk, q)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 6, 6)))
    assert count_params_macs(gated, (6, 6), in_channels=4).total_macs == \
        _instrumented_macs(monkeypatch, gated, x)


# ---------------------------------------------------------------------------
# ERF


def _stack(kernels):
    ws = [Tensor(np.ones((1, 1, k, k))) for k in kernels]

    def fn(x):
        for w in ws:
            x = ops.conv2d(x, w, padding=w.shape[2] // 2)
        return x
    return fn


@pytest.mark.parametrize("kernels", [(3,), (3, 3), (3, 3, 3), (5,), (3, 5), (3, 5, 7)])
def test_erf_support_equals_analytic_receptive_field(kernels):
    size = 21
    inputs = noise_inputs(3, size, seed=1, channels=1, dtype=np.float64)
    A = contribution_matrix(_stack(kernels), None, inputs)
    r = sum(k // 2 for k in kernels)
    expect = np.zeros((size, size), dtype=bool)
    c = size // 2
    expect[c - r:c + r + 1, c - r:c + r + 1] = True
    np.testing.assert_array_equal(A > 0, expect)
    assert A.max() == 1.0 and A.min() == 0.0


def test_identity_model_erf_is_single_pixel():
    A = contribution_matrix(lambda x: ops.mul(x, 1.0), None, noise_inputs(2, 9, channels=1, dtype=np.float64))
    assert np.count_nonzero(A) == 1 and A[4, 4] == 1.0


def test_single_conv_raw_contribution_by_hand():
    # P for one all-ones 3x3 conv over 2 input channels: 1 per tap per channel
    A = contribution_matrix(_stack_two_channel(), None, [np.ones((1, 2, 7, 7))], normalized=False)
    expect = np.zeros((7, 7))
    expect[2:5, 2:5] = math.log10(3.0)
    np.testing.assert_allclose(A, expect, rtol=1e-15)


def _stack_two_channel():
    w = Tensor(np.ones((1, 2, 3, 3)))
    return lambda x: ops.conv2d(x, w, padding=1)


def test_stage_tap_validation():
    model = build_model("tiny", parts="backbone")
    with pytest.raises(ValueError):
        contribution_matrix(model, 5, noise_inputs(1, 32))
    with pytest.raises(ValueError):
        contribution_matrix(model, None, noise_inputs(1, 32))
    with pytest.raises(ValueError):
        contribution_matrix(_stack((3,)), None, [])


def test_normalize_flat_map_is_zero():
    assert np.all(normalize(np.full((3, 3), 2.0)) == 0)
    np.testing.assert_array_equal(normalize(np.array([1.0, 3.0, 2.0])), [0.0, 1.0, 0.5])


def test_theta_grid():
    assert THETAS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9)


def test_erf_score_examples():
    h, hbar = erf_score(np.ones((4, 4)))
    assert all(v == 1.0 for v in h.values()) and hbar == 1.0
    quarter = np.zeros(100)
    quarter[:25] = 1.0
    h, hbar = erf_score(quarter.reshape(10, 10))
    assert all(v == 0.25 for v in h.values()) and hbar == 0.25


def test_erf_score_ramp_by_counting():
    ramp = np.array([i / 100 for i in range(100)]).reshape(10, 10)
    h, hbar = erf_score(ramp)
    assert h[0.5] == 0.49 and h[0.9] == 0.09
    counts = []
    for t in range(50, 91, 5):
        counts.append(sum(1 for i in range(100) if i / 100 > t / 100) / 100)
    assert list(h.values()) == counts
    assert hbar == pytest.approx(sum(counts) / 9, abs=1e-15)


def test_erf_score_monotone_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, hbar = erf_score(normalize(rng.random((12, 12)) ** 3))
        vals = list(h.values())
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert 0.0 <= hbar <= 1.0


def test_erf_report_on_model_and_pgm(tmp_path):
    model = build_model("tiny", parts="backbone", seed=0)
    inputs = noise_inputs(2, 64)
    calibrate_batch_norm(model, inputs)
    rep = erf_report(model, 2, inputs, seed=0)
    assert rep.A.shape == (64, 64) and rep.A.min() == 0.0 and rep.A.max() == 1.0
    d = rep.to_dict()
    assert set(d) == {"stage", "h", "h_bar", "shape", "meta"} and d["meta"]["n_inputs"] == 2
    assert "A" in rep.to_dict(include_matrix=True)
    write_pgm16(tmp_path / "a.pgm", rep.A)
    back = read_pnm(tmp_path / "a.pgm")
    np.testing.assert_allclose(back, rep.A, atol=1 / 65535)


def test_calibration_restores_eval_mode_and_momentum():
    model = build_model("tiny", parts="backbone")
    calibrate_batch_norm(model, noise_inputs(2, 32))
    bn = model.backbone.stem.layers[0].bn
    assert not model.training and bn.momentum == 0.1
    assert not np.all(bn.running_var == 1.0)


def test_hks_keeps_shallow_erf_below_large_kernels():
    # stage 2 of [3,5,7,9] sees only k=3,5 layers, so it must not exceed an all-9 network
    inputs = noise_inputs(2, 96)

    def make(kernels):
        return lambda s: build_model("tiny", KernelProtocol(kernels, neck=False, head=False),
                                     parts="backbone", seed=s)
    hks = seed_averaged_hbar(make((3, 5, 7, 9)), 2, range(3), inputs)
    big = seed_averaged_hbar(make((9, 9, 9, 9)), 2, range(3), inputs)
    assert hks <= big


# ---------------------------------------------------------------------------
# diversity


def _feats(rng, n_d=2, n_m=3, n_b=3, L=8):
    return [[[rng.standard_normal(L) for _ in range(n_b)] for _ in range(n_m)] for _ in range(n_d)]


def test_diversity_hand_computed_pair():
    rep = diversity_metric([[[np.zeros(4), np.ones(4)]]])
    assert rep.blocks[0]["pairs"]["0-1"] == 0.5
    assert rep.D == 0.25
    assert (rep.n_images, rep.n_blocks, rep.n_branches) == (1, 1, 2)


def test_diversity_zero_iff_identical():
    f = np.arange(6.0)
    assert diversity_metric([[[f, f.copy(), f.copy()]]]).D == 0.0
    g = f.copy()
    g[3] += 1e-9
    assert diversity_metric([[[f, f.copy(), g]]]).D > 0.0


def test_diversity_permutation_invariant():
    rng = np.random.default_rng(0)
    feats = _feats(rng)
    perm = [[[b[2], b[0], b[1]] for b in img] for img in feats]
    assert diversity_metric(perm).D == pytest.approx(diversity_metric(feats).D, rel=1e-15)


@pytest.mark.parametrize("alpha", [2.0, -3.0, 0.5])
def test_diversity_absolutely_homogeneous(alpha):
    rng = np.random.default_rng(1)
    feats = _feats(rng)
    scaled = [[[alpha * f for f in blk] for blk in img] for img in feats]
    assert diversity_metric(scaled).D == pytest.approx(abs(alpha) * diversity_metric(feats).D, rel=1e-14)


def test_diversity_skips_unequal_lengths():
    rep = diversity_metric([[[np.zeros(2), np.zeros(4), np.ones(4)]]], block_names=["b"])
    assert rep.skipped_pairs == [["b", 0, 1], ["b", 0, 2]]
    assert rep.D == pytest.approx((2 / 4) / 3)


def test_diversity_rejects_single_branch_and_ragged_input():
    with pytest.raises(ValueError):
        diversity_metric([[[np.zeros(3)]]])
    with pytest.raises(ValueError):
        diversity_metric([[[np.zeros(3), np.zeros(3)]], [[np.zeros(3), np.zeros(3), np.zeros(3)]]])
    with pytest.raises(ValueError):
        diversity_metric([])


def test_branch_diversity_on_model():
    model = build_model("tiny", parts="backbone")
    images = noise_inputs(2, 32)
    feats, names = collect_branch_features(model, images)
    assert len(feats) == 2 and len(names) == 4 and len(feats[0][0]) == 3
    rep = branch_diversity(model, images)
    assert rep.D > 0 and rep.n_blocks == 4
    # SIBM widens branches 2..N, so branch 1 never pairs with them
    assert all(p[1] == 0 for p in rep.skipped_pairs)
    assert all(b._recorder is None for b in model.modules() if isinstance(b, MSBlock))


# ---------------------------------------------------------------------------
# benchmark


def test_bench_cells_and_csv():
    cells = bench_conv([(16, 8)], kernels=(1, 3), repeats=3, warmup=1)
    assert [(c.size, c.channels, c.kernel, c.repeats) for c in cells] == [(16, 8, 1, 3), (16, 8, 3, 3)]
    csv = to_csv(cells).splitlines()
    assert csv[0] == "size,channels,kernel,median_ms,fps,repeats" and len(csv) == 3
    assert cells[0].to_row()["fps"] == pytest.approx(1 / cells[0].median_s)
    assert STAGE_SPECS == ((320, 160), (160, 320), (80, 640), (40, 1280))


def test_bench_rejects_bad_arguments():
    with pytest.raises(ValueError):
        time_cell(8, 4, 4, repeats=1)
    with pytest.raises(ValueError):
        time_cell(8, 4, 3, repeats=0)


def test_pointwise_only_cell_faster_than_3x3():
    one = time_cell(80, 160, 1, repeats=15, warmup=3)
    three = time_cell(80, 160, 3, repeats=15, warmup=3)
    assert one.median_s < three.median_s
