import numpy as np
import pytest

from scanreid import attention as att
from scanreid import model as M
from scanreid import numkit as nk
from scanreid import similarity as sim
from scanreid.errors import ContractError, DimensionError


def test_variant_rows():
    rows = {v.row: v.name for v in M.VARIANTS.values()}
    assert rows == {1: "avg-pool", 2: "max-pool", 3: "san-only", 4: "can-only", 5: "single-path",
                    6: "shared-fc", 7: "dot-product", 8: "full"}
    assert M.get_variant(8).name == "full" and M.get_variant("3").name == "san-only"
    with pytest.raises(ContractError):
        M.get_variant("lstm")


def test_shared_fc_aliases_layers(rng):
    p = M.ModelParams.init(5, 4, "shared-fc", rng)
    assert p.fc2 is p.fc1
    assert "fc2.weight" not in p.trainable() and "fc1.bias" in p.trainable()
    q = p.copy()
    assert q.fc2 is q.fc1 and q.fc1 is not p.fc1


def test_dimension_checks(rng):
    p = M.ModelParams.init(5, 4, "full", rng)
    with pytest.raises(DimensionError):
        M.ModelParams(p.fc0, p.fc1, nk.LinearLayer(np.zeros((5, 3)), np.zeros(3)), p.fc3)
    with pytest.raises(DimensionError):
        M.pair_logits(p, np.zeros((3, 6)), np.zeros((3, 5)))


def test_full_forward_matches_module_composition(rng):
    """The fused forward equals self/collab attention + similarity + fc3 call by call."""
    p = M.ModelParams.init(6, 5, "full", rng)
    X, Y = rng.standard_normal((7, 6)), rng.standard_normal((4, 6))

    def clip(Z):
        return att.ProjectedClip(nk.linear_forward(Z, p.fc0), nk.linear_forward(Z, p.fc1),
                                 nk.linear_forward(Z, p.fc2))

    cx, cy = clip(X), clip(Y)
    x_xx, _, _ = att.self_attend(cx)
    y_yy, _, _ = att.self_attend(cy)
    x_yx, _, _ = att.collab_attend(cx, y_yy)
    y_xy, _, _ = att.collab_attend(cy, x_xx)
    s = sim.similarity_feature(x_xx, y_yy, x_yx, y_xy)
    expected = sim.match_score(s, p.fc3).logit
    assert M.pair_logits(p, X, Y) == pytest.approx(expected, abs=1e-12)


def test_pool_variants_match_pool_baseline(rng):
    for name, mode in (("avg-pool", "avg"), ("max-pool", "max")):
        p = M.ModelParams.init(6, 5, name, rng)
        X, Y = rng.standard_normal((7, 6)), rng.standard_normal((4, 6))
        clips = [att.ProjectedClip(nk.linear_forward(Z, p.fc0), nk.linear_forward(Z, p.fc1),
                                   nk.linear_forward(Z, p.fc2)) for Z in (X, Y)]
        a, b = (sim.pool_baseline(c, mode).vec for c in clips)
        expected = sim.match_score((a - b) * (a - b), p.fc3).logit
        assert M.pair_logits(p, X, Y) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("variant", [v for v in M.VARIANTS if v != "single-path"])
def test_symmetric_variants(variant, rng):
    p = M.ModelParams.init(6, 5, variant, rng)
    X, Y = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    assert M.pair_logits(p, X, Y) == pytest.approx(M.pair_logits(p, Y, X), abs=1e-12)


@pytest.mark.parametrize("variant", [v for v in M.VARIANTS if v != "single-path"])
def test_self_pair_logit_is_bias(variant, rng):
    p = M.ModelParams.init(6, 5, variant, rng)
    p.fc3.bias[:] = 0.37
    X = rng.standard_normal((5, 6))
    assert M.pair_logits(p, X, X) == 0.37


def test_single_path_is_asymmetric(rng):
    # self attention on one side, mean pooling on the other: a self pair is not exactly zero
    p = M.ModelParams.init(6, 5, "single-path", rng)
    X, Y = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    assert M.pair_logits(p, X, Y) != pytest.approx(M.pair_logits(p, Y, X), abs=1e-12)


@pytest.mark.parametrize("variant", list(M.VARIANTS))
def test_batched_forward_matches_single(variant, rng):
    p = M.ModelParams.init(6, 5, variant, rng)
    X, Y = rng.standard_normal((4, 5, 6)), rng.standard_normal((4, 3, 6))
    batched = M.pair_logits(p, X, Y)
    for i in range(4):
        assert batched[i] == pytest.approx(M.pair_logits(p, X[i], Y[i]), abs=1e-12)


def test_fc2_bias_is_inert(rng):
    p = M.ModelParams.init(6, 5, "full", rng)
    X, Y = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    before = M.pair_logits(p, X, Y)
    p.fc2.bias[:] = rng.standard_normal(5) * 10
    assert M.pair_logits(p, X, Y) == pytest.approx(before, abs=1e-12)


@pytest.mark.parametrize("variant", list(M.VARIANTS))
def test_full_graph_gradients(variant):
    for seed in range(3):
        rep = M.full_graph_check(variant, seed)
        assert rep.passed, rep


def test_scan_pair_input_gradient():
    x = np.random.default_rng(4).standard_normal((5, 7))
    rep = nk.grad_check("scan_pair", x, tol=1e-5)
    assert rep.passed, rep


def test_batch_loss_reports(rng):
    p = M.ModelParams.init(6, 5, "full", rng)
    X, Y = rng.standard_normal((4, 5, 6)), rng.standard_normal((4, 5, 6))
    labels = np.array([1, 0, 1, 0])
    out = M.batch_loss(p, [(X, Y, labels)], [], None, 1.0)
    assert out.oim == 0.0 and out.value == out.bce
    logits = M.pair_logits(p, X, Y)
    assert out.accuracy == ((logits > 0) == (labels > 0)).mean()
    with pytest.raises(ContractError):
        M.batch_loss(p, [], [], None)
