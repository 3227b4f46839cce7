import numpy as np
import pytest

from scrlab.dag import is_dag
from scrlab.pipeline import flip_render, render
from scrlab.synth import (DEFAULT_EDGES, ApproxConfig, GroundTruthScm, PolyTarget, approx_experiment, default_scm,
                          edges_to_matrix, load_corpus, make_scm, make_splits, sample_corpus, sample_scene,
                          save_corpus)

V, D, L, A = range(4)


def test_default_scm_graph():
    scm = default_scm()
    np.testing.assert_array_equal(scm.gt_dag, edges_to_matrix([("D", "L"), ("V", "L"), ("D", "A")]))
    assert is_dag(scm.gt_dag)[0]
    assert all(-0.5 <= c <= 0.5 for pair in scm.coeffs.values() for c in pair)


def test_cyclic_graph_rejected():
    with pytest.raises(ValueError):
        GroundTruthScm(edges_to_matrix([("V", "L"), ("L", "V")]), {})


def test_empty_graph_gives_independent_factors():
    c = sample_corpus(make_scm([], seed=0), 10_000, seed=1)
    corr = np.corrcoef(c.summaries().T)
    off = corr[~np.eye(4, dtype=bool)]
    assert np.abs(off).max() < 0.05


def test_positive_viewpoint_to_light_coupling_correlates():
    scm = make_scm([("V", "L")], seed=0, coeffs={("V", "L"): (1.0, 0.0)})
    c = sample_corpus(scm, 10_000, seed=2)
    assert np.corrcoef(c.V[:, 0], c.L[:, 0])[0, 1] > 0.5


def test_full_symmetry_makes_flip_render_exact():
    c = sample_corpus(default_scm(seed=3), 64, seed=0)
    f = c.factors()
    assert render(f, 2 / 15).data.tobytes() == flip_render(f, 2 / 15).data.tobytes()


def test_partial_symmetry_breaks_flip():
    c = sample_corpus(make_scm(DEFAULT_EDGES, symmetry=0.0), 16, seed=0)
    f = c.factors()
    assert not np.allclose(render(f, 2 / 15).data, flip_render(f, 2 / 15).data)


def test_images_match_renderer_and_latent_ranges():
    c = sample_corpus(default_scm(), 32, seed=4)
    np.testing.assert_array_equal(c.I, render(c.factors(), 2 / 15).data)
    assert np.all(c.D > 0) and np.all((c.A >= 0) & (c.A <= 1))
    assert np.all((c.I >= 0) & (c.I <= 1))


def test_generation_bit_exact_per_seed():
    a = sample_corpus(default_scm(seed=1), 20, seed=9)
    b = sample_corpus(default_scm(seed=1), 20, seed=9)
    for k in ("V", "D", "L", "A", "I", "theta"):
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()


def test_sample_scene_single():
    s = sample_scene(default_scm(), seed=0)
    assert len(s) == 1 and s.I.shape == (1, 16, 16)


def test_intervention_moves_descendants_only():
    scm = default_scm(seed=0)
    scm.coeffs[(D, L)] = (0.5, 0.0)
    scm.coeffs[(D, A)] = (0.5, 0.0)
    c0 = sample_corpus(scm, 5000, seed=10)
    c1 = sample_corpus(scm, 5000, seed=11, interventions={"D": 1.5})
    base, do = c0.summaries(), c1.summaries()
    # V is not a descendant of D
    assert abs(base[:, V].mean() - do[:, V].mean()) < 0.05
    assert abs(base[:, V].std() - do[:, V].std()) < 0.05
    # L and A are
    assert abs(c0.theta[:, L].mean() - c1.theta[:, L].mean()) > 0.2
    assert abs(c0.theta[:, A].mean() - c1.theta[:, A].mean()) > 0.2
    assert do[:, D].std() < 1e-12


def test_splits_default_ratio():
    tr, va, te = make_splits(1000)
    assert (len(tr), len(va), len(te)) == (800, 100, 100)
    assert len(set(tr) | set(va) | set(te)) == 1000


def test_splits_reject_empty_part():
    with pytest.raises(ValueError):
        make_splits(100, (1.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        make_splits(100, (0.5, 0.3, 0.3))


def test_splits_seed_deterministic():
    a = make_splits(500, seed=4)
    b = make_splits(500, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(make_splits(500, seed=5)[0], a[0])


def test_corpus_file_round_trip_and_byte_identity(tmp_path):
    scm = default_scm(seed=2)
    paths = []
    for name in ("a.bin", "b.bin"):
        c = sample_corpus(scm, 40, seed=7)
        p = tmp_path / name
        save_corpus(c, p, make_splits(40, seed=7))
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    loaded, splits = load_corpus(paths[0])
    for k in ("V", "D", "L", "A", "I", "theta"):
        assert getattr(loaded, k).tobytes() == getattr(c, k).tobytes()
    np.testing.assert_array_equal(loaded.gt_dag, scm.gt_dag)
    assert [len(s) for s in splits] == [32, 4, 4]
    assert loaded.header["scm_seed"] == 2


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a corpus")
    with pytest.raises(ValueError):
        load_corpus(p)


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        sample_corpus(default_scm(), 0, seed=0)


# -- polynomial targets ------------------------------------------------------------------

def test_poly_target_orders():
    t = PolyTarget.random(dim=2, order=2, coupling=1.0, seed=0)
    assert t.total_order() == 4
    assert PolyTarget.random(order=2, coupling=0.0).total_order() == 2
    X = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    v = t.viewpoint(X)
    expect = t._eval(t.f_L, X) + t._eval(t.h_L, v[:, None])
    np.testing.assert_allclose(t.lighting(X), expect, atol=1e-15)


def test_poly_target_evaluation_by_hand():
    t = PolyTarget(2, 1, f_V={(1, 0): 2.0}, f_L={(0, 1): -1.0, (0, 0): 0.5}, h_L={(2,): 3.0}, coupling=1.0)
    X = np.array([[0.5, 0.25]])
    # v = 2 * 0.5 = 1; L = -0.25 + 0.5 + 3 * 1^2
    assert t.lighting(X)[0] == pytest.approx(3.25, abs=1e-15)


def test_linear_target_learned_by_both_structures():
    t = PolyTarget.random(dim=2, order=1, coupling=1.0, seed=0)
    r = approx_experiment(t, ApproxConfig(steps=3000), seed=0)
    assert r["mse_independent"] < 1e-4 and r["mse_composed"] < 1e-4


def test_uncoupled_target_structures_comparable():
    t = PolyTarget.random(dim=2, order=2, coupling=0.0, seed=1)
    r = approx_experiment(t, ApproxConfig(steps=2000), seed=1)
    ratio = r["mse_composed"] / r["mse_independent"]
    assert 0.5 <= ratio <= 2.0
