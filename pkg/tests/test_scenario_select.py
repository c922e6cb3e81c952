import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from scipy.stats import multivariate_normal

from tsb_monitor.core.exceptions import ContractError, FitError
from tsb_monitor.models.domain import McgRanking, OperatingPoint, Partition
from tsb_monitor.services.scenario_select import (
    ari,
    build_sensitivity_matrix,
    cluster_contingencies,
    cluster_ops,
    fit_cluster_gaussian,
    gaussian_from_moments,
    log_density,
    match_op,
    rank_mcg,
    select_representatives,
    spearman_matrix,
    spectral_cluster,
)
from tests.conftest import LinearIndexEvaluator

labelings = st.lists(st.integers(min_value=0, max_value=3), min_size=2, max_size=12)


def _block_affinity(sizes, inside=1.0, across=0.01):
    n = sum(sizes)
    w = np.full((n, n), across)
    start = 0
    for size in sizes:
        w[start : start + size, start : start + size] = inside
        start += size
    return w


def test_rank_correlation_values():
    rows = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 2.0, 1.0], [1.0, 3.0, 2.0]])
    sc = spearman_matrix(rows)
    assert sc[0, 1] == pytest.approx(1.0)
    assert sc[0, 2] == pytest.approx(-1.0)
    assert sc[0, 3] == pytest.approx(0.5)
    np.testing.assert_allclose(sc, sc.T)


def test_constant_row_is_uncorrelated():
    sc = spearman_matrix(np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]]))
    assert sc[0, 1] == 0.0
    np.testing.assert_array_equal(np.diag(sc), [1.0, 1.0])


def test_rank_correlation_needs_two_components():
    with pytest.raises(ContractError):
        spearman_matrix(np.ones((3, 1)))


@hyp_settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000), n=st.integers(min_value=2, max_value=8))
def test_rank_correlation_is_bounded_and_symmetric(seed, n):
    rows = np.random.default_rng(seed).integers(-3, 4, size=(n, 4)).astype(float)
    sc = spearman_matrix(rows)
    np.testing.assert_allclose(sc, sc.T)
    np.testing.assert_array_equal(np.diag(sc), np.ones(n))
    assert np.all(np.abs(sc) <= 1.0)


def test_spectral_clustering_recovers_blocks():
    partition = spectral_cluster(_block_affinity([4, 3, 5]))
    assert partition.k == 3
    expected = np.repeat([0, 1, 2], [4, 3, 5])
    np.testing.assert_array_equal(partition.assignments, expected)
    assert partition.eigenvalues[0] == pytest.approx(0.0, abs=1e-9)


def test_cluster_count_raised_to_components():
    partition = spectral_cluster(_block_affinity([3, 3, 3], across=0.0), k=2)
    assert partition.k == 3


def test_single_cluster_request():
    partition = spectral_cluster(_block_affinity([2, 2]), k=1)
    assert partition.k == 1
    np.testing.assert_array_equal(partition.assignments, np.zeros(4))


@pytest.mark.parametrize(
    "affinity, k",
    [(-np.eye(3), None), (np.ones((2, 3)), None), (np.ones((3, 3)), 4), (np.ones((3, 3)), 0)],
    ids=["negative", "non-square", "k-too-large", "k-zero"],
)
def test_spectral_clustering_rejects(affinity, k):
    with pytest.raises(ContractError):
        spectral_cluster(affinity, k)


def test_clustering_is_reproducible():
    w = _block_affinity([4, 4], across=0.3)
    a = spectral_cluster(w, seed=3)
    b = spectral_cluster(w, seed=3)
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_ari_identity_and_relabeling():
    p = [0, 0, 1, 1, 2, 2]
    assert ari(p, p) == 1.0
    assert ari(p, [2, 2, 0, 0, 1, 1]) == pytest.approx(1.0)
    assert ari(p, [0, 1, 0, 1, 0, 1]) < 0.0
    with pytest.raises(ContractError):
        ari(p, [0, 1])


@hyp_settings(max_examples=50, deadline=None)
@given(labelings, st.data())
def test_ari_properties(p, data):
    q = data.draw(st.lists(st.integers(min_value=0, max_value=3), min_size=len(p), max_size=len(p)))
    assert ari(p, p) == pytest.approx(1.0)
    assert ari(p, q) == pytest.approx(ari(q, p))
    assert ari(p, q) <= 1.0 + 1e-12


def test_ari_of_random_partitions_averages_zero():
    rng = np.random.default_rng(0)
    values = [ari(rng.integers(0, 3, 60), rng.integers(0, 3, 60)) for _ in range(200)]
    assert abs(np.mean(values)) < 0.02


def test_planted_gradient_patterns_split_operating_points():
    rng = np.random.default_rng(4)
    descending = np.array([4.0, 3.0, 2.0, 1.0])
    rows = [descending * (1.0 + 0.05 * rng.random()) for _ in range(5)]
    rows += [descending[::-1] * (1.0 + 0.05 * rng.random()) for _ in range(5)]
    partition = cluster_ops(np.array(rows))
    assert partition.k == 2
    np.testing.assert_array_equal(partition.assignments, np.repeat([0, 1], 5))


def test_contingency_grouping():
    p1 = Partition(np.array([0, 0, 1, 1, 2, 2]), 3)
    p2 = Partition(np.array([0, 1, 0, 1, 0, 1]), 2)
    grouped = cluster_contingencies([p1, p1, p2, p2])
    assert grouped.k == 2
    np.testing.assert_array_equal(grouped.assignments, [0, 0, 1, 1])


def test_identical_partitions_form_one_group():
    p = Partition(np.array([0, 1, 1, 0]), 2)
    grouped = cluster_contingencies([p, p, p])
    assert grouped.k == 1
    assert cluster_contingencies([p]).k == 1
    with pytest.raises(ContractError):
        cluster_contingencies([])


def test_representatives_prefer_unstable_members():
    partition = Partition(np.array([0, 0, 1, 1, 1]), 2)
    reps = select_representatives(partition, [5.0, 2.0, 3.0, 7.0, 1.0], [1, 1, 1, -1, -1])
    assert reps == [1, 3]
    assert select_representatives(Partition(np.zeros(2, dtype=int), 1), [2.0, 2.0]) == [0]
    with pytest.raises(ContractError):
        select_representatives(partition, [1.0, 2.0])


def test_gaussian_of_square_lattice():
    g = fit_cluster_gaussian(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]), cluster_id=4)
    np.testing.assert_allclose(g.mu, [1.0, 1.0])
    np.testing.assert_allclose(g.sigma, np.eye(2), atol=1e-5)
    assert g.cluster_id == 4
    with pytest.raises(FitError):
        fit_cluster_gaussian(np.array([[1.0, 1.0]]))


def test_log_density_matches_reference():
    g = gaussian_from_moments(np.array([1.0, -2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    u = np.array([0.5, -1.0])
    expected = multivariate_normal(mean=g.mu, cov=g.sigma).logpdf(u)
    assert log_density(g, u) == pytest.approx(expected)


def test_match_picks_likeliest_cluster():
    near = gaussian_from_moments(np.zeros(2), np.eye(2), cluster_id=0)
    far = gaussian_from_moments(np.full(2, 10.0), np.eye(2), cluster_id=1)
    ranking = McgRanking(cluster_id=1, ranked_generators=(1, 0), top_k=1)
    assert match_op(np.array([9.0, 9.0]), [far, near], [ranking]) == (1, (1,))
    assert match_op(np.array([0.5, 0.0]), [near, far], [ranking]) == (0, ())


def test_match_ties_go_to_lowest_id():
    a = gaussian_from_moments(np.zeros(2), np.eye(2), cluster_id=2)
    b = gaussian_from_moments(np.zeros(2), np.eye(2), cluster_id=5)
    assert match_op(np.array([1.0, 1.0]), [b, a])[0] == 2


def test_match_rejects_bad_input():
    g = gaussian_from_moments(np.zeros(2), np.eye(2))
    with pytest.raises(ContractError):
        match_op(np.array([1.0, 2.0, 3.0]), [g])
    with pytest.raises(ContractError):
        match_op(np.array([1.0, 2.0]), [])
    with pytest.raises(ContractError):
        match_op(np.array([np.nan, 2.0]), [g])


def test_mcg_ranking():
    assert rank_mcg(np.array([[0.0, 5.0, 1.0]])).top == (1, 2)
    assert rank_mcg(np.array([[0.0, -5.0, 1.0], [0.0, 1.0, -3.0]])).ranked_generators == (1, 2, 0)
    assert rank_mcg(np.array([[1.0, 1.0, 0.0]])).ranked_generators == (0, 1, 2)
    assert rank_mcg(np.array([[1.0, 2.0]]), top_k=5).top == (1, 0)


def test_sensitivity_rows_exclude_infeasible(case9, contingency9, sim_cfg):
    evaluator = LinearIndexEvaluator([1.0, 2.0], 300.0, [300.0, 300.0], contingency_id=contingency9.id)
    ops = [OperatingPoint(np.array(u), np.ones(3)) for u in ([50.0, 50.0], [400.0, 0.0], [200.0, 200.0])]
    psi = build_sensitivity_matrix(case9, ops, contingency9, sim_cfg, evaluator=evaluator)
    assert psi.excluded == (1,)
    assert psi.rows.shape == (2, 2)
    np.testing.assert_array_equal(psi.lambdas, [1, -1])
    assert len(set(psi.op_refs)) == 2
    with pytest.raises(FitError):
        build_sensitivity_matrix(case9, ops[:2], contingency9, sim_cfg, evaluator=evaluator)
