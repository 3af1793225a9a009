import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmsb.estimation import FitConfig, fit
from mmsb.evaluation import (PHI_BASED, PI_BASED, BruteForceOracle, OracleTooLarge,
                             align_memberships, edge_probabilities, exact_loglik_bruteforce,
                             precision_recall, predict_matrix)
from mmsb.genmodel import Hyperparams, sample_network
from mmsb.netdata import Network, NetworkSet, valid_pairs

# -- prediction ------------------------------------------------------------------------


def test_single_group_prediction_is_constant():
    probs = edge_probabilities(np.ones((4, 1)), Hyperparams(1, 1, [[0.6]], 0.25))
    off = ~np.eye(4, dtype=bool)
    assert np.allclose(probs[off], 0.45) and np.all(np.diag(probs) == 0)


def test_one_hot_memberships_pick_block_cells():
    B = np.array([[0.9, 0.2], [0.3, 0.7]])
    pi = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    probs = edge_probabilities(pi, Hyperparams(2, 1, B, 0.5))
    assert probs[0, 1] == pytest.approx(0.1) and probs[1, 2] == pytest.approx(0.15)
    assert probs[0, 2] == pytest.approx(0.45)


def test_prediction_matches_bilinear_loops(rng):
    K, N = 3, 6
    pi = rng.dirichlet(np.ones(K), N)
    h = Hyperparams(K, 1, rng.random((K, K)), 0.3)
    probs = edge_probabilities(pi, h)
    for p, q in zip(*valid_pairs(N)):
        want = sum((1 - h.rho) * pi[p, g] * h.block_matrix[g, k] * pi[q, k]
                   for g in range(K) for k in range(K))
        assert probs[p, q] == pytest.approx(want, abs=1e-12)


def test_off_simplex_rows_are_rejected():
    with pytest.raises(ValueError, match="row 1"):
        edge_probabilities(np.array([[0.5, 0.5], [0.7, 0.7]]), Hyperparams(2, 1, np.eye(2)))


def test_phi_prediction_needs_retained_phi(small2):
    _, nets, _, _ = small2
    plain = fit(nets, FitConfig(k_groups=2, max_em_iters=3))
    with pytest.raises(ValueError, match="retain_phi"):
        predict_matrix(plain, PHI_BASED)
    kept = fit(nets, FitConfig(k_groups=2, max_em_iters=3, retain_phi=True))
    pm = predict_matrix(kept, PHI_BASED)
    assert pm.mode == PHI_BASED and np.all((pm.probs >= 0) & (pm.probs <= 1))
    assert not np.allclose(pm.probs, predict_matrix(kept, PI_BASED).probs)


def test_predictions_written_at_full_precision(tmp_path):
    pm = predict_matrix(fit(NetworkSet.of(np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]])),
                            FitConfig(k_groups=1, max_em_iters=2)))
    pm.save_csv(tmp_path / "p.csv")
    assert np.array_equal(np.loadtxt(tmp_path / "p.csv", delimiter=","), pm.probs)


# -- precision-recall ------------------------------------------------------------------


def test_perfect_predictor_curve():
    adj = np.array([[0, 1, 0], [0, 0, 1], [1, 1, 0]])
    curve = precision_recall(adj.astype(float), Network(adj))
    achieved = curve.recall > 0
    assert np.all(curve.precision[achieved][curve.thresholds[achieved] > 0] == 1.0)
    assert curve.area == pytest.approx(1.0)


def test_constant_predictor_has_density_precision():
    adj = np.array([[0, 1, 0, 0], [0, 0, 1, 0], [1, 0, 0, 0], [0, 0, 1, 0]])
    curve = precision_recall(np.full((4, 4), 0.3), Network(adj))
    full = curve.recall == 1.0
    assert np.allclose(curve.precision[full], 4 / 12)


def _recount(scores_matrix, adj, thresholds):
    precision, recall = [], []
    pairs = list(zip(*valid_pairs(adj.shape[0])))
    n_pos = sum(adj[p, q] for p, q in pairs)
    for t in thresholds:
        tp = sum(1 for p, q in pairs if scores_matrix[p, q] >= t and adj[p, q])
        predicted = sum(1 for p, q in pairs if scores_matrix[p, q] >= t)
        precision.append(tp / predicted if predicted else 1.0)
        recall.append(tp / n_pos)
    return np.array(precision), np.array(recall)


@given(st.integers(3, 9), st.integers(0, 10_000), st.booleans())
def test_curve_matches_recount(n, seed, coarse):
    rng = np.random.default_rng(seed)
    adj = (rng.random((n, n)) < 0.3).astype(int)
    np.fill_diagonal(adj, 0)
    if adj.sum() == 0:
        adj[0, 1] = 1
    scores = rng.random((n, n))
    if coarse:
        scores = np.round(scores, 1)  # exercise ties
    curve = precision_recall(scores, Network(adj))
    precision, recall = _recount(scores, adj, curve.thresholds)
    assert np.array_equal(curve.precision, precision) and np.array_equal(curve.recall, recall)
    assert 0.0 <= curve.area <= 1.0


def test_curve_on_selected_pairs_and_errors():
    adj = np.array([[0, 1, 0], [0, 0, 0], [1, 0, 0]])
    scores = np.array([[0, 0.9, 0.1], [0.8, 0, 0.2], [0.4, 0.3, 0]])
    curve = precision_recall(scores, Network(adj), thresholds=[0.5], pairs=[[0, 1], [1, 0]])
    assert curve.precision.tolist() == [0.5] and curve.recall.tolist() == [1.0]
    with pytest.raises(ValueError, match="no edges"):
        precision_recall(scores, Network(adj), pairs=[[1, 0]])
    with pytest.raises(ValueError):
        precision_recall(np.zeros((2, 2)), Network(adj))


# -- alignment -----------------------------------------------------------------------


def test_alignment_identity_and_relabeling(rng):
    truth = rng.dirichlet(np.full(4, 0.2), 60)
    same = align_memberships(truth, truth)
    assert same.ari == 1.0 and same.accuracy == 1.0
    assert same.permutation.tolist() == list(range(4))
    sigma = np.array([2, 3, 1, 0])
    relabeled = align_memberships(truth[:, sigma], truth)
    assert relabeled.ari == 1.0 and relabeled.accuracy == 1.0
    assert relabeled.permutation.tolist() == sigma.tolist()


def test_alignment_shape_errors():
    with pytest.raises(ValueError):
        align_memberships(np.ones((3, 2)) / 2, np.ones((3, 3)) / 3)
    with pytest.raises(ValueError):
        align_memberships(np.ones((3, 2)) / 2, np.ones((4, 2)) / 2)


def test_random_labels_score_near_zero():
    rng = np.random.default_rng(8)
    truth = np.eye(4)[rng.integers(0, 4, 200)]
    null = [align_memberships(np.eye(4)[rng.integers(0, 4, 200)], truth).ari for _ in range(300)]
    mu, sd = np.mean(null), np.std(null)
    observed = align_memberships(np.eye(4)[rng.integers(0, 4, 200)], truth).ari
    assert abs(observed) <= 3 * sd and abs(mu) <= 3 * sd / np.sqrt(300)


# -- exact marginal likelihood -----------------------------------------------------------


def _literal_loglik(adj_list, hyper):
    """Sum over every assignment with itertools, Dirichlet integrated in closed form."""
    M, N = len(adj_list), adj_list[0].shape[0]
    K, a = hyper.k_groups, hyper.alpha
    rate = hyper.effective_block
    pairs = list(zip(*valid_pairs(N)))
    slots = [(m, p, q) for m in range(M) for p, q in pairs]
    terms = []
    for z in itertools.product(range(K), repeat=2 * len(slots)):
        counts = np.zeros((N, K))
        lik = 0.0
        for i, (m, p, q) in enumerate(slots):
            g, h = z[2 * i], z[2 * i + 1]
            counts[p, g] += 1
            counts[q, h] += 1
            b = rate[g, h] if adj_list[m][p, q] else 1 - rate[g, h]
            lik += math.log(b) if b > 0 else -math.inf
        for node in range(N):
            lik += math.lgamma(a.sum()) - math.lgamma(a.sum() + counts[node].sum())
            lik += sum(math.lgamma(a[k] + counts[node, k]) - math.lgamma(a[k]) for k in range(K))
        terms.append(lik)
    top = max(terms)
    return top + math.log(sum(math.exp(t - top) for t in terms))


def test_oracle_matches_literal_enumeration(rng):
    for N, K, M in [(2, 2, 1), (3, 2, 1), (2, 2, 2), (2, 3, 1)]:
        adjs = [(rng.random((N, N)) < 0.5).astype(int) * (1 - np.eye(N, dtype=int)) for _ in range(M)]
        h = Hyperparams(K, rng.uniform(0.2, 2, K), rng.uniform(0.05, 0.95, (K, K)), 0.2)
        got = exact_loglik_bruteforce(NetworkSet.of(*adjs), h)
        assert got == pytest.approx(_literal_loglik(adjs, h), rel=1e-12)


def test_oracle_matches_monte_carlo_integral():
    # independent of the Dirichlet-multinomial algebra: integrate pi by sampling
    adj = np.array([[0, 1], [0, 0]])
    h = Hyperparams(2, [0.7, 1.6], [[0.8, 0.1], [0.3, 0.5]], 0.1)
    rng = np.random.default_rng(0)
    S = 400_000
    pi = rng.dirichlet(h.alpha, size=(S, 2))
    rate = np.einsum("sg,gh,sh->s", pi[:, 0], h.effective_block, pi[:, 1])
    back = np.einsum("sg,gh,sh->s", pi[:, 1], h.effective_block, pi[:, 0])
    vals = rate * (1 - back)
    est = np.log(vals.mean())
    se = vals.std() / vals.mean() / np.sqrt(S)
    assert abs(exact_loglik_bruteforce(Network(adj), h) - est) < 4 * se


def test_oracle_single_group_is_plain_likelihood():
    adj = np.array([[0, 1, 1], [0, 0, 0], [1, 0, 0]])
    h = Hyperparams(1, 0.3, [[0.6]], 0.5)
    want = 3 * np.log(0.3) + 3 * np.log(0.7)
    assert exact_loglik_bruteforce(Network(adj), h) == pytest.approx(want, rel=1e-13)


def test_oracle_label_swap_symmetry():
    adj = np.array([[0, 1], [1, 0]])
    B = np.array([[0.7, 0.2], [0.4, 0.6]])
    a = exact_loglik_bruteforce(Network(adj), Hyperparams(2, 0.5, B))
    b = exact_loglik_bruteforce(Network(adj), Hyperparams(2, 0.5, B[::-1, ::-1]))
    assert a == pytest.approx(b, rel=1e-14)


def test_oracle_guard():
    with pytest.raises(OracleTooLarge):
        BruteForceOracle(Network(np.zeros((5, 5))), 2)
    with pytest.raises(OracleTooLarge):
        BruteForceOracle(Network(np.zeros((3, 3))), 2, limit=2 ** 11)
    oracle = BruteForceOracle(Network(np.zeros((3, 3))), 2)
    assert oracle.n_assignments == 2 ** 12
    with pytest.raises(ValueError):
        oracle.loglik(Hyperparams(3, 1, np.eye(3)))


def test_oracle_reusable_across_hyperparameters():
    net = Network(np.array([[0, 1, 0], [1, 0, 0], [0, 1, 0]]))
    oracle = BruteForceOracle(net, 2)
    for B in ([[0.5, 0.1], [0.2, 0.9]], [[0.3, 0.3], [0.3, 0.3]]):
        h = Hyperparams(2, [0.4, 0.9], B, 0.1)
        assert oracle.loglik(h) == pytest.approx(exact_loglik_bruteforce(net, h), rel=1e-14)


@pytest.mark.parametrize("schedule", ["naive", "nested"])
def test_bound_below_evidence_throughout_fit(schedule):
    h = Hyperparams(2, 0.4, [[0.8, 0.1], [0.2, 0.7]])
    nets, _ = sample_network(h, 3, seed=5)
    oracle = BruteForceOracle(nets, 2)
    res = fit(nets, FitConfig(k_groups=2, schedule=schedule, init="uniform", rho_mode="estimate"))
    assert res.checkpoints
    for value, hyper in res.checkpoints:
        assert value <= oracle.loglik(hyper) + 1e-9
