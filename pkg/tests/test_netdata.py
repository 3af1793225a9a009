import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsb.netdata import (EXCLUDED, INCLUDED, InputError, Network, NetworkSet, PairMask,
                          check_partition, density, load_masks, load_network, pair_data,
                          reorder_by_membership, save_masks, save_network, split_folds,
                          valid_pairs)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_dense_csv_three_cycle(tmp_path):
    net = load_network(write(tmp_path, "a.csv", "0,1,0\n0,0,1\n1,0,0\n"))
    assert net.n_nodes == 3 and net.n_edges == 3
    assert net.adjacency[0, 1] == net.adjacency[1, 2] == net.adjacency[2, 0] == 1


def test_empty_edge_list_with_declared_size(tmp_path):
    net = load_network(write(tmp_path, "e.tsv", "N=5\n"), "edge_list_tsv")
    assert net.n_nodes == 5 and net.n_edges == 0


def test_edge_list_rejects_value_two(tmp_path):
    with pytest.raises(InputError, match="non-binary"):
        load_network(write(tmp_path, "e.tsv", "N=3\n0\t1\t2\n"), "edge_list_tsv")


def test_edge_list_out_of_range_reports_location(tmp_path):
    with pytest.raises(InputError, match="line 3, column 1"):
        load_network(write(tmp_path, "e.tsv", "N=3\n0\t1\n1\t7\n"), "edge_list_tsv")


def test_dense_csv_errors_name_row_and_column(tmp_path):
    with pytest.raises(InputError, match="row 1 has 2 columns"):
        load_network(write(tmp_path, "r.csv", "0,1,0\n0,1\n1,0,0\n"))
    with pytest.raises(InputError, match="row 2, column 1"):
        load_network(write(tmp_path, "v.csv", "0,1,0\n0,0,1\n1,x,0\n"))


def test_missing_header_rejected(tmp_path):
    with pytest.raises(InputError, match="header"):
        load_network(write(tmp_path, "e.tsv", "0\t1\n"), "edge_list_tsv")


def test_self_edge_needs_included_policy():
    adj = np.eye(3, dtype=int)
    with pytest.raises(InputError, match="self-edge"):
        Network(adj)
    assert Network(adj, INCLUDED).n_edges == 3


def test_replicates_must_agree():
    with pytest.raises(InputError):
        NetworkSet((Network(np.zeros((3, 3))), Network(np.zeros((4, 4)))))


def test_valid_pairs_row_major():
    p, q = valid_pairs(3)
    assert list(zip(p, q)) == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
    assert len(valid_pairs(3, INCLUDED)[0]) == 9


def test_density_examples():
    full = np.ones((3, 3)) - np.eye(3)
    assert density(Network(full)) == 1.0
    assert density(Network(np.zeros((3, 3)))) == 0.0
    assert density(NetworkSet.of(full, np.zeros((3, 3)))) == 0.5


def test_three_folds_of_six_pairs():
    masks = split_folds(Network(np.zeros((3, 3))), 3, seed=0)
    assert [len(m) for m in masks] == [2, 2, 2]


def test_folds_deterministic():
    net = Network((np.random.default_rng(1).random((8, 8)) < 0.3) * (1 - np.eye(8)))
    a, b = split_folds(net, 4, seed=5), split_folds(net, 4, seed=5)
    assert all(np.array_equal(x.held_out, y.held_out) for x, y in zip(a, b))


def test_stratified_counts():
    # 10 edges and 32 non-edges (7 nodes); no directed graph has exactly 40 pairs
    adj = np.zeros((7, 7), dtype=int)
    p, q = valid_pairs(7)
    adj[p[:10], q[:10]] = 1
    net = Network(adj)
    masks = split_folds(net, 5, seed=3)
    edges = [int(adj[m.held_out[:, 0], m.held_out[:, 1]].sum()) for m in masks]
    non = [len(m) - e for m, e in zip(masks, edges)]
    assert edges == [2] * 5
    assert max(non) - min(non) <= 1 and sum(non) == 32


def test_fold_errors():
    net = Network(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        split_folds(net, 1, 0)
    with pytest.raises(ValueError):
        split_folds(net, 3, 0)


@given(n=st.integers(2, 9), k=st.integers(2, 6), seed=st.integers(0, 10_000),
       dens=st.floats(0, 1))
def test_folds_partition_valid_pairs(n, k, seed, dens):
    rng = np.random.default_rng(seed)
    adj = (rng.random((n, n)) < dens) * (1 - np.eye(n, dtype=int))
    net = Network(adj)
    if n * (n - 1) < k:
        return
    masks = split_folds(net, k, seed)
    assert check_partition(masks, net)
    edge_counts = [int(adj[m.held_out[:, 0], m.held_out[:, 1]].sum()) for m in masks]
    assert max(edge_counts) - min(edge_counts) <= 1


def test_mask_json_roundtrip(tmp_path):
    masks = split_folds(Network(np.zeros((4, 4))), 3, 0)
    save_masks(masks, tmp_path / "m.json")
    back = load_masks(tmp_path / "m.json")
    assert all(np.array_equal(a.held_out, b.held_out) for a, b in zip(masks, back))


def test_pair_data_drops_held_out_pairs():
    adj = np.ones((3, 3), dtype=int) - np.eye(3, dtype=int)
    pd = pair_data(Network(adj), PairMask([[0, 1], [2, 0]]))
    assert (0, 1) not in set(zip(pd.p, pd.q)) and pd.n_pairs == 4
    # node 0 lost one outgoing and one incoming slot
    assert pd.slots[0] == 2


def test_reorder_identity_and_swap():
    net = Network(np.array([[0, 1], [0, 0]]))
    _, perm = reorder_by_membership(net, np.eye(2))
    assert perm.tolist() == [0, 1]
    out, perm = reorder_by_membership(net, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert perm.tolist() == [1, 0]
    assert out.adjacency.tolist() == [[0, 0], [1, 0]]


def test_reorder_tie_goes_to_lower_group():
    net = Network(np.zeros((2, 2)))
    _, perm = reorder_by_membership(net, np.array([[0.2, 0.8], [0.5, 0.5]]))
    assert perm.tolist() == [1, 0]


def test_reorder_rejects_off_simplex():
    with pytest.raises(ValueError, match="simplex"):
        reorder_by_membership(Network(np.zeros((2, 2))), np.array([[0.5, 0.6], [1, 0]]))


@given(arrays(np.int8, (6, 6), elements=st.integers(0, 1)), st.integers(0, 1000))
def test_reorder_is_permutation_similarity(adj, seed):
    np.fill_diagonal(adj, 0)
    net = Network(adj)
    memb = np.random.default_rng(seed).dirichlet(np.ones(3), size=6)
    out, perm = reorder_by_membership(net, memb)
    P = np.eye(6, dtype=int)[perm]
    assert np.array_equal(out.adjacency, P @ adj @ P.T)


@given(arrays(np.int8, (5, 5), elements=st.integers(0, 1)),
       st.sampled_from(["dense_csv", "edge_list_tsv"]), st.sampled_from([EXCLUDED, INCLUDED]))
def test_save_load_roundtrip(tmp_path_factory, adj, fmt, policy):
    if policy == EXCLUDED:
        np.fill_diagonal(adj, 0)
    net = Network(adj, policy)
    path = tmp_path_factory.mktemp("rt") / "net"
    save_network(net, path, fmt)
    assert load_network(path, fmt, policy) == net
