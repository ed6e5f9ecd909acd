import numpy as np
import pytest

from ridepool.network import (ODPair, RoadNetwork, UnreachableError, grid_network, load_network,
                              save_network)


def test_grid_distance_is_manhattan():
    g = grid_network(4, 5, 500.0)
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = (int(x) for x in rng.integers(0, 20, 2))
        ra, ca = divmod(a, 5)
        rb, cb = divmod(b, 5)
        assert g.shortest_distance(a, b) == 500.0 * (abs(ra - rb) + abs(ca - cb))


def test_path_tie_break_is_lexicographic():
    g = grid_network(3, 3, 100.0)
    # 0 -> 4 can go via 1 or 3; the smaller successor wins
    assert g.shortest_path(0, 4) == (0, 1, 4)
    assert g.shortest_path(8, 0) == (8, 5, 2, 1, 0)
    assert g.shortest_path_links(0, 2) == [(0, 1), (1, 2)]


def test_path_and_distance_agree():
    g = grid_network(5, 5, 333.3)
    for o in (0, 7, 24):
        for d in (3, 12, 20):
            links = g.shortest_path_links(o, d)
            assert g.shortest_distance(o, d) == sum(g.link_length(*l) for l in links)


def test_trivial_path_and_self_distance():
    g = grid_network(2, 2, 10.0)
    assert g.shortest_path(3, 3) == (3,)
    assert g.shortest_distance(3, 3) == 0.0


def test_unreachable_and_unknown_nodes():
    net = RoadNetwork([(0, 1, 5.0), (2, 1, 5.0)])
    with pytest.raises(UnreachableError):
        net.shortest_path(1, 0)
    with pytest.raises(KeyError):
        net.shortest_distance(0, 99)
    assert np.isinf(net.distance_matrix[net.index[1], net.index[0]])
    assert not net.is_strongly_connected()


@pytest.mark.parametrize("links", [[(0, 1, 0.0)], [(0, 1, -3.0)], [(2, 2, 10.0)]])
def test_invalid_links_rejected(links):
    with pytest.raises(ValueError):
        RoadNetwork(links)


def test_link_time_uses_speed():
    net = RoadNetwork([(0, 1, 250.0)], speed=10.0)
    assert net.link_time(0, 1) == 25.0


def test_distance_matrix_read_only():
    g = grid_network(2, 3, 1.0)
    with pytest.raises(ValueError):
        g.distance_matrix[0, 0] = 5.0


def test_csv_round_trip(tmp_path):
    g = grid_network(3, 4, 123.456)
    save_network(g, tmp_path / "n.csv", tmp_path / "l.csv")
    h = load_network(tmp_path / "n.csv", tmp_path / "l.csv")
    assert h.links == g.links
    assert h.nodes == g.nodes
    assert h.coords == g.coords


def test_string_node_ids_and_bad_csv(tmp_path):
    (tmp_path / "n.csv").write_text("node_id\na\nb\n")
    (tmp_path / "l.csv").write_text("tail,head,length_m\na,b,10\nb,a,oops\n")
    with pytest.raises(ValueError, match="l.csv:3"):
        load_network(tmp_path / "n.csv", tmp_path / "l.csv")
    (tmp_path / "l.csv").write_text("tail,head\na,b\n")
    with pytest.raises(ValueError, match="missing columns"):
        load_network(tmp_path / "n.csv", tmp_path / "l.csv")


def test_odpair_carries_path_but_compares_by_key():
    g = grid_network(2, 2, 1.0)
    od = ODPair.on(g, 0, 3)
    assert od.path == ((0, 1), (1, 3))
    assert od == ODPair(0, 3)
    assert od.key == (0, 3)


def test_nearest_node_snapping():
    g = grid_network(2, 2, 100.0)
    assert g.nearest_node(95.0, 4.0, 10.0) == 1
    assert g.nearest_node(50.0, 50.0, 10.0) is None
