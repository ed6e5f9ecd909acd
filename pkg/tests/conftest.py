import pytest

from ridepool.network import RoadNetwork


def line_network(n=4, length=1000.0):
    """Two-way line 0 - 1 - ... - n-1."""
    links = []
    for i in range(n - 1):
        links += [(i, i + 1, length), (i + 1, i, length)]
    return RoadNetwork(links)


@pytest.fixture
def line():
    return line_network()
