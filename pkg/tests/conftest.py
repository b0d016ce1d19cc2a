import numpy as np
import pytest

from racekit import track as rtrack
from racekit.simulator import SimConfig


@pytest.fixture(scope="session")
def circle10():
    return rtrack.make_circle_track(radius=10.0, width=3.0, n_points=360)


@pytest.fixture(scope="session")
def stadium():
    return rtrack.make_stadium_track(length=60.0, width=3.0)


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


def make_room_track(half: float = 4.0) -> rtrack.TrackModel:
    """A square room of side 2*half centered at the origin, built as a raw
    TrackModel so the raycaster and collision checker see exactly one wall."""
    room = np.array([[half, half], [-half, half], [-half, -half], [half, -half]])
    segments = np.stack([room, np.roll(room, -1, axis=0)], axis=1)
    arc = np.array([0.0, 2.0, 4.0, 6.0, 8.0]) * half
    return rtrack.TrackModel(
        xy=room, w_right=np.full(4, 0.1), w_left=np.full(4, 0.1),
        inner_boundary=room, outer_boundary=room,
        arc_table=arc, total_length=8.0 * half,
        normals=np.zeros((4, 2)), boundary_segments=segments,
    )


@pytest.fixture(scope="session")
def room():
    return make_room_track()
