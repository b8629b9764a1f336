import pytest

from vanetauth.crypto import ModelledProvider
from vanetauth.groups import GroupDirectory, GroupService, Road, cell_of
from vanetauth.nodes import Vehicle


class Town:
    """Small fixture world: one road, one provider, a group service."""

    def __init__(self, seed="town", cell_length=300.0):
        self.provider = ModelledProvider(seed)
        self.road = Road("R", 3000.0, {"std": cell_length})
        self.directory = GroupDirectory()
        self.service = GroupService(self.provider, self.road, self.directory)
        self.groups = {}

    def vehicle(self, vid, position):
        return Vehicle(vid, self.provider.gen_keypair(), position=position, speed_class="std")

    def place(self, vehicle, now):
        """Found or join the group of the vehicle's cell; returns (group, transcript)."""
        cell = cell_of(self.road, vehicle.position, vehicle.speed_class)
        group = self.groups.get(cell.group_id)
        if group is None:
            group = self.groups[cell.group_id] = self.service.create_group(cell, vehicle, now)
            return group, []
        return group, self.service.join_group(group, vehicle, now)


@pytest.fixture
def town():
    return Town()
