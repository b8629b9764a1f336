"""Differentiated node authentication for vehicular ad hoc networks.

Four services over one simulated highway: identity-based I2V broadcasts,
anonymous key-tree V2I challenge-response, group-key MACs inside a group,
and group signatures between groups.
"""

__version__ = "0.1.0"
