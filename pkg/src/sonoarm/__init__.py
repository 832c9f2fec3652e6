"""Desk-scale simulator and control core for robot-assisted antenatal
ultrasound scanning: surface reconstruction from noisy multi-view point
clouds, filtered tele-steering of a simulated 7-DOF arm under force
supervision, and autonomous execution of the six standard scan patterns.
"""

__version__ = "0.1.0"

from .geometry import Pose, Transform, Twist  # noqa: F401
from .kinematics import Jacobian, RobotModel, WrenchReading, default_model  # noqa: F401
from .pointcloud import IcpParams, PointCloud, RansacParams  # noqa: F401
