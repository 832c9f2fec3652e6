"""One text config file (INI sections per module) drives the whole stack;
command-line flags override individual values.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .geometry import Transform
from .kinematics import JointSpec, RobotModel
from .motion_filter import FilterConfig
from .supervisor import ForceBand

DEFAULT_COMMAND_PORT = 30200
DEFAULT_BRIDGE_PORT = 30201

# Hover start: probe pointing straight down over the phantom with the
# wrist pitch centred so surface-normal tilts stay inside its range.
DEFAULT_START_CONFIG_DEG = (0.0, 130.0, 0.0, -85.0, 0.0, -45.0, 0.0)
DEFAULT_PHANTOM_CENTER = (560.0, 0.0, 0.0)
DEFAULT_PHANTOM_SEMI_AXES = (150.0, 100.0, 80.0)


def _floats(text: str) -> list:
    return [float(t) for t in text.replace(",", " ").split()]


@dataclass
class ServiceConfig:
    port: int = DEFAULT_COMMAND_PORT
    bridge_port: int = DEFAULT_BRIDGE_PORT
    telemetry_hz: float = 500.0
    heartbeat_hz: float = 10.0
    rtt_gate_ms: float = 8.0
    loss_gate_fraction: float = 0.01
    us_frame_hz: float = 10.0


@dataclass
class PhantomConfig:
    semi_axes: tuple = DEFAULT_PHANTOM_SEMI_AXES
    center: tuple = DEFAULT_PHANTOM_CENTER
    stiffness: float = 1.0
    seed: int = 7


@dataclass
class PlannerConfig:
    sampling_distance: float = 5.0


@dataclass
class SceneConfig:
    start_config_rad: tuple = tuple(math.radians(v) for v in DEFAULT_START_CONFIG_DEG)


@dataclass
class AppConfig:
    robot: RobotModel = field(default_factory=lambda: _default_robot())
    filter: FilterConfig = field(default_factory=FilterConfig)
    band: ForceBand = field(default_factory=ForceBand)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    cloud_file: str = ""   # pre-reconstructed surface; empty = reconstruct live


def _default_robot() -> RobotModel:
    from .kinematics import default_model
    return default_model()


def _robot_from_section(sec) -> RobotModel:
    joints = []
    for i in range(1, 8):
        axis = _floats(sec.get(f"joint{i}.axis", ""))
        offset = _floats(sec.get(f"joint{i}.offset", ""))
        if len(axis) != 3 or len(offset) != 3:
            raise ParameterError(f"joint{i} needs `axis` and `offset` 3-vectors")
        joints.append(JointSpec(np.array(axis), np.array(offset)))
    lower = np.radians(_floats(sec["lower_limits_deg"]))
    upper = np.radians(_floats(sec["upper_limits_deg"]))
    vel = np.radians(_floats(sec["velocity_limits_deg"]))
    tool_t = _floats(sec.get("tool.offset", "0 0 -180"))
    model = RobotModel(
        tuple(joints), lower, upper, vel,
        Transform(np.eye(3), np.array(tool_t)),
        reach_min_mm=sec.getfloat("reach_min_mm", 150.0),
        reach_max_mm=sec.getfloat("reach_max_mm", 1500.0),
        sigma_min_threshold=sec.getfloat("sigma_min_threshold", 0.01),
        char_length_mm=sec.getfloat("char_length_mm", 400.0),
    )
    return model


def load_config(path: str | None = None) -> AppConfig:
    """Defaults, optionally overridden section by section from a file."""
    cfg = AppConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ParameterError(f"config file {path!r} not readable")

    if parser.has_section("robot"):
        cfg.robot = _robot_from_section(parser["robot"])
    if parser.has_section("filter"):
        s = parser["filter"]
        cfg.filter = FilterConfig(
            cone_half_angle=math.radians(s.getfloat("cone_half_angle_deg", 30.0)),
            v_lin_max=s.getfloat("v_lin_max_mm_s", 20.0),
            v_ang_max_deg=s.getfloat("v_ang_max_deg_s", 30.0),
            a_lin_max=s.getfloat("a_lin_max_mm_s2", 100.0),
            a_ang_max_deg=s.getfloat("a_ang_max_deg_s2", 150.0),
            smoothing_alpha=s.getfloat("smoothing_alpha", 0.5),
            control_period=s.getfloat("control_period_s", 0.002),
        )
    if parser.has_section("force"):
        s = parser["force"]
        cfg.band = ForceBand(f_contact=s.getfloat("f_contact_n", 2.0),
                             f_max=s.getfloat("f_max_n", 5.0))
    if parser.has_section("phantom"):
        s = parser["phantom"]
        cfg.phantom = PhantomConfig(
            semi_axes=tuple(_floats(s.get("semi_axes_mm", "150 100 80"))),
            center=tuple(_floats(s.get("center_mm", "560 0 0"))),
            stiffness=s.getfloat("stiffness_n_mm", 1.0),
            seed=s.getint("seed", 7),
        )
    if parser.has_section("planner"):
        cfg.planner = PlannerConfig(
            sampling_distance=parser["planner"].getfloat("sampling_distance_mm", 5.0))
    if parser.has_section("scene"):
        start = _floats(parser["scene"].get(
            "start_config_deg", " ".join(str(v) for v in DEFAULT_START_CONFIG_DEG)))
        cfg.scene = SceneConfig(start_config_rad=tuple(math.radians(v) for v in start))
    if parser.has_section("service"):
        s = parser["service"]
        cfg.service = ServiceConfig(
            port=s.getint("port", DEFAULT_COMMAND_PORT),
            bridge_port=s.getint("bridge_port", DEFAULT_BRIDGE_PORT),
            telemetry_hz=s.getfloat("telemetry_hz", 500.0),
            heartbeat_hz=s.getfloat("heartbeat_hz", 10.0),
            rtt_gate_ms=s.getfloat("rtt_gate_ms", 8.0),
            loss_gate_fraction=s.getfloat("loss_gate_fraction", 0.01),
            us_frame_hz=s.getfloat("us_frame_hz", 10.0),
        )
    if parser.has_section("io"):
        cfg.cloud_file = parser["io"].get("cloud_file", "")
    return cfg


def write_default_config(path) -> None:
    """Emit a fully commented config with every default value."""
    lines = [
        "# sonoarm configuration (defaults shown; flags override)",
        "",
        "[filter]",
        "cone_half_angle_deg = 30.0",
        "v_lin_max_mm_s = 20.0",
        "v_ang_max_deg_s = 30.0",
        "a_lin_max_mm_s2 = 100.0",
        "a_ang_max_deg_s2 = 150.0",
        "smoothing_alpha = 0.5",
        "control_period_s = 0.002",
        "",
        "[force]",
        "f_contact_n = 2.0",
        "f_max_n = 5.0",
        "",
        "[phantom]",
        "semi_axes_mm = 150 100 80",
        "center_mm = 560 0 0",
        "stiffness_n_mm = 1.0",
        "seed = 7",
        "",
        "[planner]",
        "sampling_distance_mm = 5.0",
        "",
        "[scene]",
        "start_config_deg = " + " ".join(str(v) for v in DEFAULT_START_CONFIG_DEG),
        "",
        "[service]",
        f"port = {DEFAULT_COMMAND_PORT}",
        f"bridge_port = {DEFAULT_BRIDGE_PORT}",
        "telemetry_hz = 500.0",
        "heartbeat_hz = 10.0",
        "rtt_gate_ms = 8.0",
        "loss_gate_fraction = 0.01",
        "us_frame_hz = 10.0",
        "",
        "[io]",
        "cloud_file =",
        "",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
