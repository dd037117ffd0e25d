"""Hardware configuration of one accelerator core (one decoder layer per core)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import InvalidArgumentError, ShapeMismatchError
from ..trace import LayerShape

MODULES = ("dcim", "ce", "pu", "qu", "dqu", "buffers", "others")
CIM_BLOCKS = ("Q", "K", "V", "Out", "FC1", "FC2")

# per-core synthesis results for the 125M-class core
DEFAULT_POWER_MW = {
    "dcim": 30880.4604,
    "ce": 100.8504,
    "pu": 0.2147,
    "qu": 51.7940,
    "dqu": 1.5040,
    "buffers": 893.6821,
    "others": 21.6439,
}
DEFAULT_AREA_MM2 = {
    "dcim": 80.5770,
    "ce": 0.9904,
    "pu": 0.0014,
    "qu": 0.1901,
    "dqu": 0.0042,
    "buffers": 1.1952,
    "others": 0.3616,
}


def cim_dims_for(hidden: int, ffn_mult: int = 4) -> dict:
    ffn = hidden * ffn_mult
    return {
        "Q": [hidden, hidden],
        "K": [hidden, hidden],
        "V": [hidden, hidden],
        "Out": [hidden, hidden],
        "FC1": [hidden, ffn],
        "FC2": [ffn, hidden],
    }


class ConfigError(InvalidArgumentError):
    pass


@dataclass(frozen=True)
class HardwareConfig:
    """Core parameters. Units are in the field names; powers in mW, areas in mm^2."""

    frequency_hz: float = 200e6
    power_mw: dict = field(default_factory=lambda: dict(DEFAULT_POWER_MW))
    area_mm2: dict = field(default_factory=lambda: dict(DEFAULT_AREA_MM2))
    num_ces: int = 12
    vpus_per_ce: int = 4
    mus_per_vpu: int = 16
    macs_per_mu: int = 4
    macs_per_ce: int = 256
    pu_parallelism: int = 16
    qu_parallelism: int = 16
    dqu_parallelism: int = 16
    dqu_elements_per_cycle_per_ce: int = 256
    global_buffer_bytes: int = 4 * 1024 * 1024
    sz_buffer_bytes: int = 64 * 1024
    hbm_energy_pj_per_byte: float = 7.0
    hbm_bandwidth_bytes_per_s: float = 256e9
    cim_dims: dict = field(default_factory=lambda: cim_dims_for(768))
    cim_rows_per_pass: int = 256
    cim_input_bits: int = 8
    softmax_cycles_per_token: int = 8
    ce_static_fraction: float = 0.2

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.frequency_hz > 0:
            raise ConfigError("frequency_hz must be positive")
        for name, table in (("power_mw", self.power_mw), ("area_mm2", self.area_mm2)):
            if set(table) != set(MODULES):
                raise ConfigError(f"{name} must have exactly the keys {MODULES}")
            if any(not float(v) >= 0 for v in table.values()):
                raise ConfigError(f"{name} entries must be >= 0")
        ints = ("num_ces", "vpus_per_ce", "mus_per_vpu", "macs_per_mu", "macs_per_ce", "pu_parallelism",
                "qu_parallelism", "dqu_parallelism", "dqu_elements_per_cycle_per_ce", "global_buffer_bytes", "sz_buffer_bytes",
                "cim_rows_per_pass", "cim_input_bits", "softmax_cycles_per_token")
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.macs_per_ce != self.vpus_per_ce * self.mus_per_vpu * self.macs_per_mu:
            raise ConfigError("macs_per_ce must equal vpus_per_ce * mus_per_vpu * macs_per_mu")
        if not self.hbm_energy_pj_per_byte >= 0 or not self.hbm_bandwidth_bytes_per_s > 0:
            raise ConfigError("HBM energy must be >= 0 and bandwidth > 0")
        if not 0 <= self.ce_static_fraction <= 1:
            raise ConfigError("ce_static_fraction must be in [0, 1]")
        if set(self.cim_dims) != set(CIM_BLOCKS):
            raise ConfigError(f"cim_dims must have exactly the keys {CIM_BLOCKS}")
        for name, dims in self.cim_dims.items():
            if len(dims) != 2 or any(not isinstance(d, int) or d < 1 for d in dims):
                raise ConfigError(f"cim_dims[{name}] must be two positive integers")

    @classmethod
    def for_shape(cls, shape: LayerShape, ffn_mult: int = 4, **overrides) -> "HardwareConfig":
        return cls(num_ces=shape.num_heads, cim_dims=cim_dims_for(shape.hidden_dim, ffn_mult), **overrides)

    def check_shape(self, shape: LayerShape):
        h = shape.hidden_dim
        d = self.cim_dims
        problems = []
        for name in ("Q", "K", "V", "Out"):
            if list(d[name]) != [h, h]:
                problems.append(f"{name} is {d[name]}, expected [{h}, {h}]")
        if d["FC1"][0] != h or d["FC2"][1] != h or d["FC1"][1] != d["FC2"][0]:
            problems.append(f"FC1 {d['FC1']} / FC2 {d['FC2']} inconsistent with hidden {h}")
        if self.num_ces != shape.num_heads:
            problems.append(f"num_ces {self.num_ces} != num_heads {shape.num_heads}")
        if problems:
            raise ShapeMismatchError("hardware does not match trace shape: " + "; ".join(problems))

    @property
    def bytes_per_cycle(self) -> float:
        return self.hbm_bandwidth_bytes_per_s / self.frequency_hz

    def cim_cycles(self, block: str) -> int:
        """Cycles for one token's matrix-vector product in a CIM block (bit-serial input)."""
        rows = self.cim_dims[block][0]
        return -(-rows // self.cim_rows_per_pass) * self.cim_input_bits

    def weight_bytes_per_layer(self) -> int:
        return sum(i * o for i, o in self.cim_dims.values())

    def total_power_mw(self) -> float:
        return sum(self.power_mw.values())

    def total_area_mm2(self) -> float:
        return sum(self.area_mm2.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hardware config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_(self, **changes) -> "HardwareConfig":
        return replace(self, **changes)


def load_hardware_config(path) -> HardwareConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"hardware config {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"hardware config {path} is not valid JSON: {exc}") from None
    return HardwareConfig.from_dict(data)


def save_hardware_config(hw: HardwareConfig, path):
    with open(path, "w") as fh:
        json.dump(hw.to_dict(), fh, indent=2)
        fh.write("\n")
