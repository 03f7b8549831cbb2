"""Static network data, nodal admittance assembly and line switching.

All quantities are per unit on the system MVA base. Bus ids are dense and
1-based in the data model; arrays produced here are indexed by ``id - 1``.

Fixture schema (JSON)::

    {
      "meta":       {free-form provenance strings},
      "base_mva":   100.0,
      "frequency_hz": 60.0,
      "buses":      [{"id", "kind" (slack|generator|load), "v_set",
                      "p_load", "q_load", ["g_shunt", "b_shunt"]}],
      "branches":   [{"from", "to", "r", "x", "b", ["ratio", "in_service"]}],
      "generators": [{"bus", "inertia", "damping", "p_set",
                      "xd_prime", ["xq_prime"]}]
    }

Keys outside this schema are rejected.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegeneracyError, InputError, TopologyError

BUS_KINDS = ("slack", "generator", "load")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_set: float = 1.0
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    ratio: float = 1.0
    in_service: bool = True

    def connects(self, a: int, b: int) -> bool:
        return {self.from_bus, self.to_bus} == {a, b}


@dataclass(frozen=True)
class Generator:
    bus: int
    inertia: float
    damping: float
    p_set: float
    xd_prime: float
    xq_prime: float
    e_q: float | None = None
    p_m: float | None = None


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense nodal admittance matrix stored in rectangular form."""

    matrix: np.ndarray
    loads_folded: bool = False

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.matrix)

    @property
    def angle(self) -> np.ndarray:
        return np.angle(self.matrix)

    @property
    def G(self) -> np.ndarray:
        return self.matrix.real

    @property
    def B(self) -> np.ndarray:
        return self.matrix.imag


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    frequency_hz: float = 60.0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @property
    def gen_bus_index(self) -> np.ndarray:
        return np.array([g.bus - 1 for g in self.generators], dtype=np.intp)

    @property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    @property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    def find_branch(self, pair: Sequence[int]) -> int:
        a, b = pair
        for k, br in enumerate(self.branches):
            if br.connects(a, b):
                return k
        raise InputError(f"no branch between buses {a} and {b}")

    def validate(self) -> "NetworkModel":
        ids = [b.id for b in self.buses]
        if ids != list(range(1, len(ids) + 1)):
            raise DataError("bus ids must be dense 1..m in order")
        kinds = [b.kind for b in self.buses]
        bad = [k for k in kinds if k not in BUS_KINDS]
        if bad:
            raise DataError(f"unknown bus kind(s) {bad}")
        if kinds.count("slack") != 1:
            raise DataError("exactly one slack bus is required")
        m = len(ids)
        for br in self.branches:
            if br.from_bus == br.to_bus:
                raise DataError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
            if not (1 <= br.from_bus <= m and 1 <= br.to_bus <= m):
                raise DataError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.x == 0.0:
                raise DataError(f"branch {br.from_bus}-{br.to_bus} has zero series reactance")
            if br.ratio <= 0.0:
                raise DataError(f"branch {br.from_bus}-{br.to_bus} has non-positive ratio")
        for g in self.generators:
            if not 1 <= g.bus <= m:
                raise DataError(f"generator on unknown bus {g.bus}")
            if self.buses[g.bus - 1].kind == "load":
                raise DataError(f"generator on load bus {g.bus}")
            if g.inertia <= 0 or g.damping < 0 or g.xd_prime <= 0 or g.xq_prime <= 0:
                raise DataError(f"invalid machine constants at bus {g.bus}")
        gen_buses = {g.bus for g in self.generators}
        for b in self.buses:
            if b.kind != "load" and b.id not in gen_buses:
                raise DataError(f"{b.kind} bus {b.id} has no generator")
        check_connected(self)
        return self


def check_connected(net: NetworkModel) -> None:
    m = net.n_bus
    adj: list[list[int]] = [[] for _ in range(m)]
    for br in net.branches:
        if br.in_service:
            adj[br.from_bus - 1].append(br.to_bus - 1)
            adj[br.to_bus - 1].append(br.from_bus - 1)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    if len(seen) != m:
        missing = sorted(i + 1 for i in set(range(m)) - seen)
        raise TopologyError(f"network disconnected; unreachable buses {missing}")


def branch_stamp(br: Branch, m: int) -> np.ndarray:
    """Admittance contribution of a single branch (off-nominal tap on the from side)."""
    if br.r == 0.0 and br.x == 0.0:
        raise DataError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
    y = 1.0 / complex(br.r, br.x)
    f, t = br.from_bus - 1, br.to_bus - 1
    tap = br.ratio
    Y = np.zeros((m, m), dtype=complex)
    Y[f, f] += y / tap**2 + 0.5j * br.b
    Y[t, t] += y + 0.5j * br.b
    Y[f, t] -= y / tap
    Y[t, f] -= y / tap
    return Y


def build_ybus(net: NetworkModel, include_loads: bool = False,
               load_voltages: np.ndarray | None = None,
               load_shunts: np.ndarray | None = None) -> AdmittanceMatrix:
    """Assemble the nodal admittance matrix from in-service branches and shunts.

    With ``include_loads`` each bus load is folded in as the constant
    admittance ``(P - jQ)/|V|**2``; pass either the voltages at which loads are
    converted or precomputed ``load_shunts``.
    """
    check_connected(net)
    m = net.n_bus
    Y = np.zeros((m, m), dtype=complex)
    for br in net.branches:
        if br.in_service:
            Y += branch_stamp(br, m)
    Y[np.diag_indices(m)] += np.array([complex(b.g_shunt, b.b_shunt) for b in net.buses])
    if include_loads:
        if load_shunts is None:
            if load_voltages is None:
                raise InputError("include_loads requires load_voltages or load_shunts")
            load_shunts = load_admittances(net.p_load, net.q_load, load_voltages)
        Y[np.diag_indices(m)] += load_shunts
    if not np.all(np.isfinite(Y)):
        raise DataError("admittance matrix is not finite")
    return AdmittanceMatrix(Y, loads_folded=include_loads)


def load_admittances(p: np.ndarray, q: np.ndarray, vm: np.ndarray) -> np.ndarray:
    vm = np.asarray(vm, dtype=float)
    loaded = (np.asarray(p) != 0) | (np.asarray(q) != 0)
    if np.any(vm[loaded] < 0.1):
        raise DegeneracyError("load bus voltage below 0.1 pu; impedance conversion unreliable")
    return (np.asarray(p) - 1j * np.asarray(q)) / vm**2


def loads_to_admittance(solution, net: NetworkModel) -> np.ndarray:
    """Constant-impedance equivalents of the loads at a power-flow solution."""
    return load_admittances(solution.p_load, solution.q_load, solution.vm)


def apply_switching(net: NetworkModel, pair: Sequence[int]) -> NetworkModel:
    """Return a copy of ``net`` with the branch between ``pair`` taken out of service."""
    k = net.find_branch(pair)
    br = net.branches[k]
    if not br.in_service:
        raise InputError(f"branch {pair[0]}-{pair[1]} is already out of service")
    branches = list(net.branches)
    branches[k] = replace(br, in_service=False)
    out = replace(net, branches=tuple(branches))
    check_connected(out)
    return out


def with_generators(net: NetworkModel, gens: Iterable[Generator]) -> NetworkModel:
    return replace(net, generators=tuple(gens))


def scale_damping(net: NetworkModel, factor: float) -> NetworkModel:
    return with_generators(net, (replace(g, damping=g.damping * factor) for g in net.generators))


# --------------------------------------------------------------------------- io

_TOP_KEYS = {"meta", "base_mva", "frequency_hz", "buses", "branches", "generators"}
_BUS_KEYS = {"id", "kind", "v_set", "p_load", "q_load", "g_shunt", "b_shunt"}
_BRANCH_KEYS = {"from", "to", "r", "x", "b", "ratio", "in_service"}
_GEN_KEYS = {"bus", "inertia", "damping", "p_set", "xd_prime", "xq_prime"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _need(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except KeyError:
        raise ConfigError(f"{where}: missing key '{key}'") from None


def network_from_dict(data: dict, validate: bool = True) -> NetworkModel:
    """Build a network from its JSON object. ``validate=False`` skips the data checks
    (schema errors still raise) so diagnostics can inspect a broken fixture."""
    _check_keys(data, _TOP_KEYS, "network")
    buses, branches, gens = [], [], []
    for i, b in enumerate(_need(data, "buses", "network")):
        where = f"buses[{i}]"
        _check_keys(b, _BUS_KEYS, where)
        buses.append(Bus(id=int(_need(b, "id", where)), kind=str(_need(b, "kind", where)),
                         v_set=float(b.get("v_set", 1.0)), p_load=float(b.get("p_load", 0.0)),
                         q_load=float(b.get("q_load", 0.0)), g_shunt=float(b.get("g_shunt", 0.0)),
                         b_shunt=float(b.get("b_shunt", 0.0))))
    for i, br in enumerate(_need(data, "branches", "network")):
        where = f"branches[{i}]"
        _check_keys(br, _BRANCH_KEYS, where)
        branches.append(Branch(from_bus=int(_need(br, "from", where)), to_bus=int(_need(br, "to", where)),
                               r=float(_need(br, "r", where)), x=float(_need(br, "x", where)),
                               b=float(br.get("b", 0.0)), ratio=float(br.get("ratio", 1.0)),
                               in_service=bool(br.get("in_service", True))))
    for i, g in enumerate(_need(data, "generators", "network")):
        where = f"generators[{i}]"
        _check_keys(g, _GEN_KEYS, where)
        xd = float(_need(g, "xd_prime", where))
        gens.append(Generator(bus=int(_need(g, "bus", where)), inertia=float(_need(g, "inertia", where)),
                              damping=float(_need(g, "damping", where)), p_set=float(_need(g, "p_set", where)),
                              xd_prime=xd, xq_prime=float(g.get("xq_prime", xd))))
    net = NetworkModel(buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
                       base_mva=float(data.get("base_mva", 100.0)),
                       frequency_hz=float(data.get("frequency_hz", 60.0)),
                       meta=dict(data.get("meta", {})))
    return net.validate() if validate else net


def load_network(path: str | Path, validate: bool = True) -> NetworkModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read network fixture {path}: {exc}") from exc
    return network_from_dict(data, validate=validate)


def fixture_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def wscc9() -> NetworkModel:
    """The bundled WSCC 9-bus, 3-machine classical dataset."""
    return load_network(fixture_path("wscc9.json"))
