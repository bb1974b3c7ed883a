"""Links, routing and scenario files."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .utility import ProfileError, build_profile, check_concavity_conditions, lift_base_quality


class ScenarioError(ValueError):
    """Malformed or infeasible scenario document."""


@dataclass(frozen=True, eq=False)
class Network:
    """Capacitated links and the sessions routed over them.

    Attributes
    ----------
    link_ids : list of str
    c : ndarray, shape (L,)
        Capacities in Kbps.
    R : ndarray, shape (L, S)
        Binary routing matrix.
    session_ids : list of str
    paths : list of tuple of int
        Link indices per session, ascending.
    """

    link_ids: list
    c: np.ndarray
    R: np.ndarray
    session_ids: list
    paths: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.link_ids)

    @property
    def S(self) -> int:
        return len(self.session_ids)

    def sessions_on(self, l: int):
        """Session indices crossing link ``l``, ascending."""
        return tuple(int(s) for s in np.flatnonzero(self.R[l]))


def make_network(capacities, paths, link_ids=None, session_ids=None) -> Network:
    """Build a :class:`Network` from capacities and per-session link-index paths."""
    c = np.asarray(capacities, dtype=float)
    L, S = len(c), len(paths)
    link_ids = [f"L{l + 1}" for l in range(L)] if link_ids is None else list(link_ids)
    session_ids = [f"s{s + 1}" for s in range(S)] if session_ids is None else list(session_ids)
    if np.any(~(c > 0)):
        raise ScenarioError("every link capacity must be positive")
    R = np.zeros((L, S), dtype=np.int8)
    clean = []
    for s, path in enumerate(paths):
        if len(path) == 0:
            raise ScenarioError(f"session {session_ids[s]} has an empty path")
        for l in path:
            if not 0 <= l < L:
                raise ScenarioError(f"session {session_ids[s]} routed over unknown link {l}")
            R[l, s] = 1
        clean.append(tuple(sorted(set(int(l) for l in path))))
    return Network(link_ids, c, R, session_ids, clean)


def link_flows(net: Network, x) -> np.ndarray:
    """Per-link flow ``R x`` in Kbps."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.S,):
        raise ValueError(f"expected {net.S} rates, got shape {x.shape}")
    return net.R @ x


@dataclass
class FeasibilityReport:
    feasible: bool
    box_violations: dict
    link_violations: dict

    def __bool__(self) -> bool:
        return self.feasible


def is_feasible(net, profiles, x, rtol=1e-9) -> FeasibilityReport:
    """Check the rate box and ``R x <= c`` (relative tolerance ``rtol``).

    Violations are reported by session id and link id with the excess in Kbps.
    """
    x = np.asarray(x, dtype=float)
    box = {}
    for s, p in enumerate(profiles):
        if x[s] < p.m * (1 - rtol) or x[s] > p.M * (1 + rtol):
            box[net.session_ids[s]] = float(x[s])
    over = link_flows(net, x) - net.c
    links = {net.link_ids[l]: float(over[l]) for l in range(net.L) if over[l] > rtol * net.c[l]}
    return FeasibilityReport(not box and not links, box, links)


def initial_feasible_point(net, profiles) -> np.ndarray:
    """Every session at its minimum rate; raises if that already overloads a link."""
    x = np.array([p.m for p in profiles])
    rep = is_feasible(net, profiles, x)
    if not rep:
        raise ScenarioError(f"scenario infeasible at base rates: {rep.link_violations}")
    return x


@dataclass
class Scenario:
    """A loaded scenario: network, profiles, solver settings and provenance notes."""

    name: str
    network: Network
    profiles: list
    config: object
    notes: list
    document: dict
    sequence_names: list
    reference: dict | None = None


def table1() -> dict:
    """Bitrate ladders in Kbps keyed by sequence name."""
    return json.loads(resources.files("svcnum.data").joinpath("table1.json").read_text())["sequences"]


def bundled_path(name: str) -> Path:
    """Filesystem path of a bundled data file such as ``scenario1.json``."""
    return Path(str(resources.files("svcnum.data").joinpath(name)))


def load_scenario(source) -> Scenario:
    """Load and validate a scenario.

    Parameters
    ----------
    source : str, Path or dict
        A JSON file path, the name of a bundled file, or a parsed document.

    Returns
    -------
    Scenario
    """
    from .scp_solver import SolverConfig

    if isinstance(source, dict):
        doc = copy.deepcopy(source)
        name = doc.get("name", "scenario")
    else:
        path = Path(source)
        if not path.exists() and bundled_path(str(source)).exists():
            path = bundled_path(str(source))
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario {source}: {exc}") from exc
        name = doc.get("name", path.stem)

    for key in ("links", "sessions"):
        if key not in doc or not isinstance(doc[key], list) or not doc[key]:
            raise ScenarioError(f"missing or empty '{key}'")
    link_ids = []
    caps = []
    for ln in doc["links"]:
        try:
            link_ids.append(str(ln["id"]))
            caps.append(float(ln["capacity_kbps"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad link entry {ln}: {exc}") from exc
    if len(set(link_ids)) != len(link_ids):
        raise ScenarioError("duplicate link ids")
    index = {lid: l for l, lid in enumerate(link_ids)}

    ladders = None
    notes = []
    profiles, paths, sids, seqs = [], [], [], []
    for entry in doc["sessions"]:
        try:
            sid = str(entry["id"])
            seq = str(entry.get("sequence_name", ""))
            rates = entry.get("rate_indices_kbps")
            if rates is None:
                ladders = ladders or table1()
                rates = ladders[seq]
            u_raw = list(entry["quality_indices"])
            override = entry.get("u0")
            if override is not None:
                u_raw[0] = float(override)
                notes.append(f"{sid}: u_0 set to {override} by scenario override")
            u, lifted = lift_base_quality(u_raw)
            if lifted is not None:
                notes.append(f"{sid}: u_0 lifted from {u_raw[0]} to {lifted:.6g}")
            p = build_profile(u, rates, entry["alpha_per_kbps"], entry["weight"],
                              entry.get("m_kbps"), entry.get("M_kbps"), session_id=sid)
            path = [index[str(l)] for l in entry["path"]]
        except KeyError as exc:
            raise ScenarioError(f"session {entry.get('id')}: missing or unknown key {exc}") from exc
        except ProfileError as exc:
            raise ScenarioError(f"session {entry.get('id')}: {exc}") from exc
        rep = check_concavity_conditions(p)
        if not rep.ok:
            notes.append(f"{sid}: concavity conditions not met ({rep})")
        profiles.append(p)
        paths.append(path)
        sids.append(sid)
        seqs.append(seq)
    if len(set(sids)) != len(sids):
        raise ScenarioError("duplicate session ids")
    net = make_network(caps, paths, link_ids, sids)
    initial_feasible_point(net, profiles)
    notes.extend(str(n) for n in doc.get("interpretation", []))
    config = SolverConfig.from_dict(doc.get("solver", {}))
    return Scenario(name, net, profiles, config, notes, doc, seqs, doc.get("reference"))


def scenario_to_dict(sc: Scenario) -> dict:
    """Serialise a scenario back to its document form (lifted ``u_0`` kept via ``u0``)."""
    doc = {"name": sc.name,
           "links": [{"id": lid, "capacity_kbps": float(c)} for lid, c in zip(sc.network.link_ids, sc.network.c)],
           "sessions": [],
           "solver": sc.config.to_dict()}
    for s, p in enumerate(sc.profiles):
        doc["sessions"].append({
            "id": p.session_id,
            "sequence_name": sc.sequence_names[s],
            "weight": p.w,
            "alpha_per_kbps": p.alpha,
            "quality_indices": [float(v) for v in p.u],
            "rate_indices_kbps": [float(v) for v in p.beta],
            "m_kbps": p.m,
            "M_kbps": p.M,
            "path": [sc.network.link_ids[l] for l in sc.network.paths[s]],
        })
    if sc.reference is not None:
        doc["reference"] = copy.deepcopy(sc.reference)
    return doc
