"""Shared data model and file formats.

Conventions used across the package:

- Cell-type labels are 1-based state indices into ``LineageTopology.states``.
  File formats carry state names (or raw 1-based indices); the mapping to
  indices happens at load time.
- Probability vectors and matrix rows must sum to 1 within 1e-12.
- Floats are serialized with 17 significant digits so that save/load
  round-trips are bit exact.

All types here are immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PROB_TOL = 1e-12


class TimelyError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TimelyError):
    """A file could not be parsed (carries the offending line number)."""


class ValidationError(TimelyError):
    """Parsed data violates a model invariant."""


class TopologyError(TimelyError):
    """An edge set does not form a rooted tree."""


def format_float(x: float) -> str:
    """Render a float with 17 significant digits (exact round-trip)."""
    return format(float(x), ".17g")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CellRecord:
    """One cell: feature vector plus the (possibly wrong) observed label."""

    id: str
    features: np.ndarray
    observed_label: int  # 1-based state index
    image_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "features", _readonly(np.asarray(self.features, dtype=float)))
        if self.features.ndim != 1:
            raise ValidationError(f"cell {self.id!r}: features must be a 1-D vector")


@dataclass(frozen=True)
class LineageTopology:
    """Directed tree of cell-type states; self-edges are implicit.

    ``states`` fixes the index vocabulary (1-based), ``root`` is the index
    of the root state, and ``edges`` are (parent, child) index pairs.
    """

    states: tuple[str, ...]
    root: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))
        self._validate()

    def _validate(self):
        K = len(self.states)
        if K == 0:
            raise TopologyError("topology needs at least one state")
        if len(set(self.states)) != K:
            raise TopologyError("duplicate state names")
        if not 1 <= self.root <= K:
            raise TopologyError(f"root index {self.root} outside 1..{K}")
        parents: dict[int, int] = {}
        for a, b in self.edges:
            if not (1 <= a <= K and 1 <= b <= K):
                raise TopologyError(f"edge ({a},{b}) references state outside 1..{K}")
            if a == b:
                raise TopologyError("explicit self-edges are not allowed (they are implicit)")
            if b in parents:
                raise TopologyError(f"state {self.states[b - 1]!r} has multiple parents")
            parents[b] = a
        if self.root in parents:
            raise TopologyError(f"root {self.states[self.root - 1]!r} must not have a parent")
        # Every non-root state must be reachable from the root without cycles.
        seen = {self.root}
        frontier = [self.root]
        while frontier:
            k = frontier.pop()
            for c in self.children(k):
                if c in seen:
                    raise TopologyError("edge set contains a cycle")
                seen.add(c)
                frontier.append(c)
        if len(seen) != K:
            missing = [s for i, s in enumerate(self.states, start=1) if i not in seen]
            raise TopologyError(f"states not reachable from root: {missing}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def index(self, name: str) -> int:
        """1-based index of a state name."""
        try:
            return self.states.index(name) + 1
        except ValueError:
            raise ValidationError(f"unknown state name {name!r}") from None

    def name(self, k: int) -> str:
        return self.states[k - 1]

    def children(self, k: int) -> tuple[int, ...]:
        return tuple(sorted(b for a, b in self.edges if a == k))

    def parent(self, k: int) -> Optional[int]:
        for a, b in self.edges:
            if b == k:
                return a
        return None

    def is_end_stage(self, k: int) -> bool:
        """End stages have no outgoing edge other than the implicit self-edge."""
        return not self.children(k)

    def allowed_targets(self, k: int) -> tuple[int, ...]:
        """Reachable next states from k: itself plus its children."""
        return (k,) + self.children(k)

    def label_index(self, raw: str) -> int:
        """Map a file label (state name or 1-based index) to an index."""
        if raw in self.states:
            return self.states.index(raw) + 1
        try:
            k = int(raw)
        except ValueError:
            raise ValidationError(f"unknown state name {raw!r}") from None
        if not 1 <= k <= self.n_states:
            raise ValidationError(f"label {k} outside 1..{self.n_states}")
        return k


def chain_topology(names: Sequence[str], root: Optional[str] = None) -> LineageTopology:
    """Topology for a linear chain of states in the given order."""
    names = list(names)
    edges = {(i, i + 1) for i in range(1, len(names))}
    root_idx = 1 if root is None else names.index(root) + 1
    return LineageTopology(states=tuple(names), root=root_idx, edges=frozenset(edges))


def _check_stochastic_vector(v: np.ndarray, what: str):
    v = np.asarray(v, dtype=float)
    if np.any(v < -PROB_TOL) or np.any(v > 1 + PROB_TOL):
        raise ValidationError(f"{what} has entries outside [0,1]")
    if abs(float(v.sum()) - 1.0) > PROB_TOL:
        raise ValidationError(f"{what} sums to {v.sum()!r}, not 1")


@dataclass(frozen=True)
class HmtParams:
    """Start probabilities, emission matrix, and transition parameters.

    ``trans`` maps an allowed transition (k, l) to ``(p, lam)`` where p is
    the base transition probability and lam the exponential rate that
    modulates it with the pseudotime gap.  Keys must cover exactly the
    self-edges and topology edges.
    """

    pi: np.ndarray
    B: np.ndarray
    trans: dict[tuple[int, int], tuple[float, float]]
    topology: LineageTopology = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "pi", _readonly(np.asarray(self.pi, dtype=float)))
        object.__setattr__(self, "B", _readonly(np.asarray(self.B, dtype=float)))
        object.__setattr__(self, "trans", dict(self.trans))
        self._validate()

    def _validate(self):
        K = self.topology.n_states
        if self.pi.shape != (K,):
            raise ValidationError(f"pi must have length {K}")
        _check_stochastic_vector(self.pi, "pi")
        if self.B.shape != (K, K):
            raise ValidationError(f"B must be {K}x{K}")
        for k in range(K):
            _check_stochastic_vector(self.B[k], f"B row {k + 1}")
        allowed = {(k, l) for k in range(1, K + 1) for l in self.topology.allowed_targets(k)}
        if set(self.trans) != allowed:
            extra = set(self.trans) - allowed
            missing = allowed - set(self.trans)
            raise ValidationError(
                f"trans keys mismatch: extra={sorted(extra)} missing={sorted(missing)}"
            )
        for k in range(1, K + 1):
            targets = self.topology.allowed_targets(k)
            row_p = np.array([self.trans[(k, l)][0] for l in targets])
            _check_stochastic_vector(row_p, f"transition row {k}")
            for l in targets:
                p, lam = self.trans[(k, l)]
                if not (lam > 0 and math.isfinite(lam)):
                    raise ValidationError(f"lambda for {k}->{l} must be finite and > 0")
            if self.topology.is_end_stage(k) and abs(self.trans[(k, k)][0] - 1.0) > PROB_TOL:
                raise ValidationError(f"end stage {k} must have p_kk = 1")


def default_params(
    topology: LineageTopology, pi_root_mass: float = 0.9, B: Optional[np.ndarray] = None
) -> HmtParams:
    """Construct parameters with root-heavy pi and uniform transitions.

    pi puts ``pi_root_mass`` on the root state and spreads the remainder
    uniformly over the other states.  Transition probabilities start
    uniform over the allowed targets with unit rates; B defaults to the
    identity (a noise-free expert).
    """
    K = topology.n_states
    if not 0 < pi_root_mass < 1 and K > 1:
        raise ValidationError("pi_root_mass must be in (0, 1)")
    pi = np.full(K, (1.0 - pi_root_mass) / (K - 1)) if K > 1 else np.ones(1)
    if K > 1:
        pi[topology.root - 1] = pi_root_mass
    if B is None:
        B = np.eye(K)
    trans = {}
    for k in range(1, K + 1):
        targets = topology.allowed_targets(k)
        for l in targets:
            trans[(k, l)] = (1.0 / len(targets), 1.0)
    return HmtParams(pi=pi, B=np.asarray(B, dtype=float), trans=trans, topology=topology)


@dataclass(frozen=True)
class OrderedDataset:
    """Cells arranged along the inferred trajectory.

    ``parent_index`` gives each cell's predecessor in the ordering
    structure (-1 for the root cell); within a branch that is simply the
    previous cell, and the first cell of a child branch points at the
    branch-point cell of its parent branch.  ``y`` holds the pseudotime
    gap to that predecessor (NaN for the root cell).
    """

    cells: tuple[CellRecord, ...]
    pseudotime: np.ndarray
    branch_id: np.ndarray
    parent_index: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "pseudotime", _readonly(np.asarray(self.pseudotime, dtype=float)))
        object.__setattr__(self, "branch_id", _readonly(np.asarray(self.branch_id, dtype=int)))
        object.__setattr__(self, "parent_index", _readonly(np.asarray(self.parent_index, dtype=int)))
        object.__setattr__(self, "y", _readonly(np.asarray(self.y, dtype=float)))
        self._validate()

    def _validate(self):
        n = len(self.cells)
        for name in ("pseudotime", "branch_id", "parent_index", "y"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
        if n == 0:
            return
        pt = self.pseudotime
        if np.any(pt < -1e-9) or np.any(pt > 1 + 1e-9):
            raise ValidationError("pseudotime must lie in [0, 1]")
        roots = np.flatnonzero(self.parent_index < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ValidationError("exactly the first cell must be the ordering root")
        for t in range(1, n):
            p = self.parent_index[t]
            if not 0 <= p < t:
                raise ValidationError(f"parent of cell {t} must precede it")
            gap = pt[t] - pt[p]
            if gap < -1e-9:
                raise ValidationError(f"pseudotime decreases from cell {p} to {t}")
            if not math.isclose(gap, self.y[t], rel_tol=0, abs_tol=1e-9):
                raise ValidationError(f"y[{t}] inconsistent with pseudotime gap")
        if not math.isnan(self.y[0]):
            raise ValidationError("root cell must have no y (NaN)")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def observed_labels(self) -> np.ndarray:
        return np.array([c.observed_label for c in self.cells], dtype=int)


@dataclass(frozen=True)
class Border:
    """Transition border within a branch, at a pseudotime midpoint."""

    branch_id: int
    from_state: int
    to_state: int
    pseudotime: float


@dataclass(frozen=True)
class ConsistencyReport:
    """Per-cell observed vs. inferred labels plus the fitted model."""

    ids: tuple[str, ...]
    observed: np.ndarray
    inferred: np.ndarray
    flagged: np.ndarray
    pseudotime: np.ndarray
    branch_id: np.ndarray
    borders: tuple[Border, ...]
    log_likelihood: float
    params: HmtParams

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "observed", _readonly(np.asarray(self.observed, dtype=int)))
        object.__setattr__(self, "inferred", _readonly(np.asarray(self.inferred, dtype=int)))
        object.__setattr__(self, "flagged", _readonly(np.asarray(self.flagged, dtype=bool)))
        object.__setattr__(self, "pseudotime", _readonly(np.asarray(self.pseudotime, dtype=float)))
        object.__setattr__(self, "branch_id", _readonly(np.asarray(self.branch_id, dtype=int)))
        object.__setattr__(self, "borders", tuple(self.borders))
        self._validate()

    def _validate(self):
        n = len(self.ids)
        for name in ("observed", "inferred", "flagged", "pseudotime", "branch_id"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
        if not np.array_equal(self.flagged, self.observed != self.inferred):
            raise ValidationError("flagged must hold exactly where observed != inferred")
        topo = self.params.topology
        by_branch: dict[int, list[Border]] = {}
        for b in self.borders:
            by_branch.setdefault(b.branch_id, []).append(b)
        for branch, bs in by_branch.items():
            pts = [b.pseudotime for b in bs]
            if any(b2 <= b1 for b1, b2 in zip(pts, pts[1:])):
                raise ValidationError(f"borders in branch {branch} must strictly increase")
            for b in bs:
                if (b.from_state, b.to_state) not in topo.edges:
                    raise ValidationError(
                        f"border {topo.name(b.from_state)}->{topo.name(b.to_state)} "
                        "is not a topology edge"
                    )

    @property
    def n_cells(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def load_topology(path) -> LineageTopology:
    """Read a topology JSON: {"states": [...], "root": name, "edges": [[p, c], ...]}."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}") from e
    try:
        states = tuple(str(s) for s in doc["states"])
        root_name = doc["root"]
        edge_names = doc["edges"]
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path}: missing or malformed field: {e}") from e
    name_to_idx = {s: i + 1 for i, s in enumerate(states)}
    if root_name not in name_to_idx:
        raise TopologyError(f"unknown root state {root_name!r}")
    edges = set()
    for pair in edge_names:
        if len(pair) != 2 or pair[0] not in name_to_idx or pair[1] not in name_to_idx:
            raise TopologyError(f"edge {pair!r} references unknown states")
        edges.add((name_to_idx[pair[0]], name_to_idx[pair[1]]))
    return LineageTopology(states=states, root=name_to_idx[root_name], edges=frozenset(edges))


def save_topology(path, topology: LineageTopology):
    doc = {
        "states": list(topology.states),
        "root": topology.name(topology.root),
        "edges": sorted([topology.name(a), topology.name(b)] for a, b in topology.edges),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


CELL_CSV_FIXED = ("id", "label", "image_ref")


def load_cells(path, topology: LineageTopology, n_features: Optional[int] = None) -> list[CellRecord]:
    """Read the cells CSV (header ``id,label,image_ref,f0,...``).

    Labels may be state names or raw 1-based indices; every row must have
    the same feature dimension (and equal ``n_features`` when given).
    """
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if tuple(header[:3]) != CELL_CSV_FIXED:
            raise ParseError(f"{path}: line 1: header must start with {','.join(CELL_CSV_FIXED)}")
        d = len(header) - 3
        if d < 1:
            raise ParseError(f"{path}: line 1: no feature columns")
        if n_features is not None and d != n_features:
            raise ValidationError(f"{path}: expected {n_features} feature columns, found {d}")
        seen_ids = set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            cell_id, raw_label, image_ref = row[0], row[1], row[2]
            if cell_id in seen_ids:
                raise ValidationError(f"duplicate cell id {cell_id!r}")
            seen_ids.add(cell_id)
            try:
                label = topology.label_index(raw_label)
            except ValidationError as e:
                raise ValidationError(f"cell {cell_id!r}: {e}") from None
            try:
                features = np.array([float(v) for v in row[3:]], dtype=float)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric feature value") from None
            records.append(
                CellRecord(
                    id=cell_id,
                    features=features,
                    observed_label=label,
                    image_ref=image_ref or None,
                )
            )
    return records


def save_cells(path, cells: Sequence[CellRecord], topology: LineageTopology):
    """Write the cells CSV with canonical 17-significant-digit floats."""
    if not cells:
        raise ValidationError("cannot save an empty cell list")
    d = len(cells[0].features)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CELL_CSV_FIXED) + [f"f{i}" for i in range(d)])
        for c in cells:
            if len(c.features) != d:
                raise ValidationError(f"cell {c.id!r} has feature length {len(c.features)}, expected {d}")
            writer.writerow(
                [c.id, topology.name(c.observed_label), c.image_ref or ""]
                + [format_float(v) for v in c.features]
            )


def params_to_dict(params: HmtParams) -> dict:
    return {
        "pi": params.pi.tolist(),
        "B": params.B.tolist(),
        "trans": {
            f"{k}->{l}": {"p": p, "lambda": lam}
            for (k, l), (p, lam) in sorted(params.trans.items())
        },
    }


def params_from_dict(doc: dict, topology: LineageTopology) -> HmtParams:
    trans = {}
    for key, val in doc["trans"].items():
        try:
            k, l = (int(s) for s in key.split("->"))
        except ValueError:
            raise ParseError(f"malformed transition key {key!r}") from None
        trans[(k, l)] = (float(val["p"]), float(val["lambda"]))
    return HmtParams(
        pi=np.asarray(doc["pi"], dtype=float),
        B=np.asarray(doc["B"], dtype=float),
        trans=trans,
        topology=topology,
    )


def save_params(path, params: HmtParams):
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh, indent=2)
        fh.write("\n")


def load_params(path, topology: LineageTopology) -> HmtParams:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}") from e
    return params_from_dict(doc, topology)


def ordered_to_dict(ordered: OrderedDataset, topology: LineageTopology) -> dict:
    return {
        "ids": [c.id for c in ordered.cells],
        "labels": [topology.name(c.observed_label) for c in ordered.cells],
        "image_refs": [c.image_ref for c in ordered.cells],
        "pseudotime": ordered.pseudotime.tolist(),
        "branch_id": ordered.branch_id.tolist(),
        "parent_index": ordered.parent_index.tolist(),
        "y": [None if math.isnan(v) else v for v in ordered.y],
    }


def ordered_from_dict(doc: dict, topology: LineageTopology) -> OrderedDataset:
    n = len(doc["ids"])
    cells = []
    for i in range(n):
        cells.append(
            CellRecord(
                id=doc["ids"][i],
                features=np.zeros(1),  # features are not carried through ordering files
                observed_label=topology.label_index(str(doc["labels"][i])),
                image_ref=(doc.get("image_refs") or [None] * n)[i],
            )
        )
    y = np.array([math.nan if v is None else float(v) for v in doc["y"]])
    return OrderedDataset(
        cells=tuple(cells),
        pseudotime=np.asarray(doc["pseudotime"], dtype=float),
        branch_id=np.asarray(doc["branch_id"], dtype=int),
        parent_index=np.asarray(doc["parent_index"], dtype=int),
        y=y,
    )


def save_ordered(path, ordered: OrderedDataset, topology: LineageTopology):
    with open(path, "w") as fh:
        json.dump(ordered_to_dict(ordered, topology), fh, indent=2)
        fh.write("\n")


def load_ordered(path, topology: LineageTopology) -> OrderedDataset:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}") from e
    return ordered_from_dict(doc, topology)


def report_to_dict(report: ConsistencyReport) -> dict:
    topo = report.params.topology
    return {
        "states": list(topo.states),
        "cells": [
            {
                "id": report.ids[i],
                "observed_label": topo.name(int(report.observed[i])),
                "inferred_label": topo.name(int(report.inferred[i])),
                "flagged": bool(report.flagged[i]),
                "pseudotime": float(report.pseudotime[i]),
                "branch_id": int(report.branch_id[i]),
            }
            for i in range(report.n_cells)
        ],
        "borders": [
            {
                "branch_id": b.branch_id,
                "from_state": topo.name(b.from_state),
                "to_state": topo.name(b.to_state),
                "pseudotime": b.pseudotime,
            }
            for b in report.borders
        ],
        "log_likelihood": report.log_likelihood,
        "params": params_to_dict(report.params),
    }


def report_from_dict(doc: dict, topology: LineageTopology) -> ConsistencyReport:
    params = params_from_dict(doc["params"], topology)
    cells = doc["cells"]
    borders = tuple(
        Border(
            branch_id=int(b["branch_id"]),
            from_state=topology.index(b["from_state"]),
            to_state=topology.index(b["to_state"]),
            pseudotime=float(b["pseudotime"]),
        )
        for b in doc["borders"]
    )
    return ConsistencyReport(
        ids=tuple(c["id"] for c in cells),
        observed=np.array([topology.index(c["observed_label"]) for c in cells]),
        inferred=np.array([topology.index(c["inferred_label"]) for c in cells]),
        flagged=np.array([bool(c["flagged"]) for c in cells]),
        pseudotime=np.array([float(c["pseudotime"]) for c in cells]),
        branch_id=np.array([int(c["branch_id"]) for c in cells]),
        borders=borders,
        log_likelihood=float(doc["log_likelihood"]),
        params=params,
    )


def save_report(path, report: ConsistencyReport):
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def load_report(path, topology: LineageTopology) -> ConsistencyReport:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}") from e
    return report_from_dict(doc, topology)
