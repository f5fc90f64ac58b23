"""Fusion-event graphs: enumerate them for an (L, N) architecture and check
them against the events a built network actually performs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .nets import BasicBlock, FusionBlock, Network

INPUTS = ("x1", "x2")  # CT, PET
OPS = ("multiply", "add", "concat")


@dataclass(frozen=True)
class FusionInput:
    src: object  # "x1" / "x2" or an earlier event index
    depth: int

    def to_dict(self) -> dict:
        return {"src": self.src, "depth": self.depth}


@dataclass(frozen=True)
class FusionEvent:
    j: int
    op: str
    inputs: tuple[FusionInput, ...]

    def __post_init__(self):
        if self.j < 1:
            raise ConfigError(f"event index must be >= 1, got {self.j}")
        if self.op not in OPS:
            raise ConfigError(f"unknown fusion operator {self.op!r}")
        if self.op == "multiply" and len(self.inputs) != 2:
            raise ConfigError(f"multiply event F{self.j} needs exactly 2 inputs")
        for inp in self.inputs:
            if inp.depth < 0:
                raise ConfigError(f"negative depth at F{self.j}")
            if isinstance(inp.src, int) and not 1 <= inp.src < self.j:
                raise ConfigError(f"F{self.j} reads F{inp.src}, which is not an earlier event")
            if not isinstance(inp.src, int) and inp.src not in INPUTS:
                raise ConfigError(f"F{self.j} reads unknown input {inp.src!r}")

    def to_dict(self) -> dict:
        return {"j": self.j, "op": self.op, "inputs": [i.to_dict() for i in self.inputs]}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionEvent":
        return cls(int(d["j"]), d["op"], tuple(FusionInput(i["src"], int(i["depth"])) for i in d["inputs"]))


@dataclass(frozen=True)
class FusionGraph:
    stages: int
    blocks_per_stage: int
    events: tuple[FusionEvent, ...]

    def __post_init__(self):
        idx = [e.j for e in self.events]
        if idx != list(range(1, len(idx) + 1)):
            raise ConfigError("event indices must run 1, 2, 3, ... in order")
        concats = [e for e in self.events if e.op == "concat"]
        if len(concats) != 1 or self.events[-1].op != "concat":
            raise ConfigError("a fusion graph ends in exactly one concat event")

    @property
    def terminal(self) -> int:
        return self.events[-1].j

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "blocks_per_stage": self.blocks_per_stage,
            "inputs": list(INPUTS),
            "terminal": self.terminal,
            "events": [e.to_dict() for e in self.events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FusionGraph":
        return cls(int(d["stages"]), int(d["blocks_per_stage"]), tuple(FusionEvent.from_dict(e) for e in d["events"]))

    def replace_depth(self, j: int, input_pos: int, depth: int) -> "FusionGraph":
        """Copy with one input depth changed (used to inject faults in checks)."""
        events = list(self.events)
        e = events[j - 1]
        inputs = list(e.inputs)
        inputs[input_pos] = FusionInput(inputs[input_pos].src, depth)
        events[j - 1] = FusionEvent(e.j, e.op, tuple(inputs))
        return FusionGraph(self.stages, self.blocks_per_stage, tuple(events))


def _src(k: int):
    # F(-1) = x1, F(0) = x2
    return {-1: "x1", 0: "x2"}.get(k, k)


def enumerate_fusions(stages: int, blocks_per_stage: int) -> FusionGraph:
    """Fusion events of the multistage network with ``stages`` x ``blocks_per_stage`` blocks.

    Stage ``i`` multiplies F(3i-1) and F(3i) after their blocks and the
    squeeze conv (depth 2N + 1), then adds the product back onto each
    stream (residual depth 2N). The last two adds are concatenated.
    """
    for name, v in (("stages", stages), ("blocks_per_stage", blocks_per_stage)):
        if not 1 <= v <= 5:
            raise ConfigError(f"{name} must lie in [1, 5], got {v}")
    main = BasicBlock.main_path_depth * blocks_per_stage
    sq = FusionBlock.squeeze_depth
    events = []
    for i in range(stages):
        a, b, m = _src(3 * i - 1), _src(3 * i), 3 * i + 1
        events.append(FusionEvent(m, "multiply", (FusionInput(a, main + sq), FusionInput(b, main + sq))))
        events.append(FusionEvent(m + 1, "add", (FusionInput(a, main), FusionInput(m, 0))))
        events.append(FusionEvent(m + 2, "add", (FusionInput(b, main), FusionInput(m, 0))))
    last = 3 * stages
    events.append(FusionEvent(last + 1, "concat", (FusionInput(_src(last - 1), 0), FusionInput(_src(last), 0))))
    return FusionGraph(stages, blocks_per_stage, tuple(events))


@dataclass
class VerificationReport:
    expected_events: int
    observed_events: int
    mismatches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "expected_events": self.expected_events,
            "observed_events": self.observed_events,
            "mismatches": list(self.mismatches),
        }


def verify_against_network(g: FusionGraph, net: Network) -> VerificationReport:
    """Compare ``g`` with the events traced from one forward pass of ``net``."""
    if net.strategy != "multistage":
        raise ConfigError(f"graph verification needs a multistage network, got {net.strategy!r}")
    observed = [FusionEvent.from_dict(e) for e in net.trace_fusions()]
    report = VerificationReport(len(g.events), len(observed))
    if len(observed) != len(g.events):
        report.mismatches.append(f"event count: graph has {len(g.events)}, network performs {len(observed)}")
    for k in range(max(len(g.events), len(observed))):
        if k >= len(observed):
            e = g.events[k]
            report.mismatches.append(f"F{e.j}: {e.op} missing from network")
            continue
        if k >= len(g.events):
            o = observed[k]
            report.mismatches.append(f"F{o.j}: unexpected {o.op} in network")
            continue
        e, o = g.events[k], observed[k]
        if e.op != o.op:
            report.mismatches.append(f"F{e.j}: operator {e.op} in graph, {o.op} in network")
            continue
        if len(e.inputs) != len(o.inputs):
            report.mismatches.append(f"F{e.j}: {len(e.inputs)} inputs in graph, {len(o.inputs)} in network")
            continue
        for pos, (ei, oi) in enumerate(zip(e.inputs, o.inputs)):
            if ei.src != oi.src:
                report.mismatches.append(f"F{e.j} input {pos}: source {ei.src} in graph, {oi.src} in network")
            if ei.depth != oi.depth:
                report.mismatches.append(f"F{e.j} input {pos}: depth {ei.depth} in graph, {oi.depth} in network")
    return report
