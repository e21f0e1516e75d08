"""Discrete-tick simulation of the six-station inspection line.

One slot per station, synchronized advancement: every occupied station
inspects its side, then all workpieces move one slot. The tick's cycle
time is the slowest station's inspection time; a workpiece leaving the
last slot is defective if any side was.

Timing modes: "nominal" uses configured per-station constants (for
deterministic tests and the published-table replay), "measured" records
wall-clock time per inspection.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .baseline import ThresholdConfig, classify
from .imaging import Image
from .synth import Side, SIDES, Box

STATION_ORDER = [Side.LEFT, Side.TOP, Side.RIGHT, Side.BOTTOM, Side.BACK, Side.FRONT]

# per-side inspection times (ms) reported for the threshold pipeline
NOMINAL_TIMES_MS = {
    Side.LEFT: 290.0, Side.TOP: 391.0, Side.RIGHT: 359.0,
    Side.BOTTOM: 815.0, Side.BACK: 721.0, Side.FRONT: 1231.0,
}


class LineError(ValueError):
    pass


@dataclass
class StationConfig:
    side: Side
    backend: str = "threshold"                  # "threshold" | "grid"
    threshold_cfg: ThresholdConfig | None = None
    camera: str = "low_dof"                     # long sides low, short sides high
    nominal_time_ms: float | None = None

    def validate(self) -> None:
        if self.backend not in ("threshold", "grid"):
            raise LineError(f"unknown backend {self.backend!r}")
        if self.backend == "threshold" and self.threshold_cfg is None:
            raise LineError("threshold backend needs a threshold_cfg")

    def as_dict(self) -> dict:
        return {
            "side": self.side.value,
            "backend": self.backend,
            "threshold_cfg": self.threshold_cfg.as_dict() if self.threshold_cfg else None,
            "camera": self.camera,
            "nominal_time_ms": self.nominal_time_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StationConfig":
        cfg = cls(
            side=Side(d["side"]),
            backend=d.get("backend", "threshold"),
            threshold_cfg=ThresholdConfig.from_dict(d["threshold_cfg"]) if d.get("threshold_cfg") else None,
            camera=d.get("camera", "low_dof"),
            nominal_time_ms=d.get("nominal_time_ms"),
        )
        cfg.validate()
        return cfg


def default_stations(nominal: bool = True) -> list[StationConfig]:
    out = []
    for side in STATION_ORDER:
        out.append(StationConfig(
            side=side,
            backend="threshold",
            threshold_cfg=ThresholdConfig(side=side),
            camera="high_dof" if side in (Side.LEFT, Side.RIGHT) else "low_dof",
            nominal_time_ms=NOMINAL_TIMES_MS[side] if nominal else None,
        ))
    return out


def save_line_config(stations: list[StationConfig], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"stations": [s.as_dict() for s in stations]}, f, indent=1)


def load_line_config(path) -> list[StationConfig]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    stations = [StationConfig.from_dict(d) for d in doc["stations"]]
    if len(stations) != 6 or {s.side for s in stations} != set(SIDES):
        raise LineError("line config needs exactly one station per side")
    return stations


@dataclass
class Workpiece:
    id: str
    images: dict[Side, Image]
    truth: dict[Side, str] = field(default_factory=dict)  # per-side verdicts, if labeled

    def __post_init__(self):
        if set(self.images) != set(SIDES):
            raise LineError("workpiece needs exactly six side images")

    def truth_verdict(self) -> str | None:
        if not self.truth:
            return None
        return "defective" if any(v == "defective" for v in self.truth.values()) else "normal"


@dataclass
class InspectionRecord:
    workpiece: str
    side: str
    backend: str
    verdict: str
    elapsed_ms: float
    tick: int
    timestamp: float
    feature_count: int | None = None
    detections: list | None = None
    seq: int | None = None

    def as_dict(self) -> dict:
        d = {
            "workpiece": self.workpiece,
            "side": self.side,
            "backend": self.backend,
            "verdict": self.verdict,
            "elapsed_ms": self.elapsed_ms,
            "tick": self.tick,
            "timestamp": self.timestamp,
        }
        if self.feature_count is not None:
            d["feature_count"] = self.feature_count
        if self.detections is not None:
            d["detections"] = self.detections
        if self.seq is not None:
            d["seq"] = self.seq
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InspectionRecord":
        return cls(
            workpiece=d["workpiece"], side=d["side"], backend=d["backend"],
            verdict=d["verdict"], elapsed_ms=d["elapsed_ms"], tick=d["tick"],
            timestamp=d["timestamp"], feature_count=d.get("feature_count"),
            detections=d.get("detections"), seq=d.get("seq"),
        )


@dataclass
class LineState:
    tick: int = 0
    running: bool = False
    entered: int = 0
    passed: int = 0
    failed: int = 0
    cycle_time_ms: float = 0.0
    slots: list[str | None] = field(default_factory=lambda: [None] * 6)
    queue_len: int = 0
    stations: list[dict] = field(default_factory=list)
    pending_configs: list[dict] = field(default_factory=list)

    @property
    def in_flight(self) -> int:
        return sum(1 for s in self.slots if s is not None)

    def as_dict(self) -> dict:
        return {
            "tick": self.tick,
            "running": self.running,
            "entered": self.entered,
            "passed": self.passed,
            "failed": self.failed,
            "in_flight": self.in_flight,
            "cycle_time_ms": self.cycle_time_ms,
            "slots": list(self.slots),
            "queue_len": self.queue_len,
            "stations": self.stations,
            "pending_configs": self.pending_configs,
        }


class Line:
    """Single-owner state machine; mutate only via feed/step/set_station."""

    def __init__(self, stations: list[StationConfig], timing: str = "nominal",
                 grid_model=None):
        if len(stations) != 6 or {s.side for s in stations} != set(SIDES):
            raise LineError("need exactly one station per side")
        for s in stations:
            s.validate()
        if timing not in ("nominal", "measured"):
            raise LineError(f"unknown timing mode {timing!r}")
        self.stations = list(stations)
        self.timing = timing
        self.grid_model = grid_model
        self.tick = 0
        self.entered = 0
        self.passed = 0
        self.failed = 0
        self.cycle_time_ms = 0.0
        self.queue: list[Workpiece] = []
        self.slots: list[Workpiece | None] = [None] * 6
        self.side_verdicts: dict[str, dict[Side, str]] = {}
        self._pending: list[tuple[int, StationConfig]] = []
        self.running = False

    # -- feeding and config ------------------------------------------------

    def feed(self, workpieces: list[Workpiece]) -> None:
        self.queue.extend(workpieces)

    def set_station(self, side: Side, cfg: StationConfig) -> int:
        """Queue a config swap; applied at the next tick boundary.

        Returns the tick at which the config becomes effective.
        """
        cfg.validate()
        if cfg.side != side:
            raise LineError("config side does not match station side")
        effective = self.tick + 1
        self._pending.append((effective, cfg))
        return effective

    def _apply_pending(self) -> list[StationConfig]:
        applied = []
        keep = []
        for effective, cfg in self._pending:
            if effective <= self.tick:
                for i, st in enumerate(self.stations):
                    if st.side == cfg.side:
                        self.stations[i] = cfg
                        applied.append(cfg)
            else:
                keep.append((effective, cfg))
        self._pending = keep
        return applied

    # -- inspection --------------------------------------------------------

    def _inspect(self, station: StationConfig, piece: Workpiece) -> InspectionRecord:
        img = piece.images[station.side]
        t0 = time.perf_counter()
        feature_count = None
        detections = None
        if station.backend == "threshold":
            res = classify(img, station.threshold_cfg)
            verdict = res.verdict
            feature_count = res.feature_count
        else:
            if self.grid_model is None:
                raise LineError("grid backend configured but no model attached")
            from .detector import infer

            dets, _ = infer(self.grid_model, img, image_id=f"{piece.id}:{station.side.value}")
            verdict = "defective" if dets else "normal"
            detections = [d.as_dict() for d in dets]
        measured_ms = (time.perf_counter() - t0) * 1000.0
        if self.timing == "nominal" and station.nominal_time_ms is not None:
            elapsed = float(station.nominal_time_ms)
        else:
            elapsed = measured_ms
        return InspectionRecord(
            workpiece=piece.id, side=station.side.value, backend=station.backend,
            verdict=verdict, elapsed_ms=elapsed, tick=self.tick, timestamp=time.time(),
            feature_count=feature_count, detections=detections,
        )

    def step(self) -> tuple[LineState, list[dict]]:
        """One synchronized tick; returns the new state and emitted events."""
        self.tick += 1
        events: list[dict] = []
        for cfg in self._apply_pending():
            events.append({"kind": "config_changed", "payload": {
                "side": cfg.side.value, "config": cfg.as_dict(), "effective_tick": self.tick}})

        # intake into the first slot
        if self.slots[0] is None and self.queue:
            piece = self.queue.pop(0)
            self.slots[0] = piece
            self.entered += 1
            self.side_verdicts[piece.id] = {}
            events.append({"kind": "workpiece_enter", "payload": {
                "workpiece": piece.id, "tick": self.tick}})

        # all occupied stations inspect simultaneously
        elapsed = []
        for i, piece in enumerate(self.slots):
            if piece is None:
                continue
            record = self._inspect(self.stations[i], piece)
            elapsed.append(record.elapsed_ms)
            self.side_verdicts[piece.id][self.stations[i].side] = record.verdict
            events.append({"kind": "station_result", "payload": record.as_dict()})
        self.cycle_time_ms = max(elapsed) if elapsed else 0.0

        # synchronized advance; the last slot's occupant exits with a verdict
        leaving = self.slots[-1]
        if leaving is not None:
            sides = self.side_verdicts.pop(leaving.id)
            verdict = "defective" if any(v == "defective" for v in sides.values()) else "normal"
            if verdict == "defective":
                self.failed += 1
            else:
                self.passed += 1
            events.append({"kind": "workpiece_verdict", "payload": {
                "workpiece": leaving.id, "verdict": verdict,
                "sides": {s.value: v for s, v in sides.items()}, "tick": self.tick}})
        for i in range(5, 0, -1):
            self.slots[i] = self.slots[i - 1]
        self.slots[0] = None
        return self.state(), events

    def drained(self) -> bool:
        return not self.queue and all(s is None for s in self.slots)

    def state(self) -> LineState:
        return LineState(
            tick=self.tick, running=self.running, entered=self.entered,
            passed=self.passed, failed=self.failed, cycle_time_ms=self.cycle_time_ms,
            slots=[p.id if p else None for p in self.slots],
            queue_len=len(self.queue),
            stations=[s.as_dict() for s in self.stations],
            pending_configs=[{"effective_tick": t, "config": c.as_dict()} for t, c in self._pending],
        )


def run(line: Line, workpieces: list[Workpiece], report_path=None,
        log_path=None) -> dict:
    """Process every workpiece to completion; per-side accuracy + timing report.

    The summary carries both the sum of per-side mean times and the
    max-station cycle figure. Records append to log_path as JSON lines.
    """
    line.feed(workpieces)
    records: list[InspectionRecord] = []
    truth: dict[tuple[str, str], str] = {}
    for wp in workpieces:
        for side, v in wp.truth.items():
            truth[(wp.id, side.value)] = v

    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while not line.drained():
            _, events = line.step()
            for ev in events:
                if ev["kind"] == "station_result":
                    rec = InspectionRecord.from_dict(ev["payload"])
                    records.append(rec)
                    if log_f:
                        log_f.write(json.dumps(ev["payload"]) + "\n")
            if log_f:
                log_f.flush()
    finally:
        if log_f:
            log_f.close()

    per_side = []
    sum_of_sides = 0.0
    cycle = 0.0
    for side in STATION_ORDER:
        side_records = [r for r in records if r.side == side.value]
        if not side_records:
            continue
        mean_ms = sum(r.elapsed_ms for r in side_records) / len(side_records)
        row = {"side": side.value, "test_number": len(side_records),
               "detection_time_ms": mean_ms}
        labeled = [r for r in side_records if (r.workpiece, r.side) in truth]
        if labeled:
            errors = sum(1 for r in labeled if r.verdict != truth[(r.workpiece, r.side)])
            row["accuracy"] = (len(labeled) - errors) / len(labeled) * 100.0
            row["errors"] = errors
        per_side.append(row)
        sum_of_sides += mean_ms
        cycle = max(cycle, mean_ms)

    state = line.state()
    summary = {
        "per_side": per_side,
        "sum_of_sides_ms": sum_of_sides,
        "cycle_ms": cycle,
        "entered": state.entered,
        "passed": state.passed,
        "failed": state.failed,
        "ticks": state.tick,
        "records": len(records),
    }
    if report_path:
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=1)
    return summary


def workpieces_from_renders(count: int, size: int = 256, seed: int = 0,
                            defect_rate: float = 0.5) -> list[Workpiece]:
    """Render six-sided workpieces; some sides carry one injected defect."""
    from .rng import derive_rng
    from . import synth as sy

    out = []
    for i in range(count):
        rng = derive_rng(seed, 60_000 + i)
        images: dict[Side, Image] = {}
        truth: dict[Side, str] = {}
        defective = rng.random() < defect_rate
        defect_side = SIDES[int(rng.integers(0, 6))] if defective else None
        kinds = list(sy.DefectKind)
        if size < sy.MIN_BENT_PIN_SIZE:
            kinds = [k for k in kinds if k is not sy.DefectKind.BENT_PIN]
        for side in SIDES:
            img = sy.render_normal(side, size, int(rng.integers(0, 2**31 - 1)))
            if side == defect_side:
                kind = kinds[int(rng.integers(0, len(kinds)))]
                img, _ = sy.inject_defect(img, side, kind, int(rng.integers(0, 2**31 - 1)))
                truth[side] = "defective"
            else:
                truth[side] = "normal"
            images[side] = img
        out.append(Workpiece(id=f"wp{i:05d}", images=images, truth=truth))
    return out


def workpieces_from_manifest(manifest, count: int | None = None) -> list[Workpiece]:
    """Bundle manifest samples into six-sided workpieces (one image per side)."""
    from .imaging import load_image

    by_side: dict[Side, list] = {s: [] for s in SIDES}
    for m in manifest.images:
        by_side[m.side].append(m)
    n = min(len(v) for v in by_side.values())
    if count is not None:
        n = min(n, count)
    if n == 0:
        raise LineError("manifest lacks samples for at least one side")
    out = []
    for i in range(n):
        images = {}
        truth = {}
        for side in SIDES:
            meta = by_side[side][i]
            images[side] = load_image(manifest.resolve(meta))
            truth[side] = "defective" if meta.boxes else "normal"
        out.append(Workpiece(id=f"wp{i:05d}", images=images, truth=truth))
    return out
