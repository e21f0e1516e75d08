"""HTTP supervision service wrapping the line simulator.

One owner thread mutates the Line (tick loop plus a serialized command
queue); request handlers read lock-free state snapshots. Every event gets
a monotonically increasing sequence number and is appended to an event log
before fan-out, so /events can replay any suffix without gaps or
duplicates across restarts. Station results additionally append to the
records log, which is the source for /records, /metrics and counter
recovery after a crash.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .imaging import write_ppm
from .linesim import (
    InspectionRecord, Line, LineError, StationConfig, Workpiece, STATION_ORDER,
)
from .baseline import BaselineError, ThresholdConfig
from .synth import Side

API_ERRORS = {
    "invalid_config": 422,
    "not_found": 404,
    "conflict": 409,
    "line_stopped": 409,
    "io_error": 500,
}


def api_error(code: str, message: str, detail=None) -> dict:
    return {"error": {"code": code, "message": message, "detail": detail}}


def read_jsonl(path) -> list[dict]:
    """Parse a JSON-lines file, tolerating a torn final line."""
    out = []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    break  # torn tail after a crash: serve up to last valid line
    except FileNotFoundError:
        pass
    return out


def rebuild_counters(records: list[dict]) -> dict:
    """Derive line counters from the record log (crash recovery)."""
    sides_seen: dict[str, dict[str, str]] = {}
    for r in records:
        sides_seen.setdefault(r["workpiece"], {})[r["side"]] = r["verdict"]
    entered = len(sides_seen)
    passed = failed = 0
    for verdicts in sides_seen.values():
        if len(verdicts) == 6:
            if any(v == "defective" for v in verdicts.values()):
                failed += 1
            else:
                passed += 1
    completed = passed + failed
    return {"entered": entered, "passed": passed, "failed": failed,
            "lost": entered - completed}


class Broadcaster:
    """Sequenced event fan-out with log-backed replay."""

    def __init__(self, event_log_path):
        self.path = Path(event_log_path)
        self.lock = threading.Lock()
        self.subscribers: list[queue.Queue] = []
        existing = read_jsonl(self.path)
        self.next_seq = (existing[-1]["seq"] + 1) if existing else 0
        self._f = open(self.path, "a", encoding="utf-8")

    def emit(self, kind: str, payload: dict) -> dict:
        with self.lock:
            event = {"seq": self.next_seq, "kind": kind, "payload": payload}
            self.next_seq += 1
            self._f.write(json.dumps(event) + "\n")
            for q in self.subscribers:
                q.put(event)
            return event

    def flush(self) -> None:
        with self.lock:
            self._f.flush()
            os.fsync(self._f.fileno())

    def subscribe(self, since_seq: int) -> queue.Queue:
        """Queue pre-loaded with the replay suffix; no gap to the live feed."""
        q: queue.Queue = queue.Queue()
        with self.lock:
            for ev in read_jsonl(self.path):
                if ev["seq"] >= since_seq:
                    q.put(ev)
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def close(self) -> None:
        with self.lock:
            self._f.close()


@dataclass
class Command:
    kind: str
    payload: dict = field(default_factory=dict)
    reply: queue.Queue = field(default_factory=lambda: queue.Queue(maxsize=1))


class LineOwner(threading.Thread):
    """Single writer: ticks the line and applies commands between ticks."""

    def __init__(self, line: Line, broadcaster: Broadcaster, records_path,
                 tick_ms: float = 200.0, feed: list[Workpiece] | None = None,
                 loop_feed: bool = False):
        super().__init__(daemon=True, name="line-owner")
        self.line = line
        self.broadcaster = broadcaster
        self.records_path = Path(records_path)
        self.tick_ms = tick_ms
        self.commands: queue.Queue[Command] = queue.Queue()
        self.stop_flag = threading.Event()
        self.feed_pool = list(feed or [])
        self.loop_feed = loop_feed
        self.latest_images: dict[str, tuple[str, bytes]] = {}
        self.truth: dict[tuple[str, str], str] = {}
        self._generation = 0

        recovered = rebuild_counters(read_jsonl(self.records_path))
        self.lost = recovered["lost"]
        line.entered = recovered["entered"]
        line.passed = recovered["passed"]
        line.failed = recovered["failed"]
        # a new run must not reuse logged workpiece ids, or log-derived
        # counters would diverge from live ones
        self._generation = broadcaster.next_seq
        self._records_f = open(self.records_path, "a", encoding="utf-8")
        if self.feed_pool:
            line.feed(self._fresh_feed())
        self.snapshot: dict = self._make_snapshot()

    def _fresh_feed(self) -> list[Workpiece]:
        out = []
        for wp in self.feed_pool:
            fresh = Workpiece(id=f"g{self._generation}-{wp.id}", images=wp.images,
                              truth=dict(wp.truth))
            for side, v in fresh.truth.items():
                self.truth[(fresh.id, side.value)] = v
            out.append(fresh)
        self._generation += 1
        return out

    # -- snapshot ----------------------------------------------------------

    def _make_snapshot(self) -> dict:
        s = self.line.state().as_dict()
        s["lost"] = self.lost
        s["event_seq"] = self.broadcaster.next_seq - 1
        s["timing"] = self.line.timing
        return s

    # -- command handling --------------------------------------------------

    def submit(self, kind: str, payload: dict | None = None, timeout: float = 10.0) -> dict:
        cmd = Command(kind=kind, payload=payload or {})
        self.commands.put(cmd)
        try:
            return cmd.reply.get(timeout=timeout)
        except queue.Empty:
            return api_error("io_error", "command timed out")

    def _handle_command(self, cmd: Command) -> None:
        try:
            if cmd.kind == "start":
                if not self.line.running:
                    self.line.running = True
                    self.broadcaster.emit("line_started", {"tick": self.line.tick})
                cmd.reply.put({"ok": True, "state": self._make_snapshot()})
            elif cmd.kind == "stop":
                if self.line.running:
                    self.line.running = False
                    self.broadcaster.emit("line_stopped", {"tick": self.line.tick})
                cmd.reply.put({"ok": True, "state": self._make_snapshot()})
            elif cmd.kind == "set_station":
                side = Side(cmd.payload["side"])
                cfg = StationConfig.from_dict(cmd.payload["config"])
                effective = self.line.set_station(side, cfg)
                cmd.reply.put({"ok": True, "config": cfg.as_dict(),
                               "effective_tick": effective})
            else:
                cmd.reply.put(api_error("not_found", f"unknown command {cmd.kind!r}"))
        except (LineError, BaselineError, KeyError, ValueError) as e:
            cmd.reply.put(api_error("invalid_config", str(e)))
        self.snapshot = self._make_snapshot()

    # -- tick loop ----------------------------------------------------------

    def _tick(self) -> None:
        if self.line.drained() and self.loop_feed and self.feed_pool:
            self.line.feed(self._fresh_feed())
        if self.line.drained():
            return
        # snapshot occupancy before the advance so images match this tick's records
        occupied = [(self.line.stations[i].side, piece)
                    for i, piece in enumerate(self.line.slots) if piece is not None]
        intake = self.line.queue[0] if (self.line.slots[0] is None and self.line.queue) else None
        if intake is not None:
            occupied.append((self.line.stations[0].side, intake))
        _, events = self.line.step()
        for ev in events:
            if ev["kind"] == "station_result":
                emitted = self.broadcaster.emit(ev["kind"], ev["payload"])
                ev["payload"]["seq"] = emitted["seq"]
                self._records_f.write(json.dumps(ev["payload"]) + "\n")
            else:
                self.broadcaster.emit(ev["kind"], ev["payload"])
        self._records_f.flush()
        os.fsync(self._records_f.fileno())
        self.broadcaster.flush()
        for side, piece in occupied:
            self.latest_images[side.value] = (piece.id, write_ppm(piece.images[side]))

    def run(self) -> None:
        while not self.stop_flag.is_set():
            deadline = time.monotonic() + (self.tick_ms / 1000.0 if self.line.running else 0.05)
            if self.line.running:
                self._tick()
                self.snapshot = self._make_snapshot()
            while True:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    break
                try:
                    cmd = self.commands.get(timeout=budget)
                except queue.Empty:
                    break
                self._handle_command(cmd)
        self._records_f.close()

    def shutdown(self) -> None:
        self.stop_flag.set()


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

class ScadaService:
    def __init__(self, line: Line, log_dir, tick_ms: float = 200.0,
                 feed: list[Workpiece] | None = None, loop_feed: bool = False,
                 heartbeat_s: float = 15.0):
        self.log_dir = Path(log_dir)
        os.makedirs(self.log_dir, exist_ok=True)
        self.records_path = self.log_dir / "records.jsonl"
        self.events_path = self.log_dir / "events.jsonl"
        self.broadcaster = Broadcaster(self.events_path)
        self.owner = LineOwner(line, self.broadcaster, self.records_path,
                               tick_ms=tick_ms, feed=feed, loop_feed=loop_feed)
        self.heartbeat_s = heartbeat_s
        self.httpd: ThreadingHTTPServer | None = None

    def start(self, port: int, host: str = "127.0.0.1") -> None:
        self.owner.start()
        handler = make_handler(self)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True

    def serve_forever(self) -> None:
        assert self.httpd is not None
        self.httpd.serve_forever()

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def shutdown(self) -> None:
        if self.httpd:
            self.httpd.shutdown()
        self.owner.shutdown()
        self.owner.join(timeout=5)
        self.broadcaster.close()

    # -- endpoint logic (transport-independent) -----------------------------

    def get_state(self) -> dict:
        return self.owner.snapshot

    def get_records(self, since_seq: int = 0, side: str | None = None,
                    verdict: str | None = None, offset: int = 0, limit: int = 500) -> dict:
        records = read_jsonl(self.records_path)
        out = [r for r in records
               if r.get("seq", -1) >= since_seq
               and (side is None or r["side"] == side)
               and (verdict is None or r["verdict"] == verdict)]
        page = out[offset : offset + limit]
        return {"records": page, "total": len(out), "offset": offset, "limit": limit}

    def get_metrics(self) -> dict:
        records = [InspectionRecord.from_dict(r) for r in read_jsonl(self.records_path)]
        per_side = []
        sum_ms = 0.0
        cycle = 0.0
        for side in STATION_ORDER:
            rs = [r for r in records if r.side == side.value]
            if not rs:
                continue
            mean_ms = sum(r.elapsed_ms for r in rs) / len(rs)
            row = {"side": side.value, "test_number": len(rs), "detection_time_ms": mean_ms}
            labeled = [r for r in rs if (r.workpiece, r.side) in self.owner.truth]
            if labeled:
                errors = sum(1 for r in labeled
                             if r.verdict != self.owner.truth[(r.workpiece, r.side)])
                row["accuracy"] = (len(labeled) - errors) / len(labeled) * 100.0
                row["errors"] = errors
            per_side.append(row)
            sum_ms += mean_ms
            cycle = max(cycle, mean_ms)
        counters = rebuild_counters([r.as_dict() for r in records])
        return {"per_side": per_side, "sum_of_sides_ms": sum_ms, "cycle_ms": cycle,
                "counters": counters, "records": len(records)}


def make_handler(service: ScadaService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet
            pass

        # -- helpers --------------------------------------------------------

        def _send_json(self, obj: dict, status: int = 200) -> None:
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_error_obj(self, code: str, message: str, detail=None) -> None:
            self._send_json(api_error(code, message, detail), API_ERRORS.get(code, 500))

        def _read_body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            return json.loads(self.rfile.read(length).decode("utf-8"))

        # -- routes ----------------------------------------------------------

        def do_GET(self):
            url = urllib.parse.urlparse(self.path)
            q = urllib.parse.parse_qs(url.query)
            path = url.path.rstrip("/") or "/"
            if path == "/healthz":
                body = b"ok"
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(body)
            elif path == "/line/state":
                self._send_json(service.get_state())
            elif path == "/records":
                try:
                    self._send_json(service.get_records(
                        since_seq=int(q.get("since_seq", ["0"])[0]),
                        side=q.get("side", [None])[0],
                        verdict=q.get("verdict", [None])[0],
                        offset=int(q.get("offset", ["0"])[0]),
                        limit=int(q.get("limit", ["500"])[0]),
                    ))
                except ValueError as e:
                    self._send_error_obj("invalid_config", f"bad query: {e}")
            elif path == "/metrics":
                self._send_json(service.get_metrics())
            elif path == "/events":
                self._stream_events(int(q.get("since_seq", ["0"])[0]))
            elif path.startswith("/stations/") and path.endswith("/image"):
                side = path.split("/")[2]
                entry = service.owner.latest_images.get(side)
                if entry is None:
                    self._send_error_obj("not_found", f"no image for side {side!r}")
                    return
                wp_id, blob = entry
                self.send_response(200)
                self.send_header("Content-Type", "image/x-portable-pixmap")
                self.send_header("Content-Length", str(len(blob)))
                self.send_header("X-Workpiece", wp_id)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(blob)
            else:
                self._send_error_obj("not_found", f"no route {path!r}")

        def do_POST(self):
            path = urllib.parse.urlparse(self.path).path.rstrip("/")
            if path == "/line/start":
                self._send_json(service.owner.submit("start"))
            elif path == "/line/stop":
                self._send_json(service.owner.submit("stop"))
            else:
                self._send_error_obj("not_found", f"no route {path!r}")

        def do_PATCH(self):
            url = urllib.parse.urlparse(self.path)
            parts = url.path.strip("/").split("/")
            if len(parts) == 3 and parts[0] == "stations" and parts[2] == "config":
                side_name = parts[1]
                try:
                    side = Side(side_name)
                except ValueError:
                    self._send_error_obj("not_found", f"unknown side {side_name!r}")
                    return
                try:
                    body = self._read_body()
                except json.JSONDecodeError as e:
                    self._send_error_obj("invalid_config", f"bad JSON body: {e}")
                    return
                current = next(s for s in service.owner.line.stations if s.side == side)
                merged = current.as_dict()
                tcfg = merged.get("threshold_cfg") or {"side": side.value}
                for k in ("min_gray", "max_gray", "tb", "preprocess"):
                    if k in body:
                        tcfg[k] = body[k]
                merged["threshold_cfg"] = tcfg
                for k in ("backend", "nominal_time_ms", "camera"):
                    if k in body:
                        merged[k] = body[k]
                try:
                    cfg = StationConfig.from_dict(merged)
                except (LineError, BaselineError, ValueError) as e:
                    self._send_error_obj("invalid_config", str(e))
                    return
                reply = service.owner.submit("set_station",
                                             {"side": side.value, "config": cfg.as_dict()})
                if "error" in reply:
                    self._send_json(reply, API_ERRORS.get(reply["error"]["code"], 500))
                else:
                    self._send_json(reply)
            else:
                self._send_error_obj("not_found", "PATCH target not found")

        # -- SSE ---------------------------------------------------------------

        def _stream_events(self, since_seq: int) -> None:
            q = service.broadcaster.subscribe(since_seq)
            try:
                self.send_response(200)
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                while True:
                    try:
                        ev = q.get(timeout=service.heartbeat_s)
                    except queue.Empty:
                        self.wfile.write(b": heartbeat\n\n")
                        self.wfile.flush()
                        continue
                    chunk = f"event: {ev['kind']}\ndata: {json.dumps(ev)}\n\n"
                    self.wfile.write(chunk.encode("utf-8"))
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                service.broadcaster.unsubscribe(q)

    return Handler
