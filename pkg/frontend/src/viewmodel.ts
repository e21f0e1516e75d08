// Pure view-model reducer: the rendered state is a function of
// (snapshot, ordered events, local pending edits). Replaying the same
// event log always produces the same final model.

import type {
  InspectionRecord, LineState, ServiceEvent, Side, StationConfig,
} from "./types.js";
import { SIDES } from "./types.js";

export interface PendingEdit {
  config: StationConfig;
  effectiveTick: number;
}

export interface SideView {
  lastRecord: InspectionRecord | null;
  verdict: "normal" | "defective" | null;
  config: StationConfig | null;
}

export interface ViewModel {
  connected: boolean;
  running: boolean;
  tick: number;
  counters: { entered: number; passed: number; failed: number };
  cycleTimeMs: number;
  lastSeq: number;
  sides: Record<Side, SideView>;
  pendingEdits: Partial<Record<Side, PendingEdit>>;
  lastVerdicts: { workpiece: string; verdict: string; tick: number }[];
  needsRefetch: boolean;
  banner: string | null;
  eventsApplied: number;
}

export function emptyViewModel(): ViewModel {
  const sides = {} as Record<Side, SideView>;
  for (const s of SIDES) sides[s] = { lastRecord: null, verdict: null, config: null };
  return {
    connected: false,
    running: false,
    tick: 0,
    counters: { entered: 0, passed: 0, failed: 0 },
    cycleTimeMs: 0,
    lastSeq: -1,
    sides,
    pendingEdits: {},
    lastVerdicts: [],
    needsRefetch: false,
    banner: null,
    eventsApplied: 0,
  };
}

/** Seed the model from a /line/state snapshot (authoritative counters). */
export function applySnapshot(vm: ViewModel, state: LineState): ViewModel {
  const next = structuredClone(vm);
  next.connected = true;
  next.banner = null;
  next.running = state.running;
  next.tick = state.tick;
  next.counters = { entered: state.entered, passed: state.passed, failed: state.failed };
  next.cycleTimeMs = state.cycle_time_ms;
  next.lastSeq = state.event_seq;
  for (const st of state.stations) next.sides[st.side].config = st;
  return next;
}

/** Apply one sequenced event; detects gaps and flags a full refetch. */
export function applyEvent(vm: ViewModel, ev: ServiceEvent): ViewModel {
  const next = structuredClone(vm);
  if (vm.lastSeq >= 0 && ev.seq <= vm.lastSeq) {
    return next; // duplicate delivery: already applied, ignore
  }
  if (vm.lastSeq >= 0 && ev.seq !== vm.lastSeq + 1) {
    next.needsRefetch = true;
    next.lastSeq = ev.seq;
    return next;
  }
  next.lastSeq = ev.seq;
  next.eventsApplied = vm.eventsApplied + 1;
  const p = ev.payload as Record<string, any>;
  switch (ev.kind) {
    case "workpiece_enter":
      next.counters.entered += 1;
      next.tick = p.tick ?? next.tick;
      break;
    case "station_result": {
      const rec = p as unknown as InspectionRecord;
      const side = rec.side as Side;
      next.sides[side].lastRecord = rec;
      next.sides[side].verdict = rec.verdict;
      next.tick = rec.tick ?? next.tick;
      break;
    }
    case "workpiece_verdict":
      if (p.verdict === "defective") next.counters.failed += 1;
      else next.counters.passed += 1;
      next.lastVerdicts = [
        { workpiece: p.workpiece, verdict: p.verdict, tick: p.tick },
        ...next.lastVerdicts,
      ].slice(0, 25);
      break;
    case "config_changed": {
      const side = p.side as Side;
      next.sides[side].config = p.config as StationConfig;
      const pending = next.pendingEdits[side];
      if (pending && p.effective_tick >= pending.effectiveTick) {
        delete next.pendingEdits[side]; // pending -> effective
      }
      break;
    }
    case "line_started":
      next.running = true;
      break;
    case "line_stopped":
      next.running = false;
      break;
  }
  return next;
}

/** Record an acknowledged PATCH: shown as pending until its effective tick. */
export function applyEditAck(vm: ViewModel, side: Side, config: StationConfig,
                             effectiveTick: number): ViewModel {
  const next = structuredClone(vm);
  next.pendingEdits[side] = { config, effectiveTick };
  return next;
}

export function applyDisconnect(vm: ViewModel, message: string): ViewModel {
  const next = structuredClone(vm);
  next.connected = false;
  next.banner = message;
  return next;
}

/** Client-side validation used before any PATCH is sent. */
export function validateThresholdEdit(minGray: number, maxGray: number,
                                      tb: number): string | null {
  if (!Number.isInteger(minGray) || !Number.isInteger(maxGray) || !Number.isInteger(tb)) {
    return "thresholds must be integers";
  }
  if (minGray < 0 || maxGray > 255) return "band must lie in [0, 255]";
  if (minGray > maxGray) return "min_gray must not exceed max_gray";
  if (tb < 1) return "TB must be at least 1";
  return null;
}

/** Replay a whole recorded log (after a snapshot) -- used by tests and
 * for deterministic reconnect catch-up. */
export function replay(vm: ViewModel, events: ServiceEvent[]): ViewModel {
  let cur = vm;
  for (const ev of events) cur = applyEvent(cur, ev);
  return cur;
}
