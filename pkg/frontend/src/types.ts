// Wire types mirroring the supervision service's JSON payloads.

export const SIDES = ["left", "top", "right", "bottom", "back", "front"] as const;
export type Side = (typeof SIDES)[number];

export interface ThresholdConfig {
  side: Side;
  min_gray: number;
  max_gray: number;
  tb: number;
  preprocess: string;
}

export interface StationConfig {
  side: Side;
  backend: "threshold" | "grid";
  threshold_cfg: ThresholdConfig | null;
  camera: string;
  nominal_time_ms: number | null;
}

export interface LineState {
  tick: number;
  running: boolean;
  entered: number;
  passed: number;
  failed: number;
  in_flight: number;
  cycle_time_ms: number;
  slots: (string | null)[];
  queue_len: number;
  stations: StationConfig[];
  pending_configs: { effective_tick: number; config: StationConfig }[];
  lost?: number;
  event_seq: number;
  timing?: string;
}

export interface DetectionBox {
  class: string;
  cx: number;
  cy: number;
  w: number;
  h: number;
}

export interface Detection {
  box: DetectionBox;
  score: number;
  class: string;
  image?: string | null;
}

export interface InspectionRecord {
  workpiece: string;
  side: Side;
  backend: "threshold" | "grid";
  verdict: "normal" | "defective";
  elapsed_ms: number;
  tick: number;
  timestamp: number;
  feature_count?: number | null;
  detections?: Detection[] | null;
  seq?: number;
}

export type EventKind =
  | "workpiece_enter"
  | "station_result"
  | "workpiece_verdict"
  | "config_changed"
  | "line_started"
  | "line_stopped";

export interface ServiceEvent {
  seq: number;
  kind: EventKind;
  payload: Record<string, unknown>;
}
