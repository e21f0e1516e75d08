// Detection/feature overlay geometry: pure functions producing draw
// commands; the canvas adapter in main.ts executes them.

import type { Detection, InspectionRecord } from "./types.js";

export interface BoxDraw {
  kind: "box";
  x: number;
  y: number;
  w: number;
  h: number;
  label: string;
  color: string;
}

export interface TintDraw {
  kind: "tint";
  color: string;
  alpha: number;
}

export type DrawCommand = BoxDraw | TintDraw;

export const CLASS_COLORS: Record<string, string> = {
  surface_defect: "#ff9f1c",
  pin_defect: "#4cc9f0",
};

/** Normalized center-size box to canvas pixel corners (linear scaling). */
export function denormalizeBox(box: { cx: number; cy: number; w: number; h: number },
                               canvasW: number, canvasH: number) {
  return {
    x: (box.cx - box.w / 2) * canvasW,
    y: (box.cy - box.h / 2) * canvasH,
    w: box.w * canvasW,
    h: box.h * canvasH,
  };
}

export function verdictColor(verdict: string | null): string {
  if (verdict === "defective") return "#e63946";
  if (verdict === "normal") return "#2a9d8f";
  return "#8d99ae";
}

/** Draw commands for one record over a canvas of the given size. */
export function renderOverlays(record: InspectionRecord, canvasW: number,
                               canvasH: number): DrawCommand[] {
  const out: DrawCommand[] = [];
  if (record.backend === "grid" && record.detections) {
    for (const det of record.detections as Detection[]) {
      const r = denormalizeBox(det.box, canvasW, canvasH);
      out.push({
        kind: "box",
        ...r,
        label: `${det.class} ${(det.score * 100).toFixed(0)}%`,
        color: CLASS_COLORS[det.class] ?? "#ffffff",
      });
    }
  } else if (record.backend === "threshold") {
    // feature pixels are tinted when the side reported any features
    if ((record.feature_count ?? 0) > 0) {
      out.push({ kind: "tint", color: verdictColor(record.verdict), alpha: 0.18 });
    }
  }
  return out;
}
