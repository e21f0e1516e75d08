// Browser wiring: tabs, live line overview, station detail with overlays,
// threshold sliders, metrics table. All state flows through the pure
// view-model reducer; this file only renders it.

import { ApiClient, runSession } from "./api.js";
import { decodePpm } from "./ppm.js";
import { renderOverlays, verdictColor, denormalizeBox } from "./overlay.js";
import {
  ViewModel, applyEditAck, applyEvent, applySnapshot, applyDisconnect,
  emptyViewModel, validateThresholdEdit,
} from "./viewmodel.js";
import { SIDES, Side } from "./types.js";

const params = new URLSearchParams(location.search);
const serviceUrl = params.get("service") ?? `http://${location.hostname}:8787`;
const client = new ApiClient(serviceUrl);

let vm: ViewModel = emptyViewModel();
let selectedSide: Side = "front";

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

function render(): void {
  $("conn-dot").className = `dot ${vm.connected ? "live" : "dead"}`;
  $("banner").textContent = vm.banner ?? "";
  $("banner").style.display = vm.banner ? "block" : "none";
  $("running").textContent = vm.connected ? (vm.running ? "running" : "stopped") : "—";
  $("tick").textContent = String(vm.tick);
  $("entered").textContent = String(vm.counters.entered);
  $("passed").textContent = String(vm.counters.passed);
  $("failed").textContent = String(vm.counters.failed);
  $("cycle").textContent = `${vm.cycleTimeMs.toFixed(0)} ms`;

  const lane = $("lane");
  lane.innerHTML = "";
  for (const side of SIDES) {
    const sv = vm.sides[side];
    const cell = document.createElement("div");
    cell.className = "station" + (side === selectedSide ? " selected" : "");
    cell.style.borderTopColor = verdictColor(sv.verdict);
    const pending = vm.pendingEdits[side] ? " ⏳" : "";
    cell.innerHTML = `<b>${side}</b>${pending}<br>` +
      `<span class="v" style="color:${verdictColor(sv.verdict)}">${sv.verdict ?? "idle"}</span><br>` +
      `<small>${sv.lastRecord ? sv.lastRecord.workpiece : ""}</small>`;
    cell.onclick = () => { selectedSide = side; render(); void refreshStation(); };
    lane.appendChild(cell);
  }

  const verdictsEl = $("verdicts");
  verdictsEl.innerHTML = vm.lastVerdicts
    .map((v) => `<li><span style="color:${verdictColor(v.verdict)}">●</span> ` +
                `${v.workpiece} → ${v.verdict} (tick ${v.tick})</li>`)
    .join("");

  renderStationPanel();
}

function renderStationPanel(): void {
  const sv = vm.sides[selectedSide];
  $("st-title").textContent = `Station: ${selectedSide}`;
  $("st-verdict").textContent = sv.verdict ?? "—";
  ($("st-verdict") as HTMLElement).style.color = verdictColor(sv.verdict);
  const rec = sv.lastRecord;
  $("st-meta").textContent = rec
    ? `${rec.workpiece} · ${rec.backend} · ${rec.elapsed_ms.toFixed(0)} ms · tick ${rec.tick}` +
      (rec.feature_count != null ? ` · features ${rec.feature_count}` : "")
    : "no record yet";
  const cfg = sv.config?.threshold_cfg;
  if (cfg) {
    (document.getElementById("min-gray") as HTMLInputElement).placeholder = String(cfg.min_gray);
    (document.getElementById("max-gray") as HTMLInputElement).placeholder = String(cfg.max_gray);
    (document.getElementById("tb") as HTMLInputElement).placeholder = String(cfg.tb);
    $("cfg-now").textContent =
      `effective: [${cfg.min_gray}, ${cfg.max_gray}] tb=${cfg.tb} (${cfg.preprocess})`;
  }
  const pending = vm.pendingEdits[selectedSide];
  $("cfg-pending").textContent = pending
    ? `pending until tick ${pending.effectiveTick}`
    : "";
}

async function refreshStation(): Promise<void> {
  const canvas = $("st-canvas") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  try {
    const blob = await client.getStationImage(selectedSide);
    const img = decodePpm(blob);
    canvas.width = img.width;
    canvas.height = img.height;
    ctx.putImageData(new ImageData(img.rgba, img.width, img.height), 0, 0);
  } catch {
    ctx.fillStyle = "#202530";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    ctx.fillStyle = "#8d99ae";
    ctx.fillText("no image", 12, 20);
    return;
  }
  const rec = vm.sides[selectedSide].lastRecord;
  if (!rec) return;
  for (const cmd of renderOverlays(rec, canvas.width, canvas.height)) {
    if (cmd.kind === "box") {
      ctx.strokeStyle = cmd.color;
      ctx.lineWidth = 2;
      ctx.strokeRect(cmd.x, cmd.y, cmd.w, cmd.h);
      ctx.fillStyle = cmd.color;
      ctx.fillText(cmd.label, cmd.x, Math.max(10, cmd.y - 3));
    } else {
      ctx.fillStyle = cmd.color;
      ctx.globalAlpha = cmd.alpha;
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      ctx.globalAlpha = 1.0;
    }
  }
}

async function refreshMetrics(): Promise<void> {
  try {
    const metrics = await client.getMetrics() as any;
    const rows = (metrics.per_side ?? []) as any[];
    $("metrics-body").innerHTML = rows.map((r) =>
      `<tr><td>${r.side}</td><td>${r.test_number}</td>` +
      `<td>${r.accuracy != null ? r.accuracy.toFixed(2) + "%" : "—"}</td>` +
      `<td>${r.detection_time_ms.toFixed(1)}</td></tr>`).join("");
    $("metrics-totals").textContent =
      `sum of sides ${metrics.sum_of_sides_ms?.toFixed(0)} ms · ` +
      `cycle ${metrics.cycle_ms?.toFixed(0)} ms · records ${metrics.records}`;
  } catch {
    $("metrics-totals").textContent = "metrics unavailable";
  }
}

function wireControls(): void {
  $("btn-start").onclick = () => void client.start();
  $("btn-stop").onclick = () => void client.stop();
  $("btn-apply").onclick = () => void submitEdit();
  for (const tab of ["line", "station", "metrics"]) {
    $(`tab-${tab}`).onclick = () => {
      for (const t of ["line", "station", "metrics"]) {
        $(`tab-${t}`).classList.toggle("active", t === tab);
        $(`panel-${t}`).style.display = t === tab ? "block" : "none";
      }
      if (tab === "metrics") void refreshMetrics();
      if (tab === "station") void refreshStation();
    };
  }
}

async function submitEdit(): Promise<void> {
  const minGray = parseInt(($("min-gray") as HTMLInputElement).value, 10);
  const maxGray = parseInt(($("max-gray") as HTMLInputElement).value, 10);
  const tb = parseInt(($("tb") as HTMLInputElement).value, 10);
  const problem = validateThresholdEdit(minGray, maxGray, tb);
  const errEl = $("cfg-error");
  if (problem) {
    errEl.textContent = problem;  // inline error, no request sent
    return;
  }
  errEl.textContent = "";
  const reply = await client.patchThreshold(selectedSide,
                                            { min_gray: minGray, max_gray: maxGray, tb });
  if (reply.error) {
    errEl.textContent = `${reply.error.code}: ${reply.error.message}`;
    return;
  }
  vm = applyEditAck(vm, selectedSide, reply.config as any, reply.effective_tick ?? 0);
  render();
}

function boot(): void {
  wireControls();
  render();
  void runSession(client, {
    onState: (state) => { vm = applySnapshot(vm, state); render(); },
    onEvent: (ev) => {
      vm = applyEvent(vm, ev);
      if (vm.needsRefetch) {
        // sequence gap: restart the session loop with a fresh snapshot
        vm = { ...vm, needsRefetch: false };
      }
      render();
      if (ev.kind === "station_result" && (ev.payload as any).side === selectedSide) {
        void refreshStation();
      }
    },
    onDisconnect: (msg) => { vm = applyDisconnect(vm, msg); render(); },
  });
}

boot();
export { denormalizeBox };
