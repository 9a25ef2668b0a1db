import { CanvasState, Point } from "./canvas.js";
import { JobRecord, JobsClient, ServiceError, TraceRow } from "./client.js";
import { encodeGrayPng } from "./png.js";
import { rasterize } from "./raster.js";
import { SessionState, sketchHash } from "./session.js";
import { sparklinePoints } from "./sparkline.js";

const state = new CanvasState(512, 512);
const session = new SessionState();
const client = new JobsClient(window.location.origin);

const el = <T extends HTMLElement>(id: string): T => document.getElementById(id) as T;

const drawArea = el<HTMLCanvasElement>("draw-area");
const ctx = drawArea.getContext("2d")!;
const statusLine = el<HTMLDivElement>("status");
const errorBanner = el<HTMLDivElement>("error-banner");
const progressBar = el<HTMLProgressElement>("progress");
const resultImg = el<HTMLImageElement>("result");
const sparkline = el("spark-path");
const historyList = el<HTMLUListElement>("history");
const submitButton = el<HTMLButtonElement>("submit");

let pending: Point[] = [];
let drawing = false;
let erasing = false;

function redraw(): void {
  ctx.fillStyle = "#fff";
  ctx.fillRect(0, 0, drawArea.width, drawArea.height);
  ctx.lineCap = "round";
  ctx.lineJoin = "round";
  const live = pending.length
    ? [...state.strokeList, { points: pending, width: strokeWidth(), erase: erasing }]
    : state.strokeList;
  for (const stroke of live) {
    ctx.strokeStyle = stroke.erase ? "#fff" : "#000";
    ctx.lineWidth = stroke.width;
    ctx.beginPath();
    ctx.moveTo(stroke.points[0].x, stroke.points[0].y);
    for (const p of stroke.points.slice(1)) ctx.lineTo(p.x, p.y);
    ctx.stroke();
  }
}

const strokeWidth = () => Number(el<HTMLInputElement>("stroke-width").value) || 6;

function canvasPoint(event: PointerEvent): Point {
  const rect = drawArea.getBoundingClientRect();
  return { x: event.clientX - rect.left, y: event.clientY - rect.top };
}

drawArea.addEventListener("pointerdown", (event) => {
  drawing = true;
  erasing = el<HTMLInputElement>("erase-mode").checked;
  pending = [canvasPoint(event)];
  drawArea.setPointerCapture(event.pointerId);
  redraw();
});
drawArea.addEventListener("pointermove", (event) => {
  if (!drawing) return;
  pending.push(canvasPoint(event));
  redraw();
});
drawArea.addEventListener("pointerup", () => {
  if (drawing && pending.length) {
    state.addStroke({ points: pending, width: strokeWidth(), erase: erasing });
  }
  drawing = false;
  pending = [];
  redraw();
});

el<HTMLButtonElement>("undo").addEventListener("click", () => {
  state.undo();
  redraw();
});
el<HTMLButtonElement>("clear").addEventListener("click", () => {
  state.clear();
  redraw();
});

el<HTMLInputElement>("exemplar-file").addEventListener("change", async (event) => {
  const input = event.target as HTMLInputElement;
  const file = input.files?.[0];
  session.exemplar = file ? new Uint8Array(await file.arrayBuffer()) : null;
});

function readControls(): void {
  session.classLabel = el<HTMLInputElement>("class-label").value.trim();
  session.seed = Number(el<HTMLInputElement>("seed").value) || 0;
  session.beta = Number(el<HTMLInputElement>("beta").value);
  session.guidedSteps = Number(el<HTMLInputElement>("guided-steps").value);
  session.mode = el<HTMLSelectElement>("mode").value === "edit" ? "edit" : "generate";
}

function showError(message: string, retryable: boolean): void {
  errorBanner.textContent = retryable ? `${message} — check the service and retry` : message;
  errorBanner.hidden = false;
}

function updateProgress(record: JobRecord): void {
  progressBar.max = Math.max(record.progress.total, 1);
  progressBar.value = record.progress.done;
  statusLine.textContent = `${record.state} ${record.progress.done}/${record.progress.total}`;
}

function updateSparkline(rows: TraceRow[]): void {
  sparkline.setAttribute("points", sparklinePoints(rows.map((r) => r.loss_after), 220, 48));
}

function pngUrl(bytes: Uint8Array): string {
  return URL.createObjectURL(new Blob([bytes.buffer as ArrayBuffer], { type: "image/png" }));
}

function appendHistory(entry: { jobId: string; thumbnail: Uint8Array }): void {
  const item = document.createElement("li");
  const img = document.createElement("img");
  img.src = pngUrl(entry.thumbnail);
  img.width = 64;
  img.height = 64;
  img.title = entry.jobId;
  item.appendChild(img);
  historyList.appendChild(item);
}

async function submit(): Promise<void> {
  errorBanner.hidden = true;
  readControls();
  if (state.isEmpty && !window.confirm("Canvas is blank. Submit an empty sketch?")) return;
  if (!session.beginJob()) return;
  submitButton.disabled = true;
  try {
    const sketch = encodeGrayPng(rasterize(state), state.width, state.height);
    const common = {
      sketch,
      classLabel: session.classLabel,
      seed: session.seed,
      beta: session.beta,
      guidedSteps: session.guidedSteps,
    };
    const jobId =
      session.mode === "edit" && session.exemplar
        ? await client.submitEdit({ ...common, exemplar: session.exemplar })
        : await client.submitGenerate(common);

    const record = await client.waitForCompletion(jobId, (r) => {
      updateProgress(r);
      void client.getTrace(jobId).then(updateSparkline, () => undefined);
    });
    if (record.state === "failed") {
      showError(`job failed: ${record.error ?? "unknown error"}`, false);
      return;
    }
    const [result, trace] = await Promise.all([client.getResult(jobId), client.getTrace(jobId)]);
    updateSparkline(trace);
    resultImg.src = pngUrl(result);
    session.recordResult({ sketchHash: sketchHash(sketch), jobId, seed: session.seed, thumbnail: result });
    appendHistory({ jobId, thumbnail: result });
    statusLine.textContent = `done (${jobId})`;
  } catch (err) {
    if (err instanceof ServiceError) {
      showError(err.detail, false);
    } else {
      showError(err instanceof Error ? err.message : String(err), true);
    }
  } finally {
    session.endJob();
    submitButton.disabled = false;
  }
}

submitButton.addEventListener("click", () => void submit());
redraw();
