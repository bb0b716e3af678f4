/** Browser entry point: wires the session to a minimal DOM workbench. */

import { ApiClient } from "./api.js";
import { composeOverlay, DEFAULT_OVERLAY } from "./overlay.js";
import { decodePgm } from "./pgm.js";
import { ReviewSession } from "./session.js";

const api = new ApiClient("");
const reviewer =
  new URLSearchParams(location.search).get("reviewer") ?? "reviewer-1";
const session = new ReviewSession(api, reviewer);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const statusLine = document.getElementById("status") as HTMLElement;
const queueList = document.getElementById("queue") as HTMLElement;
const noteInput = document.getElementById("note") as HTMLInputElement;
const opacityInput = document.getElementById("opacity") as HTMLInputElement;

async function render(): Promise<void> {
  const item = session.current;
  const progress = session.progress;
  const counts = progress
    ? Object.entries(progress.status_counts)
        .filter(([, n]) => n > 0)
        .map(([status, n]) => `${status}:${n}`)
        .join("  ")
    : "";
  statusLine.textContent = session.roundComplete
    ? `round complete - press F to finalize  |  ${counts}`
    : `${session.mode}  ${item ? item.id : ""}  |  ${counts}` +
      (session.lastError ? `  |  ${session.lastError}` : "");

  queueList.innerHTML = "";
  for (const queued of session.queue.slice(0, 12)) {
    const row = document.createElement("li");
    row.textContent = `${queued.id} [${queued.status}]`;
    queueList.appendChild(row);
  }

  if (!item) {
    canvas.getContext("2d")?.clearRect(0, 0, canvas.width, canvas.height);
    return;
  }
  const maskBytes = session.editor
    ? session.editor.exportPgm()
    : await api.getMaskBytes(item.id);
  if (!maskBytes) return;
  const mask = decodePgm(maskBytes);
  const binary = new Uint8Array(mask.pixels.length);
  for (let i = 0; i < binary.length; i++) binary[i] = mask.pixels[i] ? 1 : 0;
  // Images are served beside masks; fall back to a flat backdrop offline.
  const gray = new Uint8Array(mask.pixels.length).fill(96);
  const opacity = Number(opacityInput.value) / 100;
  const rgba = composeOverlay(gray, mask.width, mask.height, binary, null, {
    ...DEFAULT_OVERLAY,
    lungOpacity: opacity,
  });
  canvas.width = mask.width;
  canvas.height = mask.height;
  const ctx = canvas.getContext("2d");
  if (ctx) {
    const frame = ctx.createImageData(mask.width, mask.height);
    frame.data.set(rgba);
    ctx.putImageData(frame, 0, 0);
  }
}

document.addEventListener("keydown", async (event) => {
  if (event.target === noteInput) return;
  if (event.key.toLowerCase() === "f" && session.roundComplete) {
    await api.postFinalize();
    await session.refresh();
  } else {
    session.note = noteInput.value;
    await session.handleKey(event.key);
    if (!session.note) noteInput.value = "";
  }
  await render();
});

canvas.addEventListener("pointerdown", (event) => {
  if (!session.editor) return;
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((event.clientX - rect.left) / rect.width) * canvas.width);
  const y = Math.floor(((event.clientY - rect.top) / rect.height) * canvas.height);
  session.editor.stroke(x, y, session.cursor.radius, event.shiftKey ? 0 : 1);
  void render();
});

opacityInput.addEventListener("input", () => void render());

session.refresh().then(render);
