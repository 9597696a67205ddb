import { AnnotationApi } from "./api.js";
import { AnnotationApp } from "./app.js";
import { PendingFailure, WireBox } from "./types.js";

// DOM wiring for the annotation client. All state transitions live in
// AnnotationApp; this file only renders and forwards pointer events.

const POLL_INTERVAL_MS = 1000;

const api = new AnnotationApi();
const app = new AnnotationApp(api);

const queueEl = document.getElementById("queue") as HTMLUListElement;
const detailEl = document.getElementById("detail") as HTMLDivElement;
const imageEl = document.getElementById("image") as HTMLImageElement;
const overlayEl = document.getElementById("overlay") as HTMLCanvasElement;
const thumbsEl = document.getElementById("thumbs") as HTMLDivElement;
const classesEl = document.getElementById("classes") as HTMLSelectElement;
const undoEl = document.getElementById("undo") as HTMLButtonElement;
const negEl = document.getElementById("true-negative") as HTMLInputElement;
const submitEl = document.getElementById("submit") as HTMLButtonElement;
const statusEl = document.getElementById("status") as HTMLDivElement;
const errorEl = document.getElementById("error") as HTMLDivElement;

let renderedImageUrl = "";

function describe(failure: PendingFailure): string {
  return `${failure.id} trial ${failure.trial} ${failure.task}: ` +
    `${failure.reason} [${failure.class_labels.join(", ")}]`;
}

function renderQueue(): void {
  queueEl.replaceChildren(
    ...app.failures.map((failure) => {
      const item = document.createElement("li");
      const button = document.createElement("button");
      button.textContent = describe(failure);
      button.disabled = app.selected !== null &&
        app.selected.id === failure.id;
      button.onclick = () => {
        app.select(failure.id);
        render();
      };
      item.appendChild(button);
      return item;
    }),
  );
}

function renderThumbs(failure: PendingFailure): void {
  thumbsEl.replaceChildren(
    ...failure.image_ids.map((imageId, index) => {
      const button = document.createElement("button");
      button.textContent = imageId;
      button.disabled = index === app.imageIndex;
      button.onclick = () => {
        app.chooseImage(index);
        render();
      };
      return button;
    }),
  );
}

function drawBoxes(): void {
  const ctx = overlayEl.getContext("2d");
  if (ctx === null || app.editor === null) {
    return;
  }
  ctx.clearRect(0, 0, overlayEl.width, overlayEl.height);
  const paint = (box: WireBox, dashed: boolean) => {
    ctx.strokeStyle = dashed ? "#ffb300" : "#00c853";
    ctx.lineWidth = 2;
    ctx.setLineDash(dashed ? [6, 4] : []);
    ctx.strokeRect(box.x, box.y, box.w, box.h);
    ctx.setLineDash([]);
    ctx.font = "14px sans-serif";
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(box.class, box.x + 2, Math.max(box.y - 4, 12));
  };
  for (const box of app.editor.boxes()) {
    paint(box, false);
  }
  const pending = app.editor.pendingBox();
  if (pending !== null) {
    paint(pending, true);
  }
}

function renderControls(): void {
  const failure = app.selected;
  if (failure === null) {
    detailEl.hidden = true;
    return;
  }
  detailEl.hidden = false;
  renderThumbs(failure);
  if (classesEl.options.length !== failure.vocabulary.length) {
    classesEl.replaceChildren(
      ...failure.vocabulary.map((label) => {
        const opt = document.createElement("option");
        opt.value = label;
        opt.textContent = label;
        return opt;
      }),
    );
  }
  if (app.editor !== null) {
    classesEl.value = app.editor.activeClass;
  }
  negEl.checked = app.trueNegative;
  undoEl.disabled = app.editor === null || app.editor.count === 0;
  submitEl.disabled = !app.canSubmit();
  errorEl.textContent = app.lastError;

  const url = api.imageUrl(failure, app.imageIndex);
  if (url !== renderedImageUrl) {
    renderedImageUrl = url;
    imageEl.src = url;
  }
  drawBoxes();
}

function render(): void {
  renderQueue();
  renderControls();
}

function canvasPoint(ev: MouseEvent): [number, number] {
  const rect = overlayEl.getBoundingClientRect();
  return [
    ((ev.clientX - rect.left) * overlayEl.width) / rect.width,
    ((ev.clientY - rect.top) * overlayEl.height) / rect.height,
  ];
}

imageEl.onload = () => {
  overlayEl.width = imageEl.naturalWidth;
  overlayEl.height = imageEl.naturalHeight;
  app.openEditor(imageEl.naturalWidth, imageEl.naturalHeight);
  render();
};

overlayEl.onmousedown = (ev) => {
  if (app.editor === null || app.trueNegative) {
    return;
  }
  app.editor.setClass(classesEl.value);
  app.editor.beginDrag(...canvasPoint(ev));
};

overlayEl.onmousemove = (ev) => {
  if (app.editor === null) {
    return;
  }
  app.editor.moveDrag(...canvasPoint(ev));
  drawBoxes();
};

overlayEl.onmouseup = () => {
  app.editor?.endDrag();
  render();
};

classesEl.onchange = () => {
  app.editor?.setClass(classesEl.value);
};

undoEl.onclick = () => {
  app.editor?.undo();
  render();
};

negEl.onchange = () => {
  app.setTrueNegative(negEl.checked);
  render();
};

submitEl.onclick = () => {
  void app.submit().then(() => render());
};

async function tick(): Promise<void> {
  try {
    await app.refresh();
    const status = await api.status();
    statusEl.textContent =
      `trial ${status.trial} (${status.phase}), pending ${status.pending}, ` +
      `examples ${status.examples}, clicks ${status.clicks} ` +
      `(${status.annotation_seconds.toFixed(0)} s of annotation)`;
  } catch (err) {
    statusEl.textContent = `server unreachable: ${String(err)}`;
  }
  render();
}

void tick();
setInterval(() => void tick(), POLL_INTERVAL_MS);
