import { ApiClient } from "./api";
import { SessionController } from "./controller";
import { ColorMode } from "./state";
import { CloudViewer } from "./viewer";

const API_BASE = (import.meta as any).env?.VITE_API_BASE ?? "http://127.0.0.1:8008";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function fmt(x: number | null): string {
  return x === null ? "–" : (100 * x).toFixed(1) + "%";
}

async function boot() {
  const canvas = el<HTMLCanvasElement>("viewer");
  if (!window.WebGLRenderingContext) {
    el("banner").textContent = "WebGL is unavailable in this browser.";
    return;
  }
  const api = new ApiClient(API_BASE);
  const viewer = new CloudViewer(canvas);
  const controller = new SessionController(api, viewer);

  const sceneSelect = el<HTMLSelectElement>("scene");
  const classBar = el("classes");
  const status = el("status");
  const metrics = el("metrics");
  const sparkline = el<HTMLCanvasElement>("sparkline");
  const submitBtn = el<HTMLButtonElement>("submit");
  const resetBtn = el<HTMLButtonElement>("reset");
  const undoBtn = el<HTMLButtonElement>("undo");

  const { scenes } = await api.scenes();
  for (const name of scenes) {
    const opt = document.createElement("option");
    opt.value = opt.textContent = name;
    sceneSelect.appendChild(opt);
  }

  function drawSparkline() {
    const ctx = sparkline.getContext("2d")!;
    ctx.clearRect(0, 0, sparkline.width, sparkline.height);
    const hist = controller.miouHistory.filter((v): v is number => v !== null);
    if (hist.length < 1) return;
    ctx.strokeStyle = "#6cf";
    ctx.beginPath();
    const w = sparkline.width, h = sparkline.height;
    hist.forEach((v, i) => {
      const x = hist.length === 1 ? 0 : (i / (hist.length - 1)) * (w - 4) + 2;
      const y = h - 2 - v * (h - 4);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
  }

  function refreshPanel() {
    const m = controller.metrics();
    metrics.textContent =
      `mIoU ${fmt(m.miou)} · clicks ${m.clickCount} · rounds ${m.rounds}` +
      (m.pending ? ` · pending ${m.pending}` : "");
    submitBtn.disabled = controller.busy || m.pending === 0;
    drawSparkline();
  }

  function buildClassBar() {
    classBar.innerHTML = "";
    controller.classNames.forEach((name, i) => {
      const chip = document.createElement("button");
      const [r, g, b] = controller.palette[i];
      chip.className = "chip";
      chip.style.background = `rgb(${255 * r | 0},${255 * g | 0},${255 * b | 0})`;
      chip.textContent = `${i + 1} ${name}`;
      chip.onclick = () => {
        controller.selectClass(i);
        [...classBar.children].forEach((c, j) =>
          (c as HTMLElement).classList.toggle("active", j === i));
      };
      classBar.appendChild(chip);
    });
    (classBar.children[0] as HTMLElement)?.classList.add("active");
  }

  async function openScene(name: string) {
    status.textContent = `warming up ${name}…`;
    await controller.open(name);
    buildClassBar();
    status.textContent = `ready — click a mis-segmented point, pick its class, submit`;
    refreshPanel();
  }

  sceneSelect.onchange = () => openScene(sceneSelect.value);

  for (const mode of ["prediction", "error", "entropy", "rgb"] as ColorMode[]) {
    el(`mode-${mode}`).onclick = () => {
      controller.setMode(mode);
      document.querySelectorAll(".mode").forEach((b) =>
        b.classList.toggle("active", b.id === `mode-${mode}`));
    };
  }

  canvas.addEventListener("pointerdown", (ev) => {
    if (ev.button !== 0 || ev.shiftKey) return;
    const idx = viewer.pick(ev.clientX, ev.clientY);
    if (idx === null) return;
    controller.queueClick(idx);
    refreshPanel();
  });

  window.addEventListener("keydown", (ev) => {
    const k = parseInt(ev.key, 10);
    if (k >= 1 && k <= controller.classNames.length) {
      controller.selectClass(k - 1);
      [...classBar.children].forEach((c, j) =>
        (c as HTMLElement).classList.toggle("active", j === k - 1));
    }
  });

  submitBtn.onclick = async () => {
    status.textContent = "refining…";
    submitBtn.disabled = true;
    try {
      const diff = await controller.submitRound();
      await controller.syncEntropies();
      status.textContent = `refined: ${diff.changed_indices.length} labels changed`;
    } catch (err: any) {
      status.textContent = err.status === 409
        ? "busy — try again in a moment" : `error: ${err.message}`;
    }
    refreshPanel();
  };

  undoBtn.onclick = () => {
    const last = controller.view.pending.at(-1);
    if (last) controller.unqueueClick(last.pointIndex);
    refreshPanel();
  };

  resetBtn.onclick = async () => {
    status.textContent = "resetting…";
    await controller.reset();
    status.textContent = "restored to the warm-up snapshot";
    refreshPanel();
  };

  if (scenes.length) {
    sceneSelect.value = scenes[0];
    await openScene(scenes[0]);
  } else {
    status.textContent = "no scenes on the server — run gen-data and restart";
  }
}

boot().catch((err) => {
  el("banner").textContent = `failed to start: ${err.message}`;
});
