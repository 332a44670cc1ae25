import init, { Simulation, blowup_curve, steady_profile } from "./pkg/chemokit_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function heatmap(canvas, values, n) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  let max = 0;
  for (const v of values) max = Math.max(max, v);
  for (let j = 0; j < n; j++) {
    for (let i = 0; i < n; i++) {
      const s = max > 0 ? values[j * n + i] / max : 0;
      const k = 4 * ((n - 1 - j) * n + i);
      img.data[k] = 255 * Math.min(1, 2 * s);
      img.data[k + 1] = 255 * Math.max(0, 2 * s - 1);
      img.data[k + 2] = 80 * (1 - s);
      img.data[k + 3] = 255;
    }
  }
  const off = new OffscreenCanvas(n, n);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function plot(canvas, xs, ys, logY) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 40;
  ctx.clearRect(0, 0, w, h);
  const ty = logY ? ys.map((v) => Math.log10(Math.max(v, 1e-300))) : ys;
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(0, ...ty), Math.max(...ty)];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => h - pad - ((y - y0) / (y1 - y0 || 1)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.fillText(x0.toPrecision(3), pad, h - pad + 14);
  ctx.fillText(x1.toPrecision(3), w - pad - 20, h - pad + 14);
  ctx.fillText((logY ? "1e" : "") + y1.toPrecision(3), 2, pad + 4);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  xs.forEach((x, k) => (k ? ctx.lineTo(px(x), py(ty[k])) : ctx.moveTo(px(x), py(ty[k]))));
  ctx.stroke();
}

let sim = null;
let running = false;

function resetSim() {
  try {
    sim = new Simulation(num("sim-n"), 4, num("sim-amp"), num("sim-rate"), num("sim-eps"), num("sim-dt"));
    drawSim();
  } catch (e) {
    $("sim-status").textContent = `error: ${e}`;
  }
}

function drawSim() {
  heatmap($("sim-canvas"), sim.density(), sim.n());
  $("sim-status").textContent =
    `t = ${sim.time().toFixed(3)}  mass = ${sim.mass().toExponential(6)}  max = ${sim.max_density().toExponential(4)}`;
}

function tick() {
  if (!running) return;
  try {
    sim.advance(1);
    drawSim();
    requestAnimationFrame(tick);
  } catch (e) {
    running = false;
    $("sim-run").textContent = "run";
    $("sim-status").textContent += `  stopped: ${e}`;
  }
}

await init();
resetSim();

$("sim-reset").onclick = () => {
  running = false;
  $("sim-run").textContent = "run";
  resetSim();
};
$("sim-run").onclick = () => {
  if (!sim) return;
  running = !running;
  $("sim-run").textContent = running ? "pause" : "run";
  tick();
};

$("bu-go").onclick = () => {
  try {
    const flat = blowup_curve(num("bu-nr"), 2, 600, 60, 5, num("bu-t"));
    const t = [], peak = [];
    for (let k = 0; k < flat.length; k += 2) {
      t.push(flat[k]);
      peak.push(flat[k + 1]);
    }
    plot($("bu-canvas"), t, peak, true);
    $("bu-status").textContent = `max rho(t = ${t.at(-1).toFixed(3)}) = ${peak.at(-1).toExponential(4)}`;
  } catch (e) {
    $("bu-status").textContent = `error: ${e}`;
  }
};

$("st-go").onclick = () => {
  try {
    const flat = steady_profile(num("st-m"), 40, 2, num("st-t"));
    const nr = flat.length / 2;
    plot($("st-canvas"), Array.from(flat.slice(0, nr)), Array.from(flat.slice(nr)), false);
    $("st-status").textContent = `max rho = ${Math.max(...flat.slice(nr)).toFixed(4)}`;
  } catch (e) {
    $("st-status").textContent = `error: ${e}`;
  }
};
