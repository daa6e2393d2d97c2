// Glue for index.html. Expects the wasm-bindgen output in ./pkg
// (wasm-pack build crates/web --target web --out-dir www/pkg).
import init, { regret_curves, MazeSession } from "./pkg/selfref_web.js";

const COLORS = ["#888", "#d62728", "#ff7f0e", "#2ca02c", "#1f77b4"];
const WALL_HALF = 0.6;
const WALL_T = 0.05;

function drawRegret(curves) {
  const c = document.getElementById("mab-plot");
  const ctx = c.getContext("2d");
  const pad = 40;
  ctx.clearRect(0, 0, c.width, c.height);
  const tMax = Math.max(...curves.flatMap((k) => k.t));
  const yMax = Math.max(...curves.flatMap((k) => k.mean.map((m, i) => m + k.stderr[i]))) || 1;
  const x = (t) => pad + (t / tMax) * (c.width - 2 * pad);
  const y = (v) => c.height - pad - (v / yMax) * (c.height - 2 * pad);
  ctx.strokeStyle = "#444";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, c.height - pad);
  ctx.lineTo(c.width - pad, c.height - pad);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText("0", pad - 12, c.height - pad + 4);
  ctx.fillText(yMax.toFixed(0), 2, pad + 4);
  ctx.fillText(`t = ${tMax}`, c.width - pad - 30, c.height - pad + 16);
  const legend = document.getElementById("mab-legend");
  legend.innerHTML = "";
  curves.forEach((k, i) => {
    const col = COLORS[i % COLORS.length];
    ctx.fillStyle = col + "33";
    ctx.beginPath();
    k.t.forEach((t, j) => ctx.lineTo(x(t), y(k.mean[j] + k.stderr[j])));
    [...k.t].reverse().forEach((t, j) => {
      const jj = k.t.length - 1 - j;
      ctx.lineTo(x(t), y(k.mean[jj] - k.stderr[jj]));
    });
    ctx.fill();
    ctx.strokeStyle = col;
    ctx.beginPath();
    k.t.forEach((t, j) => ctx.lineTo(x(t), y(k.mean[j])));
    ctx.stroke();
    const final = k.mean[k.mean.length - 1].toFixed(1);
    legend.insertAdjacentHTML(
      "beforeend",
      `<div><span class="swatch" style="background:${col}"></span>${k.agent}: ${final}</div>`,
    );
  });
}

let session = null;
let running = false;
let lastExplain = null;

const mazeCanvas = document.getElementById("maze");
const toPx = (v) => ((v + 1) / 2) * mazeCanvas.width;
const toPy = (v) => ((1 - v) / 2) * mazeCanvas.height;
const fromPx = (px) => (px / mazeCanvas.width) * 2 - 1;
const fromPy = (py) => 1 - (py / mazeCanvas.height) * 2;

function drawMaze() {
  const ctx = mazeCanvas.getContext("2d");
  const w = mazeCanvas.width;
  ctx.clearRect(0, 0, w, w);
  const g = session.grid();
  const visits = session.visits();
  const maxLog = Math.log1p(Math.max(...visits));
  const cell = w / g;
  for (let cy = 0; cy < g; cy++) {
    for (let cx = 0; cx < g; cx++) {
      const v = visits[cy * g + cx];
      if (v === 0) continue;
      const a = Math.log1p(v) / maxLog;
      ctx.fillStyle = `rgba(31,119,180,${0.15 + 0.85 * a})`;
      ctx.fillRect(cx * cell, w - (cy + 1) * cell, cell, cell);
    }
  }
  ctx.fillStyle = "#333";
  ctx.fillRect(toPx(-WALL_T / 2), toPy(WALL_HALF), toPx(WALL_T / 2) - toPx(-WALL_T / 2), toPy(-WALL_HALF) - toPy(WALL_HALF));
  ctx.fillRect(toPx(-WALL_HALF), toPy(WALL_T / 2), toPx(WALL_HALF) - toPx(-WALL_HALF), toPy(-WALL_T / 2) - toPy(WALL_T / 2));
  const trail = session.trail();
  ctx.strokeStyle = "rgba(214,39,40,0.7)";
  ctx.beginPath();
  for (let i = 0; i < trail.length; i += 2) ctx.lineTo(toPx(trail[i]), toPy(trail[i + 1]));
  ctx.stroke();
  if (lastExplain) drawExplain(ctx, lastExplain);
  document.getElementById("status").textContent =
    `steps     ${session.steps()}\ncoverage  ${session.coverage().toFixed(3)}\nwindow    ${session.window_len()}`;
}

function drawExplain(ctx, e) {
  const slotsPer = e.trajectories.length ? e.trajectories[0].length : 0;
  const nSlots = e.trajectories.length * slotsPer;
  e.trajectories.forEach((traj, i) => {
    // mean weight of this trajectory's slots over heads
    let wsum = 0;
    for (let h = 0; h < e.heads; h++) {
      for (let d = 0; d < slotsPer; d++) wsum += e.weights[h * nSlots + i * slotsPer + d];
    }
    const a = Math.min(1, 0.2 + (wsum / e.heads) * 1.5);
    ctx.strokeStyle = `rgba(44,160,44,${a})`;
    ctx.lineWidth = 3;
    ctx.beginPath();
    traj.forEach(([x, y]) => ctx.lineTo(toPx(x), toPy(y)));
    ctx.stroke();
    ctx.lineWidth = 1;
  });
  ctx.fillStyle = "#000";
  ctx.beginPath();
  ctx.arc(toPx(e.at[0]), toPy(e.at[1]), 4, 0, 2 * Math.PI);
  ctx.fill();
  ctx.strokeStyle = "#ff7f0e";
  ctx.beginPath();
  ctx.arc(toPx(e.query[0]), toPy(e.query[1]), 6, 0, 2 * Math.PI);
  ctx.stroke();
}

function resetMaze() {
  const seed = BigInt(document.getElementById("maze-seed").value || 0);
  const sr = document.getElementById("maze-sr").checked;
  const strategy = document.getElementById("maze-strategy").value;
  session?.free();
  session = new MazeSession(seed, sr, strategy);
  lastExplain = null;
  document.getElementById("explain-out").textContent = "";
  drawMaze();
}

function tick() {
  if (!running) return;
  session.step(200);
  drawMaze();
  requestAnimationFrame(tick);
}

async function main() {
  await init();
  const runMab = () => {
    const seeds = +document.getElementById("mab-seeds").value;
    const horizon = +document.getElementById("mab-horizon").value;
    const noise = +document.getElementById("mab-noise").value;
    drawRegret(JSON.parse(regret_curves(seeds, horizon, 10, noise)));
  };
  document.getElementById("mab-run").onclick = runMab;
  runMab();

  document.getElementById("maze-reset").onclick = resetMaze;
  document.getElementById("maze-toggle").onclick = (ev) => {
    running = !running;
    ev.target.textContent = running ? "pause" : "start";
    if (running) tick();
  };
  mazeCanvas.onclick = (ev) => {
    const r = mazeCanvas.getBoundingClientRect();
    const x = fromPx(ev.clientX - r.left);
    const y = fromPy(ev.clientY - r.top);
    const out = document.getElementById("explain-out");
    try {
      lastExplain = { ...JSON.parse(session.explain(x, y)), at: [x, y] };
      const e = lastExplain;
      out.textContent =
        `query at (${x.toFixed(2)}, ${y.toFixed(2)}) -> (${e.query[0].toFixed(2)}, ${e.query[1].toFixed(2)})\n` +
        (e.trajectories.length
          ? `${e.trajectories.length} trajectories, ${e.heads} heads`
          : "window still warming up");
    } catch (err) {
      lastExplain = null;
      out.textContent = String(err);
    }
    drawMaze();
  };
  resetMaze();
}

main();
