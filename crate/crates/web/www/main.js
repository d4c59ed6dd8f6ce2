import init, { meiosisView, lossView, attentionView } from "./pkg/me_mhacl_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#393b79", "#637939"];

function call(fn, status) {
  try {
    const out = JSON.parse(fn());
    $(status).textContent = "";
    return out;
  } catch (e) {
    $(status).textContent = String(e.message ?? e);
    return null;
  }
}

// Draws one trace; samples before `c` use the prefix subject's colour.
function trace(ctx, data, x0, y0, w, h, c, prefix, suffix, lo, hi) {
  const m = data.length;
  const sx = w / (m - 1);
  const sy = (v) => y0 + h - ((v - lo) / (hi - lo || 1)) * h;
  for (let t = 1; t < m; t++) {
    ctx.strokeStyle = PALETTE[(t <= c ? prefix : suffix) % PALETTE.length];
    ctx.beginPath();
    ctx.moveTo(x0 + (t - 1) * sx, sy(data[t - 1]));
    ctx.lineTo(x0 + t * sx, sy(data[t]));
    ctx.stroke();
  }
}

function drawMeiosis() {
  const t = num("m-t");
  const slider = $("m-c");
  slider.max = Math.max(2, t - 2);
  if (num("m-c") > t - 2) slider.value = t - 2;
  $("m-c-out").textContent = slider.value;
  const v = call(() => meiosisView(num("m-q"), t, num("m-c"), num("m-seed")), "m-status");
  if (!v) return;
  const cv = $("m-canvas");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const columns = [["originals", v.originals], ["group A", v.group_a], ["group B", v.group_b]];
  const all = v.originals.flatMap((s) => s.data);
  const lo = Math.min(...all), hi = Math.max(...all);
  const colW = cv.width / 3;
  const rows = v.originals.length;
  const rowH = (cv.height - 30) / rows;
  columns.forEach(([name, members], k) => {
    const x0 = k * colW + 10;
    ctx.fillStyle = "#222";
    ctx.fillText(name, x0, 12);
    members.forEach((s, i) => {
      trace(ctx, s.data, x0, 20 + i * rowH, colW - 20, rowH - 6, k === 0 ? t : v.split, s.prefix_subject, s.suffix_subject, lo, hi);
      ctx.fillStyle = "#555";
      ctx.fillText(`${s.prefix_subject}|${s.suffix_subject}`, x0 + colW - 44, 30 + i * rowH);
    });
    if (k > 0) {
      const xc = x0 + (v.split / (t - 1)) * (colW - 20);
      ctx.strokeStyle = "#999";
      ctx.setLineDash([3, 3]);
      ctx.beginPath();
      ctx.moveTo(xc, 16);
      ctx.lineTo(xc, 20 + (members.length) * rowH);
      ctx.stroke();
      ctx.setLineDash([]);
    }
  });
  $("m-status").textContent = `split at c = ${v.split}; per-timepoint values conserved: ${v.conserved}`;
}

function heat(ctx, grid, x0, y0, size, lo, hi, diverging) {
  const n = grid.length;
  const cell = size / n;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < grid[i].length; j++) {
      const u = Math.max(0, Math.min(1, (grid[i][j] - lo) / (hi - lo || 1)));
      const r = diverging ? Math.round(255 * Math.min(1, 2 * u)) : Math.round(255 * (1 - u));
      const b = diverging ? Math.round(255 * Math.min(1, 2 - 2 * u)) : 255;
      const g = diverging ? Math.round(255 * (1 - Math.abs(2 * u - 1))) : Math.round(255 * (1 - 0.6 * u));
      ctx.fillStyle = `rgb(${r},${g},${b})`;
      ctx.fillRect(x0 + j * cell, y0 + i * cell, cell, cell);
    }
  }
}

function drawLoss() {
  $("l-tau-out").textContent = num("l-tau").toFixed(2);
  $("l-align-out").textContent = num("l-align").toFixed(2);
  const v = call(() => lossView(num("l-p"), num("l-h"), num("l-tau"), num("l-align"), num("l-seed")), "l-status");
  if (!v) return;
  const cv = $("l-canvas");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  heat(ctx, v.similarity, 0, 0, cv.width, -1, 1, true);
  const p = v.similarity.length / 2;
  ctx.strokeStyle = "#000";
  ctx.strokeRect(cv.width / 2, 0, 0.5, cv.height);
  ctx.strokeRect(0, cv.height / 2, cv.width, 0.5);
  const lines = [
    `loss            ${v.total.toFixed(4)}`,
    `uniform log(2P-1) ${v.uniform.toFixed(4)}`,
    "",
    "per-anchor terms:",
    ...v.terms.map((x, i) => `  ${i < p ? "A" : "B"}${i % p}  ${x.toFixed(4)}`),
    "",
    "cosine similarity, A then B (blue -1, red +1)",
  ];
  $("l-status").textContent = lines.join("\n");
}

let order = null;

function drawAttention() {
  const q = num("a-q");
  if (!order || order.length !== q) order = [...Array(q).keys()];
  $("a-order").textContent = `order [${order.join(", ")}]`;
  const v = call(() => attentionView(q, Uint32Array.from(order), num("a-seed")), "a-status");
  if (!v) return;
  const cv = $("a-canvas");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const size = Math.min(180, (cv.width - 40) / (2 * v.heads) - 10);
  ctx.fillStyle = "#222";
  ctx.fillText("original order", 0, 12);
  ctx.fillText("shuffled order", cv.width / 2, 12);
  [v.weights, v.permuted_weights].forEach((maps, k) => {
    maps.forEach((grid, h) => heat(ctx, grid, k * (cv.width / 2) + h * (size + 10), 20, size, 0, 1, false));
  });
  $("a-status").textContent =
    `${v.heads} heads, ${v.members} members; largest change in the group representation: ${v.max_abs_difference.toExponential(2)}`;
}

function shuffle() {
  for (let i = order.length - 1; i > 0; i--) {
    const j = Math.floor(Math.random() * (i + 1));
    [order[i], order[j]] = [order[j], order[i]];
  }
  drawAttention();
}

await init();
for (const id of ["m-q", "m-t", "m-c", "m-seed"]) $(id).addEventListener("input", drawMeiosis);
for (const id of ["l-p", "l-h", "l-tau", "l-align", "l-seed"]) $(id).addEventListener("input", drawLoss);
for (const id of ["a-q", "a-seed"]) $(id).addEventListener("input", drawAttention);
$("a-shuffle").addEventListener("click", shuffle);
drawMeiosis();
drawLoss();
drawAttention();
