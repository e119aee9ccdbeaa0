// Static page glue: wires the wasm exports to the three canvases.
// Build the pkg/ directory first (see README): wasm-pack build --target web
import init, {
  shape_names, color_names, demo_cloud, demo_lr_curve, demo_route,
} from "./pkg/mqe_align_wasm.js";

const $ = (id) => document.getElementById(id);

const PATCH_COLORS = [
  "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0",
  "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff", "#9a6324",
  "#fffac8", "#800000", "#aaffc3", "#808000",
];

function fillSelect(sel, names, preferred) {
  sel.innerHTML = "";
  for (const n of names) {
    const o = document.createElement("option");
    o.textContent = n;
    sel.appendChild(o);
  }
  if (preferred) sel.value = preferred;
}

function drawCloud() {
  let data;
  try {
    data = JSON.parse(demo_cloud(
      $("cShape").value, $("cColor").value,
      +$("cPoints").value, +$("cPatches").value, +$("cGroup").value, +$("cSeed").value,
    ));
  } catch (e) {
    console.error(e);
    return;
  }
  const canvas = $("cloudCanvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  const angle = +$("cSpin").value / 100;
  const byPatch = $("cByPatch").checked;
  const cos = Math.cos(angle), sin = Math.sin(angle);
  const scale = Math.min(canvas.width, canvas.height) * 0.34;
  const cx = canvas.width / 2, cy = canvas.height / 2;

  // patch membership for coloring (first group wins on overlap)
  const patchOf = new Array(data.points.length).fill(-1);
  data.groups.forEach((g, gi) => {
    for (const idx of g) if (patchOf[idx] < 0) patchOf[idx] = gi;
  });

  const project = (p) => {
    const x = p[0] * cos + p[1] * sin;
    const y = p[1] * cos - p[0] * sin;
    const z = p[2];
    return [cx + x * scale, cy - z * scale, y];
  };

  const order = data.points.map((p, i) => [project(p), i])
    .sort((a, b) => a[0][2] - b[0][2]);
  for (const [[px, py], i] of order) {
    const p = data.points[i];
    if (byPatch && patchOf[i] >= 0) {
      ctx.fillStyle = PATCH_COLORS[patchOf[i] % PATCH_COLORS.length];
    } else {
      const r = Math.round(p[3] * 255), g = Math.round(p[4] * 255), b = Math.round(p[5] * 255);
      ctx.fillStyle = (r + g + b === 0) ? "#999" : `rgb(${r},${g},${b})`;
    }
    ctx.beginPath();
    ctx.arc(px, py, 2.4, 0, 6.3);
    ctx.fill();
  }
  data.centers.forEach((c, gi) => {
    const [px, py] = project(c);
    ctx.strokeStyle = PATCH_COLORS[gi % PATCH_COLORS.length];
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(px, py, 7, 0, 6.3);
    ctx.stroke();
  });
}

function drawLr() {
  let data;
  try {
    data = JSON.parse(demo_lr_curve($("lProfile").value, +$("lStage").value, 512));
  } catch (e) {
    console.error(e);
    return;
  }
  const canvas = $("lrCanvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 44;
  const w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const maxY = Math.max(...data.ys);

  ctx.strokeStyle = "#8886";
  ctx.strokeRect(pad, pad, w, h);

  // warmup boundary
  const wx = pad + (data.warmup_steps / data.total_steps) * w;
  ctx.strokeStyle = "#f5823188";
  ctx.beginPath(); ctx.moveTo(wx, pad); ctx.lineTo(wx, pad + h); ctx.stroke();

  ctx.strokeStyle = "#4363d8";
  ctx.lineWidth = 2;
  ctx.beginPath();
  data.xs.forEach((x, i) => {
    const px = pad + (x / data.total_steps) * w;
    const py = pad + h - (data.ys[i] / maxY) * h;
    if (i === 0) ctx.moveTo(px, py); else ctx.lineTo(px, py);
  });
  ctx.stroke();

  ctx.fillStyle = "#888";
  ctx.font = "12px system-ui";
  ctx.fillText("0", pad - 4, pad + h + 14);
  ctx.fillText(String(data.total_steps), pad + w - 24, pad + h + 14);
  ctx.fillText(maxY.toExponential(1), 2, pad + 6);
  $("lrInfo").textContent =
    `warmup ${data.warmup_lr} → init ${data.init_lr} over ${data.warmup_steps} steps, ` +
    `cosine → min ${data.min_lr} at step ${data.total_steps}`;
}

function drawRoute() {
  let data;
  try {
    data = JSON.parse(demo_route(
      $("rShape").value, $("rColor").value,
      +$("rK").value, +$("rG").value, $("rMode").value, +$("rSeed").value,
    ));
  } catch (e) {
    $("routeInfo").textContent = String(e);
    return;
  }
  const canvas = $("routeCanvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 40;
  const w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const k = data.weights.length;
  const maxW = Math.max(...data.weights, 1e-9);
  const bw = w / k * 0.72;

  data.weights.forEach((wt, i) => {
    const selected = data.selected.includes(i);
    const bx = pad + (i + 0.14) * (w / k);
    const bh = (wt / maxW) * h;
    ctx.fillStyle = selected ? PATCH_COLORS[i % PATCH_COLORS.length] : "#8885";
    ctx.fillRect(bx, pad + h - bh, bw, bh);
    ctx.fillStyle = "#888";
    ctx.font = "12px system-ui";
    ctx.fillText(`E${i}`, bx + bw / 2 - 8, pad + h + 14);
    ctx.fillText(wt.toFixed(3), bx, pad + h - bh - 4);
  });
  $("routeInfo").textContent =
    `mode ${data.mode}: selected [${data.selected.join(", ")}], ` +
    `selected weight mass ${data.weight_sum_selected.toFixed(4)} (no renormalization)`;
}

async function main() {
  await init();
  const shapes = JSON.parse(shape_names());
  const colors = JSON.parse(color_names());
  fillSelect($("cShape"), shapes, "torus");
  fillSelect($("cColor"), colors, "red");
  fillSelect($("rShape"), shapes, "sphere");
  fillSelect($("rColor"), colors, "blue");

  for (const id of ["cShape", "cColor", "cPoints", "cPatches", "cGroup", "cSeed", "cByPatch"]) {
    $(id).addEventListener("change", drawCloud);
  }
  $("cSpin").addEventListener("input", drawCloud);
  for (const id of ["lProfile", "lStage"]) $(id).addEventListener("change", drawLr);
  for (const id of ["rShape", "rColor", "rK", "rG", "rMode", "rSeed"]) {
    $(id).addEventListener("change", drawRoute);
  }

  drawCloud();
  drawLr();
  drawRoute();
}

main();
