// Vanilla loader for the demo module. Build the wasm artifact with
//   cargo build -p hanlab-wasm --target wasm32-unknown-unknown --release
// and copy target/wasm32-unknown-unknown/release/hanlab_wasm.wasm next to
// this file, then serve the directory (e.g. python3 -m http.server).

let wasm = null;
const losses = [];

const $ = (id) => document.getElementById(id);

async function boot() {
  try {
    const resp = await fetch("hanlab_wasm.wasm");
    const { instance } = await WebAssembly.instantiate(await resp.arrayBuffer(), {});
    wasm = instance.exports;
    wasm.han_init(7);
    $("status").textContent = "ready — seed 7, untrained";
    refreshCipher(true);
    refreshAggregate();
  } catch (err) {
    $("status").textContent =
      "failed to load hanlab_wasm.wasm — build it first (see demo.js header). " + err;
  }
}

function drawLoss() {
  const canvas = $("loss-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (losses.length < 2) return;
  const logs = losses.map((v) => Math.log10(Math.max(v, 1e-8)));
  const lo = Math.min(...logs), hi = Math.max(...logs);
  ctx.strokeStyle = "#2266cc";
  ctx.beginPath();
  logs.forEach((v, i) => {
    const x = (i / (logs.length - 1)) * (canvas.width - 20) + 10;
    const y = canvas.height - 15 - ((v - lo) / (hi - lo + 1e-9)) * (canvas.height - 30);
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.fillText(`log10 aggregation MSE — latest ${losses[losses.length - 1].toExponential(2)}`, 12, 12);
}

function trainChunk(remaining) {
  if (!wasm || remaining <= 0) {
    $("btn-train").disabled = false;
    refreshCipher(false);
    refreshAggregate();
    return;
  }
  const n = Math.min(remaining, 25);
  const mse = wasm.han_train_steps(n);
  losses.push(mse);
  $("train-stat").textContent =
    `${wasm.han_steps_taken()} steps — batch MSE ${mse.toExponential(2)}`;
  drawLoss();
  requestAnimationFrame(() => trainChunk(remaining - n));
}

function refreshCipher(freshKeys) {
  if (!wasm) return;
  const m = parseFloat($("m-slider").value);
  $("m-value").textContent = m.toFixed(2);
  const len = wasm.han_encrypt(m, freshKeys ? 1 : 0);
  const ptr = wasm.han_cipher_ptr();
  const view = new Float32Array(wasm.memory.buffer, ptr, len);
  const canvas = $("cipher-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const bar = (canvas.width - 20) / len;
  const scale = 30;
  const mid = canvas.height / 2;
  ctx.fillStyle = "#444";
  ctx.fillRect(10, mid, canvas.width - 20, 1);
  for (let i = 0; i < len; i++) {
    const h = Math.max(-mid + 4, Math.min(mid - 4, view[i] * scale));
    ctx.fillStyle = view[i] >= 0 ? "#338855" : "#aa4433";
    ctx.fillRect(10 + i * bar + 2, Math.min(mid, mid - h), bar - 4, Math.abs(h));
  }
  $("pk-value").textContent = `pk = ${wasm.han_last_pk().toFixed(4)}`;
  const guess = wasm.han_attack_guess();
  const guessPk = wasm.han_attack_guess_pk();
  $("attack-stat").textContent =
    `attacker guesses: ciphertext-only ${guess.toFixed(3)} · with pk ${guessPk.toFixed(3)} — true m ${wasm.han_last_m().toFixed(3)}`;
}

function refreshAggregate() {
  if (!wasm) return;
  const m1 = parseFloat($("m1").value);
  const m2 = parseFloat($("m2").value);
  const m3 = parseFloat($("m3").value);
  const decoded = wasm.han_aggregate(m1, m2, m3);
  const truth = m1 + m2 + m3;
  const canvas = $("agg-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const toX = (v) => ((v + 3) / 6) * (canvas.width - 20) + 10;
  ctx.fillStyle = "#444";
  ctx.fillRect(10, 45, canvas.width - 20, 1);
  ctx.fillStyle = "#2266cc";
  ctx.fillRect(toX(truth) - 1, 20, 2, 50);
  ctx.fillText("true sum", toX(truth) + 4, 28);
  ctx.fillStyle = "#cc3322";
  ctx.fillRect(toX(decoded) - 1, 30, 2, 50);
  ctx.fillText("decoded", toX(decoded) + 4, 78);
  $("agg-stat").textContent =
    `true ${truth.toFixed(4)} · decoded ${decoded.toFixed(4)} · |error| ${Math.abs(decoded - truth).toExponential(2)}`;
}

$("btn-train").addEventListener("click", () => {
  $("btn-train").disabled = true;
  trainChunk(500);
});
$("btn-reset").addEventListener("click", () => {
  const seed = Math.floor(Math.random() * 1e6);
  wasm.han_init(seed);
  losses.length = 0;
  drawLoss();
  $("status").textContent = `ready — seed ${seed}, untrained`;
  $("train-stat").textContent = "untrained";
  refreshCipher(true);
  refreshAggregate();
});
$("m-slider").addEventListener("input", () => refreshCipher(false));
$("btn-rekey").addEventListener("click", () => refreshCipher(true));
for (const id of ["m1", "m2", "m3"]) {
  $(id).addEventListener("input", refreshAggregate);
}

boot();
