import init, { metrics, noise_samples, DemoModel } from "./pkg/phredgan_demo.js";

const $ = (id) => document.getElementById(id);

function showMetrics() {
  try {
    const m = JSON.parse(metrics($("hyps").value, $("refs").value));
    $("metrics-out").textContent = Object.entries(m)
      .map(([k, v]) => `${k.padEnd(10)} ${typeof v === "number" && !Number.isInteger(v) ? v.toFixed(6) : v}`)
      .join("\n");
  } catch (e) {
    $("metrics-out").textContent = String(e.message ?? e);
  }
}

function drawNoise() {
  const canvas = $("noise");
  const [dim, steps] = [canvas.width, canvas.height];
  const alpha = Number($("alpha").value);
  $("alpha-v").textContent = alpha;
  const z = noise_samples($("mode").value, alpha, dim, steps, Number($("noise-seed").value) >>> 0);
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(dim, steps);
  // fixed colour scale of ±3√30 so changes in α stay visible
  const scale = 3 * Math.sqrt(30);
  z.forEach((v, i) => {
    const t = Math.max(-1, Math.min(1, v / scale));
    img.data[4 * i] = t > 0 ? 255 : 255 * (1 + t);
    img.data[4 * i + 1] = 255 * (1 - Math.abs(t));
    img.data[4 * i + 2] = t < 0 ? 255 : 255 * (1 - t);
    img.data[4 * i + 3] = 255;
  });
  ctx.putImageData(img, 0, 0);
}

let model;

function trainSome(epochs) {
  $("train").disabled = true;
  const step = () => {
    const loss = model.train_epoch();
    $("train-log").textContent = `epoch ${model.epoch()}: mean MLE ${loss.toFixed(3)}`;
    if (--epochs > 0) setTimeout(step, 0);
    else $("train").disabled = false;
  };
  setTimeout(step, 0);
}

function ask() {
  const out = $("replies");
  out.textContent = "";
  try {
    const replies = JSON.parse(model.respond($("persona").value, $("utterance").value, Number($("samples").value), Number($("alpha").value)));
    for (const r of replies) {
      const p = document.createElement("p");
      const probs = r.word_probs.map((x) => x.toFixed(3)).join(" ");
      p.innerHTML = `<b></b> <span class="score"></span>`;
      p.querySelector("b").textContent = r.text || "(empty)";
      p.querySelector(".score").textContent = `rank ${r.rank_score.toFixed(4)} · style ${r.style ?? "none"} · [${probs}]`;
      out.appendChild(p);
    }
  } catch (e) {
    out.textContent = String(e.message ?? e);
  }
}

await init();
$("status").textContent = "ready";
$("score").onclick = showMetrics;
for (const id of ["mode", "alpha", "noise-seed"]) $(id).oninput = drawNoise;
showMetrics();
drawNoise();

model = new DemoModel(120, 16, 1);
for (const name of model.personas()) $("persona").add(new Option(name, name));
$("persona").value = "bob";
$("sample").textContent = model.sample_dialogue(0);
$("train").onclick = () => trainSome(10);
$("ask").onclick = ask;
