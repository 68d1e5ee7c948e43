import init, { Lab } from "./pkg/stagecap_web.js";

const $ = (id) => document.getElementById(id);
const status = (msg) => { $("status").textContent = msg; };
let lab = null;
let labSeed = null;

function ensureLab() {
  const seed = Number($("seed").value);
  if (!lab || seed !== labSeed) {
    lab = new Lab(seed, 600);
    labSeed = seed;
    $("scene").max = lab.heldOutLen() - 1;
    $("train-out").textContent = "";
    $("trace-out").textContent = "";
  }
  return lab;
}

function token(word, classes) {
  const span = document.createElement("span");
  span.className = ["tok", ...classes].join(" ");
  span.textContent = word;
  return span;
}

function guarded(fn) {
  return () => {
    try {
      status("");
      fn();
    } catch (e) {
      status(String(e.message ?? e));
    }
  };
}

function showScene() {
  const scene = JSON.parse(ensureLab().scene(Number($("scene").value)));
  const out = $("scene-out");
  out.innerHTML = "";
  const attrs = document.createElement("p");
  attrs.textContent = "attributes: " + scene.attributes.join(", ");
  out.append(attrs);
  const list = document.createElement("ol");
  for (const c of scene.captions) {
    const li = document.createElement("li");
    li.textContent = c;
    list.append(li);
  }
  out.append(list);
  return scene;
}

function preview() {
  const scene = showScene();
  const words = JSON.parse(lab.mask(scene.captions[0], Number($("ratio").value), $("noise").checked, Number($("draw").value)));
  const out = $("mask-out");
  out.innerHTML = "";
  for (const w of words) {
    out.append(token(w.word, [w.masked ? "masked" : "", w.noised ? "noised" : ""].filter(Boolean)));
  }
}

function trainModel() {
  status("training… the page is busy until it finishes");
  setTimeout(guarded(() => {
    const started = performance.now();
    const res = JSON.parse(ensureLab().train(Number($("epochs").value), $("ratios").value));
    const secs = ((performance.now() - started) / 1000).toFixed(1);
    $("train-out").textContent =
      `${res.parameters} parameters, ${secs}s; loss by epoch: ` + res.losses.map((l) => l.toFixed(3)).join(" → ");
    status("");
  }), 20);
}

function trace() {
  const stages = JSON.parse(ensureLab().trace(
    Number($("scene").value), Number($("length").value), $("ratios").value, Number($("rounds").value)));
  const out = $("trace-out");
  out.innerHTML = "";
  for (const s of stages) {
    const row = document.createElement("div");
    row.className = "stage";
    const tag = document.createElement("small");
    tag.textContent = `round ${s.round} stage ${s.stage} (r=${s.ratio})`;
    row.append(tag);
    s.output.forEach((w, i) => {
      const cls = s.preserved.includes(i) ? ["kept"] : [];
      const t = token(w, cls);
      t.title = `p=${s.probs[i]}`;
      row.append(t);
    });
    out.append(row);
  }
}

$("show").onclick = guarded(showScene);
$("mask").onclick = guarded(preview);
$("train").onclick = trainModel;
$("trace").onclick = guarded(trace);

init().then(guarded(() => { showScene(); status(""); }));
