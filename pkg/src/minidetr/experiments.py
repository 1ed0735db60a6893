"""Experiment runners behind the CLI.

Every runner takes a plain-JSON parameter dict and returns its artifacts as
``{relative filename: bytes}``. Nothing here reads clocks or the
environment, so an :class:`ExperimentManifest` replays to identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .analytics import (box_scatter, class_contribution, masking_table_csv, query_frequency,
                        query_table_csv, stats_json)
from .corruptions import FAMILIES
from .data import (AnnotatedSample, DatasetError, generate_synthetic_shapes, load_dataset,
                   import_external_detections, train_test_split)
from .inference import detections_from_arrays, predict
from .matching import LossWeights
from .metrics import Detection, EvalOptions, GroundTruth, MetricReport, evaluate
from .model import (MiniDETR, ModelConfig, checkpoint_bytes, extract_decoder_cross_attention,
                    extract_encoder_attention, load_checkpoint)
from .perturb import (CorruptionSpec, OcclusionSpec, StickerSpec, corrupt, place_sticker, random_occlude,
                      salient_occlude, saliency_map, apply_sticker, spec_from_dict, apply_perturbation)
from .plots import bar_chart, heatmap, line_chart, scatter_chart
from .train import TrainConfig, ab_compare, train

MANIFEST_VERSION = 1
KINDS = ("train", "occlusion-sweep", "salient-sweep", "sticker-eval", "corruption-benchmark",
         "query-analysis", "query-drop-ab", "perturb", "evaluate", "make-dataset")
OCCLUSION_DRAWS = 4


@dataclass
class ExperimentManifest:
    kind: str
    seed: int
    params: dict = field(default_factory=dict)
    output_dir: str = ""
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "seed": self.seed, "params": self.params,
                           "output_dir": self.output_dir, "version": self.version}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        d = json.loads(text)
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        if d.get("kind") not in KINDS:
            raise ValueError(f"unknown experiment kind {d.get('kind')!r}")
        return cls(d["kind"], int(d["seed"]), d.get("params", {}), d.get("output_dir", ""))


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------
def derive_seed(*parts: int) -> int:
    """A 32-bit seed determined by ``parts`` (used for per-image perturbation draws)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def parse_synthetic(spec: str) -> dict:
    """``synthetic:n=500,test=100,seed=0`` -> {"n": 500, "test": 100, "seed": 0, ...}.

    ``n`` images are generated, plus ``test`` more that form an explicit
    held-out split; with ``test=0`` the 80/20 index split applies.
    """
    body = spec.split(":", 1)[1] if ":" in spec else ""
    out = {"n": 500, "test": 0, "seed": 0, "max_objects": 3, "image_size": 128}
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        if key not in out:
            raise ValueError(f"unknown synthetic dataset option {key!r}")
        try:
            out[key] = int(val)
        except ValueError:
            raise ValueError(f"synthetic option {key} needs an integer, got {val!r}") from None
    return out


def resolve_dataset(spec: str, split: str = "all") -> tuple[list[AnnotatedSample], list[str]]:
    """Load a dataset directory / COCO file or generate ``synthetic:...``; then take ``split``."""
    if spec.startswith("synthetic"):
        o = parse_synthetic(spec)
        samples = generate_synthetic_shapes(o["n"] + o["test"], max_objects=o["max_objects"],
                                            image_size=o["image_size"], seed=o["seed"])
        names = ["rectangle", "circle", "triangle"]
    else:
        if not Path(spec).exists():
            raise DatasetError(f"dataset path not found: {spec}")
        samples, manifest = load_dataset(spec)
        names = list(manifest.class_names)
    if split == "all":
        return samples, names
    tr, te = split_dataset(spec, samples)
    if split == "train":
        return tr, names
    if split == "test":
        return te, names
    raise ValueError(f"unknown split {split!r}")


def split_dataset(spec: str, samples: Sequence[AnnotatedSample], train_fraction: float = 0.8
                  ) -> tuple[list[AnnotatedSample], list[AnnotatedSample]]:
    """The explicit held-out tail of a ``synthetic:...,test=T`` dataset, else the index split."""
    held_out = parse_synthetic(spec)["test"] if spec.startswith("synthetic") else 0
    if held_out:
        return list(samples[:-held_out]), list(samples[-held_out:])
    return train_test_split(samples, train_fraction)


def _gts(samples: Sequence[AnnotatedSample]) -> list[GroundTruth]:
    return [g for s in samples for g in s.gts]


def _csv(rows: Sequence[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue().encode()


def _num(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _json(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def _options(params: dict) -> EvalOptions:
    return EvalOptions(ignore_low_overlap=bool(params.get("ignore_low_overlap", False)))


def _detect(model: MiniDETR, images: Sequence[np.ndarray], ids: Sequence, params: dict) -> list[Detection]:
    return predict(model, list(images), list(ids), score_threshold=float(params.get("score_threshold", 0.0)),
                   workers=int(params.get("workers", 1)))


def _report(model, samples, images, params) -> MetricReport:
    dets = _detect(model, images, [s.image_id for s in samples], params)
    return evaluate(dets, _gts(samples), _options(params))


def _model(params: dict) -> MiniDETR:
    if "checkpoint" not in params:
        raise ValueError("this experiment needs a checkpoint")
    return load_checkpoint(params["checkpoint"])[0]


# ---------------------------------------------------------------------------
# train / A-B
# ---------------------------------------------------------------------------
def resolve_configs(params: dict, seed: int) -> tuple[ModelConfig, TrainConfig]:
    try:
        mc = ModelConfig.from_dict({**params.get("model", {}), "seed": seed}).validate()
        tc = TrainConfig.from_dict({**params.get("train", {}), "seed": seed}).validate()
    except TypeError as e:  # unknown or missing keys
        raise ValueError(f"invalid configuration: {e}") from None
    return mc, tc


def run_train(params: dict, seed: int, on_epoch: Callable | None = None) -> dict[str, bytes]:
    mc, tc = resolve_configs(params, seed)
    samples, _ = resolve_dataset(params.get("dataset", "synthetic"))
    tr, te = split_dataset(params.get("dataset", "synthetic"), samples, tc.train_fraction)
    res = train(MiniDETR(mc), tr, tc, test_set=te, on_epoch=on_epoch)
    epochs = list(range(1, tc.epochs + 1))
    out = {
        "checkpoint.mdetr": checkpoint_bytes(res.model, {"train": tc.to_dict()}),
        "loss_curve.csv": res.curve.to_csv().encode(),
        "loss_curve.svg": line_chart({"train": (epochs, res.curve.train_loss), "test": (epochs, res.curve.test_loss)},
                                     "Training loss", "epoch", "loss").encode(),
    }
    if res.gradient_record is not None:
        rows = [["query_id", "mean_grad_norm"]] + [[q, f"{v:.9g}"] for q, v in enumerate(res.gradient_record.mean_norm)]
        out["gradient_flow.csv"] = _csv(rows)
        out["gradient_flow.svg"] = bar_chart([str(q) for q in range(len(res.gradient_record.mean_norm))],
                                             list(res.gradient_record.mean_norm), "Mean query gradient norm",
                                             "query", "L2 norm").encode()
    if te:
        rep = _report(res.model, te, [s.image for s in te], params)
        out["test_report.json"] = rep.to_json().encode() + b"\n"
    return out


def run_query_drop_ab(params: dict, seed: int) -> dict[str, bytes]:
    samples, _ = resolve_dataset(params.get("dataset", "synthetic"))
    mc, base = resolve_configs(params, seed)
    p = float(params.get("query_drop_p", 0.15))
    drop = TrainConfig.from_dict({**base.to_dict(), "query_drop_p": p}).validate()
    base = TrainConfig.from_dict({**base.to_dict(), "query_drop_p": 0.0})
    tr, te = split_dataset(params.get("dataset", "synthetic"), samples, base.train_fraction)
    rep = ab_compare(tr, lambda: MiniDETR(mc), base, drop, test_set=te)
    epochs = list(range(1, len(rep.base.train_loss) + 1))
    chart = line_chart({"base train": (epochs, rep.base.train_loss), "base test": (epochs, rep.base.test_loss),
                        f"drop p={p:g} train": (epochs, rep.drop.train_loss),
                        f"drop p={p:g} test": (epochs, rep.drop.test_loss)},
                       "Query drop A/B loss", "epoch", "loss")
    return {"base_curve.csv": rep.base.to_csv().encode(), "drop_curve.csv": rep.drop.to_csv().encode(),
            "comparison.csv": rep.to_csv().encode(), "comparison.svg": chart.encode(),
            "summary.json": rep.to_json().encode() + b"\n"}


# ---------------------------------------------------------------------------
# occlusion
# ---------------------------------------------------------------------------
def occlude_dataset(samples: Sequence[AnnotatedSample], ratio: float, mode: str, seed: int, draw: int,
                    model: MiniDETR | None = None, saliency: str = "attention",
                    cache: dict | None = None) -> list[np.ndarray]:
    """One occluded copy of every image. Salient mode occludes inside every
    ground-truth box (patches chosen per box, union applied).

    Saliency is computed on the clean image, so ``cache`` may carry the maps
    across ratios and draws.
    """
    cache = {} if cache is None else cache
    out = []
    for i, s in enumerate(samples):
        if mode == "random":
            out.append(random_occlude(s.image, OcclusionSpec(ratio, "random", derive_seed(seed, draw, i))))
            continue
        img = s.image
        for j, g in enumerate(s.gts):
            spec = OcclusionSpec(ratio, "salient", derive_seed(seed, draw, i), region=g.box)
            if (i, j) not in cache:
                cache[i, j] = saliency_map(s.image, model, g.box, saliency)
            img = salient_occlude(img, spec, cache[i, j])
        out.append(img)
    return out


def occlusion_table(samples: Sequence[AnnotatedSample], sources: dict, ratios: Sequence[float], mode: str,
                    seed: int, params: dict, draws: int = OCCLUSION_DRAWS) -> list[dict]:
    """Rows ``{source, mode, ratio, mAP, mAP50}``, each averaged over ``draws`` seeded draws.

    ``sources`` maps a name to a model, or to ``{ratio: detections file}``
    for an external detector whose outputs on occluded images were saved.
    """
    rows = []
    gts = _gts(samples)
    saliency = params.get("saliency", "attention")
    for name, src in sources.items():
        cache: dict = {}
        for r in ratios:
            if isinstance(src, MiniDETR):
                reps = []
                for d in range(draws):
                    if r == 0:
                        imgs = [s.image for s in samples]
                    else:
                        imgs = occlude_dataset(samples, r, mode, seed, d, src, saliency, cache)
                    reps.append(_report(src, samples, imgs, params))
            else:
                key = next((k for k in src if float(k) == float(r)), None)
                if key is None:
                    raise ValueError(f"source {name!r} has no detections file for ratio {r}")
                reps = [evaluate(import_external_detections(src[key]), gts, _options(params))]
            m = [x.mAP for x in reps if x.mAP is not None]
            m50 = [x.mAP50 for x in reps if x.mAP50 is not None]
            rows.append({"source": name, "mode": mode, "ratio": float(r),
                         "mAP": float(np.mean(m)) if m else None, "mAP50": float(np.mean(m50)) if m50 else None,
                         "draws": len(reps)})
    return rows


def _sources(params: dict) -> dict:
    sources = {}
    if params.get("checkpoint"):
        sources[params.get("source_name", "mini-detr")] = _model(params)
    for name, files in sorted(params.get("external", {}).items()):
        sources[name] = files
    if not sources:
        raise ValueError("no detector source: give a checkpoint and/or external detections files")
    return sources


def _occlusion_artifacts(rows: list[dict], stem: str, title: str) -> dict[str, bytes]:
    table = [["source", "mode", "ratio", "mAP", "mAP50", "draws"]]
    table += [[r["source"], r["mode"], f"{r['ratio']:g}", _num(r["mAP"]), _num(r["mAP50"]), r["draws"]] for r in rows]
    series = {}
    for r in rows:
        key = f"{r['source']} ({r['mode']})"
        xs, ys = series.setdefault(key, ([], []))
        xs.append(r["ratio"])
        ys.append(float("nan") if r["mAP"] is None else r["mAP"])
    return {f"{stem}.csv": _csv(table), f"{stem}.svg": line_chart(series, title, "occlusion ratio", "mAP").encode()}


def run_occlusion_sweep(params: dict, seed: int) -> dict[str, bytes]:
    samples, _ = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "test"))
    ratios = [float(r) for r in params.get("ratios", [0.2, 0.4, 0.6, 0.8])]
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"occlusion ratio {r} outside [0, 1]")
    mode = params.get("mode", "random")
    rows = occlusion_table(samples, _sources(params), ratios, mode, seed, params,
                           int(params.get("draws", OCCLUSION_DRAWS)))
    return _occlusion_artifacts(rows, "occlusion", "mAP vs occlusion ratio")


def run_salient_sweep(params: dict, seed: int) -> dict[str, bytes]:
    """Random and salient occlusion side by side at each ratio (model sources only)."""
    samples, _ = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "test"))
    ratios = [float(r) for r in params.get("ratios", [0.2, 0.4, 0.6, 0.8])]
    model = _model(params)
    draws = int(params.get("draws", OCCLUSION_DRAWS))
    src = {params.get("source_name", "mini-detr"): model}
    rows = occlusion_table(samples, src, ratios, "random", seed, params, draws)
    rows += occlusion_table(samples, src, ratios, "salient", seed, params, draws)
    out = _occlusion_artifacts(rows, "salient_vs_random", "Random vs salient occlusion")
    out["saliency_method.json"] = _json({"saliency": params.get("saliency", "attention")})
    return out


# ---------------------------------------------------------------------------
# stickers
# ---------------------------------------------------------------------------
def _sticker_spec(params: dict, seed: int, index: int) -> StickerSpec:
    patch = alpha = None
    if params.get("patch_image"):
        from .data import read_image
        patch = read_image(params["patch_image"])
    if params.get("empty_alpha"):
        size = patch.shape[:2] if patch is not None else (params.get("patch_size", 16),) * 2
        alpha = np.zeros(size, dtype=bool)
    loc = params.get("location")
    return StickerSpec(patch=patch, location=None if loc is None else tuple(loc), scale=params.get("scale"),
                       seed=derive_seed(seed, index), alpha=alpha, patch_size=int(params.get("patch_size", 16)))


def run_sticker_eval(params: dict, seed: int) -> dict[str, bytes]:
    samples, names = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "test"))
    model = _model(params)
    clean = [s.image for s in samples]
    specs = [_sticker_spec(params, seed, i) for i in range(len(samples))]
    attacked = [apply_sticker(s.image, sp) for s, sp in zip(samples, specs)]
    rep_clean = _report(model, samples, clean, params)
    rep_att = _report(model, samples, attacked, params)
    table = [["condition", "mAP", "mAP50", "detections"],
             ["clean", _num(rep_clean.mAP), _num(rep_clean.mAP50), rep_clean.num_detections],
             ["sticker", _num(rep_att.mAP), _num(rep_att.mAP50), rep_att.num_detections]]
    out = {"sticker_report.csv": _csv(table),
           "clean_report.json": rep_clean.to_json().encode() + b"\n",
           "sticker_attacked_report.json": rep_att.to_json().encode() + b"\n"}
    stride = model.config.stride
    placements = []
    for i in range(min(int(params.get("heatmaps", 4)), len(samples))):
        pl = place_sticker(samples[i].image.shape, specs[i])
        y0, x0, y1, x1 = pl.rectangle
        placements.append({"image_id": samples[i].image_id, "x": x0, "y": y0, "width": pl.width,
                           "height": pl.height})
        with T.no_grad():
            o = model.forward(attacked[i], record_attention=True)
        top = int(o.probs()[:, :-1].max(axis=1).argmax())
        heat = extract_decoder_cross_attention(o, top, model.config.dec_layers - 1, head=None)
        cells = (y0 // stride, x0 // stride, -(-y1 // stride), -(-x1 // stride))
        mass = float(heat[cells[0]:cells[2], cells[1]:cells[3]].sum())
        placements[-1].update({"top_query": top, "attention_mass_on_sticker": round(mass, 12)})
        out[f"heatmaps/image_{i:03d}.svg"] = heatmap(
            heat, f"image {samples[i].image_id}: query {top} cross-attention", highlight=cells).encode()
    out["sticker_placements.json"] = _json(placements)
    return out


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------
def run_corruption_benchmark(params: dict, seed: int) -> dict[str, bytes]:
    samples, _ = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "test"))
    model = _model(params)
    families = params.get("families") or list(FAMILIES)
    clean = _report(model, samples, [s.image for s in samples], params)
    grid = {}
    for fam in families:
        for sev in range(1, 6):
            imgs = [corrupt(s.image, CorruptionSpec(fam, sev, derive_seed(seed, i))) for i, s in enumerate(samples)]
            grid[fam, sev] = _report(model, samples, imgs, params)
    header = ["family", "clean"] + [f"severity_{k}" for k in range(1, 6)]
    rows_map = [header] + [[f, _num(clean.mAP)] + [_num(grid[f, k].mAP) for k in range(1, 6)] for f in families]
    rows_50 = [header] + [[f, _num(clean.mAP50)] + [_num(grid[f, k].mAP50) for k in range(1, 6)] for f in families]
    out = {"corruption_mAP.csv": _csv(rows_map), "corruption_mAP50.csv": _csv(rows_50)}
    for f in families:
        ys = [clean.mAP] + [grid[f, k].mAP for k in range(1, 6)]
        ys = [float("nan") if y is None else y for y in ys]
        out[f"charts/{f}.svg"] = line_chart({f: (list(range(6)), ys)}, f"{f}: mAP vs severity",
                                            "severity (0 = clean)", "mAP").encode()
    # encoder self-attention of one pixel across severities
    fam = params.get("attention_family", families[0])
    H, W = samples[0].image.shape[:2]
    row, col = params.get("pixel", [H // 2, W // 2])
    if not (0 <= row < H and 0 <= col < W):
        raise ValueError(f"pixel ({row}, {col}) outside the {H}x{W} image")
    layer = model.config.enc_layers - 1
    series = []
    for sev in range(6):
        img = samples[0].image if sev == 0 else corrupt(samples[0].image, CorruptionSpec(fam, sev, derive_seed(seed, 0)))
        with T.no_grad():
            o = model.forward(img, record_attention=True)
        att = extract_encoder_attention(o, (row, col), layer, head=None)
        series.append([float(v) for v in att.reshape(-1)])
        out[f"attention/{fam}_severity_{sev}.svg"] = heatmap(
            att, f"{fam} s{sev}: encoder attention at ({row}, {col})").encode()
    out["attention/series.json"] = _json({"family": fam, "pixel": [row, col], "layer": layer,
                                          "severities": list(range(6)), "attention": series})
    return out


# ---------------------------------------------------------------------------
# query analysis
# ---------------------------------------------------------------------------
def run_query_analysis(params: dict, seed: int) -> dict[str, bytes]:
    samples, names = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "test"))
    model = _model(params)
    thr = float(params.get("threshold", 0.8))
    all_dets = _detect(model, [s.image for s in samples], [s.image_id for s in samples], {**params, "score_threshold": 0})
    stats = query_frequency(all_dets, thr, model.config.num_queries)
    contrib = class_contribution(all_dets, stats)
    # the evaluated set is exactly the detections counted by the statistics
    confident = [d for d in all_dets if d.score > thr]
    opts = _options(params)
    out = {"query_frequency.csv": query_table_csv(stats).encode(),
           "query_frequency.svg": bar_chart([str(q) for q in range(len(stats.freq))], [float(v) for v in stats.freq],
                                            f"Detections per query (score > {thr:g})", "query", "count").encode()}
    if stats.main_query_id is None:
        scatter = []
        with_q = without_q = evaluate(confident, _gts(samples), opts)
    else:
        scatter = box_scatter(confident, stats.main_query_id)
        with_q = evaluate(confident, _gts(samples), opts)
        without_q = evaluate([d for d in confident if d.query_id != stats.main_query_id], _gts(samples), opts)
    out["query_stats.json"] = stats_json(stats, contrib, scatter).encode() + b"\n"
    labels = [names[c] if c < len(names) else str(c) for c in contrib.share]
    out["class_contribution.svg"] = bar_chart(labels, list(contrib.share.values()),
                                              f"Share of detections from query {stats.main_query_id}",
                                              "class", "share").encode()
    out["main_query_scatter.svg"] = scatter_chart([p[0] for p in scatter], [p[1] for p in scatter],
                                                  f"Query {stats.main_query_id} box centres", "cx", "cy",
                                                  sizes=[p[2] for p in scatter]).encode()
    out["masking_report.csv"] = masking_table_csv([(params.get("source_name", "mini-detr"), with_q, without_q)]).encode()
    return out


# ---------------------------------------------------------------------------
# single image / evaluation / datasets
# ---------------------------------------------------------------------------
def run_perturb(params: dict, seed: int) -> dict[str, bytes]:
    from .data import read_image, _to_bytes
    if "image" not in params:
        raise ValueError("perturb needs an input image")
    img = read_image(params["image"])
    spec = spec_from_dict({**params["spec"], "seed": seed})
    model = load_checkpoint(params["checkpoint"])[0] if params.get("checkpoint") else None
    if isinstance(spec, OcclusionSpec) and spec.mode == "salient" and model is None \
            and params.get("saliency", "attention") == "attention":
        raise ValueError("salient occlusion with attention saliency needs --checkpoint")
    out_img = apply_perturbation(img, spec, model, params.get("saliency", "attention"))
    b = _to_bytes(out_img)
    H, W, _ = b.shape
    return {"perturbed.ppm": f"P6\n{W} {H}\n255\n".encode() + b.tobytes()}


def run_evaluate(params: dict, seed: int) -> dict[str, bytes]:
    samples, names = resolve_dataset(params.get("dataset", "synthetic"), params.get("split", "all"))
    if "detections" not in params:
        raise ValueError("evaluate needs a detections file")
    dets = import_external_detections(params["detections"])
    rep = evaluate(dets, _gts(samples), _options(params))
    return {"report.json": rep.to_json().encode() + b"\n", "report.csv": rep.to_csv(names).encode()}


def run_make_dataset(params: dict, seed: int) -> dict[str, bytes]:
    import tempfile
    from .data import save_dataset, synthetic_manifest
    o = parse_synthetic(params.get("dataset", "synthetic"))
    o["seed"] = seed
    samples = generate_synthetic_shapes(o["n"], max_objects=o["max_objects"], image_size=o["image_size"], seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(samples, synthetic_manifest(o["n"], seed, o["image_size"], o["max_objects"]), tmp)
        return {str(p.relative_to(tmp)): p.read_bytes() for p in sorted(Path(tmp).rglob("*")) if p.is_file()}


RUNNERS: dict[str, Callable[[dict, int], dict[str, bytes]]] = {
    "train": run_train, "occlusion-sweep": run_occlusion_sweep, "salient-sweep": run_salient_sweep,
    "sticker-eval": run_sticker_eval, "corruption-benchmark": run_corruption_benchmark,
    "query-analysis": run_query_analysis, "query-drop-ab": run_query_drop_ab, "perturb": run_perturb,
    "evaluate": run_evaluate, "make-dataset": run_make_dataset,
}


def run_manifest(manifest: ExperimentManifest) -> dict[str, bytes]:
    return RUNNERS[manifest.kind](manifest.params, manifest.seed)


def write_artifacts(artifacts: dict[str, bytes], manifest: ExperimentManifest, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, data in sorted(artifacts.items()):
        p = d / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    (d / "manifest.json").write_text(manifest.to_json())
    return d
