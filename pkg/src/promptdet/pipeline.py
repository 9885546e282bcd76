"""Stage orchestration over an artifact directory.

Layout under the artifact root::

    data/                      synthetic benchmark (gen-data)
    vlm/vlm.p3ckpt             frozen toy VLM (pretrain)
    adapt/<arm>/               prompts.p3ckpt, report.jsonl
    label/<arm>/               pseudo_labels.json, rpn.p3ckpt, scoremaps/, report.json
    detector/<tag>/            detector.p3ckpt, history.jsonl
    eval/<tag>-<split>/        detections.jsonl, eval.json
    sweep/                     <param>.csv, <param>.svg
    manifests/<stage>.json     one RunManifest per stage run

Every stage reads only artifacts written by earlier stages and records
their hashes together with the hashes of what it wrote.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import binio
from .adapt import AdaptConfig, PromptedModel, make_prompts, run_adapt
from .config import config_hash, section
from .detector import DetectorConfig, infer_detect, load_detector, save_detector, train_detector
from .exceptions import ConfigurationError, InputError
from .metrics import evaluate_detections
from .prompts import load_prompts, save_prompts
from .pseudolabel import (RPNConfig, Thresholds, audit_training_log, generate_pseudo_labels,
                          load_rpn, oracle_proposals, propose_regions_rpn_batch, read_pseudo_labels,
                          save_rpn, train_rpn, write_pseudo_labels)
from .synthdata import DatasetConfig, generate_dataset, load_captions, load_split
from .validation import state_hash
from .vlm import EncoderParams, PretrainConfig, init_encoders, pretrain_contrastive, retrieval_accuracy

log = logging.getLogger(__name__)

ARMS = ("none", "hand", "text", "visual", "both")
ENV_HOME = "P3OVD_HOME"


def artifact_root(out_dir=None):
    """``out_dir`` if given, else ``$P3OVD_HOME``, else ``./promptdet_runs``."""
    return Path(out_dir or os.environ.get(ENV_HOME) or "promptdet_runs")


def arm_name(text_prompt=True, visual_prompt=True, hand_prompt=None):
    if hand_prompt:
        if text_prompt or visual_prompt:
            raise ConfigurationError("--hand-prompt excludes the learnable prompts; turn both off")
        return "hand"
    return {(True, True): "both", (True, False): "text", (False, True): "visual",
            (False, False): "none"}[(bool(text_prompt), bool(visual_prompt))]


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seed: int = 0
    wall_time: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def write(self, root, name=None):
        path = Path(root) / "manifests" / f"{name or self.stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _hash_paths(root, paths):
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[q.relative_to(root).as_posix()] = binio.file_sha256(q)
    return out


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return Path(path)


def _finish(root, stage, cfg, keys, inputs, outputs, t0, name=None):
    manifest = RunManifest(stage, config_hash(cfg, keys), _hash_paths(root, inputs),
                           _hash_paths(root, outputs), int(cfg["seed"]), round(time.time() - t0, 3))
    manifest.write(root, name)
    return manifest


def _keys(cfg, *sections):
    return [k for k in cfg if k == "seed" or any(k.startswith(s + ".") for s in sections)]


def _set_threads(cfg):
    torch.set_num_threads(max(1, int(cfg["workers"])))


# ----------------------------------------------------------------- stages

def stage_gen_data(root, cfg):
    t0 = time.time()
    d = section(cfg, "data")
    out = Path(root) / "data"
    generate_dataset(DatasetConfig(), d["n_train"], d["n_val"], cfg["seed"], out,
                     n_pretrain=d["n_pretrain"], n_transfer=d["n_transfer"])
    return _finish(root, "gen-data", cfg, _keys(cfg, "data"), [], [out], t0)


def stage_pretrain(root, cfg):
    _set_threads(cfg)
    t0 = time.time()
    data = _require(Path(root) / "data" / "pretrain" / "captions.json", "pretraining corpus (run gen-data)")
    images, captions = load_captions(Path(root) / "data")
    p = section(cfg, "pretrain")
    hyper = PretrainConfig(p["epochs"], p["batch_size"], p["lr"], p["temperature"], seed=cfg["seed"])
    params, losses = pretrain_contrastive(images, captions, hyper, init_encoders(seed=cfg["seed"]))
    out = Path(root) / "vlm"
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "vlm.p3ckpt")
    cats, val_images, val_anns = load_split(Path(root) / "data", "val")
    summary = {"losses": losses, "retrieval_accuracy": retrieval_accuracy(params, val_images, val_anns, cats)}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=1))
    inputs = [data.parent]
    return _finish(root, "pretrain", cfg, _keys(cfg, "pretrain"), inputs, [out], t0)


def adapt_config(cfg, arm):
    a = section(cfg, "adapt")
    return AdaptConfig(epochs=a["epochs"], lr_text=a["lr_text"], lr_visual=a["lr_visual"],
                       batch_size=a["batch_size"], temperature=a["temperature"], layout=tuple(a["layout"]),
                       mode=arm, hand_template=a["hand_template"], recurrence=a["recurrence"],
                       use_lstm=a["use_lstm"], use_mlp=a["use_mlp"], text_init=a["text_init"],
                       target_smoothing=a["target_smoothing"], target_confidence=a["target_confidence"],
                       soft_targets=a["soft_targets"],
                       schedule=a["schedule"], eval_delta=a["eval_delta"], seed=cfg["seed"])


def load_vlm(root):
    return EncoderParams.load(_require(Path(root) / "vlm" / "vlm.p3ckpt", "VLM checkpoint (run pretrain)"))


def stage_adapt(root, cfg, arm="both"):
    if arm not in ARMS:
        raise ConfigurationError(f"unknown prompt arm {arm!r}")
    _set_threads(cfg)
    t0 = time.time()
    encoders = load_vlm(root)
    before = encoders.state_hash()
    acfg = adapt_config(cfg, arm).validate()
    cats, train_images, _ = load_split(Path(root) / "data", "train")
    _, val_images, val_anns = load_split(Path(root) / "data", "val")
    tp, vp = make_prompts(encoders, acfg)
    tp, vp, report = run_adapt(encoders, tp, vp, train_images, cats, acfg, val_images, val_anns)
    if encoders.state_hash() != before:
        raise RuntimeError("encoder weights changed during adaptation")
    out = Path(root) / "adapt" / arm
    out.mkdir(parents=True, exist_ok=True)
    meta = {"arm": arm, "hand_template": acfg.hand_template if arm == "hand" else None,
            "encoder_hash": before}
    if tp is not None:
        meta["text"] = {"token_dim": tp.token_dim, "layout": list(tp.layout), "mlp_hidden": tp.mlp[0].out_features,
                        "recurrence": tp.recurrence, "use_lstm": tp.use_lstm, "use_mlp": tp.use_mlp}
    if vp is not None:
        meta["visual"] = {"dim": vp.dim, "activation": vp.activation}
    save_prompts(out / "prompts.p3ckpt", tp, vp, meta)
    (out / "report.jsonl").write_text(report.to_jsonl())
    inputs = [Path(root) / "vlm" / "vlm.p3ckpt", Path(root) / "data" / "train", Path(root) / "data" / "val"]
    return _finish(root, "adapt", cfg, _keys(cfg, "adapt"), inputs, [out], t0, f"adapt-{arm}")


def load_prompted_model(root, arm):
    encoders = load_vlm(root)
    path = _require(Path(root) / "adapt" / arm / "prompts.p3ckpt", f"prompts for arm {arm!r} (run adapt)")
    tp, vp, meta = load_prompts(path)
    return PromptedModel(encoders, tp, vp, meta.get("hand_template")), meta


def label_thresholds(cfg):
    lab = section(cfg, "label")
    return Thresholds(lab["delta"], lab["gamma"], lab["objectness"]).validate()


def stage_label(root, cfg, arm=None):
    _set_threads(cfg)
    t0 = time.time()
    lab = section(cfg, "label")
    arm = arm or lab["prompts"]
    thresholds = label_thresholds(cfg)
    model, _ = load_prompted_model(root, arm)
    data = Path(root) / "data"
    cats, train_images, train_anns = load_split(data, "train")
    _, _, sealed = load_split(data, "train_sealed")
    out = Path(root) / "label" / arm
    (out / "scoremaps").mkdir(parents=True, exist_ok=True)

    r = section(cfg, "rpn")
    rcfg = RPNConfig(epochs=r["epochs"], batch_size=r["batch_size"], lr=r["lr"], top_k=r["top_k"], seed=cfg["seed"])
    rpn, train_log = train_rpn(train_images, train_anns, cats.base_indices, rcfg)
    leaks = audit_training_log(train_log, cats.base_indices)
    if leaks:
        raise RuntimeError(f"region proposer saw {len(leaks)} non-base boxes")
    save_rpn(out / "rpn.p3ckpt", rpn)
    (out / "rpn_log.json").write_text(json.dumps(train_log))

    if lab["oracle_proposals"]:
        proposals = [oracle_proposals(a, lab["oracle_jitter"], cfg["seed"]) for a in sealed]
    else:
        proposals = propose_regions_rpn_batch(train_images, rpn, top_k=rcfg.top_k)
    scores, grid = model.score_maps(train_images, cats.names)
    labels = {}
    for i, im in enumerate(train_images):
        binio.write_score_map(out / "scoremaps" / f"{im.image_id}.p3smap", scores[i], grid)
        labels[im.image_id] = generate_pseudo_labels((scores[i], grid), proposals[i], thresholds, cats,
                                                     im.image_id, model.encoders.stride,
                                                     lab["normalization"], lab["connectivity"])
    write_pseudo_labels(out / "pseudo_labels.json", labels, thresholds, lab["normalization"],
                        {"arm": arm, "oracle_proposals": bool(lab["oracle_proposals"])})
    report = pseudo_label_report(labels, sealed, cats)
    (out / "report.json").write_text(report.to_json())
    inputs = [Path(root) / "vlm" / "vlm.p3ckpt", Path(root) / "adapt" / arm / "prompts.p3ckpt",
              data / "train", data / "train_sealed"]
    return _finish(root, "label", cfg, _keys(cfg, "label", "rpn"), inputs, [out], t0, f"label-{arm}")


def pseudo_label_report(labels, sealed_annotations, categories):
    """Pseudo labels scored as detections (confidence as score) against the full train annotation."""
    dets = {k: [(l.bbox, l.class_index, l.confidence) for l in v] for k, v in labels.items()}
    report = evaluate_detections(dets, sealed_annotations, categories)
    report.config.update({"n_labels": int(sum(len(v) for v in labels.values())),
                          "n_images_with_labels": int(sum(1 for v in labels.values() if v))})
    return report


def classifier_rows(model, names, kind="prompted"):
    """Detector classifier: prompted (or plain template) class embeddings."""
    if kind not in ("prompted", "plain"):
        raise ConfigurationError(f"unknown classifier kind {kind!r}")
    with torch.no_grad():
        if kind == "prompted":
            return model.prompted_embeddings(names).values.detach().clone()
        from .vlm import TEMPLATE, class_embeddings
        return class_embeddings(model.encoders, names, TEMPLATE).values.detach().clone()


def stage_train_detector(root, cfg, no_pseudo=False, arm=None):
    _set_threads(cfg)
    t0 = time.time()
    arm = arm or section(cfg, "label")["prompts"]
    data = Path(root) / "data"
    cats, train_images, train_anns = load_split(data, "train")
    model, _ = load_prompted_model(root, arm)
    inputs = [Path(root) / "vlm" / "vlm.p3ckpt", Path(root) / "adapt" / arm / "prompts.p3ckpt", data / "train"]
    if no_pseudo:
        pseudo = None
        tag = "no-pseudo"
    else:
        pl_path = _require(Path(root) / "label" / arm / "pseudo_labels.json", "pseudo labels (run label)")
        pseudo, _ = read_pseudo_labels(pl_path)
        inputs.append(pl_path)
        tag = f"pseudo-{arm}"
    d = section(cfg, "detector")
    rows = classifier_rows(model, cats.names, d["classifier"])
    dcfg = DetectorConfig(epochs=d["epochs"], batch_size=d["batch_size"], lr=d["lr"], optimizer=d["optimizer"],
                          temperature=d["temperature"], seed=cfg["seed"])
    rows_hash = state_hash({"class_rows": torch.as_tensor(rows, dtype=torch.float32)})
    params, history = train_detector(train_images, train_anns, pseudo, rows, cats, dcfg)
    out = Path(root) / "detector" / tag
    out.mkdir(parents=True, exist_ok=True)
    save_detector(out / "detector.p3ckpt", params, {"arm": arm, "classifier": d["classifier"],
                                                     "categories": cats.to_json(), "no_pseudo": no_pseudo})
    (out / "history.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    (out / "classifier_hash.json").write_text(json.dumps({"before": rows_hash, "after": params.classifier_hash()},
                                                         indent=1, sort_keys=True))
    return _finish(root, "train-detector", cfg, _keys(cfg, "detector"), inputs, [out], t0, f"train-detector-{tag}")


def write_detections(path, detections):
    with open(path, "w") as fh:
        for image_id in sorted(detections):
            for bbox, cls, score in detections[image_id]:
                fh.write(json.dumps({"image_id": image_id, "bbox": [float(v) for v in bbox],
                                     "category_index": int(cls), "score": float(score)}, sort_keys=True) + "\n")


def read_detections(path):
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.setdefault(d["image_id"], []).append((tuple(d["bbox"]), int(d["category_index"]), float(d["score"])))
        except (ValueError, KeyError) as exc:
            raise InputError(f"{path}:{n}: malformed detection ({exc})") from None
    return out


def stage_eval(root, cfg, tag="pseudo-both", split="val", detections_file=None):
    _set_threads(cfg)
    t0 = time.time()
    data = Path(root) / "data"
    cats, images, anns = load_split(data, split)
    e = section(cfg, "eval")
    inputs = [data / split]
    if detections_file is not None:
        dets = read_detections(_require(detections_file, "detections file"))
        out = Path(root) / "eval" / f"file-{split}"
    else:
        det_path = _require(Path(root) / "detector" / tag / "detector.p3ckpt", f"detector {tag!r} (run train-detector)")
        params, meta = load_detector(det_path)
        inputs.append(det_path)
        rows = None
        if split == "transfer":
            model, _ = load_prompted_model(root, meta["arm"])
            rows = classifier_rows(model, cats.names, meta["classifier"])
        elif tuple(cats.names) != tuple(c["name"] for c in meta["categories"]):
            raise InputError("evaluation split categories differ from the detector's; use split=transfer")
        found = infer_detect(params, images, e["score_thresh"], e["nms_iou"], class_rows=rows)
        dets = {im.image_id: d for im, d in zip(images, found)}
        out = Path(root) / "eval" / f"{tag}-{split}"
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_detections(dets, anns, cats)
    report.config.update({"split": split, "seed": cfg["seed"], "score_thresh": e["score_thresh"],
                          "nms_iou": e["nms_iou"], "detector": None if detections_file else tag})
    write_detections(out / "detections.jsonl", dets)
    (out / "eval.json").write_text(report.to_json())
    name = f"eval-{out.name}"
    _finish(root, "eval", cfg, _keys(cfg, "eval"), inputs, [out], t0, name)
    return report


def stage_sweep(root, cfg, param, values, arm=None):
    """Pseudo-label quality over a grid of ``delta`` or ``objectness`` values."""
    if param not in ("delta", "objectness", "gamma"):
        raise ConfigurationError(f"cannot sweep {param!r}; choose delta, gamma or objectness")
    _set_threads(cfg)
    t0 = time.time()
    arm = arm or section(cfg, "label")["prompts"]
    lab_dir = _require(Path(root) / "label" / arm, f"label outputs for arm {arm!r} (run label)")
    lab = section(cfg, "label")
    data = Path(root) / "data"
    cats, train_images, _ = load_split(data, "train")
    _, _, sealed = load_split(data, "train_sealed")
    rpn = load_rpn(lab_dir / "rpn.p3ckpt")
    proposals = propose_regions_rpn_batch(train_images, rpn, top_k=section(cfg, "rpn")["top_k"])
    maps = []
    for im in train_images:
        maps.append(binio.read_score_map(lab_dir / "scoremaps" / f"{im.image_id}.p3smap"))
    rows = []
    for v in values:
        th = {"delta": lab["delta"], "gamma": lab["gamma"], "objectness": lab["objectness"], param: float(v)}
        thresholds = Thresholds(th["delta"], th["gamma"], th["objectness"]).validate()
        labels = {im.image_id: generate_pseudo_labels(maps[i], proposals[i], thresholds, cats, im.image_id,
                                                      4, lab["normalization"], lab["connectivity"])
                  for i, im in enumerate(train_images)}
        rep = pseudo_label_report(labels, sealed, cats)
        rows.append((float(v), rep.map_novel, rep.config["n_labels"]))
    out = Path(root) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{param},pseudo_label_map_novel,n_labels"] + [f"{v},{m:.6f},{n}" for v, m, n in rows]
    (out / f"{param}.csv").write_text("\n".join(lines) + "\n")
    plot_sweep(out / f"{param}.svg", param, rows)
    _finish(root, "sweep", cfg, _keys(cfg, "label"), [lab_dir], [out / f"{param}.csv"], t0, f"sweep-{param}")
    return rows


def plot_sweep(path, param, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "promptdet"
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r[0] for r in rows], [100 * r[1] for r in rows], marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("pseudo-label mAP, novel (%)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ------------------------------------------------------------ full runs

def run_reference(root, cfg, arms=("none", "text", "visual", "both")):
    """Every stage of the reference experiment; returns a summary dict."""
    root = Path(root)
    summary = {"manifests": {}}

    def keep(m, name):
        summary["manifests"][name] = m.outputs

    keep(stage_gen_data(root, cfg), "gen-data")
    keep(stage_pretrain(root, cfg), "pretrain")
    vlm_hash_before = load_vlm(root).state_hash()
    summary["adapt"] = {}
    for arm in arms:
        keep(stage_adapt(root, cfg, arm), f"adapt-{arm}")
        last = [json.loads(l) for l in (root / "adapt" / arm / "report.jsonl").read_text().splitlines()][-1]
        summary["adapt"][arm] = last
    summary["encoder_hash_unchanged"] = load_vlm(root).state_hash() == vlm_hash_before
    summary["label"] = {}
    for arm in ("none", "both"):
        if arm in arms:
            keep(stage_label(root, cfg, arm), f"label-{arm}")
            summary["label"][arm] = json.loads((root / "label" / arm / "report.json").read_text())
    summary["detector"] = {}
    for tag, no_pseudo in (("pseudo-both", False), ("no-pseudo", True)):
        keep(stage_train_detector(root, cfg, no_pseudo=no_pseudo, arm="both"), f"train-detector-{tag}")
        summary["detector"][tag] = json.loads(stage_eval(root, cfg, tag, "val").to_json())
        hashes = json.loads((root / "detector" / tag / "classifier_hash.json").read_text())
        summary["detector"][tag]["classifier_hash_unchanged"] = hashes["before"] == hashes["after"]
    summary["transfer"] = json.loads(stage_eval(root, cfg, "pseudo-both", "transfer").to_json())
    return summary


def transfer_hits(root, tag="pseudo-both", iou=0.5):
    """Correct detections (right class, IoU >= ``iou``) on the transfer split."""
    from .metrics import iou_matrix
    _, _, anns = load_split(Path(root) / "data", "transfer")
    dets = read_detections(Path(root) / "eval" / f"{tag}-transfer" / "detections.jsonl")
    hits = 0
    for ann in anns:
        for bbox, cls, _ in dets.get(ann.image_id, []):
            gt = ann.boxes[ann.class_ids == cls]
            if len(gt) and iou_matrix([bbox], gt).max() >= iou:
                hits += 1
    return hits
