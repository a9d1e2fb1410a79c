"""``promptseg`` command line.

One JSON config (``--config``) holds the stage sections; command-line flags
override it. Every command writes ``resolved_config.json`` beside its outputs.

Exit codes: 0 ok, 2 config/input error, 3 numeric failure, 4 some items of a
batch failed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import BottleneckConfig, SaliencyMap
from .embedding import (
    PROMPT_CONFIGS,
    TextPrompt,
    ensemble_prompt_embedding,
    list_images,
    load_encoder,
    load_image,
    load_pairs,
    load_prompt_manifest,
    make_two_cluster_corpus,
    preprocess_image,
    prompts_for,
)
from .finetune import FinetuneConfig, finetune, save_checkpoint
from .imaging import compose_panel, heat_overlay, mask_overlay, read_mask, resize_bilinear, to_unit_range, write_mask, write_rgb
from .masks import PipelineConfig, PipelineError, make_external_refiner, make_mock_refiner, zero_shot_segment
from .metrics import retrieval_protocol, score_masks, write_seg_report
from .persist import read_float_map, read_saliency, write_json, write_saliency, write_uncertainty
from .toynet import ToySegNet
from .weak import (
    PseudoDataset,
    WeakConfig,
    binarize_final,
    ensemble_predict,
    entropy_uncertainty,
    load_ensemble,
    train_weak,
)

log = logging.getLogger("promptseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "encoder": "synthetic",
    "encoder_config": {},
    "encoder_params": None,
    "refiner": "mock",
    "refiners": {},
    "workers": 1,
    "finetune": {},
    "bottleneck": {},
    "pipeline": {},
    "segment": {"prompt": None, "manifest": None, "prompt_config": "P0", "class_label": None},
    "weak": {},
    "eval": {"nsd_tolerance": 2, "runs": 5, "batch_size": 50},
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    for key in ("seed", "encoder", "refiner", "workers", "encoder_params"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    # the run seed drives every stage unless a section pins its own (flags always win)
    for section in ("finetune", "bottleneck", "pipeline", "weak", "eval"):
        if args.seed is not None or "seed" not in cfg[section]:
            cfg[section]["seed"] = cfg["seed"]
    for key, (section, name) in _SECTION_FLAGS.items():
        val = getattr(args, key, None)
        if val is not None:
            cfg[section][name] = val
    if cfg["workers"] < 1:
        raise ConfigError("--workers must be >= 1")
    return cfg


_SECTION_FLAGS = {
    "epochs": ("finetune", "epochs"),
    "learning_rate": ("finetune", "learning_rate"),
    "variant": ("finetune", "variant"),
    "gamma": ("bottleneck", "gamma"),
    "steps": ("bottleneck", "steps"),
    "mode": ("pipeline", "mode"),
    "eta_c": ("pipeline", "eta_c"),
    "prompt": ("segment", "prompt"),
    "prompts": ("segment", "manifest"),
    "prompt_config": ("segment", "prompt_config"),
    "class_label": ("segment", "class_label"),
    "nsd_tolerance": ("eval", "nsd_tolerance"),
    "runs": ("eval", "runs"),
    "batch_size": ("eval", "batch_size"),
}


def _build(kind, section):
    try:
        if kind is FinetuneConfig:
            sec = dict(section)
            loss = dict(sec.pop("loss", {}))
            if "variant" in sec:
                loss["variant"] = sec.pop("variant")
            return FinetuneConfig.from_json({**sec, "loss": loss})
        if kind is WeakConfig:
            return WeakConfig.from_json(section)
        return kind(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {kind.__name__}: {exc}") from None


def _encoder(cfg):
    params = cfg["encoder_params"]
    if params is not None and not Path(params).is_file():
        raise ConfigError(f"encoder parameters not found: {params}")
    try:
        return load_encoder(cfg["encoder"], cfg["encoder_config"], params)
    except (LookupError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot load encoder {cfg['encoder']!r}: {exc}") from None


def _refiner(cfg):
    sel = cfg["refiner"]
    if sel == "mock":
        return make_mock_refiner()
    if sel.startswith("external:"):
        name = sel.split(":", 1)[1]
        if name not in cfg["refiners"]:
            raise ConfigError(f"refiner {name!r} has no command under 'refiners' in the config")
        return make_external_refiner(cfg["refiners"][name], name)
    raise ConfigError(f"unknown refiner {sel!r}; use mock or external:<name>")


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out, command, cfg):
    write_json(out / "resolved_config.json", {"command": command, "version": __version__, **cfg})


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory not found: {p}")
    return p


def _inputs(path):
    p = Path(path)
    if p.is_file():
        return [p]
    if p.is_dir():
        files = list_images(p)
        if not files:
            raise ConfigError(f"no images in {p}")
        return files
    raise ConfigError(f"input not found: {p}")


def _stem(path):
    return Path(path).name.split(".")[0]


def _run_batch(items, fn, workers):
    """Run ``fn`` per item and collect the exceptions; outputs never depend on scheduling."""
    def guarded(item):
        try:
            fn(item)
            return None
        except Exception as exc:  # keep going, report at the end
            log.error("%s: %s", item, exc)
            return exc

    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(guarded, items))
    else:
        errors = [guarded(i) for i in items]
    return [e for e in errors if e is not None]


def _batch_exit(errors, total):
    if not errors:
        return EXIT_OK
    if len(errors) < total:
        return EXIT_PARTIAL
    # everything failed: report the first cause's class
    first = errors[0]
    cause = getattr(first, "cause", first)
    return EXIT_NUMERIC if isinstance(cause, FloatingPointError) else EXIT_PARTIAL


def _pairs(spec, enc):
    """A data directory or ``synthetic:N`` (two-cluster corpus in the encoder's own world)."""
    if isinstance(spec, str) and spec.startswith("synthetic:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic corpus size in {spec!r}") from None
        world = getattr(enc.trainable, "world", None)
        if world is None:
            raise ConfigError("synthetic corpus needs the synthetic encoder")
        pairs = make_two_cluster_corpus(n, seed=0, world=world)
    else:
        root = _require_dir(spec, "data")
        if not (root / "captions.tsv").is_file():
            raise ConfigError(f"caption file not found: {root / 'captions.tsv'}")
        pairs = load_pairs(root)
    if not pairs:
        raise ConfigError(f"no usable image/caption pairs in {spec}")
    return [(preprocess_image(img, enc.input_side), p) for img, p in pairs]


# ---------------------------------------------------------------- commands


def cmd_finetune(args, cfg):
    ft = _build(FinetuneConfig, cfg["finetune"])
    enc = _encoder(cfg)
    data = args.data or cfg["finetune"].get("data")
    if data is None:
        raise ConfigError("finetune needs --data DIR or synthetic:N")
    cfg["finetune"]["data"] = data
    pairs = _pairs(data, enc)
    out = _out_dir(args)
    _echo(out, "finetune", cfg)
    ft_json = ft.to_json()
    new, train_log = finetune(enc, pairs, ft, checkpoint_dir=out / "checkpoints")
    train_log.to_csv(out / "train_log.csv")
    save_checkpoint(out / "best", new.trainable.params, {
        "params_version": new.params_version, "loss_variant": ft.loss.variant, "config": ft_json,
    })
    log.info("best parameters %s -> %s", new.params_version, out / "best")
    return EXIT_OK


def _text_embedding(enc, seg):
    if seg.get("manifest"):
        manifest_path = Path(seg["manifest"])
        if not manifest_path.is_file():
            raise ConfigError(f"prompt manifest not found: {manifest_path}")
        cid = seg.get("prompt_config", "P0")
        if cid not in PROMPT_CONFIGS:
            raise ConfigError(f"unknown prompt configuration {cid!r}")
        try:
            manifest = load_prompt_manifest(manifest_path)
            label = seg.get("class_label")
            if label is None:
                labels = sorted(manifest.get(cid, {}))
                if len(labels) != 1:
                    raise ConfigError(f"--class is required; {cid} has classes {labels}")
                label = labels[0]
            prompts = prompts_for(manifest, cid, label)
        except (KeyError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from None
        return ensemble_prompt_embedding(enc, prompts), f"{cid}:{label}"
    if seg.get("prompt"):
        return ensemble_prompt_embedding(enc, [TextPrompt(seg["prompt"])]), "text"
    raise ConfigError("segment needs --prompt TEXT or --prompts MANIFEST")


def _to_size(arr, h, w, binary=False):
    if arr.shape[:2] == (h, w):
        return arr
    out = resize_bilinear(np.asarray(arr, dtype=np.float64), h, w)
    return out >= 0.5 if binary else np.clip(out, 0.0, 1.0)


def cmd_segment(args, cfg):
    btl = _build(BottleneckConfig, cfg["bottleneck"])
    pipe = _build(PipelineConfig, cfg["pipeline"])
    enc = _encoder(cfg)
    refiner = _refiner(cfg)
    files = _inputs(args.input)
    t, prompt_id = _text_embedding(enc, cfg["segment"])
    out = _out_dir(args)
    _echo(out, "segment", cfg)

    def one(path):
        raw = load_image(path)
        h, w = raw.shape
        res = zero_shot_segment(preprocess_image(raw, enc.input_side), enc, t, btl, pipe, refiner, prompt_id)
        name = _stem(path)
        sal = SaliencyMap(_to_size(res.saliency.values, h, w), prompt_id, btl.gamma, btl.steps, btl.seed)
        mask = _to_size(res.mask, h, w, binary=True)
        coarse = _to_size(res.coarse, h, w, binary=True)
        write_mask(out / f"{name}.mask.png", mask)
        write_mask(out / f"{name}.coarse.png", coarse)
        write_saliency(out / f"{name}.sal", sal)
        prompts = res.prompts.to_json()
        prompts["frame"] = [enc.input_side, enc.input_side]
        write_json(out / f"{name}.prompts.json", prompts)
        write_rgb(out / f"{name}.panel.png", _panel(raw.pixels, sal.values, coarse, mask))

    errors = _run_batch(files, one, cfg["workers"])
    return _batch_exit(errors, len(files))


def _panel(rgb, saliency, coarse, mask, weak=None, uncertainty=None):
    tiles = [rgb, heat_overlay(rgb, to_unit_range(saliency)), mask_overlay(rgb, coarse, (0.2, 0.6, 1.0)), mask_overlay(rgb, mask)]
    if weak is not None:
        tiles.append(mask_overlay(rgb, weak, (0.2, 1.0, 0.3)))
    if uncertainty is not None:
        tiles.append(heat_overlay(rgb, uncertainty))
    return compose_panel(tiles)


def _weak_data(spec, labels_dir, side):
    if isinstance(spec, str) and spec.startswith("synthetic:"):
        from .toynet import planted_shape_dataset

        n = int(spec.split(":", 1)[1])
        return PseudoDataset(planted_shape_dataset(n, side=side, seed=0), provenance=spec)
    root = _require_dir(spec, "data")
    images = _require_dir(root / "images", "image")
    labels = _require_dir(labels_dir or root / "masks", "pseudo-label")
    pairs = []
    for path in list_images(images):
        cands = [labels / f"{_stem(path)}.mask.png", labels / f"{_stem(path)}.png"]
        found = next((c for c in cands if c.is_file()), None)
        if found is None:
            raise ConfigError(f"no pseudo-label for {path.name} in {labels}")
        pairs.append((load_image(path).pixels, read_mask(found)))
    return PseudoDataset(pairs, provenance=str(labels))


def cmd_weak_train(args, cfg):
    wc = _build(WeakConfig, cfg["weak"])
    try:
        sched = wc.schedule()
    except ValueError as exc:
        raise ConfigError(f"invalid weak schedule: {exc}") from None
    data = args.data or cfg["weak"].get("data")
    if data is None:
        raise ConfigError("weak-train needs --data DIR or synthetic:N")
    dataset = _weak_data(data, args.labels, args.side)
    out = _out_dir(args)
    _echo(out, "weak-train", cfg)
    model = ToySegNet(channels=wc.channels, seed=wc.seed)
    train_weak(model, dataset, sched, seed=wc.seed, batch_size=wc.batch_size, checkpoint_dir=out / "weak")
    # record the channel count so predict can rebuild the network
    manifest_path = out / "weak" / "ensemble.json"
    manifest = json.loads(manifest_path.read_text())
    manifest.update({"channels": wc.channels, "threshold": wc.threshold})
    write_json(manifest_path, manifest)
    return EXIT_OK


def _check_ensemble(root):
    root = _require_dir(root, "ensemble")
    manifest_path = root / "ensemble.json"
    if not manifest_path.is_file():
        raise ConfigError(f"ensemble manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    sched = manifest.get("schedule")
    expected = []
    if sched:
        expected = [f"cycle_{d}/ckpt_{g}" for d in range(sched["cycles"]) for g in range(sched["checkpoints_per_cycle"])]
    for rel in expected or manifest["checkpoints"]:
        d = root / rel
        for f in ("params.bin", "meta.json"):
            if not (d / f).is_file():
                raise ConfigError(f"ensemble incomplete: missing {rel}/{f}")
    return load_ensemble(root), manifest


def cmd_predict(args, cfg):
    ens, manifest = _check_ensemble(args.ensemble)
    threshold = float(cfg["weak"].get("threshold", manifest.get("threshold", 0.5)))
    files = _inputs(args.input)
    out = _out_dir(args)
    _echo(out, "predict", cfg)

    def one(path):
        raw = load_image(path)
        prob = ensemble_predict(ens, raw.pixels)
        unc = entropy_uncertainty(prob)
        name = _stem(path)
        mask = binarize_final(prob, threshold)
        write_mask(out / f"{name}.weak.png", mask)
        write_uncertainty(out / f"{name}.unc", unc.entropy, unc.class_count, checkpoints=len(ens))
        scaled = unc.entropy / np.log(unc.class_count)
        write_rgb(out / f"{name}.unc.png", heat_overlay(raw.pixels, scaled))

    errors = _run_batch(files, one, 1)
    return _batch_exit(errors, len(files))


def _match_pred(pred_dir, gt_path):
    stem = _stem(gt_path)
    for suffix in (".mask.png", ".weak.png", ".png"):
        c = pred_dir / f"{stem}{suffix}"
        if c.is_file():
            return c
    return None


def cmd_eval_seg(args, cfg):
    pred_dir = _require_dir(args.pred, "prediction")
    gt_dir = _require_dir(args.gt, "ground-truth")
    tol = int(cfg["eval"]["nsd_tolerance"])
    out = _out_dir(args)
    _echo(out, "eval-seg", cfg)
    gts = list_images(gt_dir)
    if not gts:
        raise ConfigError(f"no masks in {gt_dir}")
    scores, missing = [], []
    for gt_path in gts:
        pred_path = _match_pred(pred_dir, gt_path)
        if pred_path is None:
            missing.append(gt_path.name)
            continue
        scores.append((_stem(gt_path), score_masks(read_mask(pred_path), read_mask(gt_path), tol)))
    if not scores:
        raise ConfigError(f"no predictions in {pred_dir} match masks in {gt_dir}")
    summary = write_seg_report(scores, out / "seg_metrics.csv", out / "seg_summary.json", tol)
    log.info("DSC %.4f NSD %.4f over %d images", summary["dsc"]["mean"], summary["nsd"]["mean"], summary["n"])
    for name in missing:
        log.error("no prediction for %s", name)
    return EXIT_PARTIAL if missing else EXIT_OK


def cmd_eval_retrieval(args, cfg):
    enc = _encoder(cfg)
    data = args.data or cfg["eval"].get("data")
    if data is None:
        raise ConfigError("eval-retrieval needs --data DIR or synthetic:N")
    cfg["eval"]["data"] = data
    pairs = _pairs(data, enc)
    ev = cfg["eval"]
    out = _out_dir(args)
    _echo(out, "eval-retrieval", cfg)
    try:
        report = retrieval_protocol(enc, pairs, runs=int(ev["runs"]), batch_size=int(ev["batch_size"]),
                                    seed=int(ev["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_json(out / "retrieval.json", report.to_json())
    log.info("top-1 image->text %.2f%%, text->image %.2f%%", report.top1_i2t[0], report.top1_t2i[0])
    return EXIT_OK


def cmd_panel(args, cfg):
    raw = load_image(args.image).pixels
    h, w = raw.shape[:2]
    if not Path(args.saliency).is_file():
        raise ConfigError(f"saliency file not found: {args.saliency}")
    sal = read_saliency(args.saliency).values
    for p in (args.coarse, args.mask, args.weak):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"mask file not found: {p}")
    weak = read_mask(args.weak) if args.weak else None
    unc = None
    if args.uncertainty:
        values, meta = read_float_map(args.uncertainty)
        unc = values / np.log(meta.get("class_count", 2))
    coarse = read_mask(args.coarse) if args.coarse else np.zeros((h, w), dtype=bool)
    mask = read_mask(args.mask) if args.mask else np.zeros((h, w), dtype=bool)
    out = _out_dir(args)
    _echo(out, "panel", cfg)
    name = args.name or _stem(args.image)
    write_rgb(out / f"{name}.panel.png", _panel(raw, sal, coarse, mask, weak, unc))
    return EXIT_OK


COMMANDS = {
    "finetune": cmd_finetune,
    "segment": cmd_segment,
    "weak-train": cmd_weak_train,
    "predict": cmd_predict,
    "eval-seg": cmd_eval_seg,
    "eval-retrieval": cmd_eval_retrieval,
    "panel": cmd_panel,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--encoder", help="synthetic | external:<name>")
    common.add_argument("--encoder-params", dest="encoder_params", help="trained parameters (.npz)")
    common.add_argument("--refiner", help="mock | external:<name>")
    common.add_argument("--out-dir", dest="out_dir", default="out")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="promptseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("finetune", parents=[common], help="contrastive fine-tuning")
    s.add_argument("--data", help="directory with images/ and captions.tsv, or synthetic:N")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", dest="learning_rate", type=float)
    s.add_argument("--variant", choices=("infonce", "dcl", "hn_nce", "dhn_nce"))

    s = sub.add_parser("segment", parents=[common], help="zero-shot segmentation from a text prompt")
    s.add_argument("input", help="image file or directory")
    s.add_argument("--prompt", help="single prompt text")
    s.add_argument("--prompts", help="prompt manifest JSON")
    s.add_argument("--prompt-config", dest="prompt_config", choices=PROMPT_CONFIGS)
    s.add_argument("--class", dest="class_label")
    s.add_argument("--gamma", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=("boxes", "points", "boxes+points"))
    s.add_argument("--eta-c", dest="eta_c", type=float)

    s = sub.add_parser("weak-train", parents=[common], help="train on pseudo-labels with checkpoint ensembling")
    s.add_argument("--data", help="directory with images/ (and masks/), or synthetic:N")
    s.add_argument("--labels", help="pseudo-label directory (default DATA/masks)")
    s.add_argument("--side", type=int, default=16, help="image side for synthetic:N")

    s = sub.add_parser("predict", parents=[common], help="ensemble prediction with uncertainty")
    s.add_argument("input", help="image file or directory")
    s.add_argument("--ensemble", required=True, help="weak/ directory written by weak-train")

    s = sub.add_parser("eval-seg", parents=[common], help="DSC / NSD against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--nsd-tolerance", dest="nsd_tolerance", type=int)

    s = sub.add_parser("eval-retrieval", parents=[common], help="top-1/top-2 retrieval protocol")
    s.add_argument("--data", help="directory with images/ and captions.tsv, or synthetic:N")
    s.add_argument("--runs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)

    s = sub.add_parser("panel", parents=[common], help="compose an overlay panel from saved outputs")
    s.add_argument("image")
    s.add_argument("--saliency", required=True, help=".sal file")
    s.add_argument("--coarse")
    s.add_argument("--mask")
    s.add_argument("--weak")
    s.add_argument("--uncertainty", help=".unc file")
    s.add_argument("--name")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except PipelineError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC if isinstance(exc.cause, FloatingPointError) else EXIT_CONFIG
    except (FileNotFoundError, NotADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
