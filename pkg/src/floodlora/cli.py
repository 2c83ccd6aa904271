"""Command-line interface.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import SPLITS, SynthConfig, generate_synthetic, load_dataset
from .errors import (
    ConfigurationError,
    DataFormatError,
    DimensionError,
    NumericalError,
    StateError,
    UsageError,
    ValidationError,
)
from .lora import Strategy, count_trainable
from .model import PRESETS, Encoder, EncoderConfig, SegModel, model_inventory, patchify
from .objectives import METRIC_KEYS, LossConfig
from .tensor import no_grad
from .training import (
    PretrainConfig,
    TrainConfig,
    epochs_csv,
    estimate_memory,
    evaluate,
    mae_pretrain,
    split_arrays,
    train,
)

log = logging.getLogger("floodlora")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

LARGE_COUNT_NOTE = (
    "note: these are closed-form counts for to_qkv + to_out adapters in every block. "
    "Reference trainable-parameter totals for this backbone are larger, which implies further adapted "
    "matrices inside the original encoder; those absolute values are not reproduced."
)


# ---------------------------------------------------------------- configuration


def default_config() -> dict:
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    pre_cfg = PretrainConfig().to_dict()
    pre_cfg.pop("seed")
    return {
        "seed": 0,
        "model": asdict(PRESETS["desk"]),
        "strategy": Strategy().to_dict(),
        "train": train_cfg,
        "loss": asdict(LossConfig()),
        "pretrain": pre_cfg,
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise UsageError(f"unknown config key {dotted!r}")
    if isinstance(node[keys[-1]], dict):
        raise UsageError(f"config key {dotted!r} names a section, not a value")
    node[keys[-1]] = value


# written into config.resolved.json for provenance; ignored when read back
PROVENANCE_KEYS = ("command", "data", "encoder")


def merge_config(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be an object")
            merge_config(base[k], v, key + ".")
        else:
            base[k] = v


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataFormatError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        merge_config(cfg, {k: v for k, v in user.items() if k not in PROVENANCE_KEYS})
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_override(cfg, key.strip(), _parse_value(value))
    return cfg


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_if(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    sc = SynthConfig(
        image_size=args.size, n_train=args.train, n_val=args.val, n_test=args.test, n_ood=args.ood,
        seed=args.seed, label_mode=args.label_mode, speckle=args.speckle,
    )
    ds = generate_synthetic(sc, args.out)
    counts = {s: len(ds.ids(s)) for s in SPLITS}
    print(" ".join(f"{s}={n}" for s, n in counts.items()), f"total={len(ds)}")
    return EXIT_OK


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    _set_if(cfg, "pretrain", "epochs", args.epochs)
    _set_if(cfg, "pretrain", "mask_ratio", args.mask_ratio)
    _set_if(cfg, "pretrain", "lr", args.lr)
    if args.seed is not None:
        cfg["seed"] = args.seed
    ds = load_dataset(args.data)
    cfg["model"]["image_size"] = ds.image_size
    out = _out_dir(args)
    write_json(out / "config.resolved.json", {"command": "pretrain", "data": str(args.data), **cfg})
    mcfg = EncoderConfig(**cfg["model"])
    pcfg = PretrainConfig(seed=cfg["seed"], **cfg["pretrain"])
    tr = split_arrays(ds, "train")
    enc = Encoder(mcfg, np.random.default_rng(cfg["seed"]))
    enc, history = mae_pretrain(enc, np.concatenate([tr.pre, tr.post]), cfg=pcfg)
    ckpt.save_encoder(enc, out / "checkpoints" / "encoder.flck", {"pretrain": pcfg.to_dict()})
    lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(history, 1)]
    (out / "pretrain.csv").write_text("\n".join(lines) + "\n")
    write_json(out / "report.json", {"final_loss": history[-1], "epochs": len(history)})
    print(f"pretrained encoder: final reconstruction loss {history[-1]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _strategy_from_args(cfg: dict, args) -> Strategy:
    s = cfg["strategy"]
    if args.strategy is not None:
        s["kind"] = args.strategy
    _set_if(cfg, "strategy", "rank", args.rank)
    _set_if(cfg, "strategy", "alpha", args.alpha)
    _set_if(cfg, "strategy", "dropout", args.lora_dropout)
    _set_if(cfg, "strategy", "init_mode", args.init_mode)
    if s["kind"] == "lora" and s["rank"] is None:
        raise UsageError("--strategy lora requires --rank")
    if s["kind"] == "lora" and s["alpha"] is None:
        s["alpha"] = 2.0 * s["rank"]
    return Strategy.from_dict(s)


def _build_model(cfg: dict, strategy: Strategy, encoder_path) -> SegModel:
    if encoder_path:
        enc, _ = ckpt.load_encoder(encoder_path)
        cfg["model"] = enc.config.to_dict()
    mcfg = EncoderConfig(**cfg["model"])
    rng = np.random.default_rng(cfg["seed"])
    if not encoder_path:
        enc = Encoder(mcfg, rng)
    return SegModel(mcfg, rng, strategy, encoder=enc)


def run_training(cfg: dict, data_path, encoder_path, out: Path) -> dict:
    """Train one configuration and write checkpoint, epoch log and report under ``out``."""
    strategy = Strategy.from_dict(cfg["strategy"])
    ds = load_dataset(data_path)
    if not encoder_path:
        cfg["model"]["image_size"] = ds.image_size
    model = _build_model(cfg, strategy, encoder_path)
    write_json(out / "config.resolved.json",
               {"command": "train", "data": str(data_path), "encoder": str(encoder_path or ""), **cfg})
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    result = train(model, split_arrays(ds, "train"), split_arrays(ds, "val"), tcfg, LossConfig(**cfg["loss"]))
    ckpt.save_model(model, out / "checkpoints" / "best.flck", {"best_epoch": result.best_epoch})
    (out / "epochs.csv").write_text(epochs_csv(result.records))
    test = evaluate(model, split_arrays(ds, "test"))
    counts = count_trainable(model, strategy)
    report = {
        "strategy": strategy.label,
        "split": "test",
        "metrics": test.report.to_record(),
        "trainable_params": counts.total,
        "trainable_breakdown": {"encoder": counts.encoder, "adapters": counts.adapters, "decoder": counts.decoder},
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.records),
        "stopped_early": result.stopped_early,
    }
    write_json(out / "report.json", report)
    return report


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _set_if(cfg, "train", "max_epochs", args.epochs)
    _set_if(cfg, "train", "lr", args.lr)
    _set_if(cfg, "train", "batch_size", args.batch_size)
    _strategy_from_args(cfg, args)
    report = run_training(cfg, args.data, args.encoder, _out_dir(args))
    m = report["metrics"]
    print(f"{report['strategy']}: test F1 {m['f1']:.2f} IoU {m['iou']:.2f} "
          f"({report['trainable_params']} trainable params, best epoch {report['best_epoch']})")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def write_pgm(path: Path, mask: np.ndarray) -> None:
    """Binary portable graymap, water = 255."""
    img = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8, w * h).reshape(h, w)


def cmd_eval(args) -> int:
    model, _ = ckpt.load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.image_size != model.config.image_size:
        raise DataFormatError(
            f"checkpoint expects {model.config.image_size}px inputs but dataset {args.data} has {ds.image_size}px"
        )
    data = split_arrays(ds, args.split)
    res = evaluate(model, data)
    out = _out_dir(args)
    write_json(out / "report.json", {"split": args.split, "strategy": model.strategy.label,
                                      "metrics": res.report.to_record()})
    (out / "report.csv").write_text(res.report.to_csv_row())
    rows = [{"id": sid, **r.to_record()} for sid, r in res.per_sample]
    with open(out / "per_sample.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    mdir = out / "masks"
    mdir.mkdir(exist_ok=True)
    for i, sid in enumerate(data.ids):
        write_pgm(mdir / f"{sid}.pred.pgm", res.predictions[i])
        write_pgm(mdir / f"{sid}.gt.pgm", data.mask[i])
    m = res.report
    print(f"{args.split}: acc {100*m.accuracy:.2f} P {100*m.precision:.2f} R {100*m.recall:.2f} "
          f"F1 {100*m.f1:.2f} IoU {100*m.iou:.2f} Dice {100*m.dice:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- merge


def cmd_merge(args) -> int:
    model, manifest = ckpt.load_model(args.checkpoint)
    if manifest.get("merged"):
        raise StateError(f"{args.checkpoint} is already merged")
    if model.strategy.kind != "lora":
        raise UsageError(f"{args.checkpoint} holds a {model.strategy.label} model; only lora checkpoints merge")
    plain = ckpt.merged_copy(model)
    ckpt.save_model(plain, args.out, {"merged_from": model.strategy.to_dict()})
    print(f"merged {len(model.attention_layers())} adapted layers into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- count-params


def count_table(mcfg: EncoderConfig, ranks) -> list[dict]:
    inv = model_inventory(mcfg)
    rows = []
    for s in [Strategy("full"), Strategy("frozen")] + [Strategy.lora(r) for r in ranks]:
        rep = count_trainable(inv, s)
        rows.append({"strategy": s.label, "rank": s.rank or 0, **{k: v for k, v in rep.to_dict().items()
                                                                  if k not in ("strategy", "per_layer")},
                     "per_layer": rep.per_layer})
    return rows


def cmd_count_params(args) -> int:
    cfg = resolve_config(args)
    if args.preset:
        cfg["model"] = asdict(PRESETS[args.preset])
    mcfg = EncoderConfig(**cfg["model"])
    ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
    rows = count_table(mcfg, ranks)
    if args.json:
        print(json.dumps([{k: v for k, v in r.items() if k != "per_layer"} for r in rows], indent=2))
    else:
        print(f"{'strategy':<10} {'total':>12} {'encoder':>12} {'adapters':>10} {'decoder':>9}")
        for r in rows:
            print(f"{r['strategy']:<10} {r['total']:>12,} {r['encoder']:>12,} {r['adapters']:>10,} {r['decoder']:>9,}")
            if args.per_layer:
                for name, n in r["per_layer"]:
                    print(f"    {name:<44} {n:>10,}")
    if args.preset == "large":
        print(LARGE_COUNT_NOTE)
    if args.memory:
        for r in ranks[:1]:
            for s in (Strategy("full"), Strategy("frozen"), Strategy.lora(r)):
                est = estimate_memory(mcfg, s, batch_size=1)
                print(f"memory {s.label:<9} " + " ".join(f"{k}={v / 2**30:.2f}GiB" for k, v in est.items()))
    return EXIT_OK


# ---------------------------------------------------------------- embed


def pca_project(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projections, components ``[k, d]`` (orthonormal rows) and the centring mean."""
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k]
    # fix the sign so the largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    return (x - mean) @ comps.T, comps, mean


def patch_labels(mask: np.ndarray, patch: int) -> np.ndarray:
    """Per-patch water label by strict majority of mask pixels."""
    frac = patchify(mask[:, None].astype(np.float64), patch).mean(axis=-1)
    return (frac > 0.5).astype(np.uint8)


def embed_split(encoder: Encoder, data, snapshot: str = "post", batch_size: int = 8) -> np.ndarray:
    images = data.post if snapshot == "post" else data.pre
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(encoder(images[start : start + batch_size]).data)
    return np.concatenate(out)


def cmd_embed(args) -> int:
    manifest, _ = ckpt.load_records(args.checkpoint)
    if manifest.get("kind") == "encoder":
        encoder, _ = ckpt.load_encoder(args.checkpoint)
    else:
        encoder = ckpt.load_model(args.checkpoint)[0].encoder
    ds = load_dataset(args.data)
    data = split_arrays(ds, args.split)
    emb = embed_split(encoder, data, args.snapshot)  # [N, L, d]
    n, seq, d = emb.shape
    flat = emb.reshape(n * seq, d)
    labels = patch_labels(data.mask, encoder.config.patch_size).reshape(-1)
    proj, comps, _ = pca_project(flat)
    edir = _out_dir(args) / "embeddings"
    edir.mkdir(exist_ok=True)
    np.save(edir / f"{args.split}.npy", flat)
    np.save(edir / f"{args.split}_labels.npy", labels)
    np.save(edir / f"{args.split}_pca_components.npy", comps)
    with open(edir / f"{args.split}_pca.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "patch", "pc1", "pc2", "label"])
        for i in range(n * seq):
            w.writerow([data.ids[i // seq], i % seq, repr(float(proj[i, 0])), repr(float(proj[i, 1])),
                        "water" if labels[i] else "land"])
    print(f"wrote {n * seq} patch embeddings ({d}-d) for split {args.split}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


SWEEP_FIELDS = ("strategy", "rank", "trainable_params", "split") + METRIC_KEYS


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    if args.seed is not None:
        base["seed"] = args.seed
    _set_if(base, "train", "max_epochs", args.epochs)
    _set_if(base, "train", "lr", args.lr)
    out = _out_dir(args)
    ds = load_dataset(args.data)
    strategies = ([Strategy("frozen")] if args.include_frozen else []) + [
        Strategy.lora(int(r)) for r in args.ranks.split(",") if r.strip()
    ]
    rows = []
    for s in strategies:
        cfg = copy.deepcopy(base)
        cfg["strategy"] = s.to_dict()
        run_dir = out / s.label
        run_dir.mkdir(parents=True, exist_ok=True)
        report = run_training(cfg, args.data, args.encoder, run_dir)
        model, _ = ckpt.load_model(run_dir / "checkpoints" / "best.flck")
        for split in ("test", "ood"):
            rec = report["metrics"] if split == "test" else evaluate(model, split_arrays(ds, split)).report.to_record()
            rows.append({"strategy": s.label, "rank": s.rank or 0, "trainable_params": report["trainable_params"],
                         "split": split, **{k: rec[k] for k in METRIC_KEYS}})
        print(f"{s.label}: test F1 {rows[-2]['f1']:.2f} ood F1 {rows[-1]['f1']:.2f}")
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lr=1e-3")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodlora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic pre/post flood dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--val", type=int, default=16)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--ood", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speckle", type=float, default=0.25)
    p.add_argument("--label-mode", choices=("all_water", "flood_only"), default="all_water")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining of the encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    def train_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--encoder", help="pretrained encoder checkpoint")
        p.add_argument("--epochs", type=int, help="maximum epochs")
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        _add_config_flags(p)

    p = sub.add_parser("train", help="train a segmentation model")
    train_flags(p)
    p.add_argument("--strategy", choices=("full", "frozen", "lora"))
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=float, help="LoRA scale numerator (default 2*rank)")
    p.add_argument("--lora-dropout", type=float)
    p.add_argument("--init-mode", choices=("zero_B", "both_random"))
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train frozen + one lora run per rank; write sweep.csv")
    train_flags(p)
    p.add_argument("--ranks", default="4,8,16")
    p.add_argument("--no-frozen", dest="include_frozen", action="store_false")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold lora adapters into plain weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="merged checkpoint path")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("count-params", help="trainable parameters per strategy")
    p.add_argument("--preset", choices=tuple(PRESETS))
    p.add_argument("--ranks", default="4,8,16")
    p.add_argument("--per-layer", action="store_true")
    p.add_argument("--memory", action="store_true", help="also print a training-memory estimate")
    p.add_argument("--json", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("embed", help="export patch embeddings and a 2-D PCA projection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--snapshot", choices=("pre", "post"), default="post")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical abort: {exc} (epoch={exc.epoch}, batch={exc.batch}, lr={exc.lr})", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, DimensionError, ValidationError, StateError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
