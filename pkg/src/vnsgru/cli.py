"""Command-line entry point: ``train``, ``eval``, ``caption`` and ``gen-data``.

Every command reads one JSON config; flags given on the command line win.
Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 numeric failure. Diagnostics go to stderr as a single line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .data import SyntheticSpec, Vocabulary, build_vocabulary, generate_synthetic_dataset, \
    load_dataset, write_captions, write_dataset
from .decoder import DecoderConfig, beam_decode, greedy_decode
from .errors import ConfigurationError, FormatError, VNSGRUError
from .metrics import evaluate_corpus
from .selection import SelectionState, load_model
from .training import Trainer, TrainConfig

log = logging.getLogger("vnsgru")

SELECTABLE = ("B4", "C", "M", "R", "XE")
MODEL_KEYS = ("n_x", "n_h", "n_f", "layer_norm", "visual_to_all_layers")


@dataclass
class RunConfig:
    manifest: Path | None = None
    features: Path | None = None
    out: Path = Path("run")
    seed: int = 0
    model: dict = field(default_factory=lambda: {"n_x": 32, "n_h": 32, "n_f": 8})
    train: dict = field(default_factory=dict)
    metrics: list = field(default_factory=lambda: ["B4", "C", "M", "R"])
    weights: list = field(default_factory=lambda: [0.25] * 4)
    warm_start: dict = field(default_factory=dict)
    max_len: int = 20
    beam: int = 1
    min_count: int = 1
    synthetic: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc.msg} "
                                     f"(line {exc.lineno})") from None
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "RunConfig":
        allowed = {"manifest", "features", "out", "seed", "model", "train", "selection",
                   "decode", "min_count", "synthetic"}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        # relative paths are taken relative to the config file
        for key in ("manifest", "features", "out"):
            if doc.get(key) is not None:
                setattr(cfg, key, base / doc[key])
        cfg.seed = int(doc.get("seed", 0))
        model = doc.get("model", {})
        if set(model) - set(MODEL_KEYS):
            raise ConfigurationError(f"unknown model keys: {sorted(set(model) - set(MODEL_KEYS))}")
        cfg.model = {**cfg.model, **model}
        cfg.train = dict(doc.get("train", {}))
        if "seed" in cfg.train:
            raise ConfigurationError("set the seed at the top level, not under 'train'")
        sel = doc.get("selection", {})
        cfg.metrics = list(sel.get("metrics", cfg.metrics))
        cfg.weights = [float(w) for w in sel.get("weights", [1.0 / len(cfg.metrics)] * len(cfg.metrics))]
        cfg.warm_start = dict(sel.get("warm_start", {}))
        bad = [m for m in cfg.metrics if m not in SELECTABLE]
        if bad:
            raise ConfigurationError(f"unknown selection metrics {bad}; choose from {SELECTABLE}")
        dec = doc.get("decode", {})
        cfg.max_len = int(dec.get("max_len", cfg.max_len))
        cfg.beam = int(dec.get("beam", cfg.beam))
        cfg.min_count = int(doc.get("min_count", 1))
        cfg.synthetic = dict(doc.get("synthetic", {}))
        return cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({"max_len": self.max_len, **self.train, "seed": self.seed})

    def selection_state(self) -> SelectionState:
        state = SelectionState(list(self.metrics), list(self.weights))
        if self.warm_start:
            state.warm_start(self.warm_start)
        return state


# ---------------------------------------------------------------- helpers

def _load_data(cfg: RunConfig):
    if cfg.manifest is None:
        raise ConfigurationError("no manifest given (config 'manifest' or --manifest)")
    return load_dataset(cfg.manifest, cfg.features)


def _check_dims(config: DecoderConfig, manifest):
    if (config.n_v, config.n_s) != (manifest.n_v, manifest.n_s):
        raise ConfigurationError(
            f"checkpoint expects n_v={config.n_v}, n_s={config.n_s} but dataset "
            f"{manifest.name!r} has n_v={manifest.n_v}, n_s={manifest.n_s}")


def _load_vocab(checkpoint: Path, vocab_path) -> Vocabulary:
    path = Path(vocab_path) if vocab_path else checkpoint.parent / "vocab.json"
    try:
        return Vocabulary.from_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"vocabulary file not found: {path}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"vocabulary file {path} is malformed: {exc}") from None


def decode_records(params, config: DecoderConfig, records, max_len: int, beam: int,
                   threads: int = 1) -> list[list[int]]:
    """Decode every record; output order follows ``records`` regardless of threads."""
    if beam < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {beam}")
    if not records:
        return []
    if beam == 1:
        s = np.stack([r.s for r in records])
        v = np.stack([r.v for r in records])
        return greedy_decode(params, config, s, v, max_len)

    def one(r):
        return beam_decode(params, config, r.s, r.v, max_len, beam)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args)
    data = _load_data(cfg)
    train, validation = data.split("train"), data.split("validation")
    if not train:
        raise ConfigurationError("training split is empty")
    vocab = build_vocabulary([a for r in train for a in r.annotations], cfg.min_count)
    model = DecoderConfig(len(vocab), n_s=data.manifest.n_s, n_v=data.manifest.n_v, **cfg.model)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(vocab.to_json() + "\n", encoding="utf-8")
    state = Trainer(train, validation, vocab, model, cfg.train_config()).run(
        cfg.selection_state(), out)
    log.info("champion epoch %s written to %s", state.champion_epoch, out / "champion.ckpt")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.out / "champion.ckpt"
    params, model = load_model(checkpoint)
    vocab = _load_vocab(checkpoint, args.vocab)
    if len(vocab) != model.vocab_size:
        raise ConfigurationError(f"vocabulary has {len(vocab)} tokens, checkpoint expects "
                                 f"{model.vocab_size}")
    data = _load_data(cfg)
    _check_dims(model, data.manifest)
    records = sorted(data.split(args.split), key=lambda r: r.id)
    if not records:
        raise ConfigurationError(f"split {args.split!r} is empty")
    ids = decode_records(params, model, records, cfg.max_len, cfg.beam, args.threads)
    captions = [vocab.decode(x) for x in ids]
    report = evaluate_corpus(captions, [r.annotations for r in records])
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_captions(out / f"captions_{args.split}.txt",
                   [(r.id, " ".join(c)) for r, c in zip(records, captions)])
    (out / f"report_{args.split}.json").write_text(
        json.dumps({"split": args.split, **report.to_json()}, indent=2) + "\n", encoding="utf-8")
    log.info("%s: B4 %.2f  C %.2f  M %.2f  R %.2f", args.split, report.B4, report.C,
             report.M, report.R)
    return 0


def _single_features(path: Path, model: DecoderConfig):
    blob = path.read_bytes() if path.exists() else None
    if blob is None:
        raise FormatError(f"feature file not found: {path}")
    expected = (model.n_v + model.n_s) * 4
    if len(blob) != expected:
        raise FormatError(f"{path} has {len(blob)} bytes; one record needs {expected} "
                          f"(n_v={model.n_v} + n_s={model.n_s} floats)",
                          offset=min(len(blob), expected))
    row = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return row[model.n_v:], row[:model.n_v]


def cmd_caption(args) -> int:
    cfg = _config(args)
    checkpoint = Path(args.checkpoint) if args.checkpoint else cfg.out / "champion.ckpt"
    params, model = load_model(checkpoint)
    vocab = _load_vocab(checkpoint, args.vocab)
    if args.features:
        s, v = _single_features(Path(args.features), model)
    else:
        if not args.id:
            raise ConfigurationError("give --features for a single record or --id with a manifest")
        data = _load_data(cfg)
        _check_dims(model, data.manifest)
        match = [r for r in data if r.id == args.id]
        if not match:
            raise ConfigurationError(f"record {args.id!r} not in {cfg.manifest}")
        s, v = match[0].s, match[0].v

    ids = decode_records(params, model, [SimpleNamespace(s=s, v=v)], cfg.max_len, cfg.beam)[0]
    print(" ".join(vocab.decode(ids)))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = SyntheticSpec.from_dict(cfg.synthetic)
    dataset = generate_synthetic_dataset(spec, cfg.seed)
    path = write_dataset(dataset, cfg.out)
    log.info("wrote %d records to %s", len(dataset), path)
    return 0


# ---------------------------------------------------------------- argument handling

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = Path(args.out)
    if getattr(args, "manifest", None):
        cfg.manifest = Path(args.manifest)
    if getattr(args, "beam", None) is not None:
        cfg.beam = args.beam
    if getattr(args, "videos", None) is not None:
        cfg.synthetic["videos"] = args.videos
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vnsgru", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("train", help="train a decoder and keep the champion checkpoint")) \
        .add_argument("--manifest")

    for name, helptext in (("eval", "caption a split and score it"),
                           ("caption", "caption one video")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", help="default: <out>/champion.ckpt")
        p.add_argument("--vocab", help="default: vocab.json next to the checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--beam", type=int, help="beam width (1 = greedy)")
        if name == "eval":
            p.add_argument("--split", default="test", choices=("train", "validation", "test"))
            p.add_argument("--threads", type=int, default=1)
        else:
            p.add_argument("--features", help="single-record feature blob (v then s, f32 LE)")
            p.add_argument("--id", help="record id in the manifest")

    p = common(sub.add_parser("gen-data", help="write a synthetic manifest and feature blob"))
    p.add_argument("--videos", type=int)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "caption": cmd_caption,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except VNSGRUError as exc:
        print(f"vnsgru {args.command}: error: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vnsgru {args.command}: error: {_one_line(exc)}", file=sys.stderr)
        return 3


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
