"""Operator entry points: one subcommand per pipeline, driven by a shared
JSON config file with flag overrides.

Every command writes its outputs plus a config snapshot into a run directory
and exits 0 on success; failures emit machine-readable error JSON on stderr
and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .analysis import self_retrieval_probe, vocab_neighbors, write_neighbor_dump
from .config import ConfigError, load_config, require, section, write_snapshot
from .curation import (annotated_targets, apply_verdicts,
                       false_negative_candidates, load_verdicts,
                       write_candidates)
from .data import load_manifest, write_manifest
from .encoders import (FeatureCache, ToyDualEncoder, ToyEncoderConfig,
                       build_feature_cache, load_image)
from .evaluation import evaluate, report_csv_row, write_report
from .retrieval import RetrievalEngine
from .tinet import TINetConfig, load_checkpoint, tinet_forward
from .training import (TrainConfig, load_encoder_checkpoint, run_stage1,
                       run_stage2, save_stage1_checkpoint, write_trace)

DEFAULT_TINET_DEPTH = {"Text": 3, "Vis": 2}


def _toy_encoder(cfg: dict) -> ToyDualEncoder:
    enc = section(cfg, "encoder")
    backend = enc.pop("backend", "toy")
    enc.pop("checkpoint", None)
    if backend != "toy":
        raise ConfigError(["only the toy backend can be trained from the CLI; "
                           "pretrained runs use the library API"])
    return ToyDualEncoder(ToyEncoderConfig(**enc))


def _trained_encoder(cfg: dict, frozen: bool = True) -> ToyDualEncoder:
    encoder = load_encoder_checkpoint(require(cfg, "encoder.checkpoint"))
    return encoder.freeze() if frozen else encoder


def _train_config(body: dict, defaults: dict) -> TrainConfig:
    merged = dict(defaults)
    rename = {"hidden": None, "mode": None, "out_dir": None, "cache_dir": None,
              "depth": None, "seed": "seed"}
    for key, value in body.items():
        if key in ("mode", "depth", "hidden", "out_dir", "cache_dir"):
            continue
        merged[rename.get(key, key) or key] = value
    return TrainConfig(**merged)


def _config_fingerprint(cfg: dict, command: str) -> str:
    payload = json.dumps({"command": command, "config": cfg}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _out_dir(args, body: dict) -> Path:
    out = args.out or body.get("out_dir")
    if not out:
        raise ConfigError([f"missing out_dir (flag --out or config section)"])
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "finetune")
    out = _out_dir(args, body)
    encoder = _toy_encoder(cfg)
    dataset = load_manifest(require(cfg, "data.train_manifest"), "image-caption")
    train_cfg = _train_config(body, {
        "epochs": 60, "batch_size": 128, "base_lr": 1e-5, "warmup_epochs": 5})
    result = run_stage1(encoder, dataset, train_cfg, out_dir=out)
    save_stage1_checkpoint(result.encoder, result.id_head, result.mask_head,
                           out / "encoder.pt")
    write_snapshot(cfg, "finetune", {}, out)
    return 0


def cmd_cache(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "cache")
    out = _out_dir(args, body)
    encoder = _trained_encoder(cfg)
    manifest_path = args.manifest or body.get("manifest") \
        or require(cfg, "data.train_manifest")
    kind = "image-caption" if args.kind == "image-caption" else "image-only"
    dataset = load_manifest(manifest_path, kind)
    cache = build_feature_cache(encoder, dataset)
    cache.save(out)
    write_snapshot(cfg, "cache", {"manifest": str(manifest_path)}, out)
    return 0


def cmd_train_tinet(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "tinet")
    out = _out_dir(args, body)
    encoder = _trained_encoder(cfg)
    mode = args.mode or body.get("mode", "Text")
    depth = args.depth or body.get("depth") or DEFAULT_TINET_DEPTH[mode]
    hidden = args.hidden or body.get("hidden", 512)
    dataset = load_manifest(require(cfg, "data.train_manifest"), "image-caption")
    cache = None
    cache_dir = body.get("cache_dir")
    if cache_dir:
        cache = FeatureCache.load(cache_dir,
                                  expected_fingerprint=encoder.fingerprint())
    train_cfg = _train_config(body, {
        "epochs": 60, "batch_size": 128, "base_lr": 1e-4, "warmup_epochs": 5,
        "identity_cap": None})
    tinet_cfg = TINetConfig(d_in=encoder.d_embed, d_out=encoder.d_token,
                            depth=depth, hidden_width=hidden,
                            seed=train_cfg.seed)
    run_stage2(encoder, dataset, cache, [tinet_cfg], [mode], train_cfg,
               out_dir=out)
    write_snapshot(cfg, "train-tinet",
                   {"mode": mode, "depth": depth, "hidden": hidden}, out)
    return 0


def _engine_from_config(cfg: dict, tinet_paths: list[str]) -> RetrievalEngine:
    encoder = _trained_encoder(cfg)
    cache_dir = require(cfg, "eval.cache_dir")
    gallery = FeatureCache.load(cache_dir,
                                expected_fingerprint=encoder.fingerprint())
    tinets = {Path(p).stem: load_checkpoint(p) for p in tinet_paths}
    query_manifest = None
    data_cfg = section(cfg, "data")
    if "query_manifest" in data_cfg:
        query_manifest = load_manifest(data_cfg["query_manifest"], "image-only")
    return RetrievalEngine(encoder, gallery, tinets=tinets,
                           query_manifest=query_manifest)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "eval")
    out = _out_dir(args, body)
    mode = args.mode or body.get("mode", "composed")
    tinet_paths = body.get("tinets", [])
    engine = _engine_from_config(cfg, tinet_paths)
    triplets = load_manifest(require(cfg, "data.triplets"), "triplets")
    report = evaluate(triplets, engine, mode=mode,
                      tinet_ids=tuple(Path(p).stem for p in tinet_paths))
    fingerprint = _config_fingerprint(cfg, "eval")
    write_report(report, out / "report.json", config_fingerprint=fingerprint)
    with open(out / "report.csv", "w", encoding="utf-8") as fh:
        fh.write("label,rank1,rank5,rank10,map\n")
        fh.write(report_csv_row(report, label=mode) + "\n")
    write_snapshot(cfg, "eval", {"mode": mode}, out)
    return 0


def cmd_probe_vocab(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "probe")
    out = _out_dir(args, body)
    encoder = _trained_encoder(cfg)
    tinet = load_checkpoint(args.tinet or require(cfg, "probe.tinet"))
    tinet.check_encoder(encoder)
    k = args.k or body.get("k", 10)
    manifest = load_manifest(require(cfg, "data.query_manifest"), "image-only")
    image_ids = body.get("images") or manifest.image_ids
    rows = []
    for image_id in image_ids:
        record = manifest.record(image_id)
        f_v = encoder.encode_image(load_image(record.path))
        pseudo = tinet_forward(tinet, f_v)
        neighbors = vocab_neighbors(pseudo, encoder.token_table,
                                    encoder.tokenizer, k)
        rows.append({"image_id": image_id,
                     "neighbors": [{"word": w, "sim": s} for w, s in neighbors]})
    write_neighbor_dump(rows, out / "neighbors.jsonl")
    write_snapshot(cfg, "probe-vocab", {"k": k}, out)
    return 0


def cmd_self_retrieval(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "self_retrieval")
    out = _out_dir(args, body)
    encoder = _trained_encoder(cfg)
    tinet = load_checkpoint(args.tinet or require(cfg, "self_retrieval.tinet"))
    cache = FeatureCache.load(require(cfg, "self_retrieval.cache_dir"),
                              expected_fingerprint=encoder.fingerprint())
    references = load_manifest(require(cfg, "data.query_manifest"),
                               "image-only").image_ids
    report = self_retrieval_probe(tinet, encoder, references, cache)
    write_report(report, out / "report.json",
                 config_fingerprint=_config_fingerprint(cfg, "self-retrieval"))
    write_snapshot(cfg, "self-retrieval", {}, out)
    return 0


def cmd_curate_mine(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "curate")
    out = _out_dir(args, body)
    encoder = _trained_encoder(cfg)
    gallery = FeatureCache.load(require(cfg, "curate.cache_dir"),
                                expected_fingerprint=encoder.fingerprint())
    triplets = load_manifest(require(cfg, "data.triplets"), "triplets")
    targets = sorted({tid for t in triplets.triplets
                      for tid in t.target_image_ids})
    candidates = false_negative_candidates(
        targets, gallery, k=args.k or body.get("k", 5),
        annotated=annotated_targets(triplets))
    write_candidates(candidates, out / "candidates.jsonl")
    write_snapshot(cfg, "curate-mine", {"k": args.k or body.get("k", 5)}, out)
    return 0


def cmd_curate_apply(args) -> int:
    cfg = load_config(args.config)
    body = section(cfg, "curate")
    out = _out_dir(args, body)
    verdicts_path = args.verdicts or require(cfg, "curate.verdicts")
    verdicts = load_verdicts(verdicts_path)
    apply_verdicts(require(cfg, "data.triplets"), verdicts,
                   out_path=out / "triplets.jsonl",
                   audit_path=out / "audit.jsonl")
    write_snapshot(cfg, "curate-apply", {"verdicts": str(verdicts_path)}, out)
    return 0


def cmd_filter_corpus(args) -> int:
    from .curation import filter_by_resolution
    cfg = load_config(args.config)
    body = section(cfg, "filter")
    out = _out_dir(args, body)
    fraction = args.top_fraction if args.top_fraction is not None \
        else body.get("top_fraction")
    if fraction is None:
        raise ConfigError(["missing filter.top_fraction (or --top-fraction)"])
    manifest = load_manifest(require(cfg, "data.corpus_manifest"), "image-only")
    filtered = filter_by_resolution(manifest, fraction)
    write_manifest(filtered, out / "manifest.jsonl")
    write_snapshot(cfg, "filter-corpus", {"top_fraction": fraction}, out)
    return 0


def cmd_serve(args) -> int:
    import os

    import uvicorn

    from .service import build_service_state, create_app
    cfg = load_config(args.config)
    body = section(cfg, "serve")
    state = build_service_state(cfg)
    app = create_app(state)
    host = args.host or os.environ.get("PERSEARCH_HOST") \
        or body.get("host", "127.0.0.1")
    port = args.port or int(os.environ.get("PERSEARCH_PORT", 0)) \
        or body.get("port", 8000)
    uvicorn.run(app, host=host, port=port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="persearch",
        description="Composed person retrieval pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", default=None, help="run directory")
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=handler)
        return p

    add("finetune", cmd_finetune)
    add("cache", cmd_cache,
        **{"--manifest": {"default": None},
           "--kind": {"default": "image-caption",
                      "choices": ["image-caption", "image-only"]}})
    add("train-tinet", cmd_train_tinet,
        **{"--mode": {"default": None, "choices": ["Vis", "Text"]},
           "--depth": {"type": int, "default": None},
           "--hidden": {"type": int, "default": None}})
    add("eval", cmd_eval,
        **{"--mode": {"default": None}})
    add("probe-vocab", cmd_probe_vocab,
        **{"--tinet": {"default": None}, "--k": {"type": int, "default": None}})
    add("self-retrieval", cmd_self_retrieval,
        **{"--tinet": {"default": None}})
    add("curate-mine", cmd_curate_mine,
        **{"--k": {"type": int, "default": None}})
    add("curate-apply", cmd_curate_apply,
        **{"--verdicts": {"default": None}})
    add("filter-corpus", cmd_filter_corpus,
        **{"--top-fraction": {"type": float, "default": None,
                              "dest": "top_fraction"}})
    add("serve", cmd_serve,
        **{"--host": {"default": None}, "--port": {"type": int, "default": None}})
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc),
                          "details": exc.details}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
