"""Command-line entry point.

One binary with subcommands covering the full workflow: registry setup,
synthetic data, generator/backbone pretraining, watermark training,
generation, attribution, evaluation protocols, and report rendering.
Configuration is a nested JSON document; every key can be overridden with
--set dot.path=value, and common paths have dedicated flags. All commands
are deterministic given the resolved config and seeds.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict, replace

import torch

from . import evaluation, templates
from .distortions import default_suite
from .errors import ConceptMarkError, ConfigError, DataError, IoError, TargetNotInPrompt
from .generation import (
    GeneratorConfig,
    ImageTensor,
    SyntheticConceptDatasetConfig,
    TokenEmbeddingTable,
    ToyDenoiser,
    ToyGeneratorBackend,
    build_synthetic_dataset,
    load_image_png,
    save_image_png,
    train_toy_generator,
)
from .registry import (
    Registry,
    load_multiconcept_dataset,
    load_registry,
    save_multiconcept_dataset,
    save_registry,
)
from .retrieval import (
    DEFAULT_TAU,
    BackbonePretrainConfig,
    ToyFeatureBackbone,
    attribute,
    attribute_multi,
    pretrain_backbone,
)
from .serialization import checkpoint_hash, load_checkpoint, module_tensors, save_checkpoint
from .training import TrainConfig, load_model_state, train

ROOT_ENV = "CONCEPTMARK_ROOT"

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {
        "root": ".",
        "registry": "registry.json",
        "stack": "stack",
        "checkpoints": "checkpoints",
        "reports": "reports",
        "dataset": "dataset",
        "images": "images",
    },
    "registry": {
        "n_bits": 16,
        "min_hamming": 1,
        "objects": 4,
        "styles": 4,
    },
    "dataset": {
        "image_size": 32,
        "samples_per_concept": 48,
        "pair_samples": 1024,
        "seed": 0,
        "max_saved_images": 64,
        "multi_per_pair": 1,
        "multi_split": "eval",
    },
    "generator": {
        "image_size": 32,
        "channels": 24,
        "blocks": 2,
        "embedding_dim": 32,
        "num_steps": 4,
        "alpha_bar_start": 0.8,
        "alpha_bar_end": 0.05,
        "pretrain_steps": 2500,
        "pretrain_batch": 16,
        "pretrain_lr": 2e-3,
        "seed": 0,
    },
    "backbone": {
        "steps": 1200,
        "batch_size": 32,
        "learning_rate": 2e-3,
        "seed": 0,
        "augment": True,
        "d_img": 48,
        "d_txt": 32,
    },
    "train": asdict(TrainConfig()),
    "eval": {
        "tau": DEFAULT_TAU,
        "images_per_concept": 12,
        "n_clean": 2000,
        "alpha": 1.1,
        "seeds": [0, 1, 2],
        "lengths": [5, 16, 32],
        "concept_counts": [4, 8, 16],
        "sequential_increments": [[1, 1], [1, 1]],
        "extra_fraction": 0.10,
        "random_decoder_seeds": 20,
        "gallery_images": 8,
        "multi_per_pair": 1,
        "split": "eval",
        "seed": 1000,
    },
}


# --------------------------------------------------------------------------
# config plumbing


def _deep_merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    dotted, _, raw = assignment.partition("=")
    node = config
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = _parse_value(raw)


def resolve_config(config_path=None, overrides=(), root=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _deep_merge(config, loaded)
    env_root = os.environ.get(ROOT_ENV)
    if env_root:
        config["paths"]["root"] = env_root
    for assignment in overrides or ():
        _apply_override(config, assignment)
    if root:
        config["paths"]["root"] = root
    return config


def _path(config: dict, key: str, override=None) -> str:
    value = override if override else config["paths"][key]
    root = config["paths"]["root"]
    return value if os.path.isabs(value) else os.path.join(root, value)


def write_effective_config(config: dict, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write effective config: {exc}")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# pretrained stack container (token table + generator + feature backbone)


def save_stack(dirpath, table: TokenEmbeddingTable, backend: ToyGeneratorBackend,
               backbone: ToyFeatureBackbone) -> None:
    groups = {
        "table": table.state_tensors(),
        "denoiser": module_tensors(backend.denoiser),
        "backbone": module_tensors(backbone),
    }
    manifest = {
        "kind": "stack",
        "embedding_dim": table.dim,
        "pseudo": dict(table.pseudo),
        "generator": asdict(backend.config),
        "d_img": backbone.d_img,
        "d_txt": backbone.d_txt,
        "backbone_width": backbone.width,
    }
    save_checkpoint(dirpath, groups, manifest)


def load_stack(dirpath, dtype=torch.float32):
    manifest, groups = load_checkpoint(dirpath)
    if manifest.get("kind") != "stack":
        raise ConfigError(f"{dirpath} does not hold a pretrained stack")
    table = TokenEmbeddingTable.__new__(TokenEmbeddingTable)
    table.dim = manifest["embedding_dim"]
    table.dtype = dtype
    table.vectors = {name: t.to(dtype) for name, t in groups["table"].items()}
    table.pseudo = dict(manifest.get("pseudo", {}))
    gen_config = GeneratorConfig(**manifest["generator"])
    denoiser = ToyDenoiser(
        channels=gen_config.channels, blocks=gen_config.blocks,
        embedding_dim=gen_config.embedding_dim, image_size=gen_config.image_size,
        dtype=dtype,
    )
    denoiser.load_state_dict(groups["denoiser"])
    denoiser.eval()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    backend = ToyGeneratorBackend(denoiser, gen_config, dtype=dtype)
    backbone = ToyFeatureBackbone(
        embedding_dim=manifest["embedding_dim"], d_img=manifest["d_img"],
        d_txt=manifest["d_txt"], width=manifest["backbone_width"], dtype=dtype,
    )
    backbone.load_state_dict(groups["backbone"])
    backbone.freeze()
    return table, backend, backbone


def _load_workspace(config: dict, args, with_model: bool = True):
    registry = load_registry(_path(config, "registry", getattr(args, "registry", None)))
    table, backend, backbone = load_stack(
        _path(config, "stack", getattr(args, "stack", None)))
    evaluation.ensure_pseudo_tokens(table, registry)
    if not with_model:
        return registry, table, backend, backbone, None
    model_dir = getattr(args, "model", None) or os.path.join(
        _path(config, "checkpoints"), "final")
    state = load_model_state(model_dir, registry, backend, backbone, table)
    return registry, table, backend, backbone, state


def _train_config(config: dict, registry: Registry = None) -> TrainConfig:
    tc = TrainConfig(**config["train"])
    if registry is not None and tc.n_bits != registry.n_bits:
        # the registry owns the bit length
        tc = replace(tc, n_bits=registry.n_bits)
    return tc


# --------------------------------------------------------------------------
# commands


def cmd_init_registry(config: dict, args) -> int:
    reg_cfg = config["registry"]
    registry = Registry(n_bits=int(reg_cfg["n_bits"]), seed=int(config["seed"]),
                        min_hamming=int(reg_cfg["min_hamming"]))
    if args.concepts_file:
        try:
            with open(args.concepts_file, "r", encoding="utf-8") as fh:
                entries = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read concepts file: {exc}")
        except json.JSONDecodeError as exc:
            raise DataError(f"concepts file is not valid JSON: {exc}")
        if not isinstance(entries, list):
            raise DataError("concepts file must hold a JSON list")
        for entry in entries:
            registry.register_concept(
                entry["token"], entry["kind"],
                secret=entry.get("secret"),
                concept_id=entry.get("concept_id"),
                query_template=entry.get("query_template"),
            )
    else:
        table = TokenEmbeddingTable(dim=int(config["generator"]["embedding_dim"]),
                                    seed=int(config["seed"]))
        evaluation.register_grid_concepts(
            registry, table, n_object=int(reg_cfg["objects"]),
            n_style=int(reg_cfg["styles"]))
    out = _path(config, "registry", args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_registry(registry, out)
    write_effective_config(config, out + ".config.json")
    _emit({"registry": out, "n_concepts": len(registry), "n_bits": registry.n_bits})
    return 0


def cmd_build_dataset(config: dict, args) -> int:
    ds_cfg = config["dataset"]
    outdir = _path(config, "dataset", args.out)
    os.makedirs(outdir, exist_ok=True)
    dataset = build_synthetic_dataset(SyntheticConceptDatasetConfig(
        image_size=int(ds_cfg["image_size"]),
        samples_per_concept=int(ds_cfg["samples_per_concept"]),
        pair_samples=int(ds_cfg["pair_samples"]),
        seed=int(ds_cfg["seed"]),
    ))
    kept = min(len(dataset), int(ds_cfg["max_saved_images"]))
    index = []
    for i in range(kept):
        name = f"sample_{i:05d}.png"
        save_image_png(ImageTensor(values=dataset.images[i],
                                   provenance={"prompt": dataset.prompts[i]}),
                       os.path.join(outdir, name))
        index.append({
            "file": name,
            "prompt": dataset.prompts[i],
            "shape_label": int(dataset.shape_labels[i]),
            "style_label": int(dataset.style_labels[i]),
        })
    with open(os.path.join(outdir, "index.json"), "w", encoding="utf-8") as fh:
        json.dump({"total_samples": len(dataset), "saved_images": kept,
                   "samples": index}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    summary = {"dataset": outdir, "total_samples": len(dataset), "saved_images": kept}
    registry_path = _path(config, "registry", args.registry)
    if os.path.exists(registry_path):
        registry = load_registry(registry_path)
        objects = [c for c in registry.concept_ids()
                   if registry.get(c).kind in ("object", "general")]
        styles = [c for c in registry.concept_ids()
                  if registry.get(c).kind == "style"]
        if objects and styles:
            samples = evaluation.build_multiconcept_samples(
                registry, objects, styles,
                per_pair=int(ds_cfg["multi_per_pair"]),
                split=str(ds_cfg["multi_split"]))
            multi_path = os.path.join(outdir, "multiconcept.json")
            save_multiconcept_dataset(samples, multi_path)
            summary["multiconcept"] = multi_path
            summary["multiconcept_samples"] = len(samples)
    write_effective_config(config, os.path.join(outdir, "effective_config.json"))
    _emit(summary)
    return 0


def cmd_pretrain_generator(config: dict, args) -> int:
    ds_cfg = config["dataset"]
    gen_cfg = GeneratorConfig(**config["generator"])
    if gen_cfg.image_size != int(ds_cfg["image_size"]):
        raise ConfigError("generator.image_size must match dataset.image_size")
    dataset = build_synthetic_dataset(SyntheticConceptDatasetConfig(
        image_size=int(ds_cfg["image_size"]),
        samples_per_concept=int(ds_cfg["samples_per_concept"]),
        pair_samples=int(ds_cfg["pair_samples"]),
        seed=int(ds_cfg["seed"]),
    ))
    table = TokenEmbeddingTable(dim=gen_cfg.embedding_dim, seed=int(config["seed"]))
    backend = train_toy_generator(dataset, gen_cfg, table)
    bb_cfg = config["backbone"]
    backbone = pretrain_backbone(
        dataset, table,
        BackbonePretrainConfig(
            steps=int(bb_cfg["steps"]), batch_size=int(bb_cfg["batch_size"]),
            learning_rate=float(bb_cfg["learning_rate"]), seed=int(bb_cfg["seed"]),
            augment=bool(bb_cfg["augment"])),
        embedding_dim=gen_cfg.embedding_dim,
        d_img=int(bb_cfg["d_img"]), d_txt=int(bb_cfg["d_txt"]),
    )
    outdir = _path(config, "stack", args.out)
    save_stack(outdir, table, backend, backbone)
    write_effective_config(config, os.path.join(outdir, "effective_config.json"))
    _emit({
        "stack": outdir,
        "stack_sha256": checkpoint_hash(outdir),
        "final_pretrain_loss": backend.pretrain_log[-1][1] if backend.pretrain_log else None,
    })
    return 0


def cmd_train(config: dict, args) -> int:
    registry, table, backend, backbone, _ = _load_workspace(config, args,
                                                            with_model=False)
    tc = _train_config(config, registry)
    outdir = _path(config, "checkpoints", args.out)
    os.makedirs(outdir, exist_ok=True)
    state = train(tc, registry, backend, backbone, table, outdir=outdir,
                  log_path=os.path.join(outdir, "loss_log.jsonl"))
    write_effective_config(config, os.path.join(outdir, "effective_config.json"))
    final = os.path.join(outdir, "final")
    _emit({
        "checkpoint": final,
        "checkpoint_sha256": checkpoint_hash(final),
        "steps": state.step,
        "final_loss": state.loss_log[-1]["total"] if state.loss_log else None,
    })
    return 0


def _parse_concepts(raw) -> list:
    if not raw:
        return []
    return [c.strip() for c in raw.split(",") if c.strip()]


def cmd_generate(config: dict, args) -> int:
    registry, table, backend, backbone, state = _load_workspace(
        config, args, with_model=not args.clean)
    targets = _parse_concepts(args.concepts)
    if not args.clean and not targets:
        raise ConfigError("watermarked generation needs --concepts (or pass --clean)")
    prompt_words = args.prompt.split()
    for cid in targets:
        token = registry.get(cid).token
        if token not in prompt_words:
            raise TargetNotInPrompt(
                f"token {token!r} for concept {cid!r} does not appear in the prompt")
    seed = args.seed if args.seed is not None else int(config["seed"])
    count = int(args.count)
    if args.clean:
        images = evaluation.generate_clean(backend, table, [args.prompt] * count,
                                           seed=seed)
    else:
        images = evaluation.generate_watermarked(
            state, [(args.prompt, targets)] * count, seed=seed,
            alpha=float(args.alpha))
    out = args.out or _path(config, "images")
    files = []
    if count == 1 and out.endswith(".png"):
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        save_image_png(images[0], out)
        files.append(out)
        write_effective_config(config, out + ".config.json")
    else:
        os.makedirs(out, exist_ok=True)
        stem = "clean" if args.clean else "wm"
        for i, image in enumerate(images):
            path = os.path.join(out, f"{stem}_{i:04d}.png")
            save_image_png(image, path)
            files.append(path)
        write_effective_config(config, os.path.join(out, "effective_config.json"))
    _emit({"files": files, "seed": seed, "concepts": targets, "clean": args.clean})
    return 0


def cmd_attribute(config: dict, args) -> int:
    registry, table, backend, backbone, state = _load_workspace(config, args)
    image = load_image_png(args.image)
    tau = args.tau if args.tau is not None else float(config["eval"]["tau"])
    concepts = _parse_concepts(args.concepts)
    if args.concept:
        concepts = [args.concept] + concepts
    if not concepts:
        raise ConfigError("attribution needs --concept or --concepts")
    if len(concepts) == 1:
        payload = attribute(state, registry, image, concepts[0], tau=tau).to_dict()
    else:
        payload = [r.to_dict()
                   for r in attribute_multi(state, registry, image, concepts, tau=tau)]
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(payload if isinstance(payload, dict) else {"results": payload})
    return 0


def _eval_robustness(config, registry, state, ev_cfg):
    ev = evaluation.evaluate_single(
        state, images_per_concept=int(ev_cfg["images_per_concept"]),
        seed=int(ev_cfg["seed"]), tau=float(ev_cfg["tau"]),
        split=str(ev_cfg["split"]))
    sweep = evaluation.robustness_sweep(state, registry, ev["images"],
                                        suite=default_suite(),
                                        tau=float(ev_cfg["tau"]))
    return {
        "study": "robustness",
        "clean_bit_accuracy": ev["bit_accuracy"],
        "clean_attribution_accuracy": ev["attribution_accuracy"],
        "robustness": sweep,
    }


def _eval_multiconcept(config, registry, state, ev_cfg, dataset_path=None):
    if dataset_path:
        samples = load_multiconcept_dataset(dataset_path, registry=registry)
    else:
        objects = [c for c in registry.concept_ids()
                   if registry.get(c).kind in ("object", "general")]
        styles = [c for c in registry.concept_ids()
                  if registry.get(c).kind == "style"]
        if not objects or not styles:
            raise DataError("multi-concept eval needs object and style concepts")
        samples = evaluation.build_multiconcept_samples(
            registry, objects, styles, per_pair=int(ev_cfg["multi_per_pair"]),
            split=str(ev_cfg["split"]))
    report = {"study": "multiconcept", "n_samples": len(samples)}
    for variant in ("plain", "prompt_weighted"):
        result = evaluation.multiconcept_eval(
            state, registry, samples, variant=variant,
            alpha=float(ev_cfg["alpha"]), seed=int(ev_cfg["seed"]),
            tau=float(ev_cfg["tau"]))
        result.pop("_images", None)
        result.pop("_results", None)
        report[variant] = result
    return report


def _eval_comprehensive(config, registry, state, ev_cfg):
    ev = evaluation.evaluate_single(
        state, images_per_concept=int(ev_cfg["images_per_concept"]),
        seed=int(ev_cfg["seed"]), tau=float(ev_cfg["tau"]),
        split=str(ev_cfg["split"]))
    pairs = evaluation.clean_prompts(registry, int(ev_cfg["n_clean"]),
                                     split=str(ev_cfg["split"]))
    clean_images = evaluation.generate_clean(
        state.backend, state.table, [p for p, _ in pairs],
        seed=int(ev_cfg["seed"]) + 500_000)
    clean_set = list(zip(clean_images, [cid for _, cid in pairs]))
    verdict = evaluation.comprehensive_test(state, registry, ev["images"],
                                            clean_set, tau=float(ev_cfg["tau"]))
    sanity = evaluation.random_decoder_sanity(
        state.backbone, state.table, registry, clean_images,
        n_seeds=int(ev_cfg["random_decoder_seeds"]))
    return {
        "study": "comprehensive",
        "wm_bit_accuracy": ev["bit_accuracy"],
        "wm_attribution_accuracy": ev["attribution_accuracy"],
        "random_decoder_bit_accuracy": sanity,
        **verdict,
    }


def _eval_baseline(config, registry, state, ev_cfg):
    objects = [c for c in registry.concept_ids()
               if registry.get(c).kind in ("object", "general")]
    styles = [c for c in registry.concept_ids() if registry.get(c).kind == "style"]
    if not objects or not styles:
        raise DataError("baseline eval needs object and style concepts")
    samples = evaluation.build_multiconcept_samples(
        registry, objects, styles, per_pair=int(ev_cfg["multi_per_pair"]),
        split=str(ev_cfg["split"]))
    mc = evaluation.multiconcept_eval(state, registry, samples, variant="plain",
                                      seed=int(ev_cfg["seed"]),
                                      tau=float(ev_cfg["tau"]))
    images = mc["_images"]

    # reference gallery: clean generations prompted with each concept's base word
    n_ref = int(ev_cfg["gallery_images"])
    refs = {}
    for k, cid in enumerate(objects + styles):
        record = registry.get(cid)
        bank = templates.BANKS[record.kind]
        idx = evaluation._split_indices(bank, str(ev_cfg["split"]))
        bank_prompts = [
            bank[idx[j % len(idx)]].format(evaluation.factor_word(record.token))
            for j in range(n_ref)
        ]
        refs[cid] = evaluation.generate_clean(
            state.backend, state.table, bank_prompts,
            seed=int(ev_cfg["seed"]) + 700_000 + 1000 * k)
    gallery_obj = evaluation.passive_gallery(
        state.backbone, {c: refs[c] for c in objects})
    gallery_sty = evaluation.passive_gallery(
        state.backbone, {c: refs[c] for c in styles})
    passive_pairs_obj, passive_pairs_sty = [], []
    for s, img in zip(samples, images):
        for cid in s.targets:
            if registry.get(cid).kind == "style":
                passive_pairs_sty.append((img, cid))
            else:
                passive_pairs_obj.append((img, cid))
    acc_obj = evaluation.passive_baseline_accuracy(state.backbone, gallery_obj,
                                                   passive_pairs_obj)
    acc_sty = evaluation.passive_baseline_accuracy(state.backbone, gallery_sty,
                                                   passive_pairs_sty)
    n_obj, n_sty = len(passive_pairs_obj), len(passive_pairs_sty)
    passive = (acc_obj * n_obj + acc_sty * n_sty) / (n_obj + n_sty)
    return {
        "study": "baseline",
        "proactive_attribution_accuracy": mc["attribution_accuracy"],
        "passive_accuracy": passive,
        "passive_object_accuracy": acc_obj,
        "passive_style_accuracy": acc_sty,
        "advantage_pp": 100 * (mc["attribution_accuracy"] - passive),
    }


def cmd_eval(config: dict, args) -> int:
    ev_cfg = config["eval"]
    protocol = args.protocol
    needs_model = protocol in ("robustness", "multiconcept", "comprehensive",
                               "baseline")
    registry, table, backend, backbone, state = _load_workspace(
        config, args, with_model=needs_model)
    if protocol == "robustness":
        report = _eval_robustness(config, registry, state, ev_cfg)
    elif protocol == "multiconcept":
        report = _eval_multiconcept(config, registry, state, ev_cfg,
                                    dataset_path=args.dataset)
    elif protocol == "comprehensive":
        report = _eval_comprehensive(config, registry, state, ev_cfg)
    elif protocol == "baseline":
        report = _eval_baseline(config, registry, state, ev_cfg)
    elif protocol == "bitlength":
        tc = _train_config(config)
        report, _ = evaluation.bitlength_study(
            table, backend, backbone, tc,
            lengths=[int(x) for x in ev_cfg["lengths"]],
            seeds=[int(x) for x in ev_cfg["seeds"]],
            images_per_concept=int(ev_cfg["images_per_concept"]))
    elif protocol == "scaling":
        tc = _train_config(config)
        report, _ = evaluation.scaling_study(
            table, backend, backbone, tc,
            concept_counts=[int(x) for x in ev_cfg["concept_counts"]],
            images_per_concept=int(ev_cfg["images_per_concept"]))
    elif protocol == "sequential":
        tc = _train_config(config)
        increments = [tuple(int(v) for v in pair)
                      for pair in ev_cfg["sequential_increments"]]
        report, _ = evaluation.sequential_study(
            table, backend, backbone, tc, increments=increments,
            extra_fraction=float(ev_cfg["extra_fraction"]),
            images_per_concept=int(ev_cfg["images_per_concept"]))
    else:
        raise ConfigError(f"unknown eval protocol {protocol!r}")
    outdir = _path(config, "reports")
    os.makedirs(outdir, exist_ok=True)
    out = args.out or os.path.join(outdir, f"{protocol}.json")
    evaluation.write_report(report, out)
    write_effective_config(config, out + ".config.json")
    public = {k: v for k, v in report.items()
              if not k.startswith("_") and not isinstance(v, (dict, list))}
    _emit({"report": out, **public})
    return 0


def cmd_report(config: dict, args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read report {args.report}: {exc}")
    except json.JSONDecodeError as exc:
        raise DataError(f"report {args.report} is not valid JSON: {exc}")
    outputs = []
    plot_path = args.plot
    if plot_path is None:
        stem = args.report[:-5] if args.report.endswith(".json") else args.report
        plot_path = stem + ".png"
    evaluation.plot_report(report, plot_path)
    outputs.append(plot_path)
    if args.csv:
        evaluation.write_report(report, args.report)
        outputs.append(args.report)
    _emit({"outputs": outputs})
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptmark",
        description="Proactive concept watermarking for generative image models.",
    )
    parser.add_argument("--config", help="JSON config file merged over defaults")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE",
                        help="dot-notation config override (repeatable)")
    parser.add_argument("--root", help=f"artifact root (env {ROOT_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-registry", help="create and save a concept registry")
    p.add_argument("--out", help="registry path")
    p.add_argument("--concepts-file", help="JSON list of concept entries")
    p.set_defaults(func=cmd_init_registry)

    p = sub.add_parser("build-dataset", help="synthesize concept images and the "
                                             "multi-concept prompt dataset")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--registry", help="registry path")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("pretrain-generator",
                       help="train and checkpoint the toy generator and backbone")
    p.add_argument("--out", help="stack directory")
    p.set_defaults(func=cmd_pretrain_generator)

    p = sub.add_parser("train", help="train the watermarking modules")
    p.add_argument("--registry", help="registry path")
    p.add_argument("--stack", help="pretrained stack directory")
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate watermarked (or clean) images")
    p.add_argument("--registry", help="registry path")
    p.add_argument("--stack", help="pretrained stack directory")
    p.add_argument("--model", help="model checkpoint directory")
    p.add_argument("--prompt", required=True)
    p.add_argument("--concepts", help="comma-separated concept ids to embed")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, default=1.0,
                   help="style token weight at generation time")
    p.add_argument("--clean", action="store_true",
                   help="generate without any watermark")
    p.add_argument("--out", help="output PNG path (count 1) or directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("attribute", help="retrieve and verify secrets from an image")
    p.add_argument("--registry", help="registry path")
    p.add_argument("--stack", help="pretrained stack directory")
    p.add_argument("--model", help="model checkpoint directory")
    p.add_argument("--image", required=True, help="PNG image path")
    p.add_argument("--concept", help="single concept id to query")
    p.add_argument("--concepts", help="comma-separated concept ids to query")
    p.add_argument("--tau", type=float, help="bit accuracy match threshold")
    p.add_argument("--out", help="write the attribution JSON here too")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("protocol", choices=["robustness", "multiconcept",
                                        "comprehensive", "bitlength", "scaling",
                                        "sequential", "baseline"])
    p.add_argument("--registry", help="registry path")
    p.add_argument("--stack", help="pretrained stack directory")
    p.add_argument("--model", help="model checkpoint directory")
    p.add_argument("--dataset", help="multi-concept dataset JSON (multiconcept)")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render plots/CSVs from a stored report")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--plot", help="output plot path (default: alongside report)")
    p.add_argument("--csv", action="store_true", help="regenerate CSV mirrors")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.overrides, args.root)
        return args.func(config, args)
    except ConceptMarkError as exc:
        sys.stderr.write(json.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }, sort_keys=True) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({
            "error": "IoError", "message": str(exc), "exit_code": 5,
        }, sort_keys=True) + "\n")
        return 5


if __name__ == "__main__":
    sys.exit(main())
