"""Single entry point exposing the pipeline as subcommands.

Flags override config-file values; the merged result is echoed to the
output directory so every run is reproducible from its echo plus the seed.
Domain errors exit 1 with a one-line machine-parsable category; usage
errors exit 2.
"""

import argparse
import json
import os
import sys
import zlib

import numpy as np

from .concepts import (ConceptBank, LlmEndpointConfig, NegativeStrategy,
                       bank_from_retrieval, category_similarity,
                       retrieve_all_llm, retrieve_concepts_procedural,
                       select_valid_concepts)
from .data import Sample, build_dataset, default_categories, load_dataset
from .diffusion import DenoiserConfig, make_schedule, train_denoiser
from .embedder import EmbedderConfig, train_embedder
from .errors import ArgumentError, ConceptDiffError, ConfigError
from .evaluate import (EvalTrainConfig, ExperimentConfig, evaluate_top1, export_grid,
                       run_experiment, train_classifier)
from .guidance import (ClassifierConfig, GuidanceConfig, generate_informed,
                       gradcheck_report, train_guidance_classifier)
from .modelio import load_model, save_model

DEFAULT_T = 1000


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v != ""]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v != ""]


def _str_list(text):
    return [v for v in str(text).split(",") if v != ""]


def _build_parser():
    p = argparse.ArgumentParser(prog="conceptdiff",
                                description="concept-guided diffusion lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("make-data", help="render the attributed shapes dataset")
    common(sp)
    sp.add_argument("--n-per-class", type=int, default=None)

    sp = sub.add_parser("train-ddpm", help="train the denoiser")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--train-steps", type=int, default=None)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)

    sp = sub.add_parser("train-embed", help="train the joint embedder")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--bank", default=None, help="bank JSON with retrieved phrases")
    sp.add_argument("--train-steps", type=int, default=None)

    sp = sub.add_parser("train-cls", help="train the noise-aware guidance classifier")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--train-steps", type=int, default=None)

    sp = sub.add_parser("concepts-retrieve", help="retrieve concept phrases per category")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--llm", action="store_true", help="use the chat endpoint")
    sp.add_argument("--llm-url", default=None)
    sp.add_argument("--llm-model", default=None)
    sp.add_argument("--llm-auth-env", default=None)
    sp.add_argument("--llm-timeout", type=float, default=None)
    sp.add_argument("--cache", default=None, help="LLM response cache directory")
    sp.add_argument("--n-retrieve", type=int, default=None)

    sp = sub.add_parser("concepts-validate", help="score and select concepts")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--embedder", default=None)
    sp.add_argument("--k", type=int, default=None)

    sp = sub.add_parser("generate", help="guided DDIM generation")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--ddpm", default=None)
    sp.add_argument("--embedder", default=None)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--cls", default=None)
    sp.add_argument("--category", default=None, help="category id or 'all'")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--objective", default=None,
                    choices=["none", "cosine", "contrastive", "classifier", "combined"])
    sp.add_argument("--n-neg", type=int, default=None)
    sp.add_argument("--strategy", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--psi-target", dest="psi_target", default=None,
                    choices=["noisy", "x0"])

    sp = sub.add_parser("distill", help="surrogate-set sweep and evaluation")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.add_argument("--ddpm", default=None)
    sp.add_argument("--embedder", default=None)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--cls", default=None)
    sp.add_argument("--methods", default=None, help="comma list")
    sp.add_argument("--ipc", default=None, help="comma list")
    sp.add_argument("--seeds", default=None, help="comma list")
    sp.add_argument("--lambda", dest="lam", default=None, help="comma list")
    sp.add_argument("--objective", default=None,
                    choices=["none", "cosine", "contrastive", "classifier", "combined"])
    sp.add_argument("--n-neg", dest="n_neg", default=None, help="comma list")
    sp.add_argument("--strategy", default=None, help="comma list")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=None)

    sp = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference oracle")
    common(sp)
    sp.add_argument("--states", type=int, default=None)

    return p


def _merge(args, defaults):
    """Config-file values fill holes; explicit flags win; defaults last."""
    cfg = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            cfg = json.load(fh)
    merged = dict(defaults)
    merged.update({k: v for k, v in cfg.items()})
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _echo_config(out_dir, command, merged):
    os.makedirs(out_dir, exist_ok=True)
    echo = {"command": command, **merged}
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(echo, fh, indent=1, sort_keys=True)


def _require(merged, *keys):
    for k in keys:
        if merged[k] is None:
            raise ConfigError(f"missing required option --{k.replace('_', '-')}")


def _load_models(merged, need_cls=False):
    for key in ("data", "ddpm", "embedder", "bank"):
        if merged[key] is None:
            raise ConfigError(f"missing required option --{key}")
        if not os.path.exists(merged[key]):
            raise ConfigError(f"path does not exist: {merged[key]}")
    dataset = load_dataset(merged["data"])
    denoiser = load_model(merged["ddpm"])
    embedder = load_model(merged["embedder"])
    bank = ConceptBank.load(merged["bank"])
    classifier = None
    if merged.get("cls"):
        classifier = load_model(merged["cls"])
    elif need_cls:
        raise ConfigError("objective requires --cls checkpoint")
    return dataset, denoiser, embedder, bank, classifier


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args):
    merged = _merge(args, {"seed": 0, "out": None, "n_per_class": 500})
    _require(merged, "out")
    _echo_config(merged["out"], "make-data", merged)
    manifest = build_dataset(default_categories(), merged["n_per_class"], merged["seed"],
                             merged["out"])
    print(f"wrote dataset: {len(manifest.categories)} classes x {merged['n_per_class']}"
          f" -> {merged['out']}")
    return 0


def cmd_train_ddpm(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "train_steps": 6000,
                           "batch": 48, "lr": 2e-3})
    _require(merged, "out", "data")
    _echo_config(merged["out"], "train-ddpm", merged)
    dataset = load_dataset(merged["data"])
    schedule = make_schedule(DEFAULT_T)
    cfg = DenoiserConfig(steps=merged["train_steps"], batch=merged["batch"],
                         lr=merged["lr"])
    model = train_denoiser(dataset, schedule, cfg, merged["seed"])
    path = os.path.join(merged["out"], "denoiser.ckpt")
    save_model(path, model)
    print(f"wrote {path} (final loss {model.loss_history[-1]:.4f})")
    return 0


def cmd_train_embed(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "bank": None,
                           "train_steps": 2400})
    _require(merged, "out", "data", "bank")
    _echo_config(merged["out"], "train-embed", merged)
    dataset = load_dataset(merged["data"])
    bank = ConceptBank.load(merged["bank"])
    phrases = {c.id: list(c.retrieved) for c in bank.categories}
    cfg = EmbedderConfig(steps=merged["train_steps"])
    model = train_embedder(dataset, phrases, cfg, make_schedule(DEFAULT_T), merged["seed"])
    path = os.path.join(merged["out"], "embedder.ckpt")
    save_model(path, model)
    print(f"wrote {path}")
    return 0


def cmd_train_cls(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "train_steps": 800})
    _require(merged, "out", "data")
    _echo_config(merged["out"], "train-cls", merged)
    dataset = load_dataset(merged["data"])
    cfg = ClassifierConfig(steps=merged["train_steps"])
    model = train_guidance_classifier(dataset, make_schedule(DEFAULT_T), cfg,
                                      merged["seed"])
    path = os.path.join(merged["out"], "classifier.ckpt")
    save_model(path, model)
    print(f"wrote {path}")
    return 0


def cmd_concepts_retrieve(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "llm": False,
                           "llm_url": None, "llm_model": None,
                           "llm_auth_env": "CONCEPTDIFF_LLM_TOKEN",
                           "llm_timeout": 30.0, "cache": None, "n_retrieve": 10})
    _require(merged, "out", "data")
    _echo_config(merged["out"], "concepts-retrieve", merged)
    dataset = load_dataset(merged["data"])
    cats = dataset.categories
    if merged["llm"]:
        if not merged["llm_url"] or not merged["llm_model"]:
            raise ConfigError("--llm requires --llm-url and --llm-model")
        ecfg = LlmEndpointConfig(base_url=merged["llm_url"], model=merged["llm_model"],
                                 auth_env=merged["llm_auth_env"],
                                 timeout=merged["llm_timeout"])
        phrases = retrieve_all_llm(cats, ecfg, n=merged["n_retrieve"],
                                   cache_dir=merged["cache"])
    else:
        phrases = {c.id: retrieve_concepts_procedural(c, dataset.vocab, cats,
                                                      n=merged["n_retrieve"])
                   for c in cats}
    bank = bank_from_retrieval(cats, phrases)
    path = os.path.join(merged["out"], "bank.json")
    bank.save(path)
    print(f"wrote {path}")
    return 0


def cmd_concepts_validate(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "bank": None,
                           "embedder": None, "k": 5})
    _require(merged, "out", "data", "bank", "embedder")
    _echo_config(merged["out"], "concepts-validate", merged)
    dataset = load_dataset(merged["data"])
    bank = ConceptBank.load(merged["bank"])
    embedder = load_model(merged["embedder"])
    images = {c.id: dataset.images_of(c.id, "train")[:64] for c in dataset.categories}
    bank = select_valid_concepts(bank, embedder, images, k=merged["k"])
    bank.similarity = category_similarity(embedder, dataset.categories)
    with open(merged["embedder"], "rb") as fh:
        bank.embedder_checksum = f"{zlib.crc32(fh.read()):08x}"
    path = os.path.join(merged["out"], "bank.json")
    bank.save(path)
    print(f"wrote {path}")
    return 0


def cmd_generate(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "ddpm": None,
                           "embedder": None, "bank": None, "cls": None,
                           "category": "all", "n": 8, "lam": 1.0,
                           "objective": "contrastive", "n_neg": 10,
                           "strategy": "weighted", "steps": 50,
                           "psi_target": "noisy"})
    _require(merged, "out")
    _echo_config(merged["out"], "generate", merged)
    cfg = GuidanceConfig(lam=float(merged["lam"]), objective=merged["objective"],
                         n_neg=int(merged["n_neg"]),
                         strategy=NegativeStrategy.parse(merged["strategy"]),
                         steps=int(merged["steps"]), psi_target=merged["psi_target"])
    need_cls = cfg.objective in ("classifier", "combined") and cfg.lam > 0
    dataset, denoiser, embedder, bank, classifier = _load_models(merged, need_cls)
    schedule = make_schedule(DEFAULT_T)
    if merged["category"] == "all":
        cat_ids = [c.id for c in dataset.categories]
    else:
        cat_ids = [int(merged["category"])]
    all_samples = []
    for cid in cat_ids:
        samples = generate_informed(
            denoiser, schedule, embedder, bank, cfg, cid, int(merged["n"]),
            merged["seed"], classifier=classifier,
            manifest_path=os.path.join(merged["out"], f"manifest_cat{cid}.json"))
        arr = np.stack([s.image for s in samples]).astype("<f4")
        with open(os.path.join(merged["out"], f"samples_cat{cid}.f32"), "wb") as fh:
            fh.write(arr.tobytes())
        all_samples.extend(samples)
    export_grid(all_samples, os.path.join(merged["out"], "grid.ppm"),
                per_row=int(merged["n"]))
    crc = zlib.crc32(np.stack([s.image for s in all_samples]).astype("<f4").tobytes())
    print(f"wrote {len(all_samples)} samples to {merged['out']} (crc {crc:08x})")
    return 0


def cmd_distill(args):
    merged = _merge(args, {"seed": 0, "out": None, "data": None, "ddpm": None,
                           "embedder": None, "bank": None, "cls": None,
                           "methods": "Unguided,Contrastive", "ipc": "10",
                           "seeds": None, "lam": "1.0", "n_neg": "10",
                           "strategy": "weighted", "steps": 50, "epochs": 60,
                           "jobs": 1, "objective": None, "experiment_id": None})
    _require(merged, "out")
    # sweep axes in a config file carry the CSV column names
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = json.load(fh)
        for key, dest in (("method", "methods"), ("ipc", "ipc"), ("lambda", "lam"),
                          ("n_neg", "n_neg"), ("strategy", "strategy")):
            if key in cfg and getattr(args, dest, None) is None:
                merged[dest] = cfg[key]
        if isinstance(cfg.get("seed"), list) and args.seeds is None:
            merged["seeds"] = cfg["seed"]
    if merged["seeds"] is None:
        merged["seeds"] = ",".join(str(merged["seed"] + i) for i in range(5))
    if merged["objective"]:
        obj_to_method = {"none": "Unguided", "cosine": "Cosine",
                         "contrastive": "Contrastive", "classifier": "Classifier",
                         "combined": "Combined"}
        merged["methods"] = obj_to_method[merged["objective"]]
    _echo_config(merged["out"], "distill", merged)
    methods = _str_list(merged["methods"]) if isinstance(merged["methods"], str) \
        else list(merged["methods"])
    for m in methods:
        if m not in ("RandomReal", "Unguided", "Cosine", "Contrastive", "Classifier",
                     "Combined"):
            raise ConfigError(f"unknown method {m!r}")
    strategies = _str_list(merged["strategy"]) if isinstance(merged["strategy"], str) \
        else list(merged["strategy"])
    for s in strategies:
        NegativeStrategy.parse(s)
    config = ExperimentConfig(
        experiment_id=merged["experiment_id"] or os.path.basename(
            os.path.normpath(merged["out"])),
        methods=methods,
        ipcs=_int_list(merged["ipc"]) if isinstance(merged["ipc"], str) else merged["ipc"],
        seeds=_int_list(merged["seeds"]) if isinstance(merged["seeds"], str)
        else merged["seeds"],
        lambdas=_float_list(merged["lam"]) if isinstance(merged["lam"], str)
        else merged["lam"],
        n_negs=_int_list(merged["n_neg"]) if isinstance(merged["n_neg"], str)
        else merged["n_neg"],
        strategies=strategies,
        steps=int(merged["steps"]),
        epochs=int(merged["epochs"]),
        jobs=int(merged["jobs"]),
    )
    need_cls = any(m in ("Classifier", "Combined") for m in methods)
    dataset, denoiser, embedder, bank, classifier = _load_models(merged, need_cls)
    report = run_experiment(config, merged["out"], dataset, make_schedule(DEFAULT_T),
                            denoiser, embedder, bank, classifier=classifier)
    print(f"{len(report.rows)} rows -> {os.path.join(merged['out'], 'results.csv')}")
    return 0


def cmd_gradcheck(args):
    merged = _merge(args, {"seed": 0, "out": None, "states": 6})
    if merged["out"]:
        _echo_config(merged["out"], "gradcheck", merged)
    report = gradcheck_report(seed=merged["seed"], n_states=merged["states"])
    worst = 0.0
    for name, err in report:
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst <= 1e-3 else 1


_COMMANDS = {
    "make-data": cmd_make_data,
    "train-ddpm": cmd_train_ddpm,
    "train-embed": cmd_train_embed,
    "train-cls": cmd_train_cls,
    "concepts-retrieve": cmd_concepts_retrieve,
    "concepts-validate": cmd_concepts_validate,
    "generate": cmd_generate,
    "distill": cmd_distill,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConceptDiffError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
