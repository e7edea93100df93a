"""Command-line entry point: ``peftlab <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (including a
missing or invalid ``--config``).

CSV outputs (column order is fixed):

  metrics.csv       epoch,bleu,rouge1,rougeL,meteor
  train_loss.csv    epoch,loss,lr
  eval_metrics.csv  split,n,bleu,rouge1,rougeL,meteor
  gen_metrics.csv   epoch,fidelity,agreement,diversity,fbd
  gen_loss.csv      epoch,loss,probe
  gen_report.csv    n,fidelity,agreement,diversity,fbd
  experiments.csv   experiment,bleu,rouge1,rougeL,meteor
  fbd.csv           experiment,fbd
"""

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, checkpoint
from .config import RunConfig, load_config
from .data import (
    build_prompts,
    build_tokenizer,
    corpus_checksum,
    generate_corpus,
    generic_images,
    load_corpus,
    load_png_dir,
    save_corpus,
    save_png,
    split_80_20,
)
from .diffusion import (
    DiffusionConfig,
    DiffusionModel,
    DiffusionTrainConfig,
    p_sample_loop,
    pretrain_base,
    train_diffusion,
)
from .errors import ConfigError, InputError, ParseError
from .lora import LoraConfig
from .metrics import FeatureExtractor, MetricReport, gen_report, text_report
from .optim import AdamWConfig
from .vqa import EncodedSet, TrainConfig, VqaConfig, VqaModel, build_optimizer, evaluate, train_vqa, warmup_vision

log = logging.getLogger("peftlab")


class UsageError(Exception):
    pass


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def write_csv(path, header, rows, append=False):
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_manifest(out_dir, command, cfg: RunConfig, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.data.seed,
        "config": cfg.as_dict(),
        **(extra or {}),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# -- builders -------------------------------------------------------------------


def vqa_config(cfg: RunConfig, vocab_size):
    v = cfg.vqa
    return VqaConfig(
        d_model=v.d_model, n_heads=v.n_heads, encoder_layers=v.encoder_layers, decoder_layers=v.decoder_layers,
        image_size=cfg.data.image_size, patch_size=v.patch_size, vocab_size=vocab_size,
        max_answer_len=v.max_answer_len, freeze_vision=v.freeze_vision, vision_warmup_steps=v.vision_warmup_steps,
    )  # fmt: skip


def vqa_train_config(cfg: RunConfig):
    v = cfg.vqa
    optim = AdamWConfig(
        learning_rate=v.learning_rate, beta1=v.beta1, beta2=v.beta2, eps=v.eps,
        weight_decay=v.weight_decay, grad_clip=v.grad_clip or None,
    )  # fmt: skip
    return TrainConfig(
        epochs=v.epochs, batch_size=v.batch_size, accumulation_steps=v.accumulation_steps, optim=optim,
        warmup_steps=v.warmup_steps, min_lr=v.min_lr, shuffle_seed=cfg.data.seed, eval_batch_size=cfg.eval.batch_size,
    )  # fmt: skip


def diffusion_config(cfg: RunConfig):
    d = cfg.diffusion
    return DiffusionConfig(
        timesteps=d.timesteps, beta_start=d.beta_start, beta_end=d.beta_end, latent_size=d.latent_size,
        cond_dim=d.cond_dim, hidden=d.hidden, n_heads=d.n_heads, n_blocks=d.n_blocks,
    )  # fmt: skip


def lora_config(cfg: RunConfig):
    d = cfg.diffusion
    targets = tuple(t.strip() for t in d.lora_targets.split(",") if t.strip())
    return LoraConfig(rank=d.lora_rank, alpha=d.lora_alpha, target_projections=targets)


def diffusion_train_config(cfg: RunConfig):
    d = cfg.diffusion
    return DiffusionTrainConfig(
        epochs=d.epochs, batch_size=d.batch_size, accumulation_steps=d.accumulation_steps,
        optim=AdamWConfig(learning_rate=d.learning_rate, weight_decay=d.weight_decay),
        warmup_steps=d.warmup_steps, min_lr=d.min_lr, shuffle_seed=cfg.data.seed, repeats=d.repeats,
        eval_samples=d.eval_samples, eval_seed=d.sample_seed,
    )  # fmt: skip


def extractor(cfg: RunConfig):
    return FeatureExtractor(seed=cfg.eval.feature_seed, dim=cfg.eval.feature_dim, prompt_dim=cfg.diffusion.cond_dim)


def build_diffusion_model(cfg: RunConfig, with_lora=True):
    model = DiffusionModel(diffusion_config(cfg), seed=cfg.diffusion.model_seed, image_size=cfg.data.image_size)
    if with_lora:
        model.add_lora(lora_config(cfg), seed=cfg.diffusion.model_seed)
    return model


# -- commands -------------------------------------------------------------------


def cmd_print_config(args, cfg):
    sys.stdout.write(cfg.to_text())


def cmd_gen_data(args, cfg):
    d = cfg.data
    images, examples = generate_corpus(d.n_images, d.seed, d.image_size)
    tok = build_tokenizer(examples)
    split = split_80_20(examples, d.seed)
    save_corpus(args.out_dir, images, examples, tok, split, d.seed, d.image_size)
    with open(os.path.join(args.out_dir, "manifest.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    meta.update({"command": "gen-data", "version": __version__, "config": cfg.as_dict()})
    with open(os.path.join(args.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote {len(images)} images / {len(examples)} QA pairs to {args.out_dir}")
    print(f"checksum {corpus_checksum(args.out_dir)}")


def _require(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _load_vqa(cfg, corpus):
    model = VqaModel(vqa_config(cfg, len(corpus.tokenizer)), seed=cfg.vqa.model_seed)
    return model


def cmd_train_vqa(args, cfg):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    model = _load_vqa(cfg, corpus)
    if cfg.vqa.vision_warmup_steps:
        train_ids = corpus.split.train_ids
        counts = [next(r["polyp_count"] for r in corpus.manifest["images"] if r["id"] == i) for i in train_ids]
        warmup_vision(model, np.stack([corpus.images[i] for i in train_ids]), counts,
                      cfg.vqa.vision_warmup_steps, seed=cfg.vqa.model_seed)
    frozen_before = {n: p.data.tobytes() for n, p in model.vision.named_parameters()}
    train = EncodedSet(corpus.split.train, corpus.images, corpus.tokenizer)
    val = EncodedSet(corpus.split.validation, corpus.images, corpus.tokenizer) if corpus.split.validation else None
    tcfg = vqa_train_config(cfg)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    loss_path = os.path.join(args.out_dir, "train_loss.csv")
    write_csv(metrics_path, ["epoch", "bleu", "rouge1", "rougeL", "meteor"], [])
    write_csv(loss_path, ["epoch", "loss", "lr"], [])

    def on_epoch(res, opt):
        r = res.report or MetricReport(0.0, 0.0, 0.0, 0.0)
        write_csv(metrics_path, None, [[res.epoch, r.bleu, r.rouge1, r.rougeL, r.meteor]], append=True)
        write_csv(loss_path, None, [[res.epoch, res.loss, res.lr]], append=True)
        log.info("epoch %d loss %.4f rougeL %.4f", res.epoch, res.loss, r.rougeL)
        checkpoint.save_model(os.path.join(args.out_dir, "vqa"), model, opt, {
            "epoch": res.epoch, "seed": cfg.vqa.model_seed, "vqa_config": vars(model.cfg),
        })  # fmt: skip

    train_vqa(model, train, val, tcfg, on_epoch=on_epoch, optimizer=build_optimizer(model, len(train), tcfg))
    unchanged = all(p.data.tobytes() == frozen_before[n] for n, p in model.vision.named_parameters())
    write_manifest(args.out_dir, "train-vqa", cfg, {
        "corpus": os.path.abspath(args.corpus), "vision_frozen": cfg.vqa.freeze_vision,
        "vision_unchanged": unchanged, "trainable_parameters": sum(p.size for p in model.trainable_parameters()),
    })  # fmt: skip
    print(f"trained {cfg.vqa.epochs} epochs; checkpoint in {args.out_dir}")


def _predictions_report(path):
    cands, refs, ids = [], [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                ids.append(row["id"])
                cands.append(row["candidate"])
                refs.append(row["reference"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}: bad prediction record ({exc})", line=n) from None
    return text_report(cands, refs), len(cands)


def cmd_eval_vqa(args, cfg):
    os.makedirs(args.out_dir, exist_ok=True)
    header = ["split", "n", "bleu", "rouge1", "rougeL", "meteor"]
    if args.predictions:
        report, n = _predictions_report(_require(args.predictions, "predictions"))
        write_csv(os.path.join(args.out_dir, "eval_metrics.csv"), header,
                  [["predictions", n, report.bleu, report.rouge1, report.rougeL, report.meteor]])
        print(json.dumps(report.as_dict()))
        return
    corpus = load_corpus(_require(args.corpus, "corpus"))
    model = _load_vqa(cfg, corpus)
    meta = checkpoint.load_model(os.path.join(_require(args.checkpoint, "checkpoint"), "vqa"), model)
    examples = {"train": corpus.split.train, "validation": corpus.split.validation, "all": corpus.examples}[args.split]
    data = EncodedSet(examples, corpus.images, corpus.tokenizer)
    report, preds = evaluate(model, data, cfg.eval.batch_size)
    write_csv(os.path.join(args.out_dir, "eval_metrics.csv"), header,
              [[args.split, len(data), report.bleu, report.rouge1, report.rougeL, report.meteor]])
    with open(os.path.join(args.out_dir, "predictions.jsonl"), "w", encoding="utf-8") as fh:
        for i, (e, p) in enumerate(zip(data.examples, preds)):
            rec = {"id": f"{e.image_id}:{i}", "candidate": " ".join(p), "reference": " ".join(e.answer)}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_manifest(args.out_dir, "eval-vqa", cfg, {"checkpoint_epoch": meta.get("epoch"), "split": args.split})
    print(json.dumps(report.as_dict()))


def cmd_train_diffusion(args, cfg):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    d = cfg.diffusion
    if d.eval_samples < 2:
        raise ConfigError("[diffusion] eval_samples must be >= 2 to report per-epoch generation metrics")
    model = build_diffusion_model(cfg, with_lora=False)
    generic = generic_images(d.pretrain_images, d.model_seed, cfg.data.image_size)
    if d.pretrain_steps:
        probe = pretrain_base(model, generic, ["generic image"] * len(generic), d.pretrain_steps,
                              seed=d.model_seed)
        log.info("base pretrained, probe loss %.4f", probe)
    model.add_lora(lora_config(cfg), seed=d.model_seed)
    base_before = {n: p.data.tobytes() for n, p in model.net.named_parameters() if p.frozen}
    ids = corpus.split.train_ids
    meta_images = {r["id"]: r for r in corpus.manifest["images"]}
    images = np.stack([corpus.images[i] for i in ids])
    prompts = build_prompts([_ImageInfo(meta_images[i]) for i in ids])

    metrics_path = os.path.join(args.out_dir, "gen_metrics.csv")
    loss_path = os.path.join(args.out_dir, "gen_loss.csv")
    write_csv(metrics_path, ["epoch", "fidelity", "agreement", "diversity", "fbd"], [])
    write_csv(loss_path, ["epoch", "loss", "probe"], [])

    def on_epoch(rec):
        r = rec.report
        write_csv(metrics_path, None, [[rec.epoch, r.fidelity, r.agreement, r.diversity, r.fbd]], append=True)
        write_csv(loss_path, None, [[rec.epoch, rec.loss, rec.probe]], append=True)
        log.info("epoch %d loss %.4f fbd %.4f", rec.epoch, rec.loss, r.fbd)

    train_diffusion(model, images, prompts, lora_config(cfg), diffusion_train_config(cfg), extractor(cfg), on_epoch)
    checkpoint.save_model(os.path.join(args.out_dir, "diffusion"), model.net, meta={"seed": d.model_seed})
    checkpoint.save_adapters(os.path.join(args.out_dir, "adapters"), model.adapters,
                             meta={"rank": d.lora_rank, "alpha": d.lora_alpha})
    with open(os.path.join(args.out_dir, "prompts.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(prompts) + "\n")
    unchanged = all(p.data.tobytes() == base_before[n] for n, p in model.net.named_parameters() if p.frozen)
    write_manifest(args.out_dir, "train-diffusion", cfg, {
        "corpus": os.path.abspath(args.corpus), "base_unchanged": unchanged,
        "training_loss": "epsilon-prediction MSE; FBD is evaluation only",
        "trainable_parameters": sum(p.size for p in model.net.trainable_parameters()),
    })  # fmt: skip
    print(f"trained LoRA rank {d.lora_rank} for {d.epochs} epochs; adapters in {args.out_dir}")


class _ImageInfo:
    def __init__(self, rec):
        self.polyp_count = rec["polyp_count"]
        self.polyp_locations = rec["polyp_locations"]


def _read_prompts(path):
    with open(path, encoding="utf-8") as fh:
        prompts = [line.strip() for line in fh if line.strip()]
    if not prompts:
        raise InputError(f"no prompts in {path}")
    return prompts


def cmd_generate(args, cfg):
    ckpt = _require(args.checkpoint, "checkpoint")
    model = build_diffusion_model(cfg)
    checkpoint.load_model(os.path.join(ckpt, "diffusion"), model.net)
    if args.prompt:
        prompts = list(args.prompt)
    else:
        prompts = _read_prompts(args.prompts or os.path.join(ckpt, "prompts.txt"))
    n = args.n or len(prompts)
    use = [prompts[i % len(prompts)] for i in range(n)]
    seed = cfg.diffusion.sample_seed if args.seed is None else args.seed
    images = p_sample_loop(model, use, seed)
    img_dir = os.path.join(args.out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    for i, img in enumerate(images):
        save_png(os.path.join(img_dir, f"gen{i:05d}.png"), img)
    with open(os.path.join(args.out_dir, "prompts.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(use) + "\n")
    write_manifest(args.out_dir, "generate", cfg, {"sample_seed": seed, "n": n})
    print(f"wrote {n} images to {img_dir}")


def cmd_eval_gen(args, cfg):
    _, real = load_png_dir(_require(args.real, "real"))
    _, gen = load_png_dir(_require(args.generated, "generated"))
    prompts = _read_prompts(_require(args.prompts, "prompts"))
    if len(prompts) != len(gen):
        raise InputError(f"{len(gen)} generated images but {len(prompts)} prompts")
    report = gen_report(gen, real, prompts, extractor(cfg))
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(os.path.join(args.out_dir, "gen_report.csv"), ["n", "fidelity", "agreement", "diversity", "fbd"],
              [[len(gen), report.fidelity, report.agreement, report.diversity, report.fbd]])
    write_manifest(args.out_dir, "eval-gen", cfg, {"real": args.real, "generated": args.generated})
    print(json.dumps(report.as_dict()))


def cmd_report(args, cfg):
    if not args.runs:
        raise UsageError("report needs at least one --runs directory")
    vqa_rows, fbd_rows, summary = [], [], {}
    for run in args.runs:
        name = os.path.basename(os.path.normpath(run))
        entry = {}
        metrics = os.path.join(run, "metrics.csv")
        if os.path.exists(metrics):
            rows = read_csv(metrics)
            if rows:
                last = rows[-1]
                vals = [float(last[k]) for k in ("bleu", "rouge1", "rougeL", "meteor")]
                vqa_rows.append([name, *vals])
                entry["vqa"] = dict(zip(("bleu", "rouge1", "rougeL", "meteor"), vals))
        gen = os.path.join(run, "gen_metrics.csv")
        if os.path.exists(gen):
            rows = read_csv(gen)
            if rows:
                fbd_rows.append([name, float(rows[-1]["fbd"])])
                entry["generation"] = {k: float(rows[-1][k]) for k in ("fidelity", "agreement", "diversity", "fbd")}
        if not entry:
            raise InputError(f"{run} has neither metrics.csv nor gen_metrics.csv")
        summary[name] = entry
    os.makedirs(args.out_dir, exist_ok=True)
    write_csv(os.path.join(args.out_dir, "experiments.csv"), ["experiment", "bleu", "rouge1", "rougeL", "meteor"],
              vqa_rows)
    write_csv(os.path.join(args.out_dir, "fbd.csv"), ["experiment", "fbd"], fbd_rows)
    with open(os.path.join(args.out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"report for {len(summary)} run(s) in {args.out_dir}")


COMMANDS = {
    "print-config": (cmd_print_config, "print the effective configuration (defaults if no --config)"),
    "gen-data": (cmd_gen_data, "generate the synthetic corpus"),
    "train-vqa": (cmd_train_vqa, "train the VQA model; writes metrics.csv and a checkpoint"),
    "eval-vqa": (cmd_eval_vqa, "score a VQA checkpoint or a predictions JSONL file"),
    "train-diffusion": (cmd_train_diffusion, "LoRA-train the diffusion generator; writes gen_metrics.csv"),
    "generate": (cmd_generate, "sample PNG images from a trained diffusion checkpoint"),
    "eval-gen": (cmd_eval_gen, "fidelity/agreement/diversity/FBD between two PNG directories"),
    "report": (cmd_report, "merge run CSVs into experiment tables"),
}
NEEDS_CONFIG = {"gen-data", "train-vqa", "eval-vqa", "train-diffusion", "generate", "eval-gen"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="peftlab", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("--version", action="version", version=f"peftlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--out-dir", default=".", help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="override [data] seed (sample seed for generate)")
        p.add_argument("--epochs", type=int, help="override the epoch count of the training command")
        if name in ("train-vqa", "eval-vqa", "train-diffusion"):
            p.add_argument("--corpus", help="corpus directory written by gen-data")
        if name in ("eval-vqa", "generate"):
            p.add_argument("--checkpoint", help="run directory holding the trained model")
        if name == "eval-vqa":
            p.add_argument("--split", choices=("validation", "train", "all"), default="validation")
            p.add_argument("--predictions", help="JSONL of {id, candidate, reference} to score instead")
        if name == "generate":
            p.add_argument("--prompt", action="append", help="prompt text (repeatable)")
            p.add_argument("--prompts", help="file with one prompt per line")
            p.add_argument("--n", type=int, help="number of images (prompts are cycled)")
        if name == "eval-gen":
            p.add_argument("--real", help="directory of reference PNGs")
            p.add_argument("--generated", help="directory of generated PNGs")
            p.add_argument("--prompts", help="prompts file, one line per generated image")
        if name == "report":
            p.add_argument("--runs", nargs="+", help="run directories to merge")
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("PEFTLAB_LOG", "WARNING").upper(), format="%(asctime)s %(name)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    handler, _ = COMMANDS[args.command]
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.command in NEEDS_CONFIG:
            parser.print_usage(sys.stderr)
            print(f"peftlab {args.command}: error: --config is required", file=sys.stderr)
            return 2
        else:
            cfg = RunConfig()
        if args.seed is not None and args.command != "generate":
            cfg.data.seed = args.seed
        if args.epochs is not None:
            if args.command == "train-vqa":
                cfg.vqa.epochs = args.epochs
            elif args.command == "train-diffusion":
                cfg.diffusion.epochs = args.epochs
        if args.command != "print-config":
            os.makedirs(args.out_dir, exist_ok=True)
        start = time.time()
        handler(args, cfg)
        log.info("%s finished in %.1fs", args.command, time.time() - start)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"peftlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InputError, ParseError, OSError, ValueError, ArithmeticError) as exc:
        print(f"peftlab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
