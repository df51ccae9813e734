"""Command-line entry point: ``brainmvp <command> [flags]``.

Exit codes: 0 success, 1 usage / configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, autonet, downstream, synthgen, trainer
from .config import ConfigError, RunConfig, RunManifest, load_config
from .distill import export_bank, load_bank, read_export
from .volcore import ModalityRegistry, load_volume, read_manifest

log = logging.getLogger("brainmvp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _prepare_out(out, force: bool) -> Path:
    if out is None:
        raise UsageError("--out is required")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _dataset(cfg: RunConfig, workers: int):
    if cfg.data_root:
        studies, registry, splits = read_manifest(cfg.data_root)
        return studies, registry, splits
    studies, splits = synthgen.gen_dataset(cfg.generator, cfg.n_studies, workers=workers)
    names = cfg.generator.modality_names
    registry = ModalityRegistry(names if len(names) >= 2 else names + ("_unused",))
    return studies, registry, splits


_HANDLERS: list[logging.Handler] = []


def _attach(handler: logging.Handler, level: int) -> None:
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    log.addHandler(handler)
    _HANDLERS.append(handler)


def _manifest(command: str, cfg: RunConfig, out: Path) -> RunManifest:
    man = RunManifest(command, cfg.to_dict(), cfg.seed, __version__)
    man.write(out)
    _attach(logging.FileHandler(out / "run.log"), logging.INFO)
    return man


def _finish(man: RunManifest, out: Path, **outputs) -> None:
    man.outputs.update({k: str(v) for k, v in outputs.items()})
    man.finished = time.time()
    man.write(out)


def load_pretrained(run_dir) -> tuple[autonet.ModelState, "downstream.TemplateBank", autonet.NetConfig]:
    """Model state and frozen template bank from a ``pretrain`` output directory."""
    run_dir = Path(run_dir)
    man = RunManifest.read(run_dir)
    net_cfg = autonet.NetConfig(**man.config["model"])
    state = autonet.load_checkpoint(run_dir / "checkpoint.mvpc", net_cfg)
    names = tuple(dict.fromkeys(m for m, _, _ in read_export(run_dir / "bank")))
    bank = load_bank(run_dir / "bank", ModalityRegistry(names))
    bank.freeze()
    return state, bank, net_cfg


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    gen = cfg.generator if args.seed is None else synthgen.GenConfig(**{**cfg.generator.to_dict(), "seed": args.seed})
    man = _manifest("gen", cfg, out)
    studies, splits = synthgen.gen_dataset(gen, cfg.n_studies, out_dir=out, workers=args.workers)
    _finish(man, out, manifest=out / "manifest.json")
    print(f"wrote {len(studies)} studies to {out} "
          f"(train {len(splits['train'])}, val {len(splits['val'])}, test {len(splits['test'])})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    man = _manifest("pretrain", cfg, out)
    studies, registry, splits = _dataset(cfg, args.workers)
    if splits.get("train"):
        keep = set(splits["train"])
        studies = [s for s in studies if s.study_id in keep]
    state, bank, runlog = trainer.run_pretrain(cfg.pretrain, cfg.model, studies, registry, out_dir=out)
    _finish(man, out, checkpoint=out / "checkpoint.mvpc", bank=out / "bank", runlog=out / "runlog.tsv")
    print(f"pre-trained {len(runlog.records)} steps; checkpoint {state.digest()[:16]}; "
          f"final L_SSL {runlog.records[-1]['l_ssl']:.5f}" if runlog.records else "no steps run")
    return 0


def cmd_export_templates(args) -> int:
    src = Path(args.checkpoint_dir or "")
    if not args.checkpoint_dir:
        raise UsageError("--checkpoint-dir is required")
    if not src.exists():
        raise FileNotFoundError(f"checkpoint directory not found: {src}")
    out = _prepare_out(args.out, args.force)
    n = 0
    for sub in ("snapshots", "bank"):
        if not (src / sub / "manifest.tsv").exists():
            continue
        rows = read_export(src / sub)
        registry = ModalityRegistry(tuple(dict.fromkeys(m for m, _, _ in rows)))
        for step in sorted({s for _, s, _ in rows}):
            export_bank(load_bank(src / sub, registry, step), out, step)
            n += 1
    if n == 0:
        raise FileNotFoundError(f"no template exports under {src}")
    print(f"exported {n} template snapshot(s) to {out}")
    return 0


def _finetune_inputs(cfg: RunConfig, workers: int):
    studies, registry, splits = _dataset(cfg, workers)
    pretrained = bank = None
    net_cfg = cfg.model
    if cfg.pretrained:
        pretrained, bank, net_cfg = load_pretrained(cfg.pretrained)
    return studies, splits, pretrained, bank, net_cfg


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    man = _manifest("finetune", cfg, out)
    studies, splits, pretrained, bank, net_cfg = _finetune_inputs(cfg, args.workers)
    by_id = {s.study_id: s for s in studies}
    train = [by_id[i] for i in splits["train"]]
    test = [by_id[i] for i in splits["test"]]
    ft = cfg.finetune if pretrained is not None else downstream.FinetuneConfig(
        **{**cfg.finetune.to_dict(), "init": "scratch"})
    state, records = downstream.run_finetune(ft, net_cfg, train, pretrained, bank)
    autonet.save_checkpoint(state, out / "checkpoint.mvpc")
    (out / "model_config.json").write_text(json.dumps(state.config.to_dict(), indent=2) + "\n")
    (out / "losses.tsv").write_text(downstream.curves_tsv(records))
    rep = downstream.evaluate(state, test, ft.task)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    (out / "metrics.tsv").write_text(downstream.curves_tsv([rep.row()]))
    _finish(man, out, checkpoint=out / "checkpoint.mvpc", metrics=out / "metrics.json")
    print(rep.to_json())
    return 0


def cmd_eval(args) -> int:
    if not args.dataset:
        raise UsageError("--dataset is required")
    studies, _, splits = read_manifest(args.dataset)
    ids = splits.get("test") or [s.study_id for s in studies]
    by_id = {s.study_id: s for s in studies}
    chosen = [by_id[i] for i in ids]
    if args.predictions:
        pdir = Path(args.predictions)
        preds, tgts = [], []
        for st in chosen:
            p = pdir / f"{st.study_id}.mvpv"
            if not p.exists():
                raise FileNotFoundError(f"prediction missing: {p}")
            preds.append(load_volume(p).data > 0.5)
            tgts.append(st.seg_label.data > 0.5)
        rep = downstream.evaluate_predictions(preds, tgts)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        ck = Path(args.checkpoint)
        cfg_path = ck.parent / "model_config.json"
        if not cfg_path.exists():
            raise FileNotFoundError(f"model config not found next to checkpoint: {cfg_path}")
        net_cfg = autonet.NetConfig(**json.loads(cfg_path.read_text()))
        state = autonet.load_checkpoint(ck, net_cfg)
        rep = downstream.evaluate(state, chosen, args.task)
    text = rep.to_json()
    if args.out:
        out = _prepare_out(args.out, args.force)
        (out / "metrics.json").write_text(text + "\n")
        (out / "metrics.tsv").write_text(downstream.curves_tsv([rep.row()]))
    print(text)
    return 0


def cmd_label_efficiency(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, args.force)
    man = _manifest("label-efficiency", cfg, out)
    studies, splits, pretrained, bank, net_cfg = _finetune_inputs(cfg, args.workers)
    rows = downstream.run_label_efficiency(cfg.finetune, net_cfg, studies, splits, pretrained, bank,
                                           seeds=cfg.finetune_seeds)
    (out / "curves.tsv").write_text(downstream.curves_tsv(rows))
    _finish(man, out, curves=out / "curves.tsv")
    print(downstream.curves_tsv(rows), end="")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "export-templates": cmd_export_templates,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "label-efficiency": cmd_label_efficiency,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--workers", type=int, default=1, help="worker threads for data generation")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="brainmvp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen", "pretrain", "finetune", "label-efficiency"):
        sub.add_parser(name, parents=[common])
    ex = sub.add_parser("export-templates", parents=[common])
    ex.add_argument("--checkpoint-dir", help="pretrain output directory")
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--checkpoint", help="fine-tuned checkpoint (.mvpc)")
    ev.add_argument("--dataset", help="dataset directory written by `gen`")
    ev.add_argument("--task", choices=["segmentation", "classification"], default="segmentation")
    ev.add_argument("--predictions", help="directory of <study_id>.mvpv binary predictions")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as e:
        print(f"brainmvp: error: {e}", file=sys.stderr)
        return 1
    log.setLevel(logging.INFO)
    log.propagate = False
    _attach(logging.StreamHandler(sys.stderr), logging.INFO if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"brainmvp: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("brainmvp: interrupted", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"brainmvp: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    finally:
        while _HANDLERS:
            h = _HANDLERS.pop()
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
