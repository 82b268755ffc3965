"""Command-line entry point: ``medusa-lab <command> [options]``.

Every command works under one output root (``--root``, else the
``MEDUSA_LAB_OUT`` environment variable, else ``./medusa-out``). Stages are
deterministic given the configuration, so a later stage regenerates any cheap
input it needs and reuses cached encoders from ``<root>/encoders``.

Exit status: 0 ok, 1 configuration or stage error, 2 verification failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attack as atk
from . import campaign as camp
from . import corpus as corp
from . import ragsim, verify
from .defenses import KINDS, DefenseConfig, apply_defense
from .errors import ConfigError, LabError
from .numkit import Rng
from .records import Image

ENV_ROOT = "MEDUSA_LAB_OUT"
DEFAULT_ROOT = "medusa-out"
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2

log = logging.getLogger("medusa_lab")

# CampaignConfig fields exposed as flags; everything else goes through --set.
_SCALARS = ("seed", "kb_per_class", "n_attack", "target_pool_size", "n_eval_per_class", "k",
            "write_traces")
_LISTS = ("labels", "victims", "test_surrogates", "methods", "ablations")


def parse_eps(text):
    """'16/255', '0.0627' or '16' (read as n/255 when > 1) -> float."""
    try:
        val = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad epsilon {text!r}") from None
    return val / 255 if val > 1 else val


def _parse_set(items):
    """``key=json`` pairs; dotted keys address the nested attack/corpus dicts."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    return out


def _merge(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def build_config(args):
    d = camp.CampaignConfig.load(args.config).to_dict() if args.config else camp.CampaignConfig().to_dict()
    for name in _SCALARS + _LISTS:
        val = getattr(args, name, None)
        if val is not None:
            d[name] = val
    if args.eps_list:
        d["eps_list"] = args.eps_list
    if args.headline_eps is not None:
        d["headline_eps"] = args.headline_eps
    _merge(d, _parse_set(args.set))
    d["output_dir"] = str(args.root)
    return camp.CampaignConfig.from_dict(d)


def _root(args):
    return Path(args.root or os.environ.get(ENV_ROOT) or DEFAULT_ROOT)


# ---------------------------------------------------------------------------
# file helpers


def _adv_dir(root, victim, label, eps):
    return root / "attacks" / victim / f"{label}_eps{camp._eps_tag(eps)}"


def load_image_set(directory):
    """Images from a stage directory: float arrays when present, else the PGMs."""
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"{directory}: no manifest.json")
    items = json.loads(manifest.read_text())
    raw = directory / "adversarial.npy"
    if raw.exists():
        stack = np.load(raw)
        if len(stack) != len(items):
            raise ConfigError(f"{directory}: manifest and array disagree")
        return [Image(m["id"], m["label"], px) for m, px in zip(items, stack)]
    return corp.read_images(manifest)


def save_image_set(directory, images):
    camp._save_adv(directory, images, np.stack([im.pixels for im in images]))


def _print_json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args):
    bundle, eval_set, kb = camp.make_data(cfg)
    data = args.root / "data"
    corp.write_images(data / "attack", bundle.images, stem="manifest")
    corp.write_reports(data / "attack_reports.jsonl", bundle.reports)
    corp.write_images(data / "eval", eval_set, stem="manifest")
    kb.dump_jsonl(data / "kb.jsonl")
    corp.write_reports(data / "target_pool.jsonl", bundle.target_pool)
    targets = camp.pick_targets(cfg, bundle.target_pool)
    (data / "targets.json").write_text(json.dumps([t.id for t in targets]) + "\n")
    _print_json({"dir": str(data), "attack_images": len(bundle.images), "kb": kb.counts,
                 "eval_images": len(eval_set), "targets": [t.id for t in targets]})


def cmd_train_encoders(cfg, args):
    zoo = camp.make_zoo(cfg, args.root / "encoders")
    _print_json({"dir": str(args.root / "encoders"),
                 "encoders": {n: p.tag for n, p in zoo.items()}})


def cmd_build_index(cfg, args):
    world = camp.build_world(cfg, args.root / "encoders")
    out = {}
    for v in args.victim or cfg.victims:
        idx = ragsim.build_index(world.kb, world.zoo[v])
        path = args.root / "index" / f"{v}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, ids=np.array(idx.ids), matrix=idx.matrix)
        out[v] = str(path)
    _print_json(out)


def cmd_attack(cfg, args):
    world = camp.build_world(cfg, args.root / "encoders")
    eps = args.eps if args.eps is not None else cfg.headline_eps
    acfg = cfg.attack_config(eps)
    label = args.method
    if args.ablation == "no_irm":
        acfg, label = replace(acfg, irm_enabled=False), f"{args.method}-no_irm"
    elif args.ablation == "no_gen":
        label = f"{args.method}-no_gen"
    sset = camp.surrogate_set(cfg, world.zoo, args.victim, drop_general=args.ablation == "no_gen",
                              split=args.method == "medusa")
    specs = [atk.TargetSpec(r, world.targets) for r in world.bundle.reports]
    images = world.bundle.images[: args.limit] if args.limit else world.bundle.images
    traces = atk.run_attack(args.method, images, specs[: len(images)], sset, acfg)
    out = _adv_dir(args.root, args.victim, label, eps)
    save_image_set(out, camp._adv_images(images, traces))
    if args.traces:
        for tr in traces:
            (out / "traces").mkdir(exist_ok=True)
            tr.to_jsonl(out / "traces" / f"{tr.image_id}.jsonl")
    _print_json({"dir": str(out), "images": len(traces), "surrogates": sset.names,
                 "feasible": all(t.feasible(acfg.eps, acfg.p) for t in traces)})


def cmd_defend(cfg, args):
    dcfg = DefenseConfig(kind=args.kind, bits=args.bits, resize_min=args.resize_min,
                         resize_max=args.resize_max, final=args.final, seed=args.defense_seed)
    src = Path(args.input)
    images = load_image_set(src)
    root = Rng(cfg.seed).child("defense", dcfg.label, dcfg.seed)
    defended = [apply_defense(im, dcfg, root.child(im.id)) for im in images]
    out = Path(args.output) if args.output else src.with_name(f"{src.name}+{dcfg.label}")
    save_image_set(out, defended)
    _print_json({"dir": str(out), "images": len(defended), "defense": dcfg.to_dict()})


def cmd_evaluate(cfg, args):
    world = camp.build_world(cfg, args.root / "encoders")
    victim = world.zoo[args.victim]
    normal, target = cfg.labels
    index = ragsim.build_index(world.kb, victim)
    images = load_image_set(args.input) if args.input else world.bundle.images
    clean, _ = camp.evaluate_images(world.bundle.images, index, victim, world.kb, target,
                                    cfg.k_max, cfg.k)
    keep = {r.query_id for r in clean
            if ragsim.generate_stub(ragsim.RetrievalResult(r.query_id, r.hits[: cfg.k]), world.kb) == normal}
    if args.all_images:
        keep = {im.id for im in images}
    res, verdicts = camp.evaluate_images(images, index, victim, world.kb, target, cfg.k_max, cfg.k)
    label = args.label or (Path(args.input).name if args.input else "clean")
    eps = args.eps if args.eps is not None else 0.0
    rec = camp._record(label, eps, cfg.seed, target, res, verdicts, world.kb, cfg,
                       keep & {im.id for im in images}, args.victim)
    text = ragsim.metrics_csv([rec])
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    sys.stdout.write(text)


def cmd_plot_data(cfg, args):
    """Recount plot series from a retrievals.jsonl log (or every victim under a campaign dir)."""
    kb = ragsim.KnowledgeBase(camp.make_data(cfg)[0].kb, cfg.labels)
    src = Path(args.input) if args.input else args.root / "campaign"
    logs = [src] if src.is_file() else sorted(src.glob("*/retrievals.jsonl"))
    if not logs:
        raise ConfigError(f"no retrievals.jsonl under {src}")
    records = []
    for path in logs:
        records += camp.records_from_retrievals(path, kb, cfg.labels[1], cfg.k_list,
                                                victim=path.parent.name)
    methods = tuple(args.plot_methods) if args.plot_methods else None
    written = camp.emit_plot_data(records, args.output or args.root / "plots", methods=methods)
    _print_json([str(p) for p in written])


def cmd_verify(cfg, args):
    report = verify.run_verify(tuple(args.suite or verify.SUITES), seed=args.verify_seed,
                               n_instances=args.instances)
    print(report.format())
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_run(cfg, args):
    out = args.root / "campaign"
    res = camp.run_campaign(cfg, out, args.root / "encoders")
    summary = {v: {"n_kept": r.summary["n_kept"],
                   "asr": {x.method + "@" + camp._eps_tag(x.eps): x.asr for x in r.records}}
               for v, r in res.victims.items()}
    _print_json({"dir": str(out), "victims": summary})


# ---------------------------------------------------------------------------
# parser


def _config_flags(p):
    g = p.add_argument_group("campaign configuration")
    g.add_argument("--config", help="JSON campaign config (unknown keys are an error)")
    g.add_argument("--root", type=Path, default=None,
                   help=f"output root (default: ${ENV_ROOT} or ./{DEFAULT_ROOT})")
    types = {f.name: f.type for f in fields(camp.CampaignConfig)}
    for name in _SCALARS:
        kind = {"int": int, "str": str}.get(getattr(types[name], "__name__", types[name]), str)
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    for name in _LISTS:
        g.add_argument("--" + name.replace("_", "-"), dest=name, nargs="+", default=None)
    g.add_argument("--eps-list", nargs="+", type=parse_eps, default=None)
    g.add_argument("--headline-eps", type=parse_eps, default=None)
    g.add_argument("--set", action="append", metavar="KEY=JSON",
                   help="override any config key, e.g. attack.t_out=20 or corpus.noise=0.05")
    g.add_argument("-v", "--verbose", action="store_true")


def make_parser():
    p = argparse.ArgumentParser(prog="medusa-lab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        _config_flags(sp)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "write the synthetic corpus, kb and target pool")
    add("train-encoders", cmd_train_encoders, "train (or load cached) encoder pairs")
    sp = add("build-index", cmd_build_index, "encode the kb with each victim")
    sp.add_argument("--victim", nargs="+")
    sp = add("attack", cmd_attack, "craft adversarial images against one held-out victim")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--method", choices=sorted(atk.METHODS), default="medusa")
    sp.add_argument("--eps", type=parse_eps, default=None)
    sp.add_argument("--ablation", choices=camp.ABLATIONS, default=None)
    sp.add_argument("--limit", type=int, default=None, help="attack only the first N images")
    sp.add_argument("--traces", action="store_true", help="write per-image step traces")
    sp = add("defend", cmd_defend, "apply an input-transformation defense to an image set")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    sp.add_argument("--kind", choices=[k for k in KINDS if k != "none"], required=True)
    sp.add_argument("--bits", type=int, default=4)
    sp.add_argument("--resize-min", type=int, default=None)
    sp.add_argument("--resize-max", type=int, default=None)
    sp.add_argument("--final", type=int, default=None)
    sp.add_argument("--defense-seed", type=int, default=0)
    sp = add("evaluate", cmd_evaluate, "retrieve, generate and judge an image set")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--input", help="image-set directory (default: the clean attack images)")
    sp.add_argument("--label")
    sp.add_argument("--eps", type=parse_eps, default=None)
    sp.add_argument("--all-images", action="store_true",
                    help="do not drop images the victim misjudges when clean")
    sp.add_argument("--output")
    sp = add("plot-data", cmd_plot_data, "recount plot CSVs from retrieval logs")
    sp.add_argument("--input", help="a retrievals.jsonl or a campaign directory")
    sp.add_argument("--output")
    sp.add_argument("--plot-methods", nargs="+", help="restrict the per-k files to these methods")
    sp = add("verify", cmd_verify, "run the oracle suites")
    sp.add_argument("--suite", nargs="+", choices=verify.SUITES)
    sp.add_argument("--verify-seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=100)
    add("run", cmd_run, "full leave-one-out campaign")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.root = _root(args)
    try:
        cfg = build_config(args)
        code = args.fn(cfg, args)
    except (LabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
