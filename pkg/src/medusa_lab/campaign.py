"""End-to-end campaigns: corpus, encoder zoo, leave-one-out attacks, defenses, metrics."""

import csv
import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import corpus as corp
from . import ragsim
from .defenses import DefenseConfig, apply_defense
from .encoders import EncoderArch, SurrogateSet, fit_aligned_pair, load_pair, save_pair
from .errors import ConfigError, ContractError, LabError, StageError
from .numkit import Rng
from .records import Image
from .vocab import LABELS

log = logging.getLogger(__name__)

EPS_SWEEP = tuple(n / 255 for n in (2, 4, 8, 16, 32))
HEADLINE_EPS = 16 / 255
ABLATIONS = ("no_irm", "no_gen")


def _strict(cls, d, what):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    seed: int
    tag: str = "domain"
    hidden: int = 64
    patch: int = 8
    n_per_class: int = 200
    labels: tuple = None  # None: the task labels (general members: every label)
    epochs: int = 300
    lr: float = 0.01
    temperature: float = 0.1
    min_accuracy: float = 0.9

    def __post_init__(self):
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        if self.tag not in ("domain", "general"):
            raise ConfigError(f"encoder {self.name}: tag must be domain or general")

    def train_labels(self, task):
        if self.labels is not None:
            return self.labels
        return LABELS if self.tag == "general" else tuple(task)


DEFAULT_ZOO = (
    EncoderSpec("d0", 10, hidden=64, patch=8),
    EncoderSpec("d1", 11, hidden=48, patch=8),
    EncoderSpec("d2", 12, hidden=96, patch=4),
    EncoderSpec("d3", 13, hidden=64, patch=4),
    # five-way retrieval is harder; its floor is set lower than the task members'
    EncoderSpec("gen", 14, tag="general", hidden=96, patch=8, n_per_class=200, min_accuracy=0.85),
)


@dataclass(frozen=True)
class CampaignConfig:
    labels: tuple = ("normal", "pneumonia")
    kb_per_class: int = 100
    n_attack: int = 100
    target_pool_size: int = 20
    n_eval_per_class: int = 50
    corpus: dict = field(default_factory=dict)
    encoders: tuple = DEFAULT_ZOO
    victims: tuple = ("d0", "d1", "d2")
    test_surrogates: tuple = ("d3",)
    methods: tuple = ("medusa", "ens", "svre")
    eps_list: tuple = EPS_SWEEP
    headline_eps: float = HEADLINE_EPS
    attack: dict = field(default_factory=dict)
    ablations: tuple = ABLATIONS
    defenses: tuple = ({"kind": "bit_reduce", "bits": 4}, {"kind": "resize_pad"})
    k: int = 5
    k_list: tuple = (1, 2, 3, 4, 5)
    write_traces: str = "headline"  # headline | all | none
    output_dir: str = "out"
    seed: int = 0

    def __post_init__(self):
        for name in ("labels", "victims", "test_surrogates", "methods", "eps_list",
                     "ablations", "k_list"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        encs = tuple(e if isinstance(e, EncoderSpec) else _strict(EncoderSpec, e, "encoder")
                     for e in self.encoders)
        object.__setattr__(self, "encoders", encs)
        defs = tuple(d if isinstance(d, DefenseConfig) else DefenseConfig.from_dict(d)
                     for d in self.defenses)
        object.__setattr__(self, "defenses", defs)
        self.validate()

    def validate(self):
        if len(self.labels) != 2 or self.labels[0] != "normal":
            raise ConfigError("labels must be (normal, <disease>)")
        names = [e.name for e in self.encoders]
        if len(set(names)) != len(names):
            raise ConfigError("encoder names must be unique")
        for v in self.victims + self.test_surrogates:
            if v not in names:
                raise ConfigError(f"unknown encoder {v!r}")
        for m in self.methods:
            if m not in atk.METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}")
        if self.k < 1 or any(k < 1 for k in self.k_list):
            raise ConfigError("k must be >= 1")
        if self.write_traces not in ("headline", "all", "none"):
            raise ConfigError("write_traces must be headline, all or none")
        if self.kb_per_class < 1 or self.n_attack < 1 or self.target_pool_size < 1:
            raise ConfigError("corpus sizes must be positive")
        try:
            self.attack_config()
            self.corpus_spec()
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def attack_config(self, eps=None):
        cfg = atk.AttackConfig.from_dict(self.attack)
        return cfg if eps is None else replace(cfg, eps=eps)

    def corpus_spec(self):
        return corp.SyntheticCorpusSpec.from_dict({**self.corpus, "seed": self.seed})

    @property
    def k_max(self):
        return max((self.k,) + self.k_list)

    def to_dict(self):
        d = asdict(self)
        d["encoders"] = [asdict(e) for e in self.encoders]
        d["defenses"] = [x.to_dict() for x in self.defenses]
        return d

    @classmethod
    def from_dict(cls, d):
        return _strict(cls, d, "campaign")

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# stages


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except (LabError, ValueError, OSError) as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@dataclass
class World:
    bundle: object
    eval_set: list
    kb: object
    zoo: dict
    targets: tuple


@_stage("gen-data")
def make_data(cfg):
    spec = cfg.corpus_spec()
    root = Rng(cfg.seed)
    bundle = corp.gen_corpus(spec, cfg.labels, cfg.kb_per_class, cfg.n_attack,
                             cfg.target_pool_size, rng=root.child("corpus"))
    pairs = corp.gen_pairs(spec, {lab: cfg.n_eval_per_class for lab in cfg.labels},
                           root.child("eval"), "eval")
    kb = ragsim.KnowledgeBase(bundle.kb, cfg.labels)
    kb.check_balance(cfg.kb_per_class)
    return bundle, [p[0] for p in pairs], kb


def _zoo_key(cfg, e):
    blob = json.dumps([asdict(e), cfg.corpus_spec().to_dict(), list(cfg.labels)], sort_keys=True,
                      default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@_stage("train-encoders")
def make_zoo(cfg, cache_dir=None):
    """Train (or load cached) encoder pairs; cache files are keyed by spec hash."""
    spec = cfg.corpus_spec()
    zoo = {}
    for e in cfg.encoders:
        path = Path(cache_dir) / f"{e.name}-{_zoo_key(cfg, e)}.json" if cache_dir else None
        if path is not None and path.exists():
            zoo[e.name] = load_pair(path)
            continue
        labels = e.train_labels(cfg.labels)
        pairs = corp.gen_pairs(spec, {lab: e.n_per_class for lab in labels},
                               Rng(cfg.seed).child("train", e.name), e.name)
        arch = EncoderArch(height=spec.height, width=spec.width, patch=e.patch, hidden=e.hidden)
        pair, info = fit_aligned_pair(pairs, arch, e.seed, e.epochs, e.lr, tag=e.tag,
                                      name=e.name, temperature=e.temperature,
                                      min_accuracy=e.min_accuracy)
        log.info("encoder %s: held-out accuracy %.3f", e.name, info.heldout_accuracy)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_pair(pair, path)
        zoo[e.name] = pair
    return zoo


def pick_targets(cfg, pool):
    k = cfg.attack_config().k_targets
    if k > len(pool):
        raise ConfigError(f"k_targets={k} exceeds the target pool ({len(pool)})")
    idx = Rng(cfg.seed).child("targets").choice(len(pool), size=k, replace=False)
    return tuple(pool[i] for i in sorted(idx))


def build_world(cfg, cache_dir=None):
    bundle, eval_set, kb = make_data(cfg)
    zoo = make_zoo(cfg, cache_dir)
    return World(bundle, eval_set, kb, zoo, pick_targets(cfg, bundle.target_pool))


def surrogate_set(cfg, zoo, victim, drop_general=False, split=True):
    members = [zoo[e.name] for e in cfg.encoders
               if e.name != victim and not (drop_general and e.tag == "general")]
    sset = SurrogateSet.split(members, cfg.test_surrogates if split else ())
    sset.assert_excludes(zoo[victim])
    return sset


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluated:
    label: str
    eps: float
    retrievals: list
    verdicts: dict


def evaluate_images(images, index, victim, kb, target, k_max, k):
    res = ragsim.retrieve_images(index, victim, images, k_max)
    verdicts = {}
    for r in res:
        top = ragsim.RetrievalResult(r.query_id, r.hits[:k])
        verdicts[r.query_id] = ragsim.judge(ragsim.generate_stub(top, kb), target, kb.labels)
    return res, verdicts


def _record(method, eps, seed, target, res, verdicts, kb, cfg, keep, victim):
    sel = [r for r in res if r.query_id in keep]
    counts = {k: ragsim.avg_target_count(sel, kb, target, k) for k in cfg.k_list + (cfg.k,)}
    return ragsim.MetricsRecord(method, eps, seed, target,
                                {i: v for i, v in verdicts.items() if i in keep}, counts, cfg.k,
                                n_total=len(verdicts), victim=victim)


@dataclass
class VictimResult:
    victim: str
    records: list  # clean-filtered denominators
    records_all: list  # every attack image
    summary: dict
    adversarial: dict = field(default_factory=dict)  # (label, eps) -> (B, H, W)


@dataclass
class CampaignResult:
    config: CampaignConfig
    victims: dict

    def records(self, filtered=True):
        out = []
        for v in self.victims.values():
            out.extend(v.records if filtered else v.records_all)
        return out

    def find(self, victim, method, eps, filtered=True):
        recs = self.victims[victim].records if filtered else self.victims[victim].records_all
        for r in recs:
            if r.method == method and abs(r.eps - eps) < 1e-12:
                return r
        raise KeyError((victim, method, eps))


def _eps_tag(eps):
    return format(eps * 255, "g")


def _adv_images(images, traces):
    return [Image(im.id, im.label, tr.adversarial) for im, tr in zip(images, traces)]


def _save_adv(directory, images, stack):
    corp.write_images(directory, images, stem="manifest")
    np.save(Path(directory) / "adversarial.npy", stack)


def run_victim(cfg, world, victim_name, out_dir=None):
    """Every method / eps / ablation / defense against one held-out victim."""
    victim = world.zoo[victim_name]
    normal, target = cfg.labels
    images = world.bundle.images
    specs = [atk.TargetSpec(r, world.targets) for r in world.bundle.reports]
    index = ragsim.build_index(world.kb, victim)
    out = Path(out_dir) if out_dir else None
    retrieval_log = []

    clean_res, clean_verdicts = evaluate_images(images, index, victim, world.kb, target, cfg.k_max, cfg.k)
    keep = {r.query_id for r in clean_res
            if ragsim.generate_stub(ragsim.RetrievalResult(r.query_id, r.hits[:cfg.k]), world.kb) == normal}
    all_ids = {im.id for im in images}
    summary = {
        "victim": victim_name,
        "n_total": len(images),
        "n_kept": len(keep),
        "clean_false_target_rate": ragsim.asr(clean_verdicts.values()),
        "clean_avg_target_count": ragsim.avg_target_count(clean_res, world.kb, target, cfg.k),
        "system_accuracy_clean": ragsim.system_accuracy(world.eval_set, victim, world.kb, cfg.k, index),
        "targets": [r.id for r in world.targets],
    }
    if not keep:
        raise StageError("evaluate", ContractError(f"victim {victim_name} classifies no attack image as {normal}"))
    result = VictimResult(victim_name, [], [], summary)

    def score(label, eps, adv):
        res, verdicts = evaluate_images(adv, index, victim, world.kb, target, cfg.k_max, cfg.k)
        result.records.append(_record(label, eps, cfg.seed, target, res, verdicts, world.kb, cfg, keep, victim_name))
        result.records_all.append(_record(label, eps, cfg.seed, target, res, verdicts, world.kb, cfg, all_ids, victim_name))
        for r in res:
            retrieval_log.append({"method": label, "eps": eps, **r.to_dict(),
                                  "kept": r.query_id in keep,
                                  "labels": [world.kb.label_of(i) for i in r.ids]})

    def attack(label, method, eps, sset, acfg):
        traces = _run_stage("attack", atk.run_attack, method, images, specs, sset, acfg)
        for tr in traces:
            if victim_name in tr.surrogates:
                raise StageError("attack", ContractError("victim leaked into the surrogate set"))
        adv = _adv_images(images, traces)
        stack = np.stack([t.adversarial for t in traces])
        result.adversarial[(label, eps)] = stack
        if out is not None:
            d = out / "adv" / f"{label}_eps{_eps_tag(eps)}"
            _save_adv(d, adv, stack)
            if cfg.write_traces == "all" or (cfg.write_traces == "headline" and abs(eps - cfg.headline_eps) < 1e-12):
                tdir = out / "traces" / f"{label}_eps{_eps_tag(eps)}"
                tdir.mkdir(parents=True, exist_ok=True)
                for tr in traces:
                    tr.to_jsonl(tdir / f"{tr.image_id}.jsonl")
        score(label, eps, adv)
        return adv

    headline = {}
    for eps in cfg.eps_list:
        for method in cfg.methods:
            sset = surrogate_set(cfg, world.zoo, victim_name, split=(method == "medusa"))
            adv = attack(method, method, eps, sset, cfg.attack_config(eps))
            if abs(eps - cfg.headline_eps) < 1e-12:
                headline[method] = adv
    if "medusa" in cfg.methods:
        for ab in cfg.ablations:
            acfg = cfg.attack_config(cfg.headline_eps)
            if ab == "no_irm":
                sset = surrogate_set(cfg, world.zoo, victim_name)
                acfg = replace(acfg, irm_enabled=False)
            else:
                sset = surrogate_set(cfg, world.zoo, victim_name, drop_general=True)
            attack(f"medusa-{ab}", "medusa", cfg.headline_eps, sset, acfg)
    for dcfg in cfg.defenses:
        if not headline:
            log.warning("headline eps %s not in the sweep; defenses skipped", cfg.headline_eps)
            break
        root = Rng(cfg.seed).child("defense", dcfg.label, dcfg.seed)
        for method, adv in headline.items():
            defended = [apply_defense(im, dcfg, root.child(im.id)) for im in adv]
            score(f"{method}+{dcfg.label}", cfg.headline_eps, defended)
        clean_def = [apply_defense(im, dcfg, root.child(im.id)) for im in images]
        score(f"clean+{dcfg.label}", cfg.headline_eps, clean_def)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ragsim.metrics_csv(result.records, out / "metrics.csv")
        ragsim.metrics_csv(result.records_all, out / "metrics_all.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        with open(out / "retrievals.jsonl", "w") as fh:
            for row in retrieval_log:
                fh.write(json.dumps(row) + "\n")
    return result


def _run_stage(stage, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (LabError, ValueError) as exc:
        raise StageError(stage, exc) from exc


def run_campaign(cfg, out_dir=None, cache_dir=None, world=None):
    """Run every victim rotation; artifacts land in ``out_dir/<victim>/``.

    Outputs are staged in a scratch directory and moved into place only on
    success, so a failed stage leaves nothing behind.
    """
    out_dir = Path(out_dir) if out_dir else None
    world = world or build_world(cfg, cache_dir)
    victims = {}
    for name in cfg.victims:
        if out_dir is None:
            victims[name] = run_victim(cfg, world, name)
            continue
        final = out_dir / name
        scratch = out_dir / f".partial-{name}"
        shutil.rmtree(scratch, ignore_errors=True)
        try:
            victims[name] = run_victim(cfg, world, name, scratch)
        except BaseException:
            shutil.rmtree(scratch, ignore_errors=True)
            raise
        shutil.rmtree(final, ignore_errors=True)
        scratch.rename(final)
    result = CampaignResult(cfg, victims)
    if out_dir is not None:
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
        emit_plot_data(result.records(), out_dir / "plots")
    return result


# ---------------------------------------------------------------------------
# plot data


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_plot_data(records, out_dir, methods=None, sweep_method="medusa"):
    """Per (victim, eps): {k, method, avg_target_count}; per victim: the
    eps sweep {eps, k, avg_target_count} of ``sweep_method``."""
    if not records:
        raise ContractError("no records to plot")
    out_dir = Path(out_dir)
    written = []
    victims = sorted({r.victim for r in records})
    for v in victims:
        mine = [r for r in records if r.victim == v
                and (methods is None or r.method in methods)]
        if not mine:
            log.warning("no records for victim %r and methods %s; file omitted", v, methods)
            continue
        for eps in sorted({r.eps for r in mine}):
            rows = [(k, r.method, ragsim._fmt(r.avg_target_count[k]))
                    for r in mine if r.eps == eps for k in sorted(r.avg_target_count)]
            path = out_dir / f"k_{v or 'all'}_eps{_eps_tag(eps)}.csv"
            _write_csv(path, ("k", "method", "avg_target_count"), rows)
            written.append(path)
        sweep = [r for r in mine if r.method == sweep_method]
        if not sweep:
            log.warning("no %s records for victim %r; eps-sweep file omitted", sweep_method, v)
            continue
        rows = [(ragsim._fmt(r.eps), k, ragsim._fmt(r.avg_target_count[k]))
                for r in sorted(sweep, key=lambda r: r.eps) for k in sorted(r.avg_target_count)]
        path = out_dir / f"eps_{v or 'all'}.csv"
        _write_csv(path, ("eps", "k", "avg_target_count"), rows)
        written.append(path)
    return written


def records_from_retrievals(path, kb, target, k_list, victim="", filtered=True):
    """Recount avg_target_count per (method, eps) from a retrievals.jsonl log."""
    groups = {}
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        row = json.loads(line)
        if filtered and not row["kept"]:
            continue
        groups.setdefault((row["method"], row["eps"]), []).append(
            ragsim.RetrievalResult(row["query"], tuple((h[0], h[1]) for h in row["hits"])))
    out = []
    for (method, eps), res in groups.items():
        counts = {k: ragsim.avg_target_count(res, kb, target, k) for k in k_list}
        out.append(ragsim.MetricsRecord(method, eps, 0, target, {r.query_id: False for r in res},
                                        counts, max(k_list), len(res), victim=victim))
    return out
