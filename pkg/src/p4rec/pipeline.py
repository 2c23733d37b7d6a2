"""Config-driven pipeline: data -> CF -> reward models -> BC warm start -> RL fine-tuning -> evaluation.

Every stage reads its inputs from files under the run directory and writes
its outputs there, so each one can be re-run on its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import time
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cf, corpus as cg, evaluation as ev, lm, rewards as rw, rl
from . import numerics as nx
from .corpus import AttributeSpace, CorpusConfig
from .rewards import KINDS, RewardConfig, RewardWeights
from .rl import RlConfig

log = logging.getLogger("p4rec.pipeline")

STAGES = ("gen-data", "train-cf", "train-rewards", "train-lm", "rl-finetune", "eval")
EXTRA_STAGES = ("ablate",)


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class MissingArtifactError(RuntimeError):
    """An upstream artifact is absent (exit code 3)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class LmSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    adapter_hidden: int = 64
    pretrain_epochs: int = 3
    stage1_epochs: int = 3
    stage2_epochs: int = 10
    lr: float = 2e-3
    batch_size: int = 32
    bc_variants: list[str] = field(default_factory=lambda: list(cg.PITCH_VARIANTS))


@dataclass
class EvalSection:
    decode: str = "greedy"
    temperature: float = 1.0
    batch_size: int = 100
    ablation_steps: int = 0  # 0: use rl.steps
    eta_grid: list[list[float]] = field(default_factory=list)
    beta_grid: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    kl_samples: int = 2


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    cf: cf.MfConfig = field(default_factory=cf.MfConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    lm: LmSection = field(default_factory=LmSection)
    rl: RlConfig = field(default_factory=RlConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        try:
            self.corpus.validate()
            self.cf.validate()
            self.rewards.validate()
            self.rl.validate()
            lm_cfg = self.lm_config(vocab_size=8)
            lm_cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.decode not in ("greedy", "temperature"):
            raise ConfigError("eval.decode must be 'greedy' or 'temperature'")
        bad = set(self.lm.bc_variants) - set(cg.VARIANTS)
        if bad or not self.lm.bc_variants:
            raise ConfigError(f"lm.bc_variants must be a non-empty subset of {cg.VARIANTS}")
        if any(b < 0 for b in self.eval.beta_grid) or self.eval.kl_samples < 1:
            raise ConfigError("eval.beta_grid must be non-negative and eval.kl_samples >= 1")
        for e in self.eval.eta_grid:
            try:
                RewardWeights.parse(e)
            except ValueError as exc:
                raise ConfigError(f"eval.eta_grid: {exc}") from exc

    def lm_config(self, vocab_size: int) -> lm.LmConfig:
        s = self.lm
        return lm.LmConfig(vocab_size=vocab_size, d_model=s.d_model, n_layers=s.n_layers, n_heads=s.n_heads,
                           d_ff=s.d_ff, d_cf=self.cf.d_cf, adapter_hidden=s.adapter_hidden,
                           max_item_tokens=self.corpus.max_item_tokens, horizon=self.corpus.response_horizon,
                           seed=self.stage_seed(4))

    def stage_seed(self, *keys: int) -> int:
        return nx.derive_seed(self.seed, *keys) % (2 ** 31)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (arg,) = typing.get_args(tp) or (typing.Any,)
        return [_coerce(arg, v, f"{path}[{k}]") for k, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _build(PipelineConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)


def profile(name: str) -> PipelineConfig:
    """Named presets: ``desk`` (defaults, the acceptance scale) and ``tiny`` (smoke tests)."""
    if name == "desk":
        return PipelineConfig()
    if name == "tiny":
        return PipelineConfig(
            out_dir="runs/tiny",
            corpus=CorpusConfig(n_items=60, n_users=60, ratings_per_user=20, n_contexts=120, n_prel_contexts=120,
                                n_test=20, app_pair_budget=600),
            cf=cf.MfConfig(d_cf=8, epochs=10),
            rewards=RewardConfig(d_embed=16, d_hidden=16, prel_hidden=16, epochs=2, prel_epochs=2, encoder_epochs=3),
            lm=LmSection(d_model=16, n_layers=1, n_heads=2, d_ff=32, adapter_hidden=16, pretrain_epochs=1,
                         stage1_epochs=1, stage2_epochs=1),
            rl=RlConfig(steps=3, batch_size=8),
            eval=EvalSection(batch_size=20, ablation_steps=1),
        )
    raise ConfigError(f"unknown profile {name!r} (choose desk or tiny)")


# ---------------------------------------------------------------------------
# run directory bookkeeping
# ---------------------------------------------------------------------------

def _source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"p4rec-{__version__}"


class Run:
    """Paths, manifest and lock of one output directory."""

    def __init__(self, cfg: PipelineConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(out_dir or cfg.out_dir)
        self.manifest_path = self.root / "manifest.json"
        self._locked = False

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def stage_dir(self, stage: str) -> Path:
        d = self.root / {"gen-data": "data", "train-cf": "cf", "train-rewards": "rewards", "train-lm": "lm",
                         "rl-finetune": "rl", "eval": "eval", "ablate": "ablate"}[stage]
        d.mkdir(parents=True, exist_ok=True)
        return d

    # -- lock ----------------------------------------------------------------
    def __enter__(self) -> "Run":
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RuntimeError(f"output directory {self.root} is locked by another pipeline ({lock})") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._locked = True
        return self

    def __exit__(self, *exc) -> None:
        if self._locked:
            (self.root / ".lock").unlink(missing_ok=True)
            self._locked = False

    # -- manifest --------------------------------------------------------------
    def read_manifest(self) -> dict | None:
        if not self.manifest_path.exists():
            return None
        try:
            m = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupted manifest {self.manifest_path}: {exc}") from exc
        if not isinstance(m, dict) or "config_hash" not in m or not isinstance(m.get("stages"), dict):
            raise ValueError(f"corrupted manifest {self.manifest_path}")
        return m

    def record(self, stage: str, artifacts: list[Path], wall: float) -> None:
        m = self.read_manifest() or {}
        m["config_hash"] = self.cfg.fingerprint()
        m["source_revision"] = _source_revision()
        m.setdefault("stages", {})[stage] = {
            "artifacts": sorted(str(p.relative_to(self.root)) for p in artifacts),
            "wall_time": round(wall, 3), "config_hash": self.cfg.fingerprint()}
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(m, indent=1, sort_keys=True))
        tmp.replace(self.manifest_path)
        self.path("config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True))

    def require(self, *parts: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact: {p}")
        return p


def _emit(event: str, **kw) -> None:
    log.info(json.dumps({"event": event, **kw}, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    items: list[cg.ItemDoc]
    users: list[cg.UserProfile]
    train_pairs: list[tuple[int, int]]
    prel_pairs: list[tuple[int, int]]
    test_pairs: list[tuple[int, int]]
    responses: list[cg.ResponseRecord]
    prel_responses: list[cg.ResponseRecord]


def _load_corpus(run: Run) -> Corpus:
    d = run.root / "data"
    run.require("data", "contexts.json")
    ctx = json.loads((d / "contexts.json").read_text())
    pairs = lambda key: [tuple(p) for p in ctx[key]]
    return Corpus(cg.read_jsonl(run.require("data", "items.jsonl"), cg.ItemDoc),
                  cg.read_jsonl(run.require("data", "users.jsonl"), cg.UserProfile),
                  pairs("train"), pairs("prel"), pairs("test"),
                  cg.read_jsonl(run.require("data", "responses.jsonl"), cg.ResponseRecord),
                  cg.read_jsonl(run.require("data", "prel_responses.jsonl"), cg.ResponseRecord))


def _load_tables(run: Run) -> cf.EmbeddingTables:
    return cf.EmbeddingTables.load(run.require("cf", "cf.p4t"))


def _context_batch(corp: Corpus, tables: cf.EmbeddingTables, vocab, pairs, max_item_tokens: int) -> lm.ContextBatch:
    ctxs = [lm.Context(np.asarray(vocab.encode(corp.items[i].text)), tables.item_matrix[i], tables.user_matrix[u])
            for u, i in pairs]
    return lm.ContextBatch.from_contexts(ctxs, max_item_tokens)


def _testset(corp: Corpus, tables, vocab, cfg: PipelineConfig) -> ev.TestSet:
    ts = ev.TestSet(list(corp.test_pairs), _context_batch(corp, tables, vocab, corp.test_pairs,
                                                          cfg.corpus.max_item_tokens),
                    [corp.items[i].text for _, i in corp.test_pairs])
    ts.check_disjoint(corp.train_pairs + corp.prel_pairs)
    return ts


def _space(cfg: PipelineConfig) -> AttributeSpace:
    return AttributeSpace.default(cfg.corpus.n_attributes)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=ev._json_default) + "\n")
    return path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(run: Run) -> list[Path]:
    cfg = run.cfg
    ccfg = dataclasses.replace(cfg.corpus, seed=cfg.stage_seed(1, cfg.corpus.seed))
    space = _space(cfg)
    items, users, ratings = cg.gen_catalog(ccfg, space)
    train = cg.sample_contexts(ccfg, ccfg.n_contexts, cfg.stage_seed(1, 1))
    test = cg.sample_contexts(ccfg, ccfg.n_test, cfg.stage_seed(1, 2), exclude=set(train))
    prel = cg.sample_contexts(ccfg, ccfg.n_prel_contexts, cfg.stage_seed(1, 3), exclude=set(train) | set(test))
    # test pairs stay out of every training set, including the ratings the CF model sees
    held = set(test)
    keep = np.array([(int(u), int(i)) not in held for u, i in zip(ratings.users, ratings.items)], dtype=bool)
    ratings = ratings.subset(np.flatnonzero(keep))
    responses = cg.gen_responses(items, users, train, ccfg, space)
    # a separate seed stream so relevance contexts do not reuse the BC response draws
    prel_responses = cg.gen_responses(items, users, prel, dataclasses.replace(ccfg, seed=ccfg.seed + 1), space)
    ds = cg.gen_reward_datasets(responses, items, users, ccfg, space=space)
    d = run.stage_dir("gen-data")
    out = []
    for name, recs in (("items", items), ("users", users), ("responses", responses),
                       ("prel_responses", prel_responses), ("pairs_app", ds.app), ("pairs_per", ds.per),
                       ("nli", ds.nli)):
        out.append(d / f"{name}.jsonl")
        cg.write_jsonl(out[-1], recs)
    with open(d / "ratings.csv", "w") as fh:
        fh.write("user,item,rating\n")
        for u, i, r in zip(ratings.users, ratings.items, ratings.ratings):
            fh.write(f"{int(u)},{int(i)},{float(r)!r}\n")
    out.append(d / "ratings.csv")
    out.append(_write_json(d / "contexts.json", {"train": train, "prel": prel, "test": test,
                                                 "n_users": ccfg.n_users, "n_items": ccfg.n_items}))
    out.append(_write_json(d / "summary.json", {"n_ratings": len(ratings), "n_responses": len(responses),
                                                "n_app": len(ds.app), "skipped_app_ties": ds.skipped_app_ties,
                                                "n_per": len(ds.per), "n_nli": len(ds.nli)}))
    return out


def _load_ratings(run: Run) -> cf.RatingsDataset:
    path = run.require("data", "ratings.csv")
    ctx = json.loads(run.require("data", "contexts.json").read_text())
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return cf.RatingsDataset(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2],
                             ctx["n_users"], ctx["n_items"])


def stage_train_cf(run: Run) -> list[Path]:
    cfg = run.cfg
    data = _load_ratings(run)
    mcfg = dataclasses.replace(cfg.cf, seed=cfg.stage_seed(2, cfg.cf.seed))
    train, hold = cf.split_ratings(data, mcfg.holdout_fraction, mcfg.seed)
    tables = cf.train_mf(train, mcfg)
    d = run.stage_dir("train-cf")
    tables.save(d / "cf.p4t")
    metrics = {"train_rmse": tables.rmse(train), "holdout_rmse": tables.rmse(hold) if len(hold) else None,
               "epochs": len(tables.loss_curve) - 1}
    return [d / "cf.p4t", d / "cf.json", _write_json(d / "metrics.json", metrics)]


def _heldout_contexts(pairs, fraction: float, seed: int) -> set[tuple[int, int]]:
    rng = nx.make_rng(seed)
    n = int(round(fraction * len(pairs)))
    return {tuple(pairs[k]) for k in rng.permutation(len(pairs))[:n]}


def stage_train_rewards(run: Run) -> list[Path]:
    cfg = run.cfg
    corp = _load_corpus(run)
    tables = _load_tables(run)
    space = _space(cfg)
    vocab = space.vocabulary()
    rcfg = dataclasses.replace(cfg.rewards, seed=cfg.stage_seed(3, cfg.rewards.seed))
    U, I = tables.user_matrix, tables.item_matrix
    d = run.stage_dir("train-rewards")
    metrics: dict = {}

    # relevance labels from the frozen semantic encoder
    all_resp = corp.responses + corp.prel_responses
    texts = sorted({x.text for x in corp.items} | {p for u in corp.users for p in u.prefs} | {x.text for x in all_resp})
    targets = rw.encoder_targets(texts, space.mentions, len(space), rcfg.encoder_constant)
    encoder, enc_curve = rw.pretrain_encoder(vocab, texts, targets, rcfg)
    E = rw.CachedEncoder(encoder)
    prel_records = cg.gen_prel_records(
        all_resp, corp.items, corp.users,
        lambda y, i, p: rw.relevance_label(E, y, i, p, rcfg.k, rcfg.relevance_tie_tol))
    cg.write_jsonl(d / "prel.jsonl", prel_records)
    metrics["encoder_loss"] = [enc_curve[0], enc_curve[-1]]

    held = _heldout_contexts(corp.train_pairs, rcfg.holdout_fraction, rcfg.seed)
    held_prel = held | _heldout_contexts(corp.prel_pairs, rcfg.holdout_fraction, rcfg.seed + 1)
    rng = nx.make_rng(rcfg.seed + 2)
    held_items = set(rng.permutation(len(corp.items))[:max(1, int(round(rcfg.holdout_fraction * len(corp.items))))]
                     .tolist())
    by_id = {x.response_id: x for x in corp.responses}

    app_pairs = cg.read_jsonl(run.require("data", "pairs_app.jsonl"), cg.AppPair)
    ctx_of = lambda p: (by_id[p.winner_id].user_id, p.item_id)
    app_tr = [p for p in app_pairs if ctx_of(p) not in held]
    app_ho = [p for p in app_pairs if ctx_of(p) in held]
    app, curve = rw.train_pairwise_rm("app", rw.PairData([p.winner for p in app_tr], [p.loser for p in app_tr]), vocab,
                                      rcfg, normalization_texts=[x.text for x in corp.responses])
    app.heldout = {"pairwise_accuracy": rw.pairwise_accuracy(app.score([p.winner for p in app_ho]),
                                                             app.score([p.loser for p in app_ho])),
                   "n": len(app_ho), "final_loss": curve[-1]}

    per_pairs = cg.read_jsonl(run.require("data", "pairs_per.jsonl"), cg.PerPair)
    per_tr = [p for p in per_pairs if (p.user_id, p.item_id) not in held]
    per_ho = [p for p in per_pairs if (p.user_id, p.item_id) in held]
    vecs = lambda ps: (I[[p.item_id for p in ps]], U[[p.user_id for p in ps]])
    per, curve = rw.train_pairwise_rm("per", rw.PairData([p.winner for p in per_tr], [p.loser for p in per_tr],
                                                         *vecs(per_tr)), vocab, rcfg)
    sw, sl = per.score([p.winner for p in per_ho], *vecs(per_ho)), per.score([p.loser for p in per_ho], *vecs(per_ho))
    per.heldout = {"pairwise_accuracy": rw.pairwise_accuracy(sw, sl), "n": len(per_ho), "final_loss": curve[-1]}

    nli_recs = cg.read_jsonl(run.require("data", "nli.jsonl"), cg.NliRecord)
    n_tr = [x for x in nli_recs if x.item_id not in held_items]
    n_ho = [x for x in nli_recs if x.item_id in held_items]
    nli, curve = rw.train_nli([x.hypothesis for x in n_tr], [corp.items[x.item_id].text for x in n_tr],
                              [x.label for x in n_tr], vocab, rcfg)
    probs = nli.sentence_probs([x.hypothesis for x in n_ho], [corp.items[x.item_id].text for x in n_ho])
    nli.heldout = {"accuracy": float(np.mean((probs > 0.5) == np.array([x.label for x in n_ho]))),
                   "n": len(n_ho), "final_loss": curve[-1]}

    p_tr = [x for x in prel_records if (x.user_id, x.item_id) not in held_prel]
    p_ho = [x for x in prel_records if (x.user_id, x.item_id) in held_prel]
    prel, curve = rw.train_prel([x.text for x in p_tr], [corp.items[x.item_id].text for x in p_tr],
                                U[[x.user_id for x in p_tr]], [x.s for x in p_tr], vocab, rcfg)
    pred = prel.score([x.text for x in p_ho], [corp.items[x.item_id].text for x in p_ho], U[[x.user_id for x in p_ho]])
    s_ho = np.array([x.s for x in p_ho])
    prel.heldout = {"rmse": float(np.sqrt(np.mean((pred - s_ho) ** 2))), "label_std": float(s_ho.std()),
                    "n": len(p_ho), "final_loss": curve[-1]}

    bundle = rw.RewardBundle(vocab, nli, app, per, prel, RewardWeights.parse(cfg.rl.eta), rcfg, encoder)
    path = rw.save_bundle(bundle, d)
    metrics.update({k: s.heldout for k, s in bundle.scorers().items()})
    return [path, d / "prel.jsonl", _write_json(d / "metrics.json", metrics)] + [d / f"{k}.p4t" for k in KINDS]


def _load_bundle(run: Run) -> rw.RewardBundle:
    run.require("rewards", "bundle.json")
    return rw.load_bundle(run.root / "rewards")


def _cf_scale(tables: cf.EmbeddingTables) -> float:
    v = np.concatenate([tables.user_matrix.ravel(), tables.item_matrix.ravel()])
    s = float(np.sqrt(np.mean(v ** 2)))
    return s if s > 0 else 1.0


def _bc_data(corp: Corpus, tables, vocab, cfg: PipelineConfig, variants) -> lm.BcData:
    recs = [x for x in corp.responses if x.variant in variants]
    return lm.BcData(_context_batch(corp, tables, vocab, [(x.user_id, x.item_id) for x in recs],
                                    cfg.corpus.max_item_tokens),
                     [list(vocab.encode(x.text)) + [lm.EOS_ID] for x in recs])


def stage_train_lm(run: Run) -> list[Path]:
    cfg = run.cfg
    corp = _load_corpus(run)
    tables = _load_tables(run)
    vocab = _space(cfg).vocabulary()
    model = lm.PolicyModel(cfg.lm_config(len(vocab)))
    model.cf_scale = _cf_scale(tables)
    s = cfg.lm
    tcfg = lm.TrainConfig(epochs=s.pretrain_epochs, lr=s.lr, batch_size=s.batch_size, seed=cfg.stage_seed(4, 1))
    pre_curve = lm.pretrain_text(model, _bc_data(corp, tables, vocab, cfg, cg.VARIANTS), tcfg) \
        if s.pretrain_epochs > 0 else []
    ws = lm.warm_start(model, _bc_data(corp, tables, vocab, cfg, s.bc_variants), s.stage1_epochs, s.stage2_epochs,
                       dataclasses.replace(tcfg, seed=cfg.stage_seed(4, 2)))
    d = run.stage_dir("train-lm")
    model.save(d / "anchor.p4t", vocab)
    ts = _testset(corp, tables, vocab, cfg)
    g = lm.sample_responses(model, ts.contexts)
    g0 = lm.sample_responses(model, ts.contexts.with_user(np.zeros(cfg.cf.d_cf)))
    metrics = {"pretrain_curve": pre_curve, "stage1_curve": ws.stage1, "stage2_curve": ws.stage2,
               "transformer_checksum_before": ws.transformer_checksum_before,
               "transformer_checksum_after_stage1": ws.transformer_checksum_after_stage1,
               "transformer_checksum_after_stage2": ws.transformer_checksum_after_stage2,
               "user_ablation_change_rate": float(np.mean([a.tokens != b.tokens for a, b in zip(g, g0)])),
               "n_parameters": model.num_parameters()}
    return [d / "anchor.p4t", d / "anchor.json", _write_json(d / "metrics.json", metrics)]


def _load_anchor(run: Run, vocab) -> lm.PolicyModel:
    return lm.PolicyModel.load(run.require("lm", "anchor.p4t"), vocab)


def _environment(run: Run, corp: Corpus, tables, bundle, weights) -> rl.LmEnvironment:
    cfg = run.cfg
    batch = _context_batch(corp, tables, bundle.vocab, corp.train_pairs, cfg.corpus.max_item_tokens)
    return rl.LmEnvironment(bundle, batch, [corp.items[i].text for _, i in corp.train_pairs], weights,
                            cfg.corpus.response_horizon)


def finetune_from_anchor(run: Run, weights, steps: int | None = None, log_path: Path | None = None,
                         rl_cfg: RlConfig | None = None, checkpoint_dir: Path | None = None) -> lm.PolicyModel:
    cfg = run.cfg
    bundle = _load_bundle(run)
    corp = _load_corpus(run)
    tables = _load_tables(run)
    anchor = _load_anchor(run, bundle.vocab)
    policy = anchor.copy()
    rcfg = dataclasses.replace(rl_cfg or cfg.rl, seed=cfg.stage_seed(5, (rl_cfg or cfg.rl).seed))
    if steps is not None:
        rcfg = dataclasses.replace(rcfg, steps=steps)
    rcfg.eta = list(RewardWeights.parse(weights).as_array())
    env = _environment(run, corp, tables, bundle, weights)
    rl.finetune(policy, anchor, env, rcfg, log_path, checkpoint_dir)
    return policy


def stage_rl_finetune(run: Run) -> list[Path]:
    cfg = run.cfg
    _load_bundle(run)
    run.require("lm", "anchor.p4t")
    d = run.stage_dir("rl-finetune")
    policy = finetune_from_anchor(run, cfg.rl.eta, log_path=d / "log.jsonl", checkpoint_dir=d)
    policy.save(d / "policy.p4t", rw.load_bundle(run.root / "rewards").vocab)
    return [d / "policy.p4t", d / "policy.json", d / "log.jsonl"]


def _score(policy, bundle, ts, cfg: PipelineConfig) -> ev.Decoded:
    return ev.model_based_eval(policy, bundle, ts, cfg.eval.decode, cfg.eval.temperature, cfg.stage_seed(6),
                               cfg.eval.batch_size)


def stage_eval(run: Run) -> list[Path]:
    cfg = run.cfg
    bundle = _load_bundle(run)
    corp = _load_corpus(run)
    tables = _load_tables(run)
    anchor = _load_anchor(run, bundle.vocab)
    policy = lm.PolicyModel.load(run.require("rl", "policy.p4t"), bundle.vocab)
    ts = _testset(corp, tables, bundle.vocab, cfg)
    base = _score(anchor, bundle, ts, cfg)
    cand = _score(policy, bundle, ts, cfg)
    fp = cfg.fingerprint()
    reports = [ev.build_report("anchor", base.scores, fingerprint=fp, seed=cfg.seed),
               ev.build_report("rlaif", cand.scores, base.scores, "anchor", fp, cfg.seed)]
    d = run.stage_dir("eval")
    paths = ev.emit_report(reports, d, meta={"eta": list(cfg.rl.eta), "beta": cfg.rl.beta, "algo": cfg.rl.algo,
                                             "decode": cfg.eval.decode, "n_test": len(ts)})
    samples = [{"user": u, "item": i, "anchor": a, "rlaif": c}
               for (u, i), a, c in zip(ts.pairs, base.texts, cand.texts)]
    with open(d / "samples.jsonl", "w") as fh:
        for rec in samples:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return list(paths.values()) + [d / "samples.jsonl"]


def stage_ablate(run: Run) -> list[Path]:
    cfg = run.cfg
    bundle = _load_bundle(run)
    corp = _load_corpus(run)
    tables = _load_tables(run)
    anchor = _load_anchor(run, bundle.vocab)
    ts = _testset(corp, tables, bundle.vocab, cfg)
    base = _score(anchor, bundle, ts, cfg).scores
    steps = cfg.eval.ablation_steps or cfg.rl.steps
    d = run.stage_dir("ablate")

    def train(w: RewardWeights, name: str):
        safe = name.replace(",", "_")
        pol = finetune_from_anchor(run, w.as_array().tolist(), steps, d / f"log_{safe}.jsonl")
        pol.save(d / f"policy_{safe}.p4t", bundle.vocab)
        return pol

    evaluate = lambda pol: _score(pol, bundle, ts, cfg).scores
    fp = cfg.fingerprint()
    res = ev.ablation_grid("single", train, evaluate, steps, baseline_scores=base, fingerprint=fp, seed=cfg.seed)
    reports = list(res.reports)
    if cfg.eval.eta_grid:
        eta = ev.ablation_grid("eta", train, evaluate, steps, cfg.eval.eta_grid, base, fp, cfg.seed)
        reports += eta.reports
    meta = {"steps": steps}
    extra = []
    if cfg.eval.beta_grid:
        extra.append(_beta_sweep(run, anchor, bundle, corp, tables, steps, d))
        meta["kl_beta"] = json.loads(extra[-1].read_text())
    paths = ev.emit_report(reports, d, ablation=res, meta=meta)
    return list(paths.values()) + extra + sorted(d.glob("policy_*.p4t")) + sorted(d.glob("log_*.jsonl"))


def _beta_sweep(run: Run, anchor, bundle, corp: Corpus, tables, steps: int, d: Path) -> Path:
    """Fine-tune once per KL weight and estimate the sequence KL to the anchor on training contexts."""
    cfg = run.cfg
    env = _environment(run, corp, tables, bundle, cfg.rl.eta)
    ids = np.arange(min(200, env.n_contexts))
    rows = []
    for beta in cfg.eval.beta_grid:
        pol = finetune_from_anchor(run, cfg.rl.eta, steps, d / f"log_beta_{beta:g}.jsonl",
                                   rl_cfg=dataclasses.replace(cfg.rl, beta=beta))
        mean, se = rl.estimate_kl(pol, anchor, env, ids, cfg.eval.kl_samples, cfg.stage_seed(7))
        rows.append({"beta": beta, "kl": mean, "kl_se": se})
    kls = [r["kl"] for _, r in sorted((r["beta"], r) for r in rows)]
    doc = {"steps": steps, "n_contexts": len(ids), "samples_per_context": cfg.eval.kl_samples, "runs": rows,
           "non_increasing": all(b <= a for a, b in zip(kls, kls[1:]))}
    return _write_json(d / "kl_beta.json", doc)


STAGE_FUNCS = {"gen-data": stage_gen_data, "train-cf": stage_train_cf, "train-rewards": stage_train_rewards,
               "train-lm": stage_train_lm, "rl-finetune": stage_rl_finetune, "eval": stage_eval,
               "ablate": stage_ablate}

UPSTREAM = {"gen-data": [], "train-cf": [("data", "ratings.csv")],
            "train-rewards": [("data", "contexts.json"), ("cf", "cf.p4t")],
            "train-lm": [("data", "contexts.json"), ("cf", "cf.p4t")],
            "rl-finetune": [("rewards", "bundle.json"), ("lm", "anchor.p4t")],
            "eval": [("rewards", "bundle.json"), ("lm", "anchor.p4t"), ("rl", "policy.p4t")],
            "ablate": [("rewards", "bundle.json"), ("lm", "anchor.p4t")]}


def run_stage(run: Run, stage: str) -> list[Path]:
    for parts in UPSTREAM[stage]:
        run.require(*parts)
    _emit("stage_start", stage=stage)
    t0 = time.perf_counter()
    artifacts = STAGE_FUNCS[stage](run)
    wall = time.perf_counter() - t0
    run.record(stage, artifacts, wall)
    _emit("stage_done", stage=stage, wall_time=round(wall, 3), artifacts=len(artifacts))
    return artifacts


def run_all(run: Run, resume: bool = False) -> None:
    manifest = run.read_manifest() if resume else None
    if manifest is not None and manifest["config_hash"] != run.cfg.fingerprint():
        raise ConfigError(f"config changed since the run in {run.root} started "
                          f"({manifest['config_hash']} != {run.cfg.fingerprint()}); refusing to resume")
    for stage in STAGES:
        done = manifest is not None and stage in manifest["stages"] and all(
            (run.root / a).exists() for a in manifest["stages"][stage]["artifacts"])
        if done:
            _emit("stage_skipped", stage=stage)
            continue
        run_stage(run, stage)
        manifest = run.read_manifest() if resume else None
