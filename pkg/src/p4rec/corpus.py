"""Deterministic synthetic corpus with planted ground truth.

Items and users live in a shared attribute space. Item descriptions,
user preference texts and endorsement responses are rendered from
templates, so every quality signal a reward model should learn
(entailment, appeal, personalization, preference relevance) has an exact
oracle recomputable from the generation parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cf import RatingsDataset
from .numerics import derive_seed, make_rng
from .vocab import Vocabulary

# (name, positive phrase, negative phrase); every phrase word is unique
_ATTRIBUTES = [
    ("dark", "brooding darkness", "sunny cheer"),
    ("visually-striking", "striking imagery", "modest camerawork"),
    ("fast-paced", "relentless pacing", "leisurely rhythm"),
    ("funny", "witty humor", "solemn gravity"),
    ("romantic", "tender romance", "unsentimental detachment"),
    ("action-packed", "explosive action", "quiet restraint"),
    ("complex", "intricate plotting", "simple storyline"),
    ("violent", "graphic violence", "gentle nonviolence"),
    ("musical", "soaring score", "sparse soundtrack"),
    ("star-driven", "powerhouse performances", "understated acting"),
    ("realistic", "gritty realism", "whimsical fantasy"),
    ("suspenseful", "nail-biting suspense", "relaxed calm"),
    ("family", "family friendliness", "mature themes"),
    ("historical", "historical grandeur", "contemporary setting"),
    ("sci-fi", "scientific speculation", "grounded everyday"),
    ("emotional", "heartfelt sentiment", "cool irony"),
]

DESCRIPTION_TEMPLATES = ("the film has {} .", "it is known for {} .")
PITCH_TEMPLATE = "you will love its {} ."
PREFERENCE_TEMPLATE = "the viewer loves {} ."
# style sentences with planted appeal values
OPENERS = (("here is a film .", 0.0), ("this film is worth a look .", 1.0),
           ("this film is a real treat !", 2.0), ("this is an unforgettable masterpiece !", 3.0))
CLOSERS = (("", 0.0), ("give it a try .", 1.0), ("do not miss it !", 2.0))

VARIANTS = ("targeted", "generic", "hallucinated", "random")
PITCH_VARIANTS = ("targeted", "generic", "hallucinated")


@dataclass
class AttributeSpace:
    names: list[str]
    positive: list[str]
    negative: list[str]

    @classmethod
    def default(cls, n_attributes: int = 16) -> "AttributeSpace":
        if n_attributes < 8:
            raise ValueError("attribute space needs at least 8 attributes")
        if n_attributes > len(_ATTRIBUTES):
            raise ValueError(f"at most {len(_ATTRIBUTES)} built-in attributes")
        rows = _ATTRIBUTES[:n_attributes]
        return cls([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])

    def __len__(self) -> int:
        return len(self.names)

    def phrase(self, a: int, sign: int) -> str:
        return self.positive[a] if sign > 0 else self.negative[a]

    def description_sentence(self, a: int, sign: int, variant: int = 0) -> str:
        return DESCRIPTION_TEMPLATES[variant % len(DESCRIPTION_TEMPLATES)].format(self.phrase(a, sign))

    def pitch_sentence(self, a: int, sign: int) -> str:
        return PITCH_TEMPLATE.format(self.phrase(a, sign))

    def preference_sentence(self, a: int, sign: int) -> str:
        return PREFERENCE_TEMPLATE.format(self.phrase(a, sign))

    def _phrase_index(self) -> dict[str, tuple[int, int]]:
        idx = {}
        for a in range(len(self)):
            for w in self.positive[a].split():
                idx[w] = (a, 1)
            for w in self.negative[a].split():
                idx[w] = (a, -1)
        return idx

    def mentions(self, text: str) -> list[tuple[int, int]]:
        """Signed attributes mentioned, one per sentence that contains a phrase word."""
        index = self._phrase_index()
        out = []
        for sent in split_text_sentences(text):
            for w in sent.split():
                if w in index:
                    out.append(index[w])
                    break
        return out

    def style_value(self, text: str) -> float:
        """Sum of planted appeal values of opener/closer sentences present."""
        table = {s: v for s, v in OPENERS + CLOSERS if s}
        return float(sum(table.get(sent, 0.0) for sent in split_text_sentences(text)))

    def vocabulary(self) -> Vocabulary:
        words: list[str] = []
        for a in range(len(self)):
            words += self.positive[a].split() + self.negative[a].split()
        for t in DESCRIPTION_TEMPLATES + (PITCH_TEMPLATE, PREFERENCE_TEMPLATE):
            words += t.replace("{}", "").split()
        for s, _ in OPENERS + CLOSERS:
            words += s.split()
        return Vocabulary(words)


def split_text_sentences(text: str) -> list[str]:
    out, cur = [], []
    for w in text.split():
        cur.append(w)
        if w in (".", "!"):
            out.append(" ".join(cur))
            cur = []
    if cur:
        out.append(" ".join(cur))
    return out


@dataclass
class ItemDoc:
    item_id: int
    weights: list[float]
    text: str
    n_tokens: int
    seed: int

    def mention_set(self, threshold: float) -> list[tuple[int, int]]:
        return [(a, 1 if w > 0 else -1) for a, w in enumerate(self.weights) if abs(w) >= threshold]


@dataclass
class UserProfile:
    user_id: int
    weights: list[float]
    prefs: list[str]
    seed: int


@dataclass
class ResponseRecord:
    response_id: int
    item_id: int
    user_id: int
    variant: str
    text: str
    entailment_truth: int
    appeal_truth: float
    personalization_truth: float
    seed: int


@dataclass
class CorpusConfig:
    seed: int = 0
    n_items: int = 200
    n_users: int = 200
    n_attributes: int = 16
    mention_threshold: float = 0.5
    min_mentions: int = 3
    max_mentions: int = 5
    background_scale: float = 0.2
    ratings_per_user: int = 80
    rating_noise: float = 0.1
    rating_center: float = 3.0
    rating_slope: float = 0.5
    n_prefs: int = 10
    n_contexts: int = 1200
    n_prel_contexts: int = 8800
    n_test: int = 200
    mentions_per_response: int = 2
    app_pair_budget: int = 6000
    per_cross_pairs: bool = True
    nli_negatives_per_item: int = 6
    max_item_tokens: int = 64
    response_horizon: int = 48
    tie_tolerance: float = 1e-9

    def validate(self) -> None:
        if self.n_items < 50 or self.n_users < 50:
            raise ValueError("need at least 50 items and 50 users")
        if self.max_mentions > self.n_attributes or self.min_mentions > self.max_mentions:
            raise ValueError("attribute space too small for requested diversity")
        if self.n_prefs > self.n_attributes:
            raise ValueError("J (n_prefs) cannot exceed the number of attributes")
        if self.ratings_per_user > self.n_items:
            raise ValueError("ratings_per_user exceeds item count")


# ---------------------------------------------------------------------------
# catalogue
# ---------------------------------------------------------------------------

def planted_rating(user_w: Sequence[float], item_w: Sequence[float], cfg: CorpusConfig, noise: float = 0.0) -> float:
    x = float(np.dot(user_w, item_w))
    return float(np.clip(cfg.rating_center + cfg.rating_slope * x + noise, 0.5, 5.0))


def user_pref_texts(weights: Sequence[float], J: int, space: AttributeSpace) -> list[str]:
    """Preference sentences for the J attributes of largest |weight|.

    Sign picks the positive or negative phrasing; ties go to the lower
    attribute index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if J > len(w):
        raise ValueError(f"J={J} exceeds attribute count {len(w)}")
    order = sorted(range(len(w)), key=lambda a: (-abs(w[a]), a))[:J]
    return [space.preference_sentence(a, -1 if w[a] < 0 else 1) for a in order]


def describe_item(item_id: int, weights: Sequence[float], space: AttributeSpace, threshold: float) -> str:
    sents = [space.description_sentence(a, 1 if w > 0 else -1, variant=item_id + a)
             for a, w in enumerate(weights) if abs(w) >= threshold]
    return " ".join(sents)


def gen_catalog(cfg: CorpusConfig, space: AttributeSpace | None = None
                ) -> tuple[list[ItemDoc], list[UserProfile], RatingsDataset]:
    cfg.validate()
    space = space or AttributeSpace.default(cfg.n_attributes)
    A = len(space)
    items = []
    for i in range(cfg.n_items):
        s = derive_seed(cfg.seed, 1, i)
        rng = make_rng(s)
        w = rng.uniform(-cfg.background_scale, cfg.background_scale, size=A)
        k = int(rng.integers(cfg.min_mentions, cfg.max_mentions + 1))
        chosen = rng.choice(A, size=k, replace=False)
        w[chosen] = rng.choice([-1.0, 1.0], size=k) * rng.uniform(cfg.mention_threshold, 1.0, size=k)
        w = np.round(w, 6)
        text = describe_item(i, w, space, cfg.mention_threshold)
        n_tok = len(text.split())
        if n_tok > cfg.max_item_tokens:
            raise ValueError(f"item {i} description has {n_tok} tokens > N_I={cfg.max_item_tokens}")
        items.append(ItemDoc(i, w.tolist(), text, n_tok, s))
    users = []
    for u in range(cfg.n_users):
        s = derive_seed(cfg.seed, 2, u)
        w = np.round(make_rng(s).uniform(-1.0, 1.0, size=A), 6)
        users.append(UserProfile(u, w.tolist(), user_pref_texts(w, cfg.n_prefs, space), s))
    rng = make_rng(derive_seed(cfg.seed, 3))
    us, its, rs = [], [], []
    for u in range(cfg.n_users):
        chosen = np.sort(rng.choice(cfg.n_items, size=cfg.ratings_per_user, replace=False))
        noise = rng.normal(0.0, cfg.rating_noise, size=len(chosen)) if cfg.rating_noise > 0 else np.zeros(len(chosen))
        for i, e in zip(chosen, noise):
            us.append(u)
            its.append(int(i))
            rs.append(planted_rating(users[u].weights, items[i].weights, cfg, e))
    ratings = RatingsDataset(np.array(us), np.array(its), np.array(rs), cfg.n_users, cfg.n_items)
    ratings.validate()
    return items, users, ratings


# ---------------------------------------------------------------------------
# responses and planted scores
# ---------------------------------------------------------------------------

def personalization_of(mentions: Sequence[tuple[int, int]], user_w: Sequence[float]) -> float:
    if not mentions:
        return 0.0
    return float(np.mean([user_w[a] * s for a, s in mentions]))


def planted_scores(text: str, item: ItemDoc, user: UserProfile, space: AttributeSpace,
                   threshold: float) -> tuple[int, float, float]:
    """(entailment_truth, appeal_truth, personalization_truth) recomputed from text and weights."""
    mentions = space.mentions(text)
    allowed = set(item.mention_set(threshold))
    entailed = int(all(m in allowed for m in mentions))
    return entailed, space.style_value(text), personalization_of(mentions, user.weights)


def _choose_mentions(variant: str, item: ItemDoc, user: UserProfile, k: int, threshold: float,
                     rng: np.random.Generator) -> list[tuple[int, int]]:
    own = item.mention_set(threshold)
    uw = user.weights
    if variant == "targeted":
        picked = sorted(own, key=lambda m: (-uw[m[0]] * m[1], m[0]))[:k]
    elif variant == "generic":
        picked = sorted(own, key=lambda m: (-abs(item.weights[m[0]]), m[0]))[:k]
    elif variant == "hallucinated":
        picked = sorted(own, key=lambda m: (-uw[m[0]] * m[1], m[0]))[:max(k - 1, 0)]
        owned = {a for a, _ in own}
        others = [a for a in range(len(uw)) if a not in owned]
        a = max(others, key=lambda a: (abs(uw[a]), -a))
        picked.append((a, 1 if uw[a] >= 0 else -1))
    elif variant == "random":
        n = int(rng.integers(1, k + 2))
        pool = own + [(a, s) for a in range(len(uw)) for s in (1, -1) if (a, s) not in own]
        idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        picked = [pool[j] for j in idx]
        # distinct attributes only
        seen, uniq = set(), []
        for m in picked:
            if m[0] not in seen:
                seen.add(m[0])
                uniq.append(m)
        picked = uniq
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return sorted(picked)


def render_response(mentions: Sequence[tuple[int, int]], opener: int, closer: int, space: AttributeSpace) -> str:
    parts = [OPENERS[opener][0]] + [space.pitch_sentence(a, s) for a, s in mentions]
    if CLOSERS[closer][0]:
        parts.append(CLOSERS[closer][0])
    return " ".join(parts)


def sample_contexts(cfg: CorpusConfig, n: int, seed: int, exclude: set[tuple[int, int]] = frozenset()
                    ) -> list[tuple[int, int]]:
    """Distinct (user, item) pairs not in ``exclude``."""
    rng = make_rng(seed)
    out: list[tuple[int, int]] = []
    seen = set(exclude)
    if n > cfg.n_users * cfg.n_items - len(seen):
        raise ValueError("not enough distinct (user, item) pairs")
    while len(out) < n:
        pair = (int(rng.integers(cfg.n_users)), int(rng.integers(cfg.n_items)))
        if pair not in seen:
            seen.add(pair)
            out.append(pair)
    return out


def gen_responses(items: list[ItemDoc], users: list[UserProfile], contexts: Sequence[tuple[int, int]],
                  cfg: CorpusConfig, space: AttributeSpace | None = None,
                  variants: Sequence[str] = VARIANTS) -> list[ResponseRecord]:
    space = space or AttributeSpace.default(cfg.n_attributes)
    out = []
    for c, (u, i) in enumerate(contexts):
        for v_idx, variant in enumerate(variants):
            s = derive_seed(cfg.seed, 4, c, v_idx)
            rng = make_rng(s)
            mentions = _choose_mentions(variant, items[i], users[u], cfg.mentions_per_response,
                                        cfg.mention_threshold, rng)
            text = render_response(mentions, int(rng.integers(len(OPENERS))), int(rng.integers(len(CLOSERS))), space)
            ent, app, per = planted_scores(text, items[i], users[u], space, cfg.mention_threshold)
            out.append(ResponseRecord(len(out), i, u, variant, text, ent, app, per, s))
    return out


# ---------------------------------------------------------------------------
# labelled reward datasets
# ---------------------------------------------------------------------------

@dataclass
class AppPair:
    winner: str
    loser: str
    item_id: int
    winner_id: int
    loser_id: int


@dataclass
class PerPair:
    winner: str
    loser: str
    item_id: int
    user_id: int
    kind: str  # "response_vs_description" | "cross"


@dataclass
class PrelRecord:
    item_id: int
    user_id: int
    response_id: int
    text: str
    s: float


@dataclass
class NliRecord:
    item_id: int
    hypothesis: str
    label: int


@dataclass
class RewardDatasets:
    app: list[AppPair] = field(default_factory=list)
    per: list[PerPair] = field(default_factory=list)
    prel: list[PrelRecord] = field(default_factory=list)
    nli: list[NliRecord] = field(default_factory=list)
    skipped_app_ties: int = 0


def gen_prel_records(responses: list[ResponseRecord], items: list[ItemDoc], users: list[UserProfile],
                     relevance_fn: Callable[[str, str, list[str]], float]) -> list[PrelRecord]:
    return [PrelRecord(r.item_id, r.user_id, r.response_id, r.text,
                       float(relevance_fn(r.text, items[r.item_id].text, users[r.user_id].prefs)))
            for r in responses]


def gen_reward_datasets(responses: list[ResponseRecord], items: list[ItemDoc], users: list[UserProfile],
                        cfg: CorpusConfig, relevance_fn: Callable[[str, str, list[str]], float] | None = None,
                        space: AttributeSpace | None = None) -> RewardDatasets:
    """Build the appeal, personalization, relevance and entailment datasets.

    ``relevance_fn(Y, I, prefs) -> s`` labels the relevance regression set;
    without it that set is left empty.
    """
    space = space or AttributeSpace.default(cfg.n_attributes)
    out = RewardDatasets()
    rng = make_rng(derive_seed(cfg.seed, 5))

    by_context: dict[tuple[int, int], list[ResponseRecord]] = {}
    for r in responses:
        by_context.setdefault((r.user_id, r.item_id), []).append(r)
    groups = [g for g in by_context.values() if len(g) >= 2]

    # appeal: candidate pairs within a context, ties skipped
    for _ in range(cfg.app_pair_budget if groups else 0):
        g = groups[int(rng.integers(len(groups)))]
        a, b = rng.choice(len(g), size=2, replace=False)
        ra, rb = g[a], g[b]
        if abs(ra.appeal_truth - rb.appeal_truth) <= cfg.tie_tolerance:
            out.skipped_app_ties += 1
            continue
        w, l = (ra, rb) if ra.appeal_truth > rb.appeal_truth else (rb, ra)
        out.app.append(AppPair(w.text, l.text, w.item_id, w.response_id, l.response_id))

    # personalization: response beats its item description, plus cross-response pairs
    for r in responses:
        item, user = items[r.item_id], users[r.user_id]
        desc_per = personalization_of(item.mention_set(cfg.mention_threshold), user.weights)
        if r.personalization_truth > desc_per + cfg.tie_tolerance:
            out.per.append(PerPair(r.text, item.text, r.item_id, r.user_id, "response_vs_description"))
    if cfg.per_cross_pairs:
        for g in by_context.values():
            for x in range(len(g)):
                for y in range(x + 1, len(g)):
                    ra, rb = g[x], g[y]
                    if abs(ra.personalization_truth - rb.personalization_truth) <= cfg.tie_tolerance:
                        continue
                    w, l = (ra, rb) if ra.personalization_truth > rb.personalization_truth else (rb, ra)
                    out.per.append(PerPair(w.text, l.text, w.item_id, w.user_id, "cross"))

    if relevance_fn is not None:
        out.prel = gen_prel_records(responses, items, users, relevance_fn)

    # entailment: own sentences entailed, foreign signed attributes and style sentences not
    all_mentions = [(a, s) for a in range(len(space)) for s in (1, -1)]
    for item in items:
        irng = make_rng(derive_seed(cfg.seed, 6, item.item_id))
        own = item.mention_set(cfg.mention_threshold)
        for a, s in own:
            out.nli.append(NliRecord(item.item_id, _render_hypothesis(space, a, s, irng), 1))
        foreign = [m for m in all_mentions if m not in own]
        picks = irng.choice(len(foreign), size=min(cfg.nli_negatives_per_item, len(foreign)), replace=False)
        for j in picks:
            a, s = foreign[j]
            out.nli.append(NliRecord(item.item_id, _render_hypothesis(space, a, s, irng), 0))
        style = [t for t, _ in OPENERS + CLOSERS if t]
        out.nli.append(NliRecord(item.item_id, style[int(irng.integers(len(style)))], 0))
    return out


def _render_hypothesis(space: AttributeSpace, a: int, s: int, rng: np.random.Generator) -> str:
    k = int(rng.integers(len(DESCRIPTION_TEMPLATES) + 1))
    if k == len(DESCRIPTION_TEMPLATES):
        return space.pitch_sentence(a, s)
    return space.description_sentence(a, s, variant=k)


def validate_pairs(pairs: Iterable, score: Callable[[object], tuple[float, float]]) -> None:
    """Raise if any pair's winner does not strictly beat its loser under ``score``."""
    for k, p in enumerate(pairs):
        w, l = score(p)
        if not w > l:
            raise ValueError(f"pair {k}: winner score {w} does not exceed loser score {l}")


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------

def write_jsonl(path: str | Path, records: Iterable) -> None:
    lines = []
    for r in records:
        d = asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r)
        lines.append(json.dumps(d, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_jsonl(path: str | Path, cls=None) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(cls(**d) if cls is not None else d)
    return out
