"""Synthetic call-sequence datasets: SynData, RanSyn, RanMarkov and noisy test variants.

Every sequence draws from its own generator derived from ``(rng_seed, kind,
family, index)``, so output is reproducible and independent of generation order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .ingest import CallSequence, Dataset, build_dataset
from .rng import derive_rng


class SpecError(ValueError):
    pass


class SpecOverflow(SpecError):
    """The family features do not fit in the requested sequence length."""


class AbsorbingState(UserWarning):
    pass


def _default_alphabets() -> tuple[tuple[str, ...], ...]:
    return (("a", "b", "c", "d"), ("e", "f", "g", "h"), ("i", "j", "k", "l"))


@dataclass(frozen=True)
class SynSpec:
    families: int = 3
    per_family: int = 120
    length: int = 50
    numeric_range: tuple[int, int] = (0, 50)
    insert_pos: int = 20  # 0-based: the 21st call
    family_alphabets: tuple[tuple[str, ...], ...] = field(default_factory=_default_alphabets)
    shared_token: str = "A"
    rng_seed: int = 0
    # RanSyn process
    p_enter: float = 0.10
    p_interrupt: float = 0.05
    interrupt_scope: str = "token"  # "token" or "pass"
    shared_after_pass: bool = True

    def validate(self) -> None:
        if self.families < 1 or self.per_family < 0 or self.length < 1:
            raise SpecError("families, per_family and length must be positive")
        if len(self.family_alphabets) != self.families:
            raise SpecError(f"{self.families} families but {len(self.family_alphabets)} alphabets")
        lo, hi = self.numeric_range
        if lo > hi or lo < 0:
            raise SpecError(f"bad numeric range {self.numeric_range}")
        seen: set[str] = set()
        for alpha in self.family_alphabets:
            if not alpha:
                raise SpecError("empty family alphabet")
            if seen.intersection(alpha) or len(set(alpha)) != len(alpha):
                raise SpecError("family alphabets must be pairwise disjoint")
            seen.update(alpha)
        if self.shared_token in seen:
            raise SpecError("shared token occurs in a family alphabet")
        for tok in seen | {self.shared_token}:
            if tok.isdigit() and lo <= int(tok) <= hi:
                raise SpecError(f"feature token {tok!r} collides with the numeric range")
        longest = max(len(a) for a in self.family_alphabets)
        if self.insert_pos < 0 or self.length < self.insert_pos + longest + 1:
            raise SpecOverflow(
                f"length {self.length} cannot hold {longest} feature calls + shared token at {self.insert_pos}"
            )
        if not (0 <= self.p_enter <= 1 and 0 <= self.p_interrupt <= 1):
            raise SpecError("probabilities must lie in [0, 1]")
        if self.interrupt_scope not in ("token", "pass"):
            raise SpecError(f"interrupt_scope must be 'token' or 'pass', not {self.interrupt_scope!r}")

    def label(self, family: int) -> str:
        return f"family{family + 1}"


@dataclass(frozen=True)
class MarkovSpec:
    states: tuple[str, ...]
    chains: tuple[np.ndarray, ...]
    walk_length: int = 250
    per_family: int = 100
    rng_seed: int = 0

    def validate(self) -> None:
        n = len(self.states)
        if n == 0 or len(set(self.states)) != n:
            raise SpecError("states must be distinct and non-empty")
        if self.walk_length < 1 or self.per_family < 0:
            raise SpecError("walk_length must be >= 1")
        for k, m in enumerate(self.chains):
            m = np.asarray(m, dtype=float)
            if m.shape != (n, n):
                raise SpecError(f"chain {k + 1} has shape {m.shape}, expected {(n, n)}")
            if (m < 0).any() or np.abs(m.sum(axis=1) - 1.0).max() > 1e-12:
                raise SpecError(f"chain {k + 1} rows must be non-negative and sum to 1")

    def absorbing_states(self) -> list[tuple[int, str]]:
        return [
            (k + 1, self.states[i])
            for k, m in enumerate(self.chains)
            for i in range(len(self.states))
            if m[i, i] == 1.0
        ]


# --- spec files -----------------------------------------------------------

def _kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _bool(v: str) -> bool:
    return v.lower() in ("1", "true", "yes", "on")


def load_syn_spec(text: str) -> SynSpec:
    """Parse a key-value SynSpec document; omitted keys keep their defaults.

    Alphabets are given as ``alphabet.<n> = a b c d`` (n counted from 1).
    """
    kv = _kv(text)
    base = SynSpec()
    alphabets = {int(k.split(".", 1)[1]): tuple(v.split()) for k, v in kv.items() if k.startswith("alphabet.")}
    fields = {}
    ints = ("families", "per_family", "length", "insert_pos", "rng_seed")
    for key in ints:
        if key in kv:
            fields[key] = int(kv[key])
    for key in ("p_enter", "p_interrupt"):
        if key in kv:
            fields[key] = float(kv[key])
    if "numeric_range" in kv:
        lo, hi = kv["numeric_range"].split()
        fields["numeric_range"] = (int(lo), int(hi))
    if "shared_token" in kv:
        fields["shared_token"] = kv["shared_token"]
    if "interrupt_scope" in kv:
        fields["interrupt_scope"] = kv["interrupt_scope"]
    if "shared_after_pass" in kv:
        fields["shared_after_pass"] = _bool(kv["shared_after_pass"])
    if alphabets:
        fields["family_alphabets"] = tuple(alphabets[k] for k in sorted(alphabets))
        fields.setdefault("families", len(alphabets))
    spec = replace(base, **fields)
    spec.validate()
    return spec


def dump_syn_spec(spec: SynSpec) -> str:
    lines = [
        f"families = {spec.families}",
        f"per_family = {spec.per_family}",
        f"length = {spec.length}",
        f"numeric_range = {spec.numeric_range[0]} {spec.numeric_range[1]}",
        f"insert_pos = {spec.insert_pos}",
        f"shared_token = {spec.shared_token}",
        f"rng_seed = {spec.rng_seed}",
        f"p_enter = {spec.p_enter!r}",
        f"p_interrupt = {spec.p_interrupt!r}",
        f"interrupt_scope = {spec.interrupt_scope}",
        f"shared_after_pass = {str(spec.shared_after_pass).lower()}",
    ]
    lines += [f"alphabet.{k + 1} = {' '.join(a)}" for k, a in enumerate(spec.family_alphabets)]
    return "\n".join(lines) + "\n"


def load_markov_spec(text: str) -> MarkovSpec:
    kv = _kv(text)
    states = tuple(kv["states"].split())
    chain_keys = sorted((k for k in kv if k.startswith("chain.")), key=lambda k: int(k.split(".", 1)[1]))
    chains = tuple(
        np.array([[float(x) for x in row.split()] for row in kv[k].split("|")]) for k in chain_keys
    )
    spec = MarkovSpec(
        states=states,
        chains=chains,
        walk_length=int(kv.get("walk_length", 250)),
        per_family=int(kv.get("per_family", 100)),
        rng_seed=int(kv.get("rng_seed", 0)),
    )
    spec.validate()
    return spec


def default_markov_spec(**overrides) -> MarkovSpec:
    text = resources.files("awgcn").joinpath("data/ranmarkov_v1.txt").read_text(encoding="utf-8")
    return replace(load_markov_spec(text), **overrides)


# --- generators -----------------------------------------------------------

def _numeric(rng: np.random.Generator, spec: SynSpec, size=None):
    lo, hi = spec.numeric_range
    return rng.integers(lo, hi + 1, size=size)


def syndata_sequence(spec: SynSpec, family: int, index: int) -> list[str]:
    rng = derive_rng(spec.rng_seed, "syndata", family, index)
    tokens = [str(n) for n in _numeric(rng, spec, spec.length)]
    alpha = spec.family_alphabets[family]
    p = spec.insert_pos
    tokens[p : p + len(alpha)] = alpha
    tokens[p + len(alpha)] = spec.shared_token
    return tokens


def gen_syndata(spec: SynSpec = SynSpec()) -> Dataset:
    """Random numeric calls with the family's feature block and the shared token at a fixed position."""
    spec.validate()
    seqs = [
        CallSequence.from_names(f"syndata-{f + 1}-{i:04d}", spec.label(f), syndata_sequence(spec, f, i))
        for f in range(spec.families)
        for i in range(spec.per_family)
    ]
    return build_dataset(seqs)


def ransyn_sequence(spec: SynSpec, family: int, index: int) -> list[str]:
    rng = derive_rng(spec.rng_seed, "ransyn", family, index)
    feature = list(spec.family_alphabets[family])
    if spec.shared_after_pass:
        feature.append(spec.shared_token)
    tokens: list[str] = []
    in_feature, pos = False, 0
    while len(tokens) < spec.length:
        if not in_feature:
            tokens.append(str(_numeric(rng, spec)))
            in_feature = rng.random() < spec.p_enter
            continue
        tokens.append(feature[pos])
        pos += 1
        if pos == len(feature):
            pos, in_feature = 0, False
        elif spec.interrupt_scope == "token" and rng.random() < spec.p_interrupt:
            # interrupted; the next feature visit resumes at ``pos``
            in_feature = False
    return tokens


def gen_ransyn(spec: SynSpec = SynSpec()) -> Dataset:
    """Two-state numeric/feature process: feature passes at random places, possibly interrupted and repeated."""
    spec.validate()
    seqs = [
        CallSequence.from_names(f"ransyn-{f + 1}-{i:04d}", spec.label(f), ransyn_sequence(spec, f, i))
        for f in range(spec.families)
        for i in range(spec.per_family)
    ]
    return build_dataset(seqs)


def random_walk(chain: np.ndarray, length: int, rng: np.random.Generator) -> list[int]:
    cum = np.cumsum(chain, axis=1)
    cum[:, -1] = 1.0
    state = int(rng.integers(len(chain)))
    walk = [state]
    for u in rng.random(length - 1):
        state = int(np.searchsorted(cum[state], u, side="right"))
        walk.append(state)
    return walk


def gen_ranmarkov(spec: MarkovSpec | None = None) -> Dataset:
    """Random walks over per-family transition matrices that share one state set."""
    spec = spec or default_markov_spec()
    spec.validate()
    for fam, state in spec.absorbing_states():
        warnings.warn(f"chain {fam}: state {state} is absorbing", AbsorbingState, stacklevel=2)
    seqs = []
    for f, chain in enumerate(spec.chains):
        chain = np.asarray(chain, dtype=float)
        for i in range(spec.per_family):
            rng = derive_rng(spec.rng_seed, "ranmarkov", f, i)
            walk = random_walk(chain, spec.walk_length, rng)
            seqs.append(
                CallSequence.from_names(
                    f"ranmarkov-{f + 1}-{i:04d}", f"family{f + 1}", [spec.states[s] for s in walk]
                )
            )
    return build_dataset(seqs)


# --- noise -----------------------------------------------------------------

def _longest_run(names: list[str], alpha: tuple[str, ...]) -> tuple[int, int]:
    """[start, end) of the longest stretch of consecutive feature calls in alphabet order."""
    nxt = {alpha[i]: alpha[i + 1] for i in range(len(alpha) - 1)}
    best = (0, 0)
    i = 0
    while i < len(names):
        if names[i] in alpha:
            j = i + 1
            while j < len(names) and nxt.get(names[j - 1]) == names[j]:
                j += 1
            if j - i > best[1] - best[0]:
                best = (i, j)
            i = j
        else:
            i += 1
    return best


def noisy_sequence(src: CallSequence, spec: SynSpec, family: int, rng: np.random.Generator) -> CallSequence:
    names = src.names
    start, end = _longest_run(names, spec.family_alphabets[family])
    run = names[start:end]
    if len(run) >= 2:
        gap = int(rng.integers(1, len(run)))
        run = run[:gap] + [str(_numeric(rng, spec))] + run[gap:]
    outside: list[object] = names[:start] + [None] + names[end:]  # None marks the run
    foreign = [t for g, a in enumerate(spec.family_alphabets) if g != family for t in a]
    for tok in foreign:
        outside.insert(int(rng.integers(0, len(outside) + 1)), tok)
    out: list[str] = []
    for t in outside:
        if t is None:
            out.extend(run)
        else:
            out.append(t)
    return CallSequence.from_names(f"{src.hash}.noise", src.label, out, test_only=True)


def inject_noise(ds: Dataset, spec: SynSpec, n_noise: int) -> Dataset:
    """Replace ``n_noise`` clean sequences (spread evenly over families) by test-only noisy copies.

    A noisy copy gains every other family's feature calls at random positions
    outside its own feature run, plus one random numeric call inside that run.
    """
    spec.validate()
    if n_noise < 0 or n_noise > len(ds):
        raise SpecError(f"cannot derive {n_noise} noise sequences from {len(ds)}")
    if n_noise == 0:
        return ds
    labels = [spec.label(f) for f in range(spec.families)]
    rng = derive_rng(spec.rng_seed, "noise", n_noise)
    pools = {}
    for f, label in enumerate(labels):
        members = [i for i, s in enumerate(ds.sequences) if s.label == label and not s.test_only]
        pools[f] = [members[k] for k in rng.permutation(len(members))]
    picked: list[tuple[int, int]] = []
    f = 0
    while len(picked) < n_noise:
        if not any(pools.values()):
            raise SpecError("not enough clean sequences to derive noise from")
        if pools[f]:
            picked.append((f, pools[f].pop(0)))
        f = (f + 1) % spec.families
    sources = {i for _, i in picked}
    noisy = [
        noisy_sequence(ds.sequences[i], spec, fam, derive_rng(spec.rng_seed, "noise", fam, i))
        for fam, i in sorted(picked, key=lambda p: p[1])
    ]
    kept = [s for i, s in enumerate(ds.sequences) if i not in sources]
    return build_dataset(kept + noisy)
