import warnings
from dataclasses import replace

import numpy as np
import pytest

from awgcn.ingest import CallSequence
from awgcn.rng import derive_rng
from awgcn.synthgen import (
    AbsorbingState,
    MarkovSpec,
    SpecError,
    SpecOverflow,
    SynSpec,
    default_markov_spec,
    dump_syn_spec,
    gen_ranmarkov,
    gen_ransyn,
    gen_syndata,
    inject_noise,
    load_markov_spec,
    load_syn_spec,
    random_walk,
)

ALPHA = {"family1": "abcd", "family2": "efgh", "family3": "ijkl"}


def _contains(seq, block):
    n = len(block)
    return any(list(seq[i : i + n]) == list(block) for i in range(len(seq) - n + 1))


@pytest.fixture(scope="module")
def syndata():
    return gen_syndata(SynSpec())


def test_syndata_shape_matches_table(syndata):
    assert len(syndata) == 360
    assert syndata.label_set == ("family1", "family2", "family3")
    assert len(syndata.vocabulary) == 64
    assert all(len(s) == 50 for s in syndata.sequences)


def test_syndata_block_at_fixed_position(syndata):
    for s in syndata.sequences:
        names = s.names
        alpha = ALPHA[s.label]
        assert names[20:24] == list(alpha)
        assert names[24] == "A"
        assert names.count("A") == 1
        assert sum(_contains(names[i:], alpha) and names[i] == alpha[0] for i in range(len(names))) == 1
        numeric = [t for k, t in enumerate(names) if not 20 <= k <= 24]
        assert all(t.isdigit() and 0 <= int(t) <= 50 for t in numeric)


def test_family1_contains_fig7_block(syndata):
    s = next(s for s in syndata.sequences if s.label == "family1")
    assert _contains(s.names, ["a", "b", "c", "d", "A"])


def test_minimal_fit():
    ds = gen_syndata(SynSpec(families=1, per_family=1, length=6, insert_pos=1, family_alphabets=(tuple("abcd"),)))
    [s] = ds.sequences
    assert s.names[1:] == ["a", "b", "c", "d", "A"]
    assert s.names[0].isdigit()


def test_spec_overflow_and_validation():
    with pytest.raises(SpecOverflow):
        gen_syndata(SynSpec(length=24))
    with pytest.raises(SpecError):
        SynSpec(family_alphabets=(tuple("abcd"), tuple("defg"), tuple("ijkl"))).validate()
    with pytest.raises(SpecError):
        SynSpec(shared_token="a").validate()


def test_generators_are_reproducible():
    spec = SynSpec(per_family=5, rng_seed=11)
    assert gen_syndata(spec).sequences == gen_syndata(spec).sequences
    assert gen_ransyn(spec).sequences == gen_ransyn(spec).sequences
    mk = default_markov_spec(per_family=3, rng_seed=4)
    assert gen_ranmarkov(mk).sequences == gen_ranmarkov(mk).sequences
    assert gen_syndata(spec).sequences != gen_syndata(replace(spec, rng_seed=12)).sequences


def test_ransyn_shape():
    ds = gen_ransyn(SynSpec())
    assert len(ds) == 360
    assert len(ds.label_set) == 3
    assert all(len(s) == 50 for s in ds.sequences)


def test_ransyn_order_within_passes():
    # scan oracle: within every family-2 sequence the alphabet tokens appear
    # as a cyclic walk e,f,g,h,(A),e,... with numerics possibly interleaved
    spec = SynSpec(per_family=1000, families=3)
    ds = gen_ransyn(spec)
    cycle = list("efgh") + ["A"]
    checked = 0
    for s in ds.sequences:
        if s.label != "family2":
            continue
        feats = [t for t in s.names if not t.isdigit()]
        assert set(feats) <= set(cycle)
        assert feats == [cycle[k % len(cycle)] for k in range(len(feats))]
        if "f" in feats:
            assert feats.index("e") < feats.index("f")
        checked += 1
    assert checked == 1000


def test_ransyn_zero_entry_probability_is_all_numeric():
    ds = gen_ransyn(SynSpec(per_family=20, p_enter=0.0))
    assert all(t.isdigit() for s in ds.sequences for t in s.names)


def test_ransyn_pass_scope_completes_passes():
    ds = gen_ransyn(SynSpec(per_family=30, interrupt_scope="pass", p_enter=0.3))
    for s in ds.sequences:
        names = s.names
        alpha = ALPHA[s.label]
        for k, t in enumerate(names):
            # a started pass runs to completion unless the sequence ends first
            if t == alpha[0] and k + 5 <= len(names):
                assert names[k : k + 5] == list(alpha) + ["A"]


def test_ranmarkov_shape():
    ds = gen_ranmarkov()
    assert len(ds) == 400
    assert len(ds.vocabulary) == 5
    assert len(ds.label_set) == 4
    assert all(len(s) == 250 for s in ds.sequences)


def test_ranmarkov_pairs_have_positive_probability():
    spec = default_markov_spec(per_family=10)
    ds = gen_ranmarkov(spec)
    pos = {s: i for i, s in enumerate(spec.states)}
    for s in ds.sequences:
        chain = spec.chains[int(s.label[len("family"):]) - 1]
        names = s.names
        assert all(chain[pos[u], pos[v]] > 0 for u, v in zip(names, names[1:]))


def test_default_chains_are_separable():
    spec = default_markov_spec()
    for i in range(len(spec.chains)):
        for j in range(i + 1, len(spec.chains)):
            a, b = spec.chains[i], spec.chains[j]
            assert np.abs(a - b).sum() >= 0.5
            assert np.abs((a + a.T) - (b + b.T)).sum() / 2 >= 0.5


def test_identity_chain_gives_constant_walks():
    spec = MarkovSpec(states=("x", "y", "z"), chains=(np.eye(3),), walk_length=20, per_family=6)
    with pytest.warns(AbsorbingState):
        ds = gen_ranmarkov(spec)
    assert all(len(set(s.names)) == 1 for s in ds.sequences)


def test_walk_frequencies_converge_to_chain_rows():
    # law-of-large-numbers oracle: empirical transition frequencies of a long walk
    chain = default_markov_spec().chains[2]
    walk = random_walk(chain, 10_000, derive_rng(5, "lln"))
    counts = np.zeros_like(chain)
    np.add.at(counts, (walk[:-1], walk[1:]), 1)
    empirical = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(empirical - chain).max() <= 0.02


def test_markov_spec_rejects_non_stochastic_rows():
    with pytest.raises(SpecError):
        MarkovSpec(states=("a", "b"), chains=(np.array([[0.5, 0.4], [0.5, 0.5]]),)).validate()


def test_spec_files_round_trip():
    spec = SynSpec(per_family=7, insert_pos=3, rng_seed=9, p_enter=0.2, interrupt_scope="pass")
    assert load_syn_spec(dump_syn_spec(spec)) == spec
    text = "states = a b\nchain.1 = 0.5 0.5 | 1 0\nwalk_length = 10\n"
    mk = load_markov_spec(text)
    assert mk.states == ("a", "b") and mk.walk_length == 10
    np.testing.assert_array_equal(mk.chains[0], [[0.5, 0.5], [1.0, 0.0]])


@pytest.fixture(scope="module")
def noisy():
    spec = SynSpec()
    clean = gen_syndata(spec)
    return spec, clean, inject_noise(clean, spec, 60)


def test_noise_set_shape(noisy):
    _, clean, ds = noisy
    assert len(ds) == 360
    noise = [s for s in ds.sequences if s.test_only]
    assert len(noise) == 60
    assert sum(not s.test_only for s in ds.sequences) == 300
    assert {s.label for s in noise} == set(clean.label_set)


def test_noise_sequences_carry_foreign_features_and_split_run(noisy):
    spec, clean, ds = noisy
    by_hash = {s.hash: s for s in clean.sequences}
    for s in ds.sequences:
        if not s.test_only:
            continue
        src = by_hash[s.hash[: -len(".noise")]]
        assert s.label == src.label
        own = ALPHA[s.label]
        foreign = set("abcdefghijkl") - set(own)
        assert foreign <= set(s.names)
        # own features: same multiset as the source
        assert sorted(t for t in s.names if t in own) == sorted(t for t in src.names if t in own)
        # run split by one numeric: x, y, <num>, z, w for some split point
        at = s.names.index(own[0])
        window = s.names[at : at + 5]
        assert [t for t in window if not t.isdigit()] == list(own)
        assert sum(t.isdigit() for t in window) == 1


def test_family1_noise_example(noisy):
    _, _, ds = noisy
    s = next(s for s in ds.sequences if s.test_only and s.label == "family1")
    assert set("efghijkl") <= set(s.names)


def test_zero_noise_is_identity_and_too_many_refused(noisy):
    spec, clean, _ = noisy
    assert inject_noise(clean, spec, 0) is clean
    with pytest.raises(SpecError):
        inject_noise(clean, spec, len(clean) + 1)


def test_noise_is_reproducible(noisy):
    spec, clean, ds = noisy
    assert inject_noise(clean, spec, 60).sequences == ds.sequences


def test_no_absorbing_warning_for_default_chains():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gen_ranmarkov(default_markov_spec(per_family=1))


def test_noise_with_a_single_family():
    spec = SynSpec(families=1, per_family=2, length=6, insert_pos=1, family_alphabets=(tuple("abcd"),))
    ds = inject_noise(gen_syndata(spec), spec, 1)
    noise = [s for s in ds.sequences if s.test_only]
    assert len(noise) == 1 and isinstance(noise[0], CallSequence)
