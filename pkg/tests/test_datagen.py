import json

import numpy as np
import pytest

from fairflow.datagen import (
    CONTRADICT,
    ENTAIL,
    NEG_ID,
    NEUTRAL,
    BundleFormatError,
    DatagenError,
    DatasetBundle,
    Example,
    ExampleMeta,
    GeneratorConfig,
    antonym_partner,
    augment,
    generate,
    load_bundle,
    load_examples,
    oracle_label,
    overlap_ratio,
    save_bundle,
    save_examples,
    validate_example,
)


def small_config(**kw):
    base = dict(
        vocab_size=80,
        n_train=600,
        n_id=200,
        n_stress=200,
        n_ood=200,
        n_transfer=200,
        seed=0,
        max_len=10,
        transfer_len_shift=2,
    )
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="module")
def bundle():
    return generate(small_config())


class TestAntonymPairing:
    def test_partner_is_involution(self):
        for t in range(3, 40):
            assert antonym_partner(antonym_partner(t)) == t
            assert antonym_partner(t) != t

    def test_non_content_token_rejected(self):
        with pytest.raises(DatagenError):
            antonym_partner(2)


class TestOracle:
    def test_subset_is_entail(self):
        assert oracle_label([[11, 13, 15, 17], [13, 11]]) == ENTAIL

    def test_antonym_crossing_is_contradict(self):
        prem = [11, 13, 15]
        hyp = [antonym_partner(11), 13]
        assert oracle_label([prem, hyp]) == CONTRADICT

    def test_fresh_token_is_neutral(self):
        assert oracle_label([[11, 13, 15], [13, 41]]) == NEUTRAL

    def test_crossing_has_precedence_over_subset(self):
        prem = [11, antonym_partner(11), 13]
        assert oracle_label([prem, [11, 13]]) == CONTRADICT

    def test_binary_collapse(self):
        prem = [11, 13, 15]
        assert oracle_label([prem, [13, 11]], n_classes=2) == 0
        assert oracle_label([prem, [antonym_partner(11)]], n_classes=2) == 1
        assert oracle_label([prem, [41]], n_classes=2) == 1

    def test_neg_token_ignored_by_rule(self):
        prem = [11, 13, 15, 17]
        assert oracle_label([prem, [13, NEG_ID, 11]]) == ENTAIL


class TestGeneratedBundle:
    def test_oracle_perfect_on_every_split(self, bundle):
        for name, examples in bundle.splits():
            for ex in examples:
                assert oracle_label(ex.constituents) == ex.label, name

    def test_shortcut_rate_in_train(self):
        cfg = small_config(n_train=6000)
        b = generate(cfg)
        contra = [ex for ex in b.train if ex.label == CONTRADICT]
        rate = np.mean([ex.meta.has_shortcut_token for ex in contra])
        assert abs(rate - cfg.shortcut_strength) < 0.02
        non_contra = [ex for ex in b.train if ex.label != CONTRADICT]
        assert not any(ex.meta.has_shortcut_token for ex in non_contra)

    def test_stress_shortcut_never_aligned(self, bundle):
        for ex in bundle.stress_test:
            if ex.meta.has_shortcut_token:
                assert ex.label != CONTRADICT
                assert not ex.meta.shortcut_aligned
        assert any(ex.meta.has_shortcut_token for ex in bundle.stress_test)

    def test_ood_overlap_and_class_mix(self, bundle):
        for ex in bundle.ood_test:
            assert ex.meta.overlap_ratio >= 0.8 - 1e-9
        non_entail = np.mean([ex.label != ENTAIL for ex in bundle.ood_test])
        assert non_entail >= 0.3

    def test_split_disjointness(self, bundle):
        train_keys = {ex.key() for ex in bundle.train}
        for name, examples in bundle.splits():
            if name == "train":
                continue
            assert not train_keys & {ex.key() for ex in examples}, name

    def test_transfer_uses_disjoint_vocab_region(self, bundle):
        cfg = small_config()
        half_boundary = 3 + 2 * (cfg.n_pairs // 2)
        train_content = {t for ex in bundle.train for c in ex.constituents for t in c if t >= 3}
        transfer_content = {
            t for ex in bundle.transfer_test for c in ex.constituents for t in c if t >= 3
        }
        assert max(train_content) < half_boundary
        assert min(transfer_content) >= half_boundary

    def test_transfer_lengths_shifted(self, bundle):
        cfg = small_config()
        train_max = max(len(ex.premise) for ex in bundle.train)
        transfer_max = max(len(ex.premise) for ex in bundle.transfer_test)
        assert train_max <= cfg.max_len
        assert transfer_max > cfg.max_len

    def test_determinism(self):
        a = generate(small_config(n_train=50, n_id=10, n_stress=10, n_ood=10, n_transfer=10))
        b = generate(small_config(n_train=50, n_id=10, n_stress=10, n_ood=10, n_transfer=10))
        assert [ex.key() for ex in a.train] == [ex.key() for ex in b.train]

    def test_lengths_respect_config(self, bundle):
        cfg = small_config()
        for ex in bundle.train:
            assert cfg.min_len <= len(ex.premise) <= cfg.max_len
            hyp_content = [t for t in ex.hypothesis if t != NEG_ID]
            assert cfg.min_len <= len(hyp_content) <= cfg.max_len

    def test_vocab_too_small_rejected(self):
        with pytest.raises(DatagenError, match="vocab too small"):
            GeneratorConfig(vocab_size=20)

    def test_binary_mode(self):
        cfg = small_config(n_classes=2, class_priors=(0.5, 0.5))
        b = generate(cfg)
        labels = {ex.label for ex in b.train}
        assert labels == {0, 1}
        for ex in b.train:
            assert oracle_label(ex.constituents, n_classes=2) == ex.label


class TestShortcutExploitability:
    def test_hypothesis_only_probe_id_vs_stress(self):
        """A bag-of-hypothesis-tokens probe nails ID but collapses on stress."""
        from sklearn.linear_model import LogisticRegression

        cfg = small_config(n_train=4000, n_id=800, n_stress=800)
        b = generate(cfg)

        def featurize(examples):
            x = np.zeros((len(examples), cfg.vocab_size))
            for i, ex in enumerate(examples):
                for t in ex.hypothesis:
                    x[i, t] += 1.0
            return x

        def labels(examples):
            return np.array([1 if ex.label == CONTRADICT else 0 for ex in examples])

        probe = LogisticRegression(max_iter=1000)
        probe.fit(featurize(b.train), labels(b.train))
        id_acc = probe.score(featurize(b.id_test), labels(b.id_test))
        stress_acc = probe.score(featurize(b.stress_test), labels(b.stress_test))
        assert id_acc >= cfg.shortcut_strength - 0.05
        assert stress_acc <= 0.5


class TestAugmentation:
    def test_counts(self, bundle):
        src = bundle.train[:25]
        out = augment(src, ["drop_premise", "drop_hypothesis", "shuffle", "fractional_drop"], NEUTRAL)
        assert len(out) == 25 + 4 * 25

    def test_premise_dropped_variant(self, bundle):
        src = bundle.train[:5]
        out = augment(src, ["drop_premise"], NEUTRAL)
        for orig, aug in zip(src, out[5:]):
            assert aug.constituents[0] == []
            assert aug.constituents[1] == orig.hypothesis
            assert aug.label == NEUTRAL

    def test_shuffle_variant_token_multiset(self, bundle):
        src = bundle.train[:10]
        out = augment(src, ["shuffle"], NEUTRAL, seed=3)
        for orig, aug in zip(src, out[10:]):
            assert sorted(aug.constituents[0]) == sorted(orig.premise)
            assert sorted(aug.constituents[1]) == sorted(orig.hypothesis)

    def test_fractional_variant_drops_half_premise(self, bundle):
        src = bundle.train[:10]
        out = augment(src, ["fractional_drop"], NEUTRAL, seed=1)
        for orig, aug in zip(src, out[10:]):
            n = len(orig.premise)
            assert len(aug.constituents[0]) == n - n // 2
            assert sorted(aug.constituents[1]) == sorted(orig.hypothesis)

    def test_unknown_op_and_missing_label(self, bundle):
        with pytest.raises(DatagenError):
            augment(bundle.train[:2], ["explode"], NEUTRAL)
        with pytest.raises(DatagenError):
            augment(bundle.train[:2], ["shuffle"], None)

    def test_deterministic_in_seed(self, bundle):
        src = bundle.train[:10]
        a = augment(src, ["shuffle"], NEUTRAL, seed=5)
        b = augment(src, ["shuffle"], NEUTRAL, seed=5)
        assert [ex.key() for ex in a] == [ex.key() for ex in b]


class TestPersistence:
    def test_round_trip_bundle(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path / "data", gen_config=small_config())
        loaded = load_bundle(tmp_path / "data")
        for (name_a, a), (_name_b, b) in zip(bundle.splits(), loaded.splits()):
            assert a == b, name_a
        assert (tmp_path / "data" / "gen_meta.json").exists()

    def test_empty_constituent_survives_round_trip(self, tmp_path):
        ex = Example([[], [5, 6]], NEUTRAL, ExampleMeta(False, False, 0.0))
        path = tmp_path / "one.jsonl"
        save_examples([ex], path)
        assert load_examples(path)[0] == ex

    def test_truncated_line_names_line_number(self, tmp_path):
        good = json.dumps(
            {"c": [[4], [5]], "y": 2, "meta": {"has_shortcut_token": False, "shortcut_aligned": False, "overlap_ratio": 0.0}}
        )
        lines = [good] * 6 + [good[: len(good) // 2]]
        path = tmp_path / "broken.jsonl"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(BundleFormatError, match="line 7"):
            load_examples(path)

    def test_save_is_byte_deterministic(self, bundle, tmp_path):
        save_examples(bundle.train[:50], tmp_path / "a.jsonl")
        save_examples(bundle.train[:50], tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_missing_split_file(self, tmp_path):
        with pytest.raises(BundleFormatError, match="missing split"):
            load_bundle(tmp_path)


class TestValidator:
    def test_accepts_generated_examples(self, bundle):
        for ex in bundle.train[:50]:
            validate_example(ex, 80)

    def test_rejects_out_of_vocab(self):
        ex = Example([[999], [5]], NEUTRAL, ExampleMeta(False, False, 0.0))
        with pytest.raises(DatagenError):
            validate_example(ex, 80)

    def test_rejects_inconsistent_meta(self):
        ex = Example([[5, 7], [NEG_ID, 5]], NEUTRAL, ExampleMeta(False, False, 1.0))
        with pytest.raises(DatagenError, match="meta"):
            validate_example(ex, 80)

    def test_overlap_ratio_definition(self):
        assert overlap_ratio([5, 7, 9], [5, 7, 41, NEG_ID]) == pytest.approx(2 / 3)
        assert overlap_ratio([5], []) == 0.0
