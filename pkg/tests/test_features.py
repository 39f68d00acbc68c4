import math
from collections import Counter

import numpy as np
import pandas as pd
import pytest

from ctphish.certs import parse_der
from ctphish.errors import DimensionMismatch, EmptyInput
from ctphish.features import (
    CERT_FEATURES, DOMAIN_FEATURES, FEATURE_NAMES, KEYWORD_FEATURES, SELECTED_FEATURES, CategoricalCodec,
    FeatureExtractor, FeatureVector, KeywordList, average_vectors, export_features, feature_category,
    issuer_key, ngram_stats, shannon_entropy,
)

from conftest import BASE_TIME, make_record


@pytest.fixture(scope="module")
def records(benign_example_der, phish_example_der):
    return parse_der(benign_example_der, seen_at=BASE_TIME), parse_der(phish_example_der, seen_at=BASE_TIME)


@pytest.fixture(scope="module")
def extractor(records):
    return FeatureExtractor(CategoricalCodec().fit(records).freeze(), popular_ranks={})


def test_catalog_sizes():
    assert (len(CERT_FEATURES), len(DOMAIN_FEATURES), len(KEYWORD_FEATURES)) == (22, 55, 49)
    assert len(FEATURE_NAMES) == len(set(FEATURE_NAMES)) == 126
    assert len(SELECTED_FEATURES) == 50
    assert set(SELECTED_FEATURES) <= set(FEATURE_NAMES)
    assert not any(feature_category(name) == "keyword" for name in SELECTED_FEATURES)


BENIGN_DOMAIN = {
    "length": 23, "special_char_ratio": 0.13043, "vowel_ratio": 0.23529, "num_tokens": 4,
    "longest_token": 7, "tld_in_token": 1, "subdomain_lengths_mean": 5.66667, "parts": 3,
    "char_diversity": 0.64706, "alphabet_size": 11, "shannon_entropy": 3.33718,
    "ratio_of_repeated_chars": 0.45455, "contains_tld_as_infix": 1,
    "1_gram_std": 0.65555, "1_gram_mean": 1.54545, "1_gram_max": 3, "1_gram_top_quartile": 2,
    "2_gram_std": 0.24944, "2_gram_mean": 1.06667, "2_gram_max": 2,
    "3_gram_std": 0, "3_gram_mean": 1,
}

PHISH_DOMAIN = {
    "length": 17, "special_char_ratio": 0.11765, "vowel_ratio": 0.38462, "num_tokens": 3,
    "longest_token": 7, "tld_in_token": 0, "subdomain_lengths_mean": 14, "parts": 1,
    "char_diversity": 0.78571, "alphabet_size": 11, "shannon_entropy": 3.37878,
    "ratio_of_repeated_chars": 0.27273, "contains_tld_as_infix": 0,
    "1_gram_std": 0.44536, "1_gram_mean": 1.27273, "1_gram_max": 2, "1_gram_top_quartile": 1.5,
    "2_gram_std": 0.27639, "2_gram_mean": 1.08333, "2_gram_max": 2,
    "3_gram_std": 0, "3_gram_mean": 1,
}


@pytest.mark.parametrize("which, expected", [(0, BENIGN_DOMAIN), (1, PHISH_DOMAIN)])
def test_domain_features_of_common_name(records, extractor, which, expected):
    values = extractor.per_domain(records[which])[0].as_dict()
    for name, value in expected.items():
        assert values[name] == pytest.approx(value, abs=1e-4), name


def test_cert_features(records, extractor):
    benign = extractor.per_domain(records[0])[0].as_dict()
    assert benign["is_ov"] == 1 and benign["is_dv"] == 0 and benign["is_ev"] == 0
    assert benign["sub_dn_count"] == 6
    assert benign["sub_char_count"] == 64
    assert benign["valid_period"] == 36
    assert benign["policies_count"] == 2
    assert benign["is_wildcard"] == 1
    assert benign["san_count"] == 7
    assert benign["average_sd_count"] == pytest.approx(29 / 7)
    assert benign["san_tld_count"] == 2
    assert benign["key_size"] == 256

    phish = extractor.per_domain(records[1])[0].as_dict()
    assert phish["is_dv"] == 1 and phish["sub_only_cn"] == 1
    assert phish["sub_char_count"] == 17
    assert phish["valid_period"] == 90
    assert phish["average_sd_count"] == 2.5
    assert phish["san_tld_count"] == 1
    assert phish["key_size"] == 2048
    assert phish["has_ocsp"] == 1 and phish["has_cdp"] == 0


def test_keyword_features(records, extractor):
    phish = extractor.per_domain(records[1])[0].as_dict()
    assert phish["kw_paypal"] == 1 and phish["kw_secure"] == 1
    assert phish["keyword_count"] == 2
    assert phish["has_any_keyword"] == 1
    benign = extractor.per_domain(records[0])[0].as_dict()
    assert benign["keyword_count"] == 0


def test_one_vector_per_name(records, extractor):
    vectors = extractor.per_domain(records[0])
    assert [v.subject[1] for v in vectors] == list(range(7))
    assert all(v.subject[0] == records[0].fingerprint_hex for v in vectors)


def test_per_cert_average(records, extractor):
    per_domain = extractor.per_domain(records[0])
    averaged = extractor.per_cert(records[0])

    assert averaged.subject == (records[0].fingerprint_hex, "CERT")
    # certificate-level columns agree across names and survive exactly
    assert np.array_equal(averaged.values[:22], per_domain[0].values[:22])
    assert averaged.as_dict()["length"] == pytest.approx((23 + 17 + 19 * 5) / 7)


def test_selected_feature_set(records):
    codec = CategoricalCodec().fit(records).freeze()
    full = FeatureExtractor(codec, popular_ranks={}).per_domain(records[1])[0].as_dict()
    selected = FeatureExtractor(codec, "selected", popular_ranks={}).per_domain(records[1])[0]

    assert selected.values.shape == (50,)
    assert selected.as_dict() == {name: full[name] for name in SELECTED_FEATURES}


def test_codec_ranks_by_frequency():
    records = [make_record(f"a{i}.example.com", i, issuer_dn="CN=R3,O=Let's Encrypt,C=US") for i in range(3)]
    records.append(make_record("b.example.com", issuer_dn="CN=Sectigo RSA,O=Sectigo Limited,C=GB",
                               key_algorithm="RSA", key_size_bits=2048))
    codec = CategoricalCodec().fit(records).freeze()

    assert codec.encode_issuer("CN=E1,O=Let's Encrypt,C=US") == 1
    assert codec.encode_issuer("CN=Sectigo RSA,O=Sectigo Limited,C=GB") == 2
    assert codec.encode_issuer("CN=Unknown CA") == 0
    assert codec.encode_algorithm("EC") == 1 and codec.encode_algorithm("DSA") == 0
    assert CategoricalCodec.from_dict(codec.to_dict()) == codec
    with pytest.raises(ValueError):
        codec.fit(records)


def test_issuer_key():
    assert issuer_key("CN=R3,O=Let's Encrypt,C=US") == "Let's Encrypt"
    assert issuer_key("CN=Example\\, Inc CA,O=Example\\, Inc,C=US") == "Example, Inc"
    assert issuer_key("CN=Lonely CA") == "CN=Lonely CA"


def test_vector_dimension_is_checked():
    with pytest.raises(DimensionMismatch):
        FeatureVector(np.zeros(125), "all", ("ff", 0))
    with pytest.raises(DimensionMismatch):
        FeatureExtractor(CategoricalCodec(), keywords=KeywordList(("paypal", "login")))


def test_average_needs_input():
    with pytest.raises(EmptyInput):
        average_vectors([])


def test_keyword_list_rejects_duplicates():
    with pytest.raises(ValueError):
        KeywordList(("login", "Login"))


def test_export_features(tmp_path, records, extractor):
    vectors = extractor.per_domain(records[1])
    path = export_features(vectors, tmp_path / "features.csv", labels=["phish"] * len(vectors))
    frame = pd.read_csv(path)
    assert list(frame.columns[:3]) == ["fingerprint", "domain_index", "label"]
    assert list(frame.columns[3:]) == FEATURE_NAMES
    assert len(frame) == 2


# --- string statistics against an independent computation ------------------

def _random_strings(count=1000, seed=0):
    rng = np.random.default_rng(seed)
    alphabet = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789-"))
    return ["".join(rng.choice(alphabet[:rng.integers(2, 37)], rng.integers(1, 61))) for _ in range(count)]


def test_ngram_stats_match_pandas():
    for text in _random_strings():
        for n in (1, 2, 3):
            grams = [text[i:i + n] for i in range(len(text) - n + 1)]
            if not grams:
                assert ngram_stats(text, n) == [0.0] * 7
                continue
            counts = pd.Series(grams).value_counts()
            expected = [counts.std(ddof=0), counts.median(), counts.mean(), counts.min(), counts.max(),
                        counts.quantile(0.25), counts.quantile(0.75)]
            assert ngram_stats(text, n) == pytest.approx(expected, abs=1e-9), (text, n)


def test_shannon_entropy_matches_definition():
    for text in _random_strings(seed=1):
        total = len(text)
        expected = -sum(c / total * math.log2(c / total) for c in Counter(text).values()) if total else 0.0
        assert shannon_entropy(text) == pytest.approx(expected, abs=1e-9)
