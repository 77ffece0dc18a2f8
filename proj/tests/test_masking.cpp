#include "prism/masking.hpp"

#include <doctest.h>

#include <stdexcept>

#include <cmath>
#include <map>

using namespace prism;

namespace {

MaskedSeq clean_seq(int len) {
    Vocab v(2);
    return MaskedSeq(v, std::vector<TokenId>(size_t(len), 0));
}

} // namespace

TEST_CASE("analytic pattern law") {
    // L=1: each of {}, {0} has probability 1/2
    CHECK(analytic_pattern_prob(1, 0) == doctest::Approx(0.5));
    CHECK(analytic_pattern_prob(1, 1) == doctest::Approx(0.5));
    // L=2: {} 1/3, singletons 1/6, {0,1} 1/3
    CHECK(analytic_pattern_prob(2, 0) == doctest::Approx(1.0 / 3));
    CHECK(analytic_pattern_prob(2, 1) == doctest::Approx(1.0 / 6));
    CHECK(analytic_pattern_prob(2, 2) == doctest::Approx(1.0 / 3));
    // L=3: any fixed 2-subset has probability 1/12
    CHECK(analytic_pattern_prob(3, 2) == doctest::Approx(1.0 / 12));
}

TEST_CASE("count-marginal of mask_by_count is exactly uniform in law") {
    // P(n=2) at L=3 is the sum over the C(3,2) patterns of 1/((L+1) C(L,2))
    double p = 3.0 * analytic_pattern_prob(3, 2);
    CHECK(p == doctest::Approx(0.25));
}

TEST_CASE("sampled pattern frequencies match the law") {
    Rng rng(11);
    const int64_t n = 40000;
    std::map<uint32_t, int64_t> hist_count, hist_bern;
    MaskedSeq x = clean_seq(2);
    for (int64_t i = 0; i < n; ++i) {
        auto a = mask_by_count(x, rng);
        auto b = mask_by_bernoulli(x, rng);
        uint32_t ba = 0, bb = 0;
        for (int pos : a.masked.indices())
            ba |= 1u << pos;
        for (int pos : b.masked.indices())
            bb |= 1u << pos;
        hist_count[ba]++;
        hist_bern[bb]++;
        CHECK(a.n == a.masked.size());
        CHECK(a.z == mask_at(x, a.masked));
    }
    // the four patterns of L=2 at 1/3, 1/6, 1/6, 1/3
    for (auto [bits, expected] :
         std::vector<std::pair<uint32_t, double>>{{0u, 1.0 / 3}, {1u, 1.0 / 6}, {2u, 1.0 / 6}, {3u, 1.0 / 3}}) {
        CHECK(std::abs(double(hist_count[bits]) / double(n) - expected) < 0.02);
        CHECK(std::abs(double(hist_bern[bits]) / double(n) - expected) < 0.02);
    }
}

TEST_CASE("clean positions always survive masking") {
    Rng rng(5);
    Vocab v(3);
    for (int t = 0; t < 40; ++t) {
        std::vector<TokenId> tokens;
        for (int i = 0; i < 6; ++i)
            tokens.push_back(TokenId(rng.uniform_int(3)));
        MaskedSeq x(v, tokens);
        auto out = rng.bernoulli(0.5) ? mask_by_count(x, rng) : mask_by_bernoulli(x, rng);
        for (int i = 0; i < x.length(); ++i)
            if (!out.z.is_masked(i))
                CHECK(out.z.at(i) == x.at(i));
    }
}

TEST_CASE("masking requires a clean input") {
    Vocab v(2);
    MaskedSeq bad(v, {0, v.mask_id()});
    Rng rng(1);
    CHECK_THROWS_AS(mask_by_count(bad, rng), std::invalid_argument);
    CHECK_THROWS_AS(mask_by_bernoulli(bad, rng), std::invalid_argument);
}

TEST_CASE("mask_with_min_count resamples to the floor") {
    Rng rng(3);
    MaskedSeq x = clean_seq(5);
    for (int t = 0; t < 200; ++t) {
        auto out = mask_with_min_count(x, 3, rng);
        REQUIRE(out.has_value());
        CHECK(out->n >= 3);
    }
    CHECK(!mask_with_min_count(x, 6, rng).has_value());
}

TEST_CASE("equivalence check at small length") {
    Rng rng(17);
    EquivalenceReport rep = check_equivalence(3, 30000, rng);
    CHECK(rep.max_count_dev_by_count < 0.02);
    CHECK(rep.max_count_dev_by_bernoulli < 0.02);
    CHECK(rep.max_pattern_dev_by_count < 0.02);
    CHECK(rep.max_pattern_dev_by_bernoulli < 0.02);
    CHECK(rep.max_pattern_dev_between < 0.03);
    CHECK(rep.degrees_of_freedom == 7);
    CHECK_THROWS_AS(check_equivalence(13, 10, rng), std::invalid_argument);
}
