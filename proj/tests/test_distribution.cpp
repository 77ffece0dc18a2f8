#include "prism/distribution.hpp"

#include "prism/masking.hpp"
#include "prism/util.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace prism;

namespace {

// tokens: A=0, B=1, C=2
const Vocab kV3(3);

MaskedSeq seq(const std::vector<TokenId>& t) { return MaskedSeq(kV3, t); }
constexpr TokenId A = 0, B = 1, C = 2;
const TokenId M = kV3.mask_id();

ExplicitDist two_seq_half() { return ExplicitDist(kV3, {{seq({A, B}), 0.5}, {seq({A, C}), 0.5}}); }

// Full joint-enumeration posterior: enumerate every (x, mask pattern) with its
// exact probability under the count-based masking law, bucket by z, and read
// the conditional of x^pos off the buckets. Independent of the restriction
// shortcut used by oracle_posterior.
PosteriorRow joint_enumeration_posterior(const ExplicitDist& d, const MaskedSeq& z, int pos) {
    const int len = d.length();
    std::vector<KahanSum> per_token(size_t(d.vocab().size));
    KahanSum total;
    for (const auto& [x, w] : d.support()) {
        for (uint32_t bits = 0; bits < (1u << len); ++bits) {
            std::vector<int> idx;
            for (int i = 0; i < len; ++i)
                if (bits & (1u << i))
                    idx.push_back(i);
            if (mask_at(x, MaskSet(idx)) != z)
                continue;
            double p = w * analytic_pattern_prob(len, int(idx.size()));
            per_token[size_t(x.at(pos))].add(p);
            total.add(p);
        }
    }
    REQUIRE(total.value() > 0.0);
    PosteriorRow row;
    row.probs.resize(per_token.size());
    for (size_t v = 0; v < per_token.size(); ++v)
        row.probs[v] = per_token[v].value() / total.value();
    return row;
}

std::vector<PosteriorRow> uniform_rows(const MaskedSeq& z) {
    PosteriorRow u;
    u.probs.assign(size_t(z.vocab().size), 1.0 / double(z.vocab().size));
    return std::vector<PosteriorRow>(size_t(z.length()), u);
}

} // namespace

TEST_CASE("oracle posterior on stated cases") {
    ExplicitDist d = two_seq_half();
    PosteriorRow row = oracle_posterior(d, seq({A, M}), 1);
    CHECK(row.probs[A] == doctest::Approx(0.0));
    CHECK(row.probs[B] == doctest::Approx(0.5));
    CHECK(row.probs[C] == doctest::Approx(0.5));

    ExplicitDist point(kV3, {{seq({A, B}), 1.0}});
    PosteriorRow p0 = oracle_posterior(point, seq({M, M}), 0);
    CHECK(p0.probs[A] == doctest::Approx(1.0));

    ExplicitDist skew(kV3, {{seq({A, B}), 0.75}, {seq({C, B}), 0.25}});
    PosteriorRow ps = oracle_posterior(skew, seq({M, B}), 0);
    CHECK(ps.probs[A] == doctest::Approx(0.75));
    CHECK(ps.probs[C] == doctest::Approx(0.25));
}

TEST_CASE("oracle posterior contracts") {
    ExplicitDist d = two_seq_half();
    CHECK_THROWS_AS(oracle_posterior(d, seq({A, B}), 1), std::invalid_argument); // not masked
    CHECK_THROWS_AS(oracle_posterior(d, seq({B, M}), 1), UnreachableStateError);
    CHECK_THROWS_AS(oracle_posterior(d, seq({A, M}), 5), std::out_of_range);
}

TEST_CASE("oracle quality on stated cases") {
    ExplicitDist d = two_seq_half();
    CHECK(oracle_quality(d, seq({A, B}), 1) == doctest::Approx(0.5));

    ExplicitDist point(kV3, {{seq({A, B}), 1.0}});
    CHECK(oracle_quality(point, seq({A, B}), 0) == doctest::Approx(1.0));

    ExplicitDist skew(kV3, {{seq({A, B}), 0.9}, {seq({A, C}), 0.1}});
    CHECK(oracle_quality(skew, seq({A, C}), 1) == doctest::Approx(0.1));
    CHECK_THROWS_AS(oracle_quality(d, seq({A, M}), 1), std::invalid_argument);
}

TEST_CASE("extended quality collapses to point quality and averages mask views") {
    ExplicitDist d = two_seq_half();
    MaskSetDistribution point;
    point.entries = {{MaskSet{1}, 1.0}};
    CHECK(oracle_extended_quality(d, seq({A, B}), 1, point) ==
          doctest::Approx(oracle_quality(d, seq({A, B}), 1)));

    MaskSetDistribution mixed;
    mixed.entries = {{MaskSet{1}, 0.5}, {MaskSet{0, 1}, 0.5}};
    // 0.5 * p(B | [A,m]) + 0.5 * p(B | [m,m]) = 0.5 * 0.5 + 0.5 * 0.5
    CHECK(oracle_extended_quality(d, seq({A, B}), 1, mixed) == doctest::Approx(0.5));

    MaskSetDistribution missing;
    missing.entries = {{MaskSet{0}, 1.0}};
    CHECK_THROWS_AS(oracle_extended_quality(d, seq({A, B}), 1, missing), std::invalid_argument);
}

TEST_CASE("restriction oracle equals full joint enumeration") {
    Rng rng(23);
    for (int trial = 0; trial < 4; ++trial) {
        // random explicit distribution, |support| = 8, |V| = 3, L = 4
        std::vector<std::pair<MaskedSeq, double>> support;
        double total = 0.0;
        std::vector<double> weights;
        std::map<std::vector<TokenId>, bool> seen;
        while (support.size() < 8) {
            std::vector<TokenId> t;
            for (int i = 0; i < 4; ++i)
                t.push_back(TokenId(rng.uniform_int(3)));
            if (seen[t])
                continue;
            seen[t] = true;
            double w = 0.1 + rng.uniform01();
            support.emplace_back(MaskedSeq(kV3, t), w);
            total += w;
        }
        // exact unit sum: normalize and put the residual on the last element
        double run = 0.0;
        for (size_t i = 0; i + 1 < support.size(); ++i) {
            support[i].second /= total;
            run += support[i].second;
        }
        support.back().second = 1.0 - run;
        ExplicitDist d(kV3, std::move(support));

        // every reachable (z, pos): all masked views of all support points
        for (const auto& [x, w] : d.support()) {
            for (uint32_t bits = 1; bits < (1u << 4); ++bits) {
                std::vector<int> idx;
                for (int i = 0; i < 4; ++i)
                    if (bits & (1u << i))
                        idx.push_back(i);
                MaskedSeq z = mask_at(x, MaskSet(idx));
                for (int pos : idx) {
                    PosteriorRow fast = oracle_posterior(d, z, pos);
                    PosteriorRow slow = joint_enumeration_posterior(d, z, pos);
                    for (int v = 0; v < 3; ++v)
                        CHECK(fast.probs[size_t(v)] ==
                              doctest::Approx(slow.probs[size_t(v)]).epsilon(1e-10));
                }
            }
        }
    }
}

TEST_CASE("mask set posterior: k=1 is a point mass with the stated reach") {
    ExplicitDist d = two_seq_half();
    FinetuneJoint joint = enumerate_finetune_joint(d, uniform_rows, SelectRule::uniform, 1, 1.0);

    KahanSum reach_total;
    for (const auto& st : joint.states) {
        reach_total.add(st.reach_prob);
        REQUIRE(st.mask_set_posterior.entries.size() == 1);
        CHECK(st.mask_set_posterior.entries[0].first == MaskSet{st.pos});
        CHECK(st.extended_quality == doctest::Approx(oracle_quality(d, st.y, st.pos)));
    }
    CHECK(reach_total.value() == doctest::Approx(1.0).epsilon(1e-12));

    // hand-computed state: z = [A, m] has probability 1/4; uniform proposal
    // rows put 1/3 on B; the unmask set is forced to {1}
    const ReachableQuality* st = joint.find(seq({A, B}), 1);
    REQUIRE(st != nullptr);
    CHECK(st->reach_prob == doctest::Approx(0.25 / 3.0).epsilon(1e-12));
    CHECK(st->extended_quality == doctest::Approx(0.5));

    MaskSetDistribution pi =
        oracle_mask_set_posterior(d, uniform_rows, SelectRule::uniform, 1, seq({A, B}), 1);
    CHECK(pi.prob_of(MaskSet{1}) == doctest::Approx(1.0));
}

TEST_CASE("mask set posterior: L=2, k=2 forces the full set") {
    ExplicitDist d = two_seq_half();
    MaskSetDistribution pi =
        oracle_mask_set_posterior(d, uniform_rows, SelectRule::uniform, 2, seq({B, C}), 0);
    REQUIRE(pi.entries.size() == 1);
    CHECK(pi.entries[0].first == MaskSet{0, 1});
    CHECK(pi.entries[0].second == doctest::Approx(1.0));
}

TEST_CASE("mask set posterior: L=3, k=2 mixes sets by enumeration") {
    Vocab v3(3);
    ExplicitDist d(v3, {{MaskedSeq(v3, {A, A, A}), 0.6}, {MaskedSeq(v3, {B, B, B}), 0.4}});
    FinetuneJoint joint = enumerate_finetune_joint(d, uniform_rows, SelectRule::uniform, 2, 1.0);
    KahanSum total;
    for (const auto& st : joint.states) {
        total.add(st.reach_prob);
        KahanSum pi_sum;
        for (const auto& [set, p] : st.mask_set_posterior.entries) {
            CHECK(set.contains(st.pos));
            CHECK(set.size() == 2);
            pi_sum.add(p);
        }
        CHECK(pi_sum.value() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(st.extended_quality >= 0.0);
        CHECK(st.extended_quality <= 1.0);
    }
    CHECK(total.value() == doctest::Approx(1.0).epsilon(1e-12));

    // y = [A, A, A] with pos 0: the unmask set ranges over the 2-subsets
    // containing 0, so the posterior must mix more than one set
    const ReachableQuality* st = joint.find(MaskedSeq(v3, {A, A, A}), 0);
    REQUIRE(st != nullptr);
    CHECK(st->mask_set_posterior.entries.size() > 1);

    CHECK_THROWS_AS(oracle_mask_set_posterior(d, uniform_rows, SelectRule::uniform, 2,
                                              MaskedSeq(v3, {A, B, M}), 2),
                    std::invalid_argument); // pos masked in y
    CHECK_THROWS_AS(enumerate_finetune_joint(d, uniform_rows, SelectRule::uniform, 2, 1.0, 10),
                    EnumerationCapError);
}

TEST_CASE("nucleus truncation") {
    PosteriorRow row{{0.4, 0.3, 0.2, 0.1}};
    PosteriorRow full = nucleus_truncate(row, 1.0);
    for (int v = 0; v < 4; ++v)
        CHECK(full.probs[size_t(v)] == doctest::Approx(row.probs[size_t(v)]));

    PosteriorRow greedy = nucleus_truncate(row, 0.0);
    CHECK(greedy.probs[0] == doctest::Approx(1.0));

    PosteriorRow half = nucleus_truncate(row, 0.5);
    CHECK(half.probs[0] == doctest::Approx(0.4 / 0.7));
    CHECK(half.probs[1] == doctest::Approx(0.3 / 0.7));
    CHECK(half.probs[2] == doctest::Approx(0.0));

    // greedy tie broken toward the lowest token id
    PosteriorRow tie{{0.5, 0.5}};
    CHECK(nucleus_truncate(tie, 0.0).probs[0] == doctest::Approx(1.0));
}

TEST_CASE("explicit distribution invariants") {
    CHECK_THROWS_AS(ExplicitDist(kV3, {{seq({A, B}), 0.5}, {seq({A, C}), 0.6}}),
                    std::invalid_argument); // weights do not sum to 1
    CHECK_THROWS_AS(ExplicitDist(kV3, {{seq({A, M}), 1.0}}), std::invalid_argument); // mask
    CHECK_THROWS_AS(ExplicitDist(kV3, {{seq({A, B}), 1.0}, {seq({A}), 0.0}}),
                    std::invalid_argument); // length mismatch
}

TEST_CASE("empirical to explicit merges duplicates") {
    EmpiricalDist e(kV3, {seq({A, B}), seq({A, B}), seq({A, C})});
    ExplicitDist d = e.to_explicit();
    CHECK(d.support().size() == 2);
    CHECK(d.prob_of(seq({A, B})) == doctest::Approx(2.0 / 3));
    CHECK(d.prob_of(seq({A, C})) == doctest::Approx(1.0 / 3));
    CHECK(d.prob_of(seq({B, B})) == doctest::Approx(0.0));
}

TEST_CASE("distribution files round trip") {
    ExplicitDist d = two_seq_half();
    save_explicit("/tmp/prism_test_dist.txt", d);
    ExplicitDist back = load_explicit("/tmp/prism_test_dist.txt", kV3);
    CHECK(back.support().size() == 2);
    CHECK(back.prob_of(seq({A, B})) == doctest::Approx(0.5));
}

TEST_CASE("sampling matches weights") {
    ExplicitDist skew(kV3, {{seq({A, B}), 0.75}, {seq({C, B}), 0.25}});
    Rng rng(9);
    int ab = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i)
        ab += skew.sample(rng) == seq({A, B}) ? 1 : 0;
    CHECK(std::abs(double(ab) / n - 0.75) < 0.02);
}
