#include "prism/distribution.hpp"

#include "prism/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace prism {

double PosteriorRow::sum() const {
    KahanSum s;
    for (double p : probs)
        s.add(p);
    return s.value();
}

void PosteriorRow::validate() const {
    for (double p : probs)
        if (!(p >= 0.0) || !std::isfinite(p))
            throw NumericError("PosteriorRow: negative or non-finite probability");
    if (std::abs(sum() - 1.0) > 1e-9)
        throw NumericError("PosteriorRow: probabilities sum to " + format_double(sum()));
}

PosteriorRow nucleus_truncate(const PosteriorRow& row, double p) {
    if (p < 0.0 || p > 1.0)
        throw std::invalid_argument("nucleus_truncate: p must lie in [0, 1]");
    const int n = int(row.probs.size());
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (row.probs[size_t(a)] != row.probs[size_t(b)])
            return row.probs[size_t(a)] > row.probs[size_t(b)];
        return a < b;
    });

    PosteriorRow out;
    out.probs.assign(size_t(n), 0.0);
    if (p == 0.0) {
        out.probs[size_t(order[0])] = 1.0;
        return out;
    }
    double cum = 0.0;
    int kept = 0;
    for (int idx : order) {
        cum += row.probs[size_t(idx)];
        ++kept;
        if (cum >= p)
            break;
    }
    double norm = 0.0;
    for (int j = 0; j < kept; ++j)
        norm += row.probs[size_t(order[size_t(j)])];
    if (norm <= 0.0)
        throw NumericError("nucleus_truncate: zero total mass");
    for (int j = 0; j < kept; ++j)
        out.probs[size_t(order[size_t(j)])] = row.probs[size_t(order[size_t(j)])] / norm;
    return out;
}

TokenId sample_from_row(const PosteriorRow& row, Rng& rng) {
    double u = rng.uniform01();
    double cum = 0.0;
    int last_positive = -1;
    for (size_t v = 0; v < row.probs.size(); ++v) {
        if (row.probs[v] <= 0.0)
            continue;
        last_positive = int(v);
        cum += row.probs[v];
        if (u < cum)
            return TokenId(v);
    }
    if (last_positive < 0)
        throw NumericError("sample_from_row: empty distribution");
    return TokenId(last_positive); // u landed in rounding slack past the last entry
}

TokenId argmax_token(const PosteriorRow& row) {
    int best = 0;
    for (size_t v = 1; v < row.probs.size(); ++v)
        if (row.probs[v] > row.probs[size_t(best)])
            best = int(v);
    return TokenId(best);
}

namespace {

template <class Seqs>
int common_length(const Seqs& seqs, const char* who) {
    if (seqs.empty())
        throw std::invalid_argument(std::string(who) + ": empty support");
    return seqs.front().length();
}

} // namespace

ExplicitDist::ExplicitDist(Vocab vocab, std::vector<std::pair<MaskedSeq, double>> support)
    : vocab_(vocab), support_(std::move(support)) {
    if (support_.empty())
        throw std::invalid_argument("ExplicitDist: empty support");
    length_ = support_.front().first.length();
    KahanSum total;
    for (const auto& [seq, w] : support_) {
        if (seq.length() != length_)
            throw std::invalid_argument("ExplicitDist: support elements differ in length");
        if (!seq.fully_clean())
            throw std::invalid_argument("ExplicitDist: support element contains a mask");
        if (!(w >= 0.0) || !std::isfinite(w))
            throw std::invalid_argument("ExplicitDist: negative or non-finite weight");
        total.add(w);
    }
    if (std::abs(total.value() - 1.0) > 1e-12)
        throw std::invalid_argument("ExplicitDist: weights sum to " +
                                    format_double(total.value()) + ", expected 1");
    cdf_.reserve(support_.size());
    double run = 0.0;
    for (const auto& [seq, w] : support_) {
        run += w;
        cdf_.push_back(run);
    }
    cdf_.back() = 1.0;
}

const MaskedSeq& ExplicitDist::sample(Rng& rng) const {
    double u = rng.uniform01();
    size_t idx = size_t(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
    if (idx >= support_.size())
        idx = support_.size() - 1;
    return support_[idx].first;
}

double ExplicitDist::prob_of(const MaskedSeq& x) const {
    KahanSum s;
    for (const auto& [seq, w] : support_)
        if (seq == x)
            s.add(w);
    return s.value();
}

EmpiricalDist::EmpiricalDist(Vocab vocab, std::vector<MaskedSeq> dataset)
    : vocab_(vocab), dataset_(std::move(dataset)) {
    length_ = common_length(dataset_, "EmpiricalDist");
    for (const auto& seq : dataset_) {
        if (seq.length() != length_)
            throw std::invalid_argument("EmpiricalDist: sequences differ in length");
        if (!seq.fully_clean())
            throw std::invalid_argument("EmpiricalDist: dataset sequence contains a mask");
    }
}

const MaskedSeq& EmpiricalDist::sample(Rng& rng) const {
    return dataset_[rng.uniform_below(dataset_.size())];
}

ExplicitDist EmpiricalDist::to_explicit() const {
    std::map<std::vector<TokenId>, int64_t> counts;
    for (const auto& seq : dataset_)
        counts[seq.tokens()]++;
    std::vector<std::pair<MaskedSeq, double>> support;
    support.reserve(counts.size());
    for (const auto& [tokens, c] : counts)
        support.emplace_back(MaskedSeq(vocab_, tokens), double(c) / double(dataset_.size()));
    return ExplicitDist(vocab_, std::move(support));
}

const ExplicitDist& DataDistribution::as_explicit() const {
    if (!is_explicit())
        throw std::logic_error("DataDistribution: not an explicit distribution");
    return std::get<ExplicitDist>(impl_);
}

const EmpiricalDist& DataDistribution::as_empirical() const {
    if (is_explicit())
        throw std::logic_error("DataDistribution: not an empirical distribution");
    return std::get<EmpiricalDist>(impl_);
}

ExplicitDist DataDistribution::oracle_view() const {
    if (is_explicit())
        return as_explicit();
    return as_empirical().to_explicit();
}

const Vocab& DataDistribution::vocab() const {
    return is_explicit() ? as_explicit().vocab() : as_empirical().vocab();
}

int DataDistribution::length() const {
    return is_explicit() ? as_explicit().length() : as_empirical().length();
}

const MaskedSeq& DataDistribution::sample(Rng& rng) const {
    return is_explicit() ? as_explicit().sample(rng) : as_empirical().sample(rng);
}

namespace {

bool compatible(const MaskedSeq& x, const MaskedSeq& z) {
    for (int i = 0; i < z.length(); ++i)
        if (!z.is_masked(i) && x.at(i) != z.at(i))
            return false;
    return true;
}

} // namespace

PosteriorRow oracle_posterior(const ExplicitDist& d, const MaskedSeq& z, int pos) {
    if (pos < 0 || pos >= z.length())
        throw std::out_of_range("oracle_posterior: position out of range");
    if (!z.is_masked(pos))
        throw std::invalid_argument("oracle_posterior: position must be masked");
    if (z.length() != d.length())
        throw std::invalid_argument("oracle_posterior: length mismatch with distribution");

    std::vector<KahanSum> per_token(size_t(d.vocab().size));
    KahanSum total;
    for (const auto& [x, w] : d.support()) {
        if (w <= 0.0 || !compatible(x, z))
            continue;
        per_token[size_t(x.at(pos))].add(w);
        total.add(w);
    }
    if (total.value() <= 0.0)
        throw UnreachableStateError("oracle_posterior: unreachable state " + format_seq(z));

    PosteriorRow row;
    row.probs.resize(per_token.size());
    for (size_t v = 0; v < per_token.size(); ++v)
        row.probs[v] = per_token[v].value() / total.value();
    row.validate();
    return row;
}

double oracle_quality(const ExplicitDist& d, const MaskedSeq& y, int pos) {
    if (pos < 0 || pos >= y.length())
        throw std::out_of_range("oracle_quality: position out of range");
    if (y.is_masked(pos))
        throw std::invalid_argument("oracle_quality: position must hold a clean token");
    PosteriorRow row = oracle_posterior(d, mask_at(y, MaskSet{pos}), pos);
    return row.probs[size_t(y.at(pos))];
}

double MaskSetDistribution::prob_of(const MaskSet& s) const {
    for (const auto& [set, p] : entries)
        if (set == s)
            return p;
    return 0.0;
}

double oracle_extended_quality(const ExplicitDist& d, const MaskedSeq& y, int pos,
                               const MaskSetDistribution& mask_set_posterior) {
    if (y.is_masked(pos))
        throw std::invalid_argument("oracle_extended_quality: position must hold a clean token");
    KahanSum total_p, value;
    for (const auto& [set, p] : mask_set_posterior.entries) {
        if (!set.contains(pos))
            throw std::invalid_argument(
                "oracle_extended_quality: mask set in support does not contain the position");
        PosteriorRow row = oracle_posterior(d, mask_at(y, set), pos);
        value.add(p * row.probs[size_t(y.at(pos))]);
        total_p.add(p);
    }
    if (std::abs(total_p.value() - 1.0) > 1e-9)
        throw std::invalid_argument("oracle_extended_quality: mask-set probabilities sum to " +
                                    format_double(total_p.value()));
    return value.value();
}

SelectRule parse_select_rule(const std::string& name) {
    if (name == "uniform")
        return SelectRule::uniform;
    if (name == "confidence")
        return SelectRule::confidence;
    throw ConfigError("unknown selection rule '" + name + "' (expected uniform|confidence)");
}

namespace {

// Lexicographic combinations of k items out of items.size().
void for_each_combination(const std::vector<int>& items, int k,
                          const std::function<void(const std::vector<int>&)>& fn) {
    const int n = int(items.size());
    if (k > n || k < 0)
        return;
    std::vector<int> pick(static_cast<size_t>(k));
    std::vector<int> cursor(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
        cursor[size_t(i)] = i;
    while (true) {
        for (int i = 0; i < k; ++i)
            pick[size_t(i)] = items[size_t(cursor[size_t(i)])];
        fn(pick);
        int i = k - 1;
        while (i >= 0 && cursor[size_t(i)] == n - k + i)
            --i;
        if (i < 0)
            break;
        cursor[size_t(i)]++;
        for (int j = i + 1; j < k; ++j)
            cursor[size_t(j)] = cursor[size_t(j - 1)] + 1;
    }
}

double binom_coeff(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i)
        r *= double(n - k + i) / double(i);
    return r;
}

struct PendingState {
    KahanSum reach;
    std::map<std::vector<int>, KahanSum> per_set;
};

} // namespace

const ReachableQuality* FinetuneJoint::find(const MaskedSeq& y, int pos) const {
    for (const auto& st : states)
        if (st.pos == pos && st.y == y)
            return &st;
    return nullptr;
}

FinetuneJoint enumerate_finetune_joint(const ExplicitDist& d, const PosteriorFn& posterior_fn,
                                       SelectRule rule, int k, double nucleus_p, int64_t op_cap) {
    const int len = d.length();
    const int n_tokens = d.vocab().size;
    if (k < 1 || k > len)
        throw std::invalid_argument("enumerate_finetune_joint: k must lie in [1, L]");

    // elementary-operation estimate: support x sum_n C(L,n) * sets(n,k) * |V|^k
    double ops = 0.0;
    for (int n = k; n <= len; ++n) {
        double sets = rule == SelectRule::uniform ? binom_coeff(n, k) : 1.0;
        ops += binom_coeff(len, n) * sets * std::pow(double(n_tokens), k);
    }
    ops *= double(d.support().size());
    if (ops > double(op_cap))
        throw EnumerationCapError("enumeration infeasible: estimated " + format_double(ops) +
                                  " elementary operations exceeds cap " + std::to_string(op_cap));

    std::vector<int> all_positions(static_cast<size_t>(len));
    std::iota(all_positions.begin(), all_positions.end(), 0);

    // masking law conditioned on n >= k (the resample rule)
    const double p_count = 1.0 / double(len - k + 1);

    std::map<std::pair<std::vector<TokenId>, int>, PendingState> acc;

    for (const auto& [x, w] : d.support()) {
        if (w <= 0.0)
            continue;
        for (int n = k; n <= len; ++n) {
            const double p_pattern = p_count / binom_coeff(len, n);
            for_each_combination(all_positions, n, [&](const std::vector<int>& masked_idx) {
                MaskSet masked(masked_idx);
                MaskedSeq z = mask_at(x, masked);
                std::vector<PosteriorRow> rows = posterior_fn(z);
                std::vector<PosteriorRow> trunc(rows.size());
                for (int i : masked_idx)
                    trunc[size_t(i)] = nucleus_truncate(rows[size_t(i)], nucleus_p);

                auto expand_tokens = [&](const std::vector<int>& unmask_set, double p_set) {
                    // cartesian product of positive-probability tokens on the set
                    std::vector<TokenId> choice(unmask_set.size(), 0);
                    std::function<void(size_t, double)> rec = [&](size_t depth, double p_tok) {
                        if (depth == unmask_set.size()) {
                            std::vector<TokenId> y_tokens = z.tokens();
                            for (size_t j = 0; j < unmask_set.size(); ++j)
                                y_tokens[size_t(unmask_set[j])] = choice[j];
                            double p_path = w * p_pattern * p_set * p_tok / double(k);
                            for (int i : unmask_set) {
                                auto& st = acc[{y_tokens, i}];
                                st.reach.add(p_path);
                                st.per_set[unmask_set].add(p_path);
                            }
                            return;
                        }
                        const auto& row = trunc[size_t(unmask_set[depth])];
                        for (size_t v = 0; v < row.probs.size(); ++v) {
                            if (row.probs[v] <= 0.0)
                                continue;
                            choice[depth] = TokenId(v);
                            rec(depth + 1, p_tok * row.probs[v]);
                        }
                    };
                    rec(0, 1.0);
                };

                if (rule == SelectRule::uniform) {
                    const double p_set = 1.0 / binom_coeff(n, k);
                    for_each_combination(masked_idx, k,
                                         [&](const std::vector<int>& s) { expand_tokens(s, p_set); });
                } else {
                    // top-k masked positions by max posterior probability,
                    // ties broken toward the lower index
                    std::vector<int> order = masked_idx;
                    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                        double ma = *std::max_element(rows[size_t(a)].probs.begin(),
                                                      rows[size_t(a)].probs.end());
                        double mb = *std::max_element(rows[size_t(b)].probs.begin(),
                                                      rows[size_t(b)].probs.end());
                        return ma > mb;
                    });
                    std::vector<int> s(order.begin(), order.begin() + k);
                    std::sort(s.begin(), s.end());
                    expand_tokens(s, 1.0);
                }
            });
        }
    }

    FinetuneJoint joint;
    joint.states.reserve(acc.size());
    for (auto& [key, pending] : acc) {
        ReachableQuality st;
        st.y = MaskedSeq(d.vocab(), key.first);
        st.pos = key.second;
        st.reach_prob = pending.reach.value();
        for (auto& [set_idx, mass] : pending.per_set)
            st.mask_set_posterior.entries.emplace_back(MaskSet(set_idx),
                                                       mass.value() / st.reach_prob);
        st.extended_quality =
            oracle_extended_quality(d, st.y, st.pos, st.mask_set_posterior);
        joint.states.push_back(std::move(st));
    }
    return joint;
}

MaskSetDistribution oracle_mask_set_posterior(const ExplicitDist& d,
                                              const PosteriorFn& posterior_fn, SelectRule rule,
                                              int k, const MaskedSeq& y, int pos,
                                              int64_t op_cap) {
    if (pos < 0 || pos >= y.length())
        throw std::out_of_range("oracle_mask_set_posterior: position out of range");
    if (y.is_masked(pos))
        throw std::invalid_argument(
            "oracle_mask_set_posterior: position must hold a clean token");
    FinetuneJoint joint = enumerate_finetune_joint(d, posterior_fn, rule, k, 1.0, op_cap);
    const ReachableQuality* st = joint.find(y, pos);
    if (!st)
        throw UnreachableStateError("oracle_mask_set_posterior: state (" + format_seq(y) + ", " +
                                    std::to_string(pos) + ") is unreachable");
    return st->mask_set_posterior;
}

ExplicitDist load_explicit(const std::string& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("load_explicit: cannot open " + path);
    std::vector<std::pair<MaskedSeq, double>> support;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::invalid_argument("load_explicit: missing tab separator in '" + line + "'");
        double w = std::stod(line.substr(0, tab));
        support.emplace_back(parse_seq(vocab, line.substr(tab + 1)), w);
    }
    return ExplicitDist(vocab, std::move(support));
}

void save_explicit(const std::string& path, const ExplicitDist& d) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("save_explicit: cannot open " + path);
    for (const auto& [seq, w] : d.support())
        out << format_double(w) << '\t' << format_seq(seq) << '\n';
}

EmpiricalDist load_empirical(const std::string& path, const Vocab& vocab) {
    return EmpiricalDist(vocab, read_seq_file(path, vocab));
}

} // namespace prism
