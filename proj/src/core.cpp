#include "prism/core.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prism {

Vocab::Vocab(int vocab_size) : size(vocab_size) {
    if (vocab_size < 2)
        throw std::invalid_argument("Vocab: size must be at least 2, got " +
                                    std::to_string(vocab_size));
}

MaskSet::MaskSet(std::initializer_list<int> positions) : MaskSet(std::vector<int>(positions)) {}

MaskSet::MaskSet(std::vector<int> positions) : indices_(std::move(positions)) {
    std::sort(indices_.begin(), indices_.end());
    indices_.erase(std::unique(indices_.begin(), indices_.end()), indices_.end());
    if (!indices_.empty() && indices_.front() < 0)
        throw std::out_of_range("MaskSet: negative position");
}

bool MaskSet::contains(int pos) const {
    return std::binary_search(indices_.begin(), indices_.end(), pos);
}

MaskSet MaskSet::united(const MaskSet& other) const {
    std::vector<int> merged;
    merged.reserve(indices_.size() + other.indices_.size());
    std::set_union(indices_.begin(), indices_.end(), other.indices_.begin(), other.indices_.end(),
                   std::back_inserter(merged));
    MaskSet out;
    out.indices_ = std::move(merged);
    return out;
}

MaskSet MaskSet::minus(const MaskSet& other) const {
    std::vector<int> diff;
    std::set_difference(indices_.begin(), indices_.end(), other.indices_.begin(),
                        other.indices_.end(), std::back_inserter(diff));
    MaskSet out;
    out.indices_ = std::move(diff);
    return out;
}

MaskedSeq::MaskedSeq(Vocab vocab, std::vector<TokenId> tokens)
    : vocab_(vocab), tokens_(std::move(tokens)) {
    for (TokenId t : tokens_)
        if (!vocab_.is_valid(t))
            throw std::invalid_argument("MaskedSeq: token id " + std::to_string(t) +
                                        " outside vocabulary of size " +
                                        std::to_string(vocab_.size));
}

MaskedSeq MaskedSeq::all_masked(Vocab vocab, int length) {
    return MaskedSeq(vocab, std::vector<TokenId>(size_t(length), vocab.mask_id()));
}

bool MaskedSeq::fully_clean() const {
    return std::none_of(tokens_.begin(), tokens_.end(),
                        [&](TokenId t) { return t == vocab_.mask_id(); });
}

bool MaskedSeq::fully_masked() const {
    return std::all_of(tokens_.begin(), tokens_.end(),
                       [&](TokenId t) { return t == vocab_.mask_id(); });
}

MaskedSeq MaskedSeq::with_token(int pos, TokenId token) const {
    if (pos < 0 || pos >= length())
        throw std::out_of_range("MaskedSeq::with_token: position out of range");
    MaskedSeq out = *this;
    out.tokens_[size_t(pos)] = token;
    if (!vocab_.is_valid(token))
        throw std::invalid_argument("MaskedSeq::with_token: invalid token id");
    return out;
}

MaskedSeq mask_at(const MaskedSeq& seq, const MaskSet& s) {
    if (!s.empty() && s.indices().back() >= seq.length())
        throw std::out_of_range("mask_at: position " + std::to_string(s.indices().back()) +
                                " out of range for length " + std::to_string(seq.length()));
    std::vector<TokenId> tokens = seq.tokens();
    for (int pos : s.indices())
        tokens[size_t(pos)] = seq.vocab().mask_id();
    return MaskedSeq(seq.vocab(), std::move(tokens));
}

MaskSet masked_positions(const MaskedSeq& seq) {
    std::vector<int> idx;
    for (int i = 0; i < seq.length(); ++i)
        if (seq.is_masked(i))
            idx.push_back(i);
    return MaskSet(std::move(idx));
}

MaskSet clean_positions(const MaskedSeq& seq) {
    std::vector<int> idx;
    for (int i = 0; i < seq.length(); ++i)
        if (!seq.is_masked(i))
            idx.push_back(i);
    return MaskSet(std::move(idx));
}

std::string format_seq(const MaskedSeq& seq) {
    std::string out;
    for (int i = 0; i < seq.length(); ++i) {
        if (i)
            out += ' ';
        if (seq.is_masked(i))
            out += '_';
        else
            out += std::to_string(seq.at(i));
    }
    return out;
}

MaskedSeq parse_seq(const Vocab& vocab, const std::string& line) {
    std::istringstream in(line);
    std::vector<TokenId> tokens;
    std::string field;
    while (in >> field) {
        if (field == "_") {
            tokens.push_back(vocab.mask_id());
        } else {
            size_t used = 0;
            int v = std::stoi(field, &used);
            if (used != field.size())
                throw std::invalid_argument("parse_seq: bad token '" + field + "'");
            tokens.push_back(TokenId(v));
        }
    }
    if (tokens.empty())
        throw std::invalid_argument("parse_seq: empty line");
    return MaskedSeq(vocab, std::move(tokens));
}

void write_seq_file(const std::string& path, const std::vector<MaskedSeq>& seqs) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("write_seq_file: cannot open " + path);
    for (const auto& s : seqs)
        out << format_seq(s) << '\n';
}

std::vector<MaskedSeq> read_seq_file(const std::string& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("read_seq_file: cannot open " + path);
    std::vector<MaskedSeq> seqs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        seqs.push_back(parse_seq(vocab, line));
    }
    return seqs;
}

} // namespace prism
