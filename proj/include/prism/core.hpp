#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace prism {

using TokenId = int32_t;

// Token alphabet plus the reserved mask sentinel. The sentinel lives one past
// the vocabulary (id == size), so posterior matrices are exactly |V| wide.
struct Vocab {
    int size = 0;

    Vocab() = default;
    explicit Vocab(int vocab_size);

    TokenId mask_id() const { return TokenId(size); }
    bool is_token(TokenId t) const { return t >= 0 && t < TokenId(size); }
    bool is_valid(TokenId t) const { return is_token(t) || t == mask_id(); }

    bool operator==(const Vocab&) const = default;
};

// Set of positions in [0, L). Stored sorted and deduplicated.
class MaskSet {
  public:
    MaskSet() = default;
    MaskSet(std::initializer_list<int> positions);
    explicit MaskSet(std::vector<int> positions);

    bool contains(int pos) const;
    int size() const { return int(indices_.size()); }
    bool empty() const { return indices_.empty(); }
    const std::vector<int>& indices() const { return indices_; }

    MaskSet united(const MaskSet& other) const;
    MaskSet minus(const MaskSet& other) const;

    bool operator==(const MaskSet&) const = default;

  private:
    std::vector<int> indices_; // sorted, unique
};

// Fixed-length sequence over a vocabulary where each slot is either a vocab
// token or the mask sentinel. Immutable value type: every editing operation
// returns a fresh sequence.
class MaskedSeq {
  public:
    MaskedSeq() = default;
    MaskedSeq(Vocab vocab, std::vector<TokenId> tokens);

    // All-mask sequence of the given length.
    static MaskedSeq all_masked(Vocab vocab, int length);

    int length() const { return int(tokens_.size()); }
    const Vocab& vocab() const { return vocab_; }
    TokenId at(int pos) const { return tokens_.at(size_t(pos)); }
    const std::vector<TokenId>& tokens() const { return tokens_; }

    bool is_masked(int pos) const { return at(pos) == vocab_.mask_id(); }
    bool fully_clean() const;
    bool fully_masked() const;

    MaskedSeq with_token(int pos, TokenId token) const;

    bool operator==(const MaskedSeq&) const = default;

  private:
    Vocab vocab_;
    std::vector<TokenId> tokens_;
};

// Copy of `seq` with every position in `s` replaced by the mask sentinel.
MaskedSeq mask_at(const MaskedSeq& seq, const MaskSet& s);

MaskSet masked_positions(const MaskedSeq& seq);
MaskSet clean_positions(const MaskedSeq& seq);

// Text form: space-separated integer ids, mask rendered as "_".
std::string format_seq(const MaskedSeq& seq);
MaskedSeq parse_seq(const Vocab& vocab, const std::string& line);

// One sequence per line.
void write_seq_file(const std::string& path, const std::vector<MaskedSeq>& seqs);
std::vector<MaskedSeq> read_seq_file(const std::string& path, const Vocab& vocab);

} // namespace prism
