#pragma once

#include "prism/core.hpp"
#include "prism/rng.hpp"

#include <string>
#include <utility>
#include <vector>

namespace prism {

// Complete side x side grid, row-major, digits in [1, side].
struct Board {
    int side = 4;
    std::vector<int> cells;

    int at(int row, int col) const { return cells[size_t(row * side + col)]; }
    int box_side() const { return side == 4 ? 2 : 3; }

    bool operator==(const Board&) const = default;
};

// Digits map to ids [0, side); the end-of-line separator is id `side`.
Vocab sudoku_vocab(int side);
int sudoku_seq_len(int side); // side^2 cells + (side - 1) separators
TokenId eol_token(int side);
// side for a (vocab, seq_len) pair, or 0 when the shape is not a sudoku task
int sudoku_side_for(int vocab_size, int seq_len);
// token position of a cell index in [0, side^2)
int cell_token_pos(int side, int cell);

bool is_valid(const Board& board);

struct Violation {
    std::string unit; // "row 2", "col 0", "box 1"
    int digit = 0;
};
std::vector<Violation> violations(const Board& board);

// Complete valid boards, deduplicated, deterministic under seed. side 4
// enumerates the full space (288 boards) and subsamples; side 9 uses
// randomized backtracking per board. Errors when count exceeds the space.
std::vector<Board> generate_boards(int side, int count, Rng& rng);

// Row-major cells with a separator after each of the first side-1 rows.
MaskedSeq tokenize(const Board& board);
// Validates separator placement and digit range; throws on structure errors.
Board detokenize(const MaskedSeq& seq);

// Replaces `count` distinct cells with a different digit each. Returns the
// corrupted board and the ground-truth set of corrupted cell indices.
std::pair<Board, MaskSet> corrupt(const Board& board, int count, Rng& rng);

struct Puzzle {
    Board solution;
    MaskSet clues; // cell indices revealed at inference
    bool unique_solution = false;
};

Puzzle make_puzzle(const Board& board, int n_clues, Rng& rng);

// Conditioning sequence for the frozen-position mechanism: clue cells and all
// separators placed, everything else masked.
MaskedSeq puzzle_condition(const Puzzle& puzzle);

// Corpus files hold one tokenized board per line; the manifest records the
// split sizes and generator seed.
void write_board_corpus(const std::string& path, const std::vector<Board>& boards);
std::vector<Board> read_board_corpus(const std::string& path, int side);

struct CorpusManifest {
    int side = 4;
    int train_count = 0;
    int eval_count = 0;
    uint64_t seed = 0;
};
void write_manifest(const std::string& path, const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::string& path);

} // namespace prism
