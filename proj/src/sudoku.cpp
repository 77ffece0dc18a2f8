#include "prism/sudoku.hpp"

#include "prism/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace prism {

namespace {

void require_side(int side) {
    if (side != 4 && side != 9)
        throw std::invalid_argument("sudoku: side must be 4 or 9");
}

// digits present exactly once per unit?
bool unit_ok(const Board& b, const std::vector<int>& cells) {
    uint32_t seen = 0;
    for (int idx : cells) {
        int d = b.cells[size_t(idx)];
        if (d < 1 || d > b.side)
            return false;
        uint32_t bit = uint32_t(1) << d;
        if (seen & bit)
            return false;
        seen |= bit;
    }
    return true;
}

std::vector<std::vector<int>> all_units(int side) {
    std::vector<std::vector<int>> units;
    for (int r = 0; r < side; ++r) {
        std::vector<int> u;
        for (int c = 0; c < side; ++c)
            u.push_back(r * side + c);
        units.push_back(std::move(u));
    }
    for (int c = 0; c < side; ++c) {
        std::vector<int> u;
        for (int r = 0; r < side; ++r)
            u.push_back(r * side + c);
        units.push_back(std::move(u));
    }
    int bs = side == 4 ? 2 : 3;
    for (int br = 0; br < side; br += bs)
        for (int bc = 0; bc < side; bc += bs) {
            std::vector<int> u;
            for (int r = 0; r < bs; ++r)
                for (int c = 0; c < bs; ++c)
                    u.push_back((br + r) * side + (bc + c));
            units.push_back(std::move(u));
        }
    return units;
}

std::string unit_name(int side, size_t unit_idx) {
    if (unit_idx < size_t(side))
        return "row " + std::to_string(unit_idx);
    if (unit_idx < size_t(2 * side))
        return "col " + std::to_string(unit_idx - size_t(side));
    return "box " + std::to_string(unit_idx - size_t(2 * side));
}

// candidate digits allowed at `cell` given the prefix fill
uint32_t allowed_digits(const std::vector<int>& cells, int side, int cell) {
    int r = cell / side, c = cell % side;
    int bs = side == 4 ? 2 : 3;
    uint32_t used = 0;
    for (int i = 0; i < c; ++i)
        used |= uint32_t(1) << cells[size_t(r * side + i)];
    for (int i = 0; i < r; ++i)
        used |= uint32_t(1) << cells[size_t(i * side + c)];
    int br = (r / bs) * bs, bc = (c / bs) * bs;
    for (int i = br; i <= r; ++i)
        for (int j = bc; j < bc + bs; ++j) {
            int idx = i * side + j;
            if (idx < cell)
                used |= uint32_t(1) << cells[size_t(idx)];
        }
    uint32_t all = ((uint32_t(1) << side) - 1) << 1;
    return all & ~used;
}

void enumerate_all(int side, int cell, std::vector<int>& cells, std::vector<Board>& out) {
    if (cell == side * side) {
        out.push_back(Board{side, cells});
        return;
    }
    uint32_t avail = allowed_digits(cells, side, cell);
    for (int d = 1; d <= side; ++d) {
        if (!(avail & (uint32_t(1) << d)))
            continue;
        cells[size_t(cell)] = d;
        enumerate_all(side, cell + 1, cells, out);
    }
    cells[size_t(cell)] = 0;
}

bool fill_random(int side, int cell, std::vector<int>& cells, Rng& rng) {
    if (cell == side * side)
        return true;
    uint32_t avail = allowed_digits(cells, side, cell);
    std::vector<int> digits;
    for (int d = 1; d <= side; ++d)
        if (avail & (uint32_t(1) << d))
            digits.push_back(d);
    rng.shuffle(digits);
    for (int d : digits) {
        cells[size_t(cell)] = d;
        if (fill_random(side, cell + 1, cells, rng))
            return true;
    }
    cells[size_t(cell)] = 0;
    return false;
}

// counts completions of a partially filled board, stopping at `cap`
int count_solutions(int side, int cell, std::vector<int>& cells, const std::vector<bool>& fixed,
                    int cap) {
    while (cell < side * side && fixed[size_t(cell)])
        ++cell;
    if (cell == side * side)
        return 1;
    uint32_t avail = allowed_digits(cells, side, cell);
    int total = 0;
    for (int d = 1; d <= side; ++d) {
        if (!(avail & (uint32_t(1) << d)))
            continue;
        cells[size_t(cell)] = d;
        total += count_solutions(side, cell + 1, cells, fixed, cap - total);
        cells[size_t(cell)] = 0;
        if (total >= cap)
            return total;
    }
    return total;
}

} // namespace

Vocab sudoku_vocab(int side) {
    require_side(side);
    return Vocab(side + 1);
}

int sudoku_seq_len(int side) {
    require_side(side);
    return side * side + side - 1;
}

TokenId eol_token(int side) {
    require_side(side);
    return TokenId(side);
}

int sudoku_side_for(int vocab_size, int seq_len) {
    for (int side : {4, 9})
        if (vocab_size == side + 1 && seq_len == sudoku_seq_len(side))
            return side;
    return 0;
}

int cell_token_pos(int side, int cell) {
    int r = cell / side, c = cell % side;
    return r * (side + 1) + c;
}

bool is_valid(const Board& board) {
    require_side(board.side);
    if (int(board.cells.size()) != board.side * board.side)
        return false;
    for (const auto& unit : all_units(board.side))
        if (!unit_ok(board, unit))
            return false;
    return true;
}

std::vector<Violation> violations(const Board& board) {
    require_side(board.side);
    std::vector<Violation> out;
    auto units = all_units(board.side);
    for (size_t ui = 0; ui < units.size(); ++ui) {
        std::vector<int> count(size_t(board.side) + 1, 0);
        for (int idx : units[ui]) {
            int d = board.cells[size_t(idx)];
            if (d >= 1 && d <= board.side)
                count[size_t(d)]++;
        }
        for (int d = 1; d <= board.side; ++d)
            if (count[size_t(d)] != 1)
                out.push_back(Violation{unit_name(board.side, ui), d});
    }
    return out;
}

std::vector<Board> generate_boards(int side, int count, Rng& rng) {
    require_side(side);
    if (count < 1)
        throw std::invalid_argument("generate_boards: count must be positive");

    if (side == 4) {
        std::vector<int> cells(16, 0);
        std::vector<Board> all;
        enumerate_all(4, 0, cells, all);
        if (count > int(all.size()))
            throw std::invalid_argument("generate_boards: only " + std::to_string(all.size()) +
                                        " distinct 4x4 boards exist, requested " +
                                        std::to_string(count));
        rng.shuffle(all);
        all.resize(size_t(count));
        return all;
    }

    std::set<std::vector<int>> seen;
    std::vector<Board> out;
    int64_t attempts = 0;
    const int64_t max_attempts = int64_t(count) * 64 + 4096;
    while (int(out.size()) < count) {
        if (++attempts > max_attempts)
            throw std::runtime_error("generate_boards: attempt budget exhausted");
        std::vector<int> cells(81, 0);
        if (!fill_random(9, 0, cells, rng))
            continue;
        if (seen.insert(cells).second)
            out.push_back(Board{9, cells});
    }
    return out;
}

MaskedSeq tokenize(const Board& board) {
    require_side(board.side);
    if (int(board.cells.size()) != board.side * board.side)
        throw std::invalid_argument("tokenize: board cell count mismatch");
    Vocab vocab = sudoku_vocab(board.side);
    std::vector<TokenId> tokens;
    tokens.reserve(size_t(sudoku_seq_len(board.side)));
    for (int r = 0; r < board.side; ++r) {
        for (int c = 0; c < board.side; ++c) {
            int d = board.at(r, c);
            if (d < 1 || d > board.side)
                throw std::invalid_argument("tokenize: digit out of range");
            tokens.push_back(TokenId(d - 1));
        }
        if (r + 1 < board.side)
            tokens.push_back(eol_token(board.side));
    }
    return MaskedSeq(vocab, std::move(tokens));
}

Board detokenize(const MaskedSeq& seq) {
    int side = sudoku_side_for(seq.vocab().size, seq.length());
    if (side == 0)
        throw std::invalid_argument("detokenize: sequence shape is not a sudoku tokenization");
    Board board{side, std::vector<int>(size_t(side) * size_t(side), 0)};
    int pos = 0;
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c, ++pos) {
            if (seq.is_masked(pos))
                throw std::invalid_argument("detokenize: masked cell at position " +
                                            std::to_string(pos));
            TokenId t = seq.at(pos);
            if (t == eol_token(side))
                throw std::invalid_argument("detokenize: separator inside a row at position " +
                                            std::to_string(pos));
            board.cells[size_t(r * side + c)] = int(t) + 1;
        }
        if (r + 1 < side) {
            if (seq.is_masked(pos) || seq.at(pos) != eol_token(side))
                throw std::invalid_argument("detokenize: expected separator at position " +
                                            std::to_string(pos));
            ++pos;
        }
    }
    return board;
}

std::pair<Board, MaskSet> corrupt(const Board& board, int count, Rng& rng) {
    require_side(board.side);
    const int n_cells = board.side * board.side;
    if (count < 0 || count > n_cells)
        throw std::invalid_argument("corrupt: count out of range");
    Board out = board;
    std::vector<int> cells = rng.sample_indices(n_cells, count);
    for (int cell : cells) {
        int original = board.cells[size_t(cell)];
        int offset = 1 + rng.uniform_int(board.side - 1);
        out.cells[size_t(cell)] = 1 + (original - 1 + offset) % board.side;
    }
    return {out, MaskSet(std::move(cells))};
}

Puzzle make_puzzle(const Board& board, int n_clues, Rng& rng) {
    require_side(board.side);
    const int n_cells = board.side * board.side;
    if (n_clues < 0 || n_clues > n_cells)
        throw std::invalid_argument("make_puzzle: clue count out of range");
    Puzzle p;
    p.solution = board;
    p.clues = MaskSet(rng.sample_indices(n_cells, n_clues));

    std::vector<bool> fixed(size_t(n_cells), false);
    std::vector<int> cells(size_t(n_cells), 0);
    for (int cell : p.clues.indices()) {
        fixed[size_t(cell)] = true;
        cells[size_t(cell)] = board.cells[size_t(cell)];
    }
    p.unique_solution = count_solutions(board.side, 0, cells, fixed, 2) == 1;
    return p;
}

MaskedSeq puzzle_condition(const Puzzle& puzzle) {
    const int side = puzzle.solution.side;
    MaskedSeq cond = MaskedSeq::all_masked(sudoku_vocab(side), sudoku_seq_len(side));
    for (int cell : puzzle.clues.indices())
        cond = cond.with_token(cell_token_pos(side, cell),
                               TokenId(puzzle.solution.cells[size_t(cell)] - 1));
    for (int r = 0; r + 1 < side; ++r)
        cond = cond.with_token(r * (side + 1) + side, eol_token(side));
    return cond;
}

void write_board_corpus(const std::string& path, const std::vector<Board>& boards) {
    std::vector<MaskedSeq> seqs;
    seqs.reserve(boards.size());
    for (const auto& b : boards)
        seqs.push_back(tokenize(b));
    write_seq_file(path, seqs);
}

std::vector<Board> read_board_corpus(const std::string& path, int side) {
    require_side(side);
    std::vector<MaskedSeq> seqs = read_seq_file(path, sudoku_vocab(side));
    std::vector<Board> boards;
    boards.reserve(seqs.size());
    for (const auto& s : seqs)
        boards.push_back(detokenize(s));
    return boards;
}

void write_manifest(const std::string& path, const CorpusManifest& manifest) {
    nlohmann::json j;
    j["side"] = manifest.side;
    j["train_count"] = manifest.train_count;
    j["eval_count"] = manifest.eval_count;
    j["seed"] = manifest.seed;
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("write_manifest: cannot open " + path);
    out << j.dump(2) << '\n';
}

CorpusManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("read_manifest: cannot open " + path);
    nlohmann::json j;
    in >> j;
    CorpusManifest m;
    m.side = j.at("side").get<int>();
    m.train_count = j.at("train_count").get<int>();
    m.eval_count = j.at("eval_count").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    return m;
}

} // namespace prism
