#include "prism/sudoku.hpp"

#include <doctest.h>

#include <set>
#include <stdexcept>

using namespace prism;

TEST_CASE("the 4x4 space holds exactly 288 boards") {
    Rng rng(1);
    std::vector<Board> all = generate_boards(4, 288, rng);
    CHECK(all.size() == 288);
    std::set<std::vector<int>> distinct;
    for (const auto& b : all) {
        CHECK(is_valid(b));
        distinct.insert(b.cells);
    }
    CHECK(distinct.size() == 288);
    CHECK_THROWS_AS(generate_boards(4, 289, rng), std::invalid_argument);
}

TEST_CASE("generation is deterministic under the seed") {
    Rng a(42), b(42), c(43), d(42);
    CHECK(generate_boards(4, 20, a) == generate_boards(4, 20, b));
    CHECK(generate_boards(4, 20, d) != generate_boards(4, 20, c));
}

TEST_CASE("9x9 generation produces distinct valid boards") {
    Rng rng(3);
    std::vector<Board> boards = generate_boards(9, 20, rng);
    std::set<std::vector<int>> distinct;
    for (const auto& b : boards) {
        CHECK(is_valid(b));
        // every row is a permutation of 1..9
        for (int r = 0; r < 9; ++r) {
            std::set<int> row;
            for (int col = 0; col < 9; ++col)
                row.insert(b.at(r, col));
            CHECK(row.size() == 9);
        }
        distinct.insert(b.cells);
    }
    CHECK(distinct.size() == 20);
}

TEST_CASE("tokenization shape and round trip") {
    CHECK(sudoku_seq_len(4) == 19);
    CHECK(sudoku_vocab(4).size == 5);
    CHECK(sudoku_seq_len(9) == 89);
    CHECK(sudoku_vocab(9).size == 10);
    CHECK(sudoku_side_for(5, 19) == 4);
    CHECK(sudoku_side_for(10, 89) == 9);
    CHECK(sudoku_side_for(5, 18) == 0);

    Rng rng(7);
    for (const auto& b : generate_boards(4, 288, rng)) {
        MaskedSeq seq = tokenize(b);
        CHECK(seq.length() == 19);
        CHECK(detokenize(seq) == b);
    }
    Board nine = generate_boards(9, 1, rng)[0];
    CHECK(tokenize(nine).length() == 89);
    CHECK(detokenize(tokenize(nine)) == nine);
}

TEST_CASE("separators sit after each of the first rows") {
    Rng rng(11);
    Board b = generate_boards(4, 1, rng)[0];
    MaskedSeq seq = tokenize(b);
    for (int r = 0; r + 1 < 4; ++r)
        CHECK(seq.at(r * 5 + 4) == eol_token(4));
    CHECK(cell_token_pos(4, 0) == 0);
    CHECK(cell_token_pos(4, 4) == 5);  // second row starts past the separator
    CHECK(cell_token_pos(4, 15) == 18);
}

TEST_CASE("detokenize rejects structural damage") {
    Rng rng(13);
    Board b = generate_boards(4, 1, rng)[0];
    MaskedSeq seq = tokenize(b);

    MaskedSeq masked = mask_at(seq, MaskSet{0});
    CHECK_THROWS_AS(detokenize(masked), std::invalid_argument);

    MaskedSeq bad_sep = seq.with_token(4, TokenId(0)); // digit where a separator belongs
    CHECK_THROWS_AS(detokenize(bad_sep), std::invalid_argument);

    MaskedSeq sep_in_row = seq.with_token(0, eol_token(4));
    CHECK_THROWS_AS(detokenize(sep_in_row), std::invalid_argument);
}

TEST_CASE("validity and violations") {
    Rng rng(17);
    Board b = generate_boards(4, 1, rng)[0];
    CHECK(is_valid(b));
    CHECK(violations(b).empty());

    Board bad = b;
    bad.cells[1] = bad.cells[0]; // duplicate in row 0
    CHECK(!is_valid(bad));
    bool row0_flagged = false;
    for (const auto& v : violations(bad))
        if (v.unit == "row 0" && v.digit == bad.cells[0])
            row0_flagged = true;
    CHECK(row0_flagged);
}

TEST_CASE("random fills are almost never valid") {
    Rng rng(19);
    int valid = 0;
    const int n = 2000;
    for (int t = 0; t < n; ++t) {
        Board b{4, {}};
        for (int i = 0; i < 16; ++i)
            b.cells.push_back(1 + rng.uniform_int(4));
        valid += is_valid(b) ? 1 : 0;
    }
    CHECK(double(valid) / n < 0.01);
}

TEST_CASE("corruption replaces digits and always breaks a 4x4 board") {
    Rng rng(23);
    Board b = generate_boards(4, 1, rng)[0];

    auto [same, none] = corrupt(b, 0, rng);
    CHECK(same == b);
    CHECK(none.empty());

    for (int t = 0; t < 100; ++t) {
        auto [bad, cells] = corrupt(b, 3, rng);
        CHECK(cells.size() == 3);
        for (int cell : cells.indices())
            CHECK(bad.cells[size_t(cell)] != b.cells[size_t(cell)]);
        CHECK(!is_valid(bad));
    }

    // single-cell corruptions: exhaustive, every one invalidates the board
    for (int cell = 0; cell < 16; ++cell)
        for (int d = 1; d <= 4; ++d) {
            if (d == b.cells[size_t(cell)])
                continue;
            Board bad = b;
            bad.cells[size_t(cell)] = d;
            CHECK(!is_valid(bad));
        }
}

TEST_CASE("puzzles carry consistent clues and a conditioning view") {
    Rng rng(29);
    Board b = generate_boards(4, 1, rng)[0];
    Puzzle p = make_puzzle(b, 8, rng);
    CHECK(p.clues.size() == 8);
    for (int cell : p.clues.indices())
        CHECK(p.solution.cells[size_t(cell)] == b.cells[size_t(cell)]);

    MaskedSeq cond = puzzle_condition(p);
    CHECK(cond.length() == 19);
    for (int cell : p.clues.indices())
        CHECK(cond.at(cell_token_pos(4, cell)) == TokenId(b.cells[size_t(cell)] - 1));
    for (int r = 0; r + 1 < 4; ++r)
        CHECK(cond.at(r * 5 + 4) == eol_token(4));

    Puzzle full = make_puzzle(b, 16, rng);
    CHECK(full.unique_solution);
}

TEST_CASE("corpus files and manifest round trip") {
    Rng rng(31);
    std::vector<Board> boards = generate_boards(4, 12, rng);
    write_board_corpus("/tmp/prism_test_corpus.txt", boards);
    CHECK(read_board_corpus("/tmp/prism_test_corpus.txt", 4) == boards);

    CorpusManifest m{4, 10, 2, 77};
    write_manifest("/tmp/prism_test_manifest.json", m);
    CorpusManifest back = read_manifest("/tmp/prism_test_manifest.json");
    CHECK(back.side == 4);
    CHECK(back.train_count == 10);
    CHECK(back.eval_count == 2);
    CHECK(back.seed == 77);
}
