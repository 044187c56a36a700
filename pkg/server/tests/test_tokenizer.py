from embedserver.tokenizer import count_tokens, tokenize, truncate, word_pieces


class TestPieces:
    def test_word_splits_into_four_char_chunks(self):
        assert word_pieces("hemoglobin") == ["hemo", "glob", "in"]
        assert word_pieces("abcd") == ["abcd"]
        assert word_pieces("a") == ["a"]

    def test_tokenize_flattens_words(self):
        assert tokenize("abcde fg") == ["abcd", "e", "fg"]
        assert tokenize("  padded   spacing  ") == ["padd", "ed", "spac", "ing"]

    def test_empty_and_whitespace_cost_nothing(self):
        assert count_tokens("") == 0
        assert count_tokens("   \t\n ") == 0

    def test_count_matches_ceil_rule(self):
        for text in ("word", "a b c", "abcde fg", "a" * 17, "xx yy zz"):
            expected = sum((len(w) + 3) // 4 for w in text.split())
            assert count_tokens(text) == expected, text

    def test_count_monotone_in_repeated_char_length(self):
        counts = [count_tokens("z" * n) for n in range(1, 40)]
        assert counts == sorted(counts)

    def test_truncate_keeps_budget_prefix(self):
        pieces = tokenize("aaaa bbbb cccc dddd")
        assert truncate(pieces, 2) == ["aaaa", "bbbb"]
        assert truncate(pieces, 0) == []
        assert truncate(pieces, 99) == pieces
