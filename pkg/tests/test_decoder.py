"""Grammar, wordnet, joint decoding, and scoring checks."""

import math

import numpy as np
import pytest

from facspeech import acoustic as ac
from facspeech import decoder as dec
from facspeech import jointlik as jl
from facspeech import verify
from facspeech.errors import DecodeFailure, GrammarParseError, LexiconError

# the task grammar as published: alternation and sequencing only
TASK_GRAMMAR = """\
$command = bin | lay | place | set;
$color = blue | green | red;
$preposition = at | by | in | with;
$letter = a | b | c | d | e | f | g | h | i | j | k | l | m | n | o | p | q | r | s | t | u | v | x | y | z;
$number = one | two | three | four | five | six | seven | eight | nine | zero;
$adverb = again | now | please | soon;

(sil $command $color $preposition $letter $number $adverb sil)
"""


class TestParseGrammar:
    def test_task_grammar_shape(self):
        g = dec.parse_grammar(TASK_GRAMMAR)
        assert len(g.variables) == 6
        # the letter inventory drops "w" (it collides with the color slot)
        letters = [" ".join(a) for a in g.variables["letter"]]
        assert len(letters) == 25
        assert "w" not in letters
        assert g.sentence == ["sil", "$command", "$color", "$preposition",
                              "$letter", "$number", "$adverb", "sil"]
        assert g.path_count() == 4 * 3 * 4 * 25 * 10 * 4

    def test_single_word_sentence(self):
        g = dec.parse_grammar("(hello)")
        assert g.sentence == ["hello"]
        net = dec.build_wordnet(g, {"hello": ["h"]})
        assert net.path_count() == 1

    def test_malformed_definition(self):
        with pytest.raises(GrammarParseError):
            dec.parse_grammar("$x = ;\n($x)")

    def test_undefined_variable(self):
        with pytest.raises(GrammarParseError):
            dec.parse_grammar("($ghost)")

    def test_repetition_syntax_rejected(self):
        with pytest.raises(GrammarParseError) as err:
            dec.parse_grammar("$x = a;\n(<$x>)")
        assert err.value.line == 2

    def test_cycle_detection(self):
        with pytest.raises(GrammarParseError):
            dec.parse_grammar("$a = $b;\n$b = $a;\n($a)")

    def test_nested_variable_expansion(self):
        g = dec.parse_grammar("$digit = one | two;\n$num = $digit | zero;\n($num)")
        alts = {" ".join(a) for a in g.variables["num"]}
        assert alts == {"one", "two", "zero"}

    def test_multiline_definition(self):
        g = dec.parse_grammar("$x = a |\n b;\n($x)")
        assert len(g.variables["x"]) == 2

    def test_error_carries_location(self):
        with pytest.raises(GrammarParseError) as err:
            dec.parse_grammar("$ok = a;\nbogus line\n($ok)")
        assert err.value.line == 2


class TestBuildWordnet:
    def _grammar(self):
        return dec.parse_grammar(
            "$color = blue | green | red | white;\n($color $color)")

    def test_target_override_single_node(self):
        g = self._grammar()
        lex = {c: [f"p{i}"] for i, c in enumerate("blue green red white".split())}
        net = dec.build_wordnet(g, lex, {"color": ["white"]})
        assert all(len(layer) == 1 for layer in net.layers)
        assert net.nodes[0].word == "white"

    def test_masker_override_three_nodes(self):
        g = self._grammar()
        lex = {c: [f"p{i}"] for i, c in enumerate("blue green red white".split())}
        net = dec.build_wordnet(g, lex, {"color": ["blue", "red", "green"]})
        assert all(len(layer) == 3 for layer in net.layers)
        assert net.path_count() == 9

    def test_path_count_product(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            counts = rng.integers(1, 5, size=int(rng.integers(2, 5)))
            variables = {}
            lexicon = {}
            sentence = []
            w = 0
            for i, k in enumerate(counts):
                words = []
                for _ in range(k):
                    word = f"w{w}"
                    w += 1
                    lexicon[word] = ["q0"]
                    words.append([word])
                variables[f"v{i}"] = words
                sentence.append(f"$v{i}")
            g = dec.Grammar(variables, sentence)
            net = dec.build_wordnet(g, lexicon)
            assert net.path_count() == math.prod(int(c) for c in counts)

    def test_missing_lexicon_entry(self):
        g = self._grammar()
        with pytest.raises(LexiconError):
            dec.build_wordnet(g, {"blue": ["p0"]})

    def test_multiword_alternative_concatenates_phones(self):
        g = dec.parse_grammar("$num = twenty one | five;\n($num)")
        lex = {"twenty": ["t", "w"], "one": ["o"], "five": ["f"]}
        net = dec.build_wordnet(g, lex)
        by_word = {n.word: n for n in net.nodes}
        assert by_word["twenty one"].phones == ["t", "w", "o"]


def _uniform_model(phones, self_loop=0.6):
    states = [ac.GmmState(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
              for _ in phones]
    return ac.GmmHmmSet(list(phones), states,
                        np.full(len(phones), self_loop),
                        np.full(len(phones), 1.0 / len(phones)), 2,
                        np.zeros(2))


class TestJointDecode:
    def test_single_word_score_formula(self):
        g = dec.parse_grammar("(only)")
        net = dec.build_wordnet(g, {"only": ["q0"]})
        model = _uniform_model(["q0"], self_loop=0.7)
        rng = np.random.default_rng(1)
        T = 9
        vals = rng.random((T, 1, 1)) + 0.1
        tensor = jl.JointStateTensor(vals, "posterior")
        res = dec.joint_decode(tensor, net, net, (model, model))
        # T-1 frame boundaries, each a self-loop on both chains
        expect = float(np.log(vals[:, 0, 0]).sum()) \
            + 2 * (T - 1) * math.log(0.7)
        assert res.log_score == pytest.approx(expect, abs=1e-10)
        assert res.words_a == ["only"]
        assert res.words_b == ["only"]
        assert len(res.frame_state_path) == T

    def test_matches_bruteforce_enumeration(self):
        rng = np.random.default_rng(2)
        for _ in range(12):
            tensor, net, model = verify.random_toy_instance(rng)
            ref = verify.brute_force_joint_decode(tensor, net, net,
                                                  (model, model))
            res = dec.joint_decode(tensor, net, net, (model, model))
            assert res.log_score == pytest.approx(ref[0], abs=1e-9)
            assert res.words_a == ref[1]
            assert res.words_b == ref[2]

    def test_transposition_symmetry(self):
        rng = np.random.default_rng(3)
        tensor, net, model = verify.random_toy_instance(rng)
        res = dec.joint_decode(tensor, net, net, (model, model))
        flipped = jl.JointStateTensor(
            np.ascontiguousarray(tensor.values.transpose(0, 2, 1)),
            tensor.scale)
        mirrored = dec.joint_decode(flipped, net, net, (model, model))
        assert mirrored.words_a == res.words_b
        assert mirrored.words_b == res.words_a
        assert mirrored.log_score == pytest.approx(res.log_score, abs=1e-9)

    def test_beam_monotone(self):
        rng = np.random.default_rng(4)
        tensor, net, model = verify.random_toy_instance(rng)
        scores = []
        for beam in (1, 2, 8, 64, None):
            try:
                scores.append(dec.joint_decode(tensor, net, net,
                                               (model, model), beam).log_score)
            except DecodeFailure:
                scores.append(-np.inf)
        assert all(b >= a - 1e-12 for a, b in zip(scores[:-1], scores[1:]))

    def test_score_invariant_to_per_frame_scaling(self):
        rng = np.random.default_rng(5)
        tensor, net, model = verify.random_toy_instance(rng)
        res = dec.joint_decode(tensor, net, net, (model, model))
        scales = rng.uniform(0.2, 5.0, size=tensor.shape[0])
        scaled = jl.JointStateTensor(
            tensor.values * scales[:, None, None], "posterior")
        res2 = dec.joint_decode(scaled, net, net, (model, model))
        assert res2.words_a == res.words_a
        assert res2.words_b == res.words_b

    def test_greedy_beam_can_fail(self):
        g = dec.parse_grammar("$a = first;\n$b = second;\n($a $b)")
        net = dec.build_wordnet(g, {"first": ["q0"], "second": ["q1"]})
        model = _uniform_model(["q0", "q1"])
        T = 5
        vals = np.full((T, 2, 2), 1e-6)
        vals[:, 0, 0] = 1.0  # staying in the first word always looks best
        tensor = jl.JointStateTensor(vals, "log_likelihood")
        with pytest.raises(DecodeFailure):
            dec.joint_decode(tensor, net, net, (model, model), beam=1)
        # exact decoding still finds the forced word change
        res = dec.joint_decode(tensor, net, net, (model, model))
        assert res.words_a == ["first", "second"]

    def test_dimension_mismatch_rejected(self):
        g = dec.parse_grammar("(one)")
        net = dec.build_wordnet(g, {"one": ["q0"]})
        model = _uniform_model(["q0", "q1"])
        tensor = jl.JointStateTensor(np.zeros((3, 1, 1)), "log_likelihood")
        with pytest.raises(ValueError):
            dec.joint_decode(tensor, net, net, (model, model))

    def test_single_chain_equals_degenerate_joint(self):
        g = dec.parse_grammar("$w = left | right;\n($w $w)")
        net = dec.build_wordnet(g, {"left": ["q0"], "right": ["q1"]})
        model = _uniform_model(["q0", "q1"])
        rng = np.random.default_rng(6)
        T = 7
        ll = np.log(rng.random((T, 2)) + 0.05)
        res = dec.decode_single_chain(ll, net, model)
        # independent check: enumerate single-chain paths directly
        paths = verify.enumerate_chain_paths(net, model, T)
        best = max(lp + ll[np.arange(T), states].sum()
                   for states, _, lp in paths)
        assert res.log_score == pytest.approx(best, abs=1e-9)


class TestScoreTask:
    def _grammar(self):
        return dec.parse_grammar(
            "$letter = a | b;\n$number = one | two;\n($letter $number)")

    def _result(self, words):
        return dec.DecodeResult(list(words), [], 0.0, [])

    def test_all_correct(self):
        g = self._grammar()
        res = [self._result(["a", "one"]), self._result(["b", "two"])]
        truth = [["a", "one"], ["b", "two"]]
        out = dec.score_task(res, truth, g)
        assert out == {"letter_acc": 100.0, "number_acc": 100.0,
                       "combined_acc": 100.0, "both_correct": 100.0}

    def test_half_right_definition(self):
        g = self._grammar()
        res = [self._result(["a", "two"]), self._result(["b", "one"])]
        truth = [["a", "one"], ["b", "two"]]
        out = dec.score_task(res, truth, g)
        assert out["letter_acc"] == 100.0
        assert out["number_acc"] == 0.0
        assert out["combined_acc"] == 50.0
        assert out["both_correct"] == 0.0

    def test_chance_level_monte_carlo(self):
        # 25 letters, 10 numbers: combined chance = (1/25 + 1/10)/2 = 7%
        g = dec.parse_grammar(
            "$letter = " + " | ".join(f"l{i}" for i in range(25)) + ";\n"
            "$number = " + " | ".join(f"n{i}" for i in range(10)) + ";\n"
            "($letter $number)")
        rng = np.random.default_rng(7)
        n = 10 ** 4
        res, truth = [], []
        for _ in range(n):
            res.append(self._result([f"l{rng.integers(25)}",
                                     f"n{rng.integers(10)}"]))
            truth.append([f"l{rng.integers(25)}", f"n{rng.integers(10)}"])
        out = dec.score_task(res, truth, g)
        assert out["combined_acc"] == pytest.approx(7.0, abs=1.0)

    def test_slot_out_of_range(self):
        g = self._grammar()
        with pytest.raises(ValueError):
            dec.score_task([self._result(["a"])], [["a", "one"]], g)

    def test_unknown_slot_name(self):
        g = self._grammar()
        with pytest.raises(ValueError):
            dec.score_task([self._result(["a", "one"])], [["a", "one"]], g,
                           letter_slot="digit")
