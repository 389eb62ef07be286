"""Grammar handling and joint token-passing decoding.

Grammars use the alternation/sequence subset of the HParse definition
language (variables, ``|`` alternatives, a parenthesized sentence line).
A wordnet is the layered word DAG of one chain; decoding runs an exact
Viterbi over the product of the two chains' (word node, phone index)
positions, with optional histogram beam pruning.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .acoustic import GmmHmmSet
from .errors import DecodeFailure, GrammarParseError, LexiconError
from .jointlik import JointStateTensor

LOG_TENSOR_FLOOR = -690.0  # log(1e-300); keeps zero posteriors decodable


@dataclass
class Grammar:
    """Variable definitions plus the ordered sentence slots."""

    variables: dict[str, list[list[str]]]
    sentence: list[str]  # each entry a $variable reference or a literal word

    def slot_alternatives(self, slot: int) -> list[list[str]]:
        token = self.sentence[slot]
        if token.startswith("$"):
            return self.variables[token[1:]]
        return [[token]]

    def slot_name(self, slot: int) -> str:
        token = self.sentence[slot]
        return token[1:] if token.startswith("$") else token

    def slot_index(self, name: str) -> int:
        for i, token in enumerate(self.sentence):
            if self.slot_name(i) == name:
                return i
        raise ValueError(f"no slot named {name!r}")

    @property
    def n_slots(self) -> int:
        return len(self.sentence)

    def path_count(self) -> int:
        n = 1
        for i in range(self.n_slots):
            n *= len(self.slot_alternatives(i))
        return n


_FORBIDDEN = re.compile(r"[<>\[\]{}]")


def parse_grammar(text: str) -> Grammar:
    """Parse variable definitions and the sentence line.

    Only alternation and sequencing are supported; repetition/optional
    syntax is rejected.  Variable references inside alternatives are
    expanded (cycles are an error).
    """
    raw_vars: dict[str, list[str]] = {}
    sentence_tokens: list[str] | None = None
    pending: list[tuple[int, str]] = []

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if _FORBIDDEN.search(stripped):
            raise GrammarParseError("repetition/optional syntax not supported",
                                    line=lineno)
        pending.append((lineno, stripped))

    buffer = ""
    buffer_line = 0
    for lineno, chunk in pending:
        if not buffer:
            buffer_line = lineno
        buffer = f"{buffer} {chunk}".strip()
        if buffer.startswith("$"):
            if not buffer.endswith(";"):
                continue
            m = re.match(r"^\$(\w+)\s*=\s*(.*);$", buffer)
            if not m or not m.group(2).strip():
                raise GrammarParseError("malformed variable definition",
                                        line=buffer_line)
            name, body = m.group(1), m.group(2)
            raw_vars[name] = [alt.strip() for alt in body.split("|")]
            if any(not alt for alt in raw_vars[name]):
                raise GrammarParseError("empty alternative", line=buffer_line)
            buffer = ""
        elif buffer.startswith("("):
            if not buffer.endswith(")"):
                continue
            if sentence_tokens is not None:
                raise GrammarParseError("multiple sentence lines", line=buffer_line)
            sentence_tokens = buffer[1:-1].split()
            if not sentence_tokens:
                raise GrammarParseError("empty sentence", line=buffer_line)
            buffer = ""
        else:
            raise GrammarParseError(f"unexpected token {buffer.split()[0]!r}",
                                    line=buffer_line)
    if buffer:
        raise GrammarParseError("unterminated definition", line=buffer_line)
    if sentence_tokens is None:
        raise GrammarParseError("no sentence line found")

    def expand(alt: str, seen: tuple[str, ...]) -> list[list[str]]:
        words = alt.split()
        out: list[list[str]] = [[]]
        for wtok in words:
            if wtok.startswith("$"):
                name = wtok[1:]
                if name in seen:
                    raise GrammarParseError(f"cycle through ${name}")
                if name not in raw_vars:
                    raise GrammarParseError(f"undefined variable ${name}")
                subs = []
                for sub_alt in raw_vars[name]:
                    subs.extend(expand(sub_alt, seen + (name,)))
                out = [prefix + s for prefix in out for s in subs]
            else:
                out = [prefix + [wtok] for prefix in out]
        return out

    variables = {}
    for name, alts in raw_vars.items():
        expanded = []
        for alt in alts:
            expanded.extend(expand(alt, (name,)))
        variables[name] = expanded

    for token in sentence_tokens:
        if token.startswith("$") and token[1:] not in variables:
            raise GrammarParseError(f"undefined variable {token}")
    return Grammar(variables, sentence_tokens)


@dataclass
class WordNode:
    node_id: int
    slot: int
    word: str
    phones: list[str]


@dataclass
class Wordnet:
    """Layered word DAG: all slot-k nodes connect to all slot-(k+1) nodes."""

    grammar: Grammar
    nodes: list[WordNode]
    layers: list[list[int]]  # node ids per slot

    @property
    def start_nodes(self) -> list[int]:
        return self.layers[0]

    @property
    def end_nodes(self) -> list[int]:
        return self.layers[-1]

    def path_count(self) -> int:
        n = 1
        for layer in self.layers:
            n *= len(layer)
        return n


def build_wordnet(grammar: Grammar, lexicon: dict[str, list[str]],
                  slot_overrides: dict[str, list[str]] | None = None) -> Wordnet:
    """Compile the grammar into a wordnet, restricting slots when asked.

    Multi-word alternatives become a single node whose phone expansion is
    the concatenation of its words' expansions.
    """
    slot_overrides = slot_overrides or {}
    nodes: list[WordNode] = []
    layers: list[list[int]] = []
    for slot in range(grammar.n_slots):
        name = grammar.slot_name(slot)
        alts = grammar.slot_alternatives(slot)
        if name in slot_overrides:
            allowed = set(slot_overrides[name])
            alts = [a for a in alts if " ".join(a) in allowed]
            if not alts:
                raise ValueError(f"slot override empties slot {name!r}")
        layer = []
        for alt in alts:
            phones = []
            for word in alt:
                if word not in lexicon:
                    raise LexiconError(f"word {word!r} missing from lexicon")
                phones.extend(lexicon[word])
            node = WordNode(len(nodes), slot, " ".join(alt), phones)
            nodes.append(node)
            layer.append(node.node_id)
        layers.append(layer)
    return Wordnet(grammar, nodes, layers)


@dataclass
class CompiledChain:
    """Flat position arrays consumed by the Viterbi kernels.

    A position is one phone instance inside one word node, numbered in
    (node id, phone index) order.
    """

    state_idx: np.ndarray   # (P,) int32 acoustic state per position
    self_log: np.ndarray    # (P,) float64 log self-loop
    adv_log: np.ndarray     # (P,) float64 log leave probability
    arc_src: np.ndarray     # advance arcs, sorted by (dst, src)
    arc_dst: np.ndarray
    start: np.ndarray       # (K,) int32 entry positions
    final: np.ndarray       # (K,) int32 exit positions
    pos_node: np.ndarray    # (P,) int32 owning word node

    @property
    def n_positions(self) -> int:
        return len(self.state_idx)


def compile_chain(net: Wordnet, model: GmmHmmSet) -> CompiledChain:
    positions = []
    first_pos: dict[int, int] = {}
    last_pos: dict[int, int] = {}
    for node in net.nodes:
        if not node.phones:
            raise ValueError(f"node {node.word!r} has an empty phone expansion")
        first_pos[node.node_id] = len(positions)
        for ph in node.phones:
            positions.append((node.node_id, model.state_index(ph)))
        last_pos[node.node_id] = len(positions) - 1

    p = len(positions)
    state_idx = np.array([s for _, s in positions], dtype=np.int32)
    pos_node = np.array([nid for nid, _ in positions], dtype=np.int32)
    self_log = np.log(model.self_loop[state_idx])
    adv_log = np.log1p(-model.self_loop[state_idx])

    arcs = []
    for node in net.nodes:
        lo, hi = first_pos[node.node_id], last_pos[node.node_id]
        for pos in range(lo, hi):
            arcs.append((pos, pos + 1))
    for slot in range(len(net.layers) - 1):
        for src_node in net.layers[slot]:
            for dst_node in net.layers[slot + 1]:
                arcs.append((last_pos[src_node], first_pos[dst_node]))
    arcs.sort(key=lambda sd: (sd[1], sd[0]))
    arc_src = np.array([s for s, _ in arcs], dtype=np.int32)
    arc_dst = np.array([d for _, d in arcs], dtype=np.int32)

    start = np.array(sorted(first_pos[n] for n in net.start_nodes), dtype=np.int32)
    final = np.array(sorted(last_pos[n] for n in net.end_nodes), dtype=np.int32)
    return CompiledChain(state_idx, self_log, adv_log, arc_src, arc_dst,
                         start, final, pos_node)


@dataclass
class DecodeResult:
    words_a: list[str]
    words_b: list[str]
    log_score: float
    frame_state_path: list[tuple[int, int]]
    node_path_a: list[int] = field(default_factory=list, repr=False)
    node_path_b: list[int] = field(default_factory=list, repr=False)


def _words_from_path(net: Wordnet, chain: CompiledChain, path: np.ndarray):
    node_seq = []
    for pos in path:
        nid = int(chain.pos_node[pos])
        if not node_seq or node_seq[-1] != nid:
            node_seq.append(nid)
    return [net.nodes[nid].word for nid in node_seq], node_seq


def joint_decode(tensor: JointStateTensor, net_a: Wordnet, net_b: Wordnet,
                 models: tuple[GmmHmmSet, GmmHmmSet],
                 beam: int | None = None) -> DecodeResult:
    """Exact joint Viterbi over the two chains' position product space.

    The per-frame score is log tensor[t, s_a, s_b] plus each chain's
    transition log-probability (self-loop or leave); word-boundary arcs
    carry no extra cost.  ``beam`` switches on histogram pruning.
    """
    model_a, model_b = models
    t_dim, sa, sb = tensor.shape
    if sa != model_a.n_states or sb != model_b.n_states:
        raise ValueError("tensor state dimensions do not match the models")
    chain_a = compile_chain(net_a, model_a)
    chain_b = compile_chain(net_b, model_b)

    logobs = np.ascontiguousarray(
        np.maximum(tensor.log_values(), LOG_TENSOR_FLOOR), dtype=np.float64)
    score, path_a, path_b = kernels.viterbi_joint(
        logobs,
        chain_a.state_idx, chain_a.self_log, chain_a.adv_log,
        chain_a.arc_src, chain_a.arc_dst, chain_a.start, chain_a.final,
        chain_b.state_idx, chain_b.self_log, chain_b.adv_log,
        chain_b.arc_src, chain_b.arc_dst, chain_b.start, chain_b.final,
        int(beam or 0))
    if path_a is None:
        raise DecodeFailure("no complete joint path (beam too small?)")

    words_a, nodes_a = _words_from_path(net_a, chain_a, path_a)
    words_b, nodes_b = _words_from_path(net_b, chain_b, path_b)
    states = [(int(chain_a.state_idx[p]), int(chain_b.state_idx[q]))
              for p, q in zip(path_a, path_b)]
    return DecodeResult(words_a, words_b, float(score), states, nodes_a, nodes_b)


def decode_single_chain(tensor_2d: np.ndarray, net: Wordnet, model: GmmHmmSet,
                        beam: int | None = None) -> DecodeResult:
    """Single-talker decoding as a degenerate joint decode.

    The second chain is a one-state, one-word net over a unit tensor axis,
    so the product space collapses to the first chain's positions.
    """
    silent_model = GmmHmmSet(
        phones=["<a>"],
        states=[model.states[0]],
        self_loop=np.array([0.5]),
        priors=np.array([1.0]),
        d_static=model.d_static,
        cepstral_ones=model.cepstral_ones,
        feature_kind=model.feature_kind,
    )
    silent_grammar = Grammar({}, ["<a>"])
    silent_net = Wordnet(silent_grammar,
                         [WordNode(0, 0, "<a>", ["<a>"])], [[0]])
    values = np.asarray(tensor_2d, dtype=np.float64)[:, :, None]
    tensor = JointStateTensor(values, "log_likelihood")
    result = joint_decode(tensor, net, silent_net, (model, silent_model), beam)
    # strip the degenerate chain's constant self-loop cost from the score
    constant = (len(values) - 1) * float(np.log(0.5))
    return DecodeResult(result.words_a, [], result.log_score - constant,
                        result.frame_state_path, result.node_path_a, [])


def score_task(results: list[DecodeResult], truths: list[list[str]],
               grammar: Grammar, letter_slot: str = "letter",
               number_slot: str = "number") -> dict[str, float]:
    """Per-slot accuracy of the target chain over the scoring slots.

    Returns letter/number/combined accuracies (percent) plus the rate at
    which both slots are right.
    """
    li = grammar.slot_index(letter_slot)
    ni = grammar.slot_index(number_slot)
    n = len(results)
    if n == 0:
        raise ValueError("no results to score")
    letter_ok = number_ok = both_ok = 0
    for res, truth in zip(results, truths):
        if max(li, ni) >= len(res.words_a) or max(li, ni) >= len(truth):
            raise ValueError("slot index out of range for decoded sentence")
        lo = res.words_a[li] == truth[li]
        no = res.words_a[ni] == truth[ni]
        letter_ok += lo
        number_ok += no
        both_ok += lo and no
    return {
        "letter_acc": 100.0 * letter_ok / n,
        "number_acc": 100.0 * number_ok / n,
        "combined_acc": 50.0 * (letter_ok + number_ok) / n,
        "both_correct": 100.0 * both_ok / n,
    }
