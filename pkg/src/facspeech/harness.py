"""End-to-end experiment orchestration at desk scale.

Builds the synthetic two-talker corpus, trains source models and the
joint-posterior network, runs TMR sweeps for every estimator, and emits
CSV/SVG reports.  All stages are deterministic given the config seed.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import acoustic, decoder, dnn, features, jointlik
from . import signal as sig
from .errors import DecodeFailure

# --- desk-scale task definition ------------------------------------------------

DESK_GRAMMAR = """\
$command = bin | lay | place | set;
$color = blue | green | red | white;
$preposition = at | by;
$letter = a | b | c | d | e | f;
$number = one | two | three | four | five;
$adverb = again | now;

(sil $command $color $preposition $letter $number $adverb sil)
"""

DESK_LEXICON = {
    "sil": ["sil"],
    "bin": ["p0", "p1"], "lay": ["p2", "p3"],
    "place": ["p4", "p5"], "set": ["p6", "p7"],
    "blue": ["p8", "p9"], "green": ["p0", "p2"],
    "red": ["p1", "p3"], "white": ["p4", "p6"],
    "at": ["p5", "p7"], "by": ["p8", "p0"],
    "a": ["p9", "p1"], "b": ["p2", "p4"], "c": ["p3", "p5"],
    "d": ["p6", "p8"], "e": ["p7", "p9"], "f": ["p0", "p3"],
    "one": ["p1", "p4"], "two": ["p2", "p5"], "three": ["p3", "p6"],
    "four": ["p4", "p7"], "five": ["p5", "p8"],
    "again": ["p6", "p9"], "now": ["p7", "p0"],
}

TARGET_COLOR = "white"
MASKER_COLORS = ("blue", "green", "red")
PAPER_TMR_SET = (6.0, 3.0, 0.0, -3.0, -6.0, -9.0)
ESTIMATORS = ("vts", "max", "pmc", "wss", "dnn", "separate_marginals")
CONDITIONS = ("same_talker", "same_gender", "different_gender")


@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON-serializable."""

    # corpus
    n_speakers: int = 8
    utts_per_speaker: int = 60
    train_utts_per_speaker: int = 40
    grammar_path: str | None = None
    seed: int = 0
    # front end
    frontend_preset: str = "desk"   # desk | paper_gmm
    # source models
    n_components: int = 4
    adapt_tau: float = 5.0
    # network; rates/batch picked empirically: the gaussian-visible RBM
    # diverges above ~1e-3, and sigmoid+squared-error training needs small
    # batches to move at desk scale
    hidden_sizes: tuple = (64, 64, 96)
    context: int = 4
    rbm_epochs: int = 3
    rbm_rate: float = 1e-3
    init_epochs: int = 25
    init_rate: float = 0.5
    finetune_epochs: int = 20
    finetune_rate: float = 0.1
    batch: int = 32
    label_fraction: float = 0.5
    label_mode: str = "pairwise"    # joint-layer init label combination
    train_frame_step: int = 2
    # mixtures
    n_train_mixtures: int = 1000
    n_test_pairs: int = 16
    tmr_set: tuple = PAPER_TMR_SET
    # modes
    estimator: str = "vts"
    oracle_gain: bool = True
    multi_gain_training: bool = True
    gain_feature: bool = True
    masker_gain_adapt: bool = True
    vts_mode: str = "pairwise"      # pairwise | collapse
    pmc_samples: int = 256
    wss_max_samples: int = 3000
    beam: int = 0
    n_workers: int = 1

    def __post_init__(self):
        if not self.tmr_set:
            raise ValueError("tmr_set must not be empty")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.grammar_path is not None and not os.path.exists(self.grammar_path):
            raise ValueError(f"grammar path {self.grammar_path!r} does not exist")
        self.hidden_sizes = tuple(self.hidden_sizes)
        self.tmr_set = tuple(float(t) for t in self.tmr_set)

    def frontend(self) -> features.Frontend:
        if self.frontend_preset == "desk":
            return features.Frontend()
        if self.frontend_preset == "paper_gmm":
            return features.paper_gmm_frontend()
        raise ValueError(f"unknown frontend preset {self.frontend_preset!r}")


def paper_config() -> ExperimentConfig:
    """Reported-scale test design (for documentation and planning only)."""
    return ExperimentConfig(
        n_speakers=34, utts_per_speaker=1000, train_utts_per_speaker=500,
        frontend_preset="paper_gmm", n_components=4,
        hidden_sizes=(2025, 2500, 3600, 5625), context=8,
        n_train_mixtures=20000, n_test_pairs=600, tmr_set=PAPER_TMR_SET)


def save_config(path, cfg: ExperimentConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return ExperimentConfig(**data)


# --- corpus ----------------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    words: tuple
    seed: int
    wav_path: str = ""
    segments: list = field(default_factory=list)


@dataclass
class MixtureRecord:
    mix_id: str
    target_id: str
    masker_id: str
    tmr_db: float
    gain: float
    condition: str
    wav_path: str = ""


@dataclass
class TrainPair:
    target_id: str
    masker_id: str
    tmr_db: float   # applied only in multi-gain training


@dataclass
class CorpusPlan:
    """Deterministic corpus layout before any audio is rendered."""

    speakers: list
    utterances: list          # all Utterance specs (train + test)
    train_ids: list
    test_ids: list
    test_pairs: list          # (target_id, masker_id, condition)
    train_pairs: list         # TrainPair

    def mixture_rows(self, tmr_set) -> int:
        return len(self.test_pairs) * len(tmr_set)


def _sample_sentence(grammar: decoder.Grammar, rng: np.random.Generator,
                     color: str | None = None) -> tuple:
    words = []
    for slot in range(grammar.n_slots):
        alts = grammar.slot_alternatives(slot)
        if color is not None and grammar.slot_name(slot) == "color":
            words.append(color)
            continue
        words.append(" ".join(alts[rng.integers(len(alts))]))
    return tuple(words)


def _condition(spk_a: sig.Speaker, spk_b: sig.Speaker) -> str:
    if spk_a.speaker_id == spk_b.speaker_id:
        return "same_talker"
    if spk_a.gender == spk_b.gender:
        return "same_gender"
    return "different_gender"


def plan_corpus(cfg: ExperimentConfig,
                grammar: decoder.Grammar | None = None) -> CorpusPlan:
    """Utterance specs, splits, and mixture pairings (no synthesis).

    Test pairs always put a white-color sentence on the target side and a
    non-white sentence on the masker side, stratified over the three
    speaker-pair conditions.
    """
    if grammar is None:
        grammar = load_grammar(cfg)
    rng = np.random.default_rng(cfg.seed)
    speakers = sig.make_speakers(cfg.n_speakers)
    colors = [" ".join(a) for a in
              grammar.slot_alternatives(grammar.slot_index("color"))]
    masker_colors = [c for c in colors if c != TARGET_COLOR]

    utterances, train_ids, test_ids = [], [], []
    by_speaker_test_white: dict[str, list[str]] = {}
    by_speaker_test_other: dict[str, list[str]] = {}
    by_speaker_train: dict[str, list[str]] = {}
    for spk in speakers:
        by_speaker_test_white[spk.speaker_id] = []
        by_speaker_test_other[spk.speaker_id] = []
        by_speaker_train[spk.speaker_id] = []
        for u in range(cfg.utts_per_speaker):
            # force both white and non-white sentences to exist everywhere
            color = TARGET_COLOR if u % 3 == 0 else \
                masker_colors[int(rng.integers(len(masker_colors)))]
            words = _sample_sentence(grammar, rng, color=color)
            utt_id = f"{spk.speaker_id}_u{u:03d}"
            utterances.append(Utterance(utt_id, spk.speaker_id, words,
                                        seed=int(rng.integers(2 ** 31))))
            if u < cfg.train_utts_per_speaker:
                train_ids.append(utt_id)
                by_speaker_train[spk.speaker_id].append(utt_id)
            else:
                test_ids.append(utt_id)
                if color == TARGET_COLOR:
                    by_speaker_test_white[spk.speaker_id].append(utt_id)
                else:
                    by_speaker_test_other[spk.speaker_id].append(utt_id)

    spk_ids = [s.speaker_id for s in speakers]
    spk_map = {s.speaker_id: s for s in speakers}
    test_pairs = []
    attempts = 0
    while len(test_pairs) < cfg.n_test_pairs and attempts < 100 * cfg.n_test_pairs:
        attempts += 1
        want = CONDITIONS[len(test_pairs) % len(CONDITIONS)]
        spk_t = spk_ids[int(rng.integers(len(spk_ids)))]
        if want == "same_talker":
            spk_m = spk_t
        else:
            candidates = [s for s in spk_ids if s != spk_t and
                          ((spk_map[s].gender == spk_map[spk_t].gender)
                           == (want == "same_gender"))]
            if not candidates:
                continue
            spk_m = candidates[int(rng.integers(len(candidates)))]
        whites = by_speaker_test_white[spk_t]
        others = by_speaker_test_other[spk_m]
        if not whites or not others:
            continue
        tgt = whites[int(rng.integers(len(whites)))]
        msk = others[int(rng.integers(len(others)))]
        if tgt == msk:
            continue
        test_pairs.append((tgt, msk, want))

    train_pairs = []
    for k in range(cfg.n_train_mixtures):
        spk_t = spk_ids[int(rng.integers(len(spk_ids)))]
        spk_m = spk_ids[int(rng.integers(len(spk_ids)))]
        tgt = by_speaker_train[spk_t][int(rng.integers(len(by_speaker_train[spk_t])))]
        msk = by_speaker_train[spk_m][int(rng.integers(len(by_speaker_train[spk_m])))]
        if tgt == msk:
            msk = by_speaker_train[spk_m][
                (by_speaker_train[spk_m].index(msk) + 1)
                % len(by_speaker_train[spk_m])]
        tmr = cfg.tmr_set[int(rng.integers(len(cfg.tmr_set)))]
        train_pairs.append(TrainPair(tgt, msk, float(tmr)))

    return CorpusPlan(speakers, utterances, train_ids, test_ids,
                      test_pairs, train_pairs)


def load_grammar(cfg: ExperimentConfig) -> decoder.Grammar:
    if cfg.grammar_path:
        with open(cfg.grammar_path, encoding="utf-8") as fh:
            return decoder.parse_grammar(fh.read())
    return decoder.parse_grammar(DESK_GRAMMAR)


class Corpus:
    """Materialized corpus: audio, alignments, manifests, lazy features."""

    def __init__(self, root: str, cfg: ExperimentConfig,
                 grammar: decoder.Grammar, lexicon: dict,
                 phone_table: dict, speakers: list,
                 utterances: dict, train_ids: list, test_ids: list,
                 test_mixtures: list, train_pairs: list):
        self.root = root
        self.cfg = cfg
        self.grammar = grammar
        self.lexicon = lexicon
        self.phone_table = phone_table
        self.speakers = {s.speaker_id: s for s in speakers}
        self.utterances = utterances
        self.train_ids = train_ids
        self.test_ids = test_ids
        self.test_mixtures = test_mixtures
        self.train_pairs = train_pairs
        self._wave_cache: dict[str, sig.Waveform] = {}

    @property
    def phones(self) -> list:
        return sorted(self.phone_table)

    def speaker_of(self, utt_id: str) -> sig.Speaker:
        return self.speakers[self.utterances[utt_id].speaker_id]

    def utt_wave(self, utt_id: str) -> sig.Waveform:
        if utt_id not in self._wave_cache:
            utt = self.utterances[utt_id]
            self._wave_cache[utt_id] = sig.read_wav(
                os.path.join(self.root, utt.wav_path))
        return self._wave_cache[utt_id]

    def mixture_wave(self, mix: MixtureRecord) -> sig.Waveform:
        key = f"mix::{mix.mix_id}"
        if key not in self._wave_cache:
            self._wave_cache[key] = sig.read_wav(
                os.path.join(self.root, mix.wav_path))
        return self._wave_cache[key]

    def frame_labels(self, utt_id: str, frontend: features.Frontend,
                     n_frames: int) -> list:
        return features.frame_labels(self.utterances[utt_id].segments,
                                     frontend, n_frames)


def build_corpus(cfg: ExperimentConfig, out_dir: str) -> Corpus:
    """Render the plan to disk: WAVs, alignments, manifests, mixtures."""
    grammar = load_grammar(cfg)
    lexicon = dict(DESK_LEXICON)
    phone_table = sig.default_phone_table()
    plan = plan_corpus(cfg, grammar)

    os.makedirs(out_dir, exist_ok=True)
    for sub in ("wav", "align", "mixwav"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    save_config(os.path.join(out_dir, "config.json"), cfg)
    with open(os.path.join(out_dir, "grammar.txt"), "w", encoding="utf-8") as fh:
        fh.write(DESK_GRAMMAR if cfg.grammar_path is None
                 else open(cfg.grammar_path, encoding="utf-8").read())
    write_lexicon(os.path.join(out_dir, "lexicon.tsv"), lexicon)
    with open(os.path.join(out_dir, "speakers.tsv"), "w", encoding="utf-8") as fh:
        fh.write("#speaker_id\tshift\tf0\n")
        for s in plan.speakers:
            fh.write(f"{s.speaker_id}\t{s.shift!r}\t{s.f0!r}\n")

    utterances: dict[str, Utterance] = {}
    waves: dict[str, sig.Waveform] = {}
    spk_map = {s.speaker_id: s for s in plan.speakers}
    for spec in plan.utterances:
        voice = sig.Voice(phone_table, lexicon, spk_map[spec.speaker_id])
        wave, segments = sig.synth_utterance_aligned(list(spec.words), voice,
                                                     spec.seed)
        rel = os.path.join("wav", f"{spec.utt_id}.wav")
        sig.write_wav(os.path.join(out_dir, rel), wave)
        with open(os.path.join(out_dir, "align", f"{spec.utt_id}.tsv"), "w",
                  encoding="utf-8") as fh:
            for seg in segments:
                fh.write(f"{seg.phone}\t{seg.start}\t{seg.end}\n")
        spec = replace(spec, wav_path=rel, segments=segments)
        utterances[spec.utt_id] = spec
        waves[spec.utt_id] = wave

    for name, ids in (("manifest_train.tsv", plan.train_ids),
                      ("manifest_test.tsv", plan.test_ids)):
        records = [sig.UtteranceRecord(u, utterances[u].speaker_id,
                                       utterances[u].wav_path,
                                       utterances[u].words) for u in ids]
        sig.write_manifest(os.path.join(out_dir, name), records)

    test_mixtures = []
    for p, (tgt, msk, condition) in enumerate(plan.test_pairs):
        for tmr in cfg.tmr_set:
            wa, wb = waves[tgt], waves[msk]
            g = sig.gain_from_tmr(tmr, wa.energy(), wb.energy())
            mixed = sig.mix(wa, wb, sig.MixSpec(explicit_gain=g))
            mix_id = f"mix{p:04d}_tmr{_tmr_tag(tmr)}"
            rel = os.path.join("mixwav", f"{mix_id}.wav")
            sig.write_wav(os.path.join(out_dir, rel), mixed)
            test_mixtures.append(MixtureRecord(mix_id, tgt, msk, float(tmr),
                                               float(g), condition, rel))
    write_mixture_manifest(os.path.join(out_dir, "mixtures_test.tsv"),
                           test_mixtures)
    with open(os.path.join(out_dir, "pairs_train.tsv"), "w",
              encoding="utf-8") as fh:
        fh.write("#target\tmasker\ttmr_db\n")
        for pair in plan.train_pairs:
            fh.write(f"{pair.target_id}\t{pair.masker_id}\t{pair.tmr_db!r}\n")

    corpus = Corpus(out_dir, cfg, grammar, lexicon, phone_table, plan.speakers,
                    utterances, plan.train_ids, plan.test_ids, test_mixtures,
                    plan.train_pairs)
    corpus._wave_cache.update(waves)
    return corpus


def load_corpus(root: str) -> Corpus:
    cfg = load_config(os.path.join(root, "config.json"))
    with open(os.path.join(root, "grammar.txt"), encoding="utf-8") as fh:
        grammar = decoder.parse_grammar(fh.read())
    lexicon = read_lexicon(os.path.join(root, "lexicon.tsv"))
    phone_table = sig.default_phone_table()
    speakers = []
    with open(os.path.join(root, "speakers.tsv"), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            sid, shift, f0 = line.split("\t")
            speakers.append(sig.Speaker(sid, float(shift), float(f0)))
    utterances = {}
    train_ids, test_ids = [], []
    for name, bucket in (("manifest_train.tsv", train_ids),
                         ("manifest_test.tsv", test_ids)):
        for rec in sig.read_manifest(os.path.join(root, name)):
            segments = []
            with open(os.path.join(root, "align", f"{rec.utt_id}.tsv"),
                      encoding="utf-8") as fh:
                for line in fh:
                    ph, start, end = line.split("\t")
                    segments.append(sig.Segment(ph, int(start), int(end)))
            utterances[rec.utt_id] = Utterance(rec.utt_id, rec.speaker_id,
                                               rec.words, seed=0,
                                               wav_path=rec.path,
                                               segments=segments)
            bucket.append(rec.utt_id)
    test_mixtures = read_mixture_manifest(os.path.join(root, "mixtures_test.tsv"))
    train_pairs = []
    with open(os.path.join(root, "pairs_train.tsv"), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            tgt, msk, tmr = line.split("\t")
            train_pairs.append(TrainPair(tgt, msk, float(tmr)))
    return Corpus(root, cfg, grammar, lexicon, phone_table, speakers,
                  utterances, train_ids, test_ids, test_mixtures, train_pairs)


def _tmr_tag(tmr: float) -> str:
    sign = "m" if tmr < 0 else "p"
    mag = abs(tmr)
    text = f"{mag:g}".replace(".", "_")
    return f"{sign}{text}"


def write_lexicon(path, lexicon: dict):
    """Word-per-line lexicon with the phone list."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(lexicon):
            fh.write(f"{word}\t{' '.join(lexicon[word])}\n")


def read_lexicon(path) -> dict:
    lexicon = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            word, phones = line.rstrip("\n").split("\t")
            lexicon[word] = phones.split()
    return lexicon


def write_mixture_manifest(path, mixtures: list):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#mix_id\ttarget\tmasker\ttmr_db\tgain\tcondition\tpath\n")
        for m in mixtures:
            fh.write(f"{m.mix_id}\t{m.target_id}\t{m.masker_id}\t"
                     f"{m.tmr_db!r}\t{m.gain!r}\t{m.condition}\t{m.wav_path}\n")


def read_mixture_manifest(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            mix_id, tgt, msk, tmr, gain, cond, rel = line.rstrip("\n").split("\t")
            out.append(MixtureRecord(mix_id, tgt, msk, float(tmr), float(gain),
                                     cond, rel))
    return out


def parallel_map(fn, items, n_workers: int = 1):
    """Order-preserving map; thread pool when n_workers > 1."""
    if n_workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))


# --- source-model training -------------------------------------------------------

@dataclass
class SourceModels:
    frontend: features.Frontend
    ctx: jointlik.MismatchContext
    base: acoustic.GmmHmmSet
    adapted: dict


class FeatureBank:
    """Per-corpus feature cache (MFCC+deltas and log-mel)."""

    def __init__(self, corpus: Corpus, frontend: features.Frontend):
        self.corpus = corpus
        self.frontend = frontend
        self._mfcc: dict[str, features.FeatureSequence] = {}
        self._logmel: dict[str, features.FeatureSequence] = {}

    def wave_mfcc(self, wave: sig.Waveform) -> features.FeatureSequence:
        return features.mfcc_with_deltas(wave, self.frontend)

    def utt_mfcc(self, utt_id: str, pad_to_samples: int = 0):
        key = f"{utt_id}#{pad_to_samples}"
        if key not in self._mfcc:
            wave = self.corpus.utt_wave(utt_id)
            if pad_to_samples:
                wave = sig.pad_to(wave, pad_to_samples)
            self._mfcc[key] = self.wave_mfcc(wave)
        return self._mfcc[key]

    def mix_mfcc(self, mix: MixtureRecord):
        if mix.mix_id not in self._mfcc:
            self._mfcc[mix.mix_id] = self.wave_mfcc(self.corpus.mixture_wave(mix))
        return self._mfcc[mix.mix_id]

    def mix_logmel(self, mix: MixtureRecord):
        if mix.mix_id not in self._logmel:
            self._logmel[mix.mix_id] = features.log_mel(
                self.corpus.mixture_wave(mix), self.frontend)
        return self._logmel[mix.mix_id]


def train_source_models(corpus: Corpus, n_components: int | None = None,
                        seed: int = 0) -> SourceModels:
    """Base monophone set over all training speakers plus per-speaker
    MAP-adapted copies."""
    cfg = corpus.cfg
    frontend = cfg.frontend()
    bank = FeatureBank(corpus, frontend)
    if n_components is None:
        n_components = cfg.n_components

    feats, aligns, by_speaker = [], [], {}
    for utt_id in corpus.train_ids:
        fs = bank.utt_mfcc(utt_id)
        labels = corpus.frame_labels(utt_id, frontend, fs.n_frames)
        feats.append(fs)
        aligns.append(labels)
        spk = corpus.utterances[utt_id].speaker_id
        by_speaker.setdefault(spk, []).append((fs, labels))

    cepstral_ones = frontend.dct @ np.ones(frontend.n_mel)
    base = acoustic.train_gmm_hmm(
        feats, aligns, n_components, phones=corpus.phones,
        cepstral_ones=cepstral_ones, d_static=frontend.n_cep, seed=seed)
    adapted = {}
    for spk, items in by_speaker.items():
        adapted[spk] = acoustic.adapt_speaker(
            base, [fs for fs, _ in items], [al for _, al in items],
            tau=cfg.adapt_tau)
    ctx = jointlik.MismatchContext.from_frontend(frontend)
    return SourceModels(frontend, ctx, base, adapted)


# --- network training --------------------------------------------------------------

@dataclass(frozen=True)
class DnnVariant:
    """Which flavor of network to train.

    marginal selects the single-chain classifier used by the
    separate-marginals comparison mode ("a" target, "b" masker).
    """

    multi_gain: bool = True
    gain_feature: bool = True
    marginal: str | None = None


def _train_mixture_data(corpus: Corpus, models: SourceModels,
                        variant: DnnVariant, bank: FeatureBank):
    """Per-pair mixture features, labels, and metadata for network training."""
    cfg = corpus.cfg
    step = max(1, cfg.train_frame_step)
    pairs_out = []
    for pair in corpus.train_pairs:
        wa = corpus.utt_wave(pair.target_id)
        wb = corpus.utt_wave(pair.masker_id)
        if variant.multi_gain:
            g = sig.gain_from_tmr(pair.tmr_db, wa.energy(), wb.energy())
        else:
            g = 1.0
        mixed = sig.mix(wa, wb, sig.MixSpec(explicit_gain=g))
        n = len(mixed)
        logmel = features.log_mel(mixed, models.frontend)
        idx = np.arange(0, logmel.n_frames, step)

        spk_t = corpus.utterances[pair.target_id].speaker_id
        spk_m = corpus.utterances[pair.masker_id].speaker_id
        fa = bank.utt_mfcc(pair.target_id, pad_to_samples=n)
        # the masker's stereo signal is its gain-scaled copy; evaluating the
        # scaled features in the unscaled source model makes the masker-side
        # posteriors flatten when the masker is quiet, which is exactly the
        # hedging the fine-tuned net should learn
        wb_scaled = sig.Waveform(sig.pad_to(wb, n).samples * g, wb.sample_rate)
        fb = bank.wave_mfcc(wb_scaled)
        dm_a = acoustic.state_posterior_matrix(models.adapted[spk_t],
                                               fa.frames[idx])
        dm_b = acoustic.state_posterior_matrix(models.adapted[spk_m],
                                               fb.frames[idx])
        gain_db = 20.0 * math.log10(g) if variant.gain_feature else 0.0
        mixed_mfcc = features.FeatureSequence(
            bank.wave_mfcc(mixed).frames[idx], "mfcc_with_delta",
            models.frontend.frame_shift_s)
        pairs_out.append({
            "pair": pair, "gain": g, "gain_db": gain_db,
            "speakers": (spk_t, spk_m),
            # context windows must span consecutive frames, so the full
            # sequence is kept and rows are subsampled after composition
            "logmel": logmel, "frame_idx": idx,
            "mixed_mfcc": mixed_mfcc,
            "dm_a": dm_a, "dm_b": dm_b,
        })
    return pairs_out


def speaker_pair_inventory(corpus: Corpus) -> tuple:
    ids = sorted(corpus.speakers)
    return tuple((a, b) for a in ids for b in ids)


def train_dnn(corpus: Corpus, models: SourceModels,
              variant: DnnVariant = DnnVariant(), seed: int = 0,
              bank: FeatureBank | None = None) -> dnn.JointPosteriorNet:
    """Three-phase training of one network flavor.

    Joint nets run all phases (generative, joint-layer init against
    combined-model labels, marginal fine-tuning); marginal classifiers stop
    after the supervised init phase trained directly on state posteriors.
    """
    cfg = corpus.cfg
    bank = bank or FeatureBank(corpus, models.frontend)
    data = _train_mixture_data(corpus, models, variant, bank)
    n_states = models.base.n_states

    mel_rows = np.concatenate([d["logmel"].frames[d["frame_idx"]]
                               for d in data])
    gains = np.array([d["gain_db"] for d in data])
    stats = features.fit_standardization(mel_rows, gains)
    spec = features.InputSpec(cfg.context, models.frontend.n_mel,
                              speaker_pair_inventory(corpus), stats,
                              use_gain=True)
    inputs = np.concatenate([
        features.compose_input_matrix(d["logmel"], spec, d["speakers"],
                                      d["gain_db"])[d["frame_idx"]]
        for d in data])
    dm_a = np.concatenate([d["dm_a"] for d in data])
    dm_b = np.concatenate([d["dm_b"] for d in data])
    pair_sizes = [len(d["frame_idx"]) for d in data]
    offsets = np.concatenate([[0], np.cumsum(pair_sizes)])

    # phase 1: generative stack
    rbm_layers = []
    visible = inputs
    for li, n_hidden in enumerate(cfg.hidden_sizes):
        hyper = dnn.RbmHyper(rate=cfg.rbm_rate if li == 0 else 0.01,
                             epochs=cfg.rbm_epochs, batch=cfg.batch,
                             seed=seed + 101 * li)
        kind = "gaussian" if li == 0 else "bernoulli"
        layer = dnn.rbm_train_pcd(visible, kind, n_hidden, hyper)
        rbm_layers.append(layer)
        visible = layer.hidden_probs(visible)

    joint_shape = (n_states, 1) if variant.marginal else (n_states, n_states)
    net = dnn.add_joint_layer(dnn.stack_dbn(rbm_layers), joint_shape, spec,
                              seed=seed + 7)

    # phase 2: joint-layer initialization
    if variant.marginal:
        labels = dm_a if variant.marginal == "a" else dm_b
        sel = np.arange(len(inputs))
    else:
        n_label_pairs = max(1, int(round(cfg.label_fraction * len(data))))
        labels_list, sel_list = [], []
        for k in range(n_label_pairs):
            d = data[k]
            model_b = models.adapted[d["speakers"][1]]
            if d["gain"] != 1.0:
                model_b = acoustic.gain_adapt(model_b, d["gain"])
            lab = dnn.init_labels_vts(d["mixed_mfcc"],
                                      models.adapted[d["speakers"][0]],
                                      model_b, models.ctx, mode=cfg.label_mode)
            labels_list.append(lab.reshape(len(lab), -1))
            sel_list.append(np.arange(offsets[k], offsets[k + 1]))
        labels = np.concatenate(labels_list)
        sel = np.concatenate(sel_list)
    # seed the output biases at the label base rates; starting every sigmoid
    # at 0.5 drives the whole layer into the flat tail before any per-entry
    # signal appears
    base = np.clip(labels.reshape(len(labels), -1).mean(axis=0), 1e-4,
                   1.0 - 1e-4)
    net.layers[-1][-1, :] = np.log(base / (1.0 - base))
    dnn.train_init_phase(net, inputs[sel], labels,
                         dnn.NetHyper(rate=cfg.init_rate, epochs=cfg.init_epochs,
                                      batch=cfg.batch, seed=seed + 13))

    # phase 3: marginal fine-tuning (joint nets only)
    if not variant.marginal:
        n_held = max(1, len(inputs) // 10)
        dnn.train_finetune_phase(
            net, inputs[:-n_held], dm_a[:-n_held], dm_b[:-n_held],
            dnn.NetHyper(rate=cfg.finetune_rate, epochs=cfg.finetune_epochs,
                         batch=cfg.batch, seed=seed + 17),
            heldout=(inputs[-n_held:], dm_a[-n_held:], dm_b[-n_held:]))
    return net


def build_wss_set(corpus: Corpus, models: SourceModels,
                  bank: FeatureBank) -> jointlik.WeightedSampleSet:
    """Stereo sample pool from training mixtures, weighted by the base model.

    Samples are pooled across speakers so one empirical distribution serves
    every test pair.
    """
    cfg = corpus.cfg
    xs_a, xs_b, ys = [], [], []
    total = 0
    step = max(1, cfg.train_frame_step)
    for pair in corpus.train_pairs:
        if total >= cfg.wss_max_samples:
            break
        wa = corpus.utt_wave(pair.target_id)
        wb = corpus.utt_wave(pair.masker_id)
        g = sig.gain_from_tmr(pair.tmr_db, wa.energy(), wb.energy())
        mixed = sig.mix(wa, wb, sig.MixSpec(explicit_gain=g))
        n = len(mixed)
        fa = bank.utt_mfcc(pair.target_id, pad_to_samples=n).frames
        fb_scaled = bank.wave_mfcc(
            sig.Waveform(sig.pad_to(wb, n).samples * g, wb.sample_rate)).frames
        fy = bank.wave_mfcc(mixed).frames
        idx = np.arange(0, len(fy), step)
        xs_a.append(fa[idx]); xs_b.append(fb_scaled[idx]); ys.append(fy[idx])
        total += len(idx)
    xa = np.concatenate(xs_a)[: cfg.wss_max_samples]
    xb = np.concatenate(xs_b)[: cfg.wss_max_samples]
    y = np.concatenate(ys)[: cfg.wss_max_samples]
    return jointlik.wss_build(xa, xb, y, models.base, models.base)


# --- reports --------------------------------------------------------------------

@dataclass
class ReportRow:
    condition: str          # same_talker | same_gender | different_gender | overall
    tmr_db: float | None    # None aggregates across TMRs
    estimator: str
    letter_acc: float
    number_acc: float
    combined_acc: float
    both_correct: float
    n_items: int
    tag: str = ""

    def __post_init__(self):
        for value in (self.letter_acc, self.number_acc, self.combined_acc,
                      self.both_correct):
            if not 0.0 <= value <= 100.0:
                raise ValueError("accuracies must be percentages in [0, 100]")


@dataclass
class MixtureResult:
    """Per-mixture decode outcome used for scoring and the results CSV."""

    mix_id: str
    tmr_db: float | None
    condition: str
    words_a: list
    words_b: list
    ref_a: tuple
    ref_b: tuple
    letter_ok: bool
    number_ok: bool
    log_score: float
    failed: bool = False


def _accuracy_rows(items: list, estimator: str, tag: str = "") -> list:
    def make_row(condition, tmr, subset):
        n = len(subset)
        letter = sum(i.letter_ok for i in subset)
        number = sum(i.number_ok for i in subset)
        both = sum(i.letter_ok and i.number_ok for i in subset)
        return ReportRow(condition, tmr, estimator,
                         100.0 * letter / n, 100.0 * number / n,
                         50.0 * (letter + number) / n, 100.0 * both / n,
                         n, tag)

    rows = []
    tmrs = sorted({i.tmr_db for i in items if i.tmr_db is not None})
    scored = [i for i in items if not i.failed]
    for tmr in tmrs:
        at_tmr = [i for i in scored if i.tmr_db == tmr]
        for cond in CONDITIONS:
            sub = [i for i in at_tmr if i.condition == cond]
            if sub:
                rows.append(make_row(cond, tmr, sub))
        if at_tmr:
            rows.append(make_row("overall", tmr, at_tmr))
    if scored:
        for cond in CONDITIONS:
            sub = [i for i in scored if i.condition == cond]
            if sub:
                rows.append(make_row(cond, None, sub))
        rows.append(make_row("overall", None, scored))
    return rows


def write_report_csv(path, rows: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "tmr_db", "estimator", "tag",
                         "letter_acc", "number_acc", "combined_acc",
                         "both_correct", "n_items"])
        for r in rows:
            writer.writerow([
                r.condition, "" if r.tmr_db is None else f"{r.tmr_db:g}",
                r.estimator, r.tag, f"{r.letter_acc:.6f}",
                f"{r.number_acc:.6f}", f"{r.combined_acc:.6f}",
                f"{r.both_correct:.6f}", r.n_items])


def read_report_csv(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(ReportRow(
                rec["condition"],
                None if rec["tmr_db"] == "" else float(rec["tmr_db"]),
                rec["estimator"], float(rec["letter_acc"]),
                float(rec["number_acc"]), float(rec["combined_acc"]),
                float(rec["both_correct"]), int(rec["n_items"]), rec["tag"]))
    return rows


def write_results_csv(path, items: list):
    """Per-utterance decode log: ids, TMR, decoded and reference slots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mix_id", "tmr_db", "condition", "decoded_target",
                         "decoded_masker", "ref_target", "ref_masker",
                         "letter_ok", "number_ok", "log_score", "failed"])
        for i in items:
            writer.writerow([
                i.mix_id, "" if i.tmr_db is None else f"{i.tmr_db:g}",
                i.condition, " ".join(i.words_a), " ".join(i.words_b),
                " ".join(i.ref_a), " ".join(i.ref_b),
                int(i.letter_ok), int(i.number_ok),
                f"{i.log_score:.6f}", int(i.failed)])


def chance_level(grammar: decoder.Grammar) -> float:
    """Analytic chance combined accuracy (percent) of the scoring slots."""
    letters = len(grammar.slot_alternatives(grammar.slot_index("letter")))
    numbers = len(grammar.slot_alternatives(grammar.slot_index("number")))
    return 50.0 * (1.0 / letters + 1.0 / numbers)


# --- the experiment session -------------------------------------------------------

GAIN_GRID_DB = tuple(range(-12, 13))


class ExperimentSession:
    """One corpus + one model set, shared across estimator runs."""

    def __init__(self, cfg: ExperimentConfig, workdir: str,
                 corpus: Corpus | None = None):
        self.cfg = cfg
        self.workdir = workdir
        self.corpus = corpus or build_corpus(
            cfg, os.path.join(workdir, "corpus"))
        self.models = train_source_models(self.corpus, seed=cfg.seed)
        self.bank = FeatureBank(self.corpus, self.models.frontend)
        self._model_cache = {cfg.n_components: self.models}
        self._nets: dict[DnnVariant, dnn.JointPosteriorNet] = {}
        self._wss = None
        self.target_net = decoder.build_wordnet(
            self.corpus.grammar, self.corpus.lexicon,
            {"color": [TARGET_COLOR]})
        self.masker_net = decoder.build_wordnet(
            self.corpus.grammar, self.corpus.lexicon,
            {"color": [c for c in MASKER_COLORS
                       if c in self.corpus.lexicon]})

    # -- cached resources

    def models_with(self, n_components: int) -> SourceModels:
        if n_components not in self._model_cache:
            self._model_cache[n_components] = train_source_models(
                self.corpus, n_components=n_components, seed=self.cfg.seed)
        return self._model_cache[n_components]

    def net(self, variant: DnnVariant) -> dnn.JointPosteriorNet:
        if variant not in self._nets:
            self._nets[variant] = train_dnn(
                self.corpus, self.models, variant,
                seed=self.cfg.seed + 1000 * (hash(variant) % 97),
                bank=self.bank)
        return self._nets[variant]

    def wss_set(self) -> jointlik.WeightedSampleSet:
        if self._wss is None:
            self._wss = build_wss_set(self.corpus, self.models, self.bank)
        return self._wss

    # -- per-mixture machinery

    def mixture_gain(self, mix: MixtureRecord) -> float:
        if self.cfg.oracle_gain:
            return mix.gain
        spk_t = self.corpus.utterances[mix.target_id].speaker_id
        spk_m = self.corpus.utterances[mix.masker_id].speaker_id
        return acoustic.estimate_gain(
            self.bank.mix_mfcc(mix), self.models.adapted[spk_t],
            self.models.adapted[spk_m],
            [10.0 ** (db / 20.0) for db in GAIN_GRID_DB])

    def _pair_models(self, mix: MixtureRecord, gain: float):
        spk_t = self.corpus.utterances[mix.target_id].speaker_id
        spk_m = self.corpus.utterances[mix.masker_id].speaker_id
        model_a = self.models.adapted[spk_t]
        model_b = self.models.adapted[spk_m]
        if self.cfg.masker_gain_adapt and gain != 1.0:
            model_b = acoustic.gain_adapt(model_b, gain)
        return model_a, model_b

    def build_tensor(self, mix: MixtureRecord, estimator: str,
                     variant: DnnVariant = DnnVariant()):
        gain = self.mixture_gain(mix)
        if estimator == "dnn":
            net = self.net(variant)
            gain_db = 20.0 * math.log10(gain) if variant.gain_feature else 0.0
            spk = (self.corpus.utterances[mix.target_id].speaker_id,
                   self.corpus.utterances[mix.masker_id].speaker_id)
            return dnn.infer_joint_tensor(net, self.bank.mix_logmel(mix),
                                          spk, gain_db)
        mix_mfcc = self.bank.mix_mfcc(mix)
        model_a, model_b = self._pair_models(mix, gain)
        if estimator == "vts":
            return jointlik.vts_joint_tensor(mix_mfcc, model_a, model_b,
                                             self.models.ctx,
                                             mode=self.cfg.vts_mode)
        if estimator == "max":
            return jointlik.max_joint_tensor(mix_mfcc, model_a, model_b)
        if estimator == "pmc":
            import zlib
            seed = zlib.crc32(mix.mix_id.encode()) & 0x7FFFFFFF
            return jointlik.pmc_joint_tensor(mix_mfcc, model_a, model_b,
                                             self.models.ctx,
                                             n_samples=self.cfg.pmc_samples,
                                             seed=seed)
        if estimator == "wss":
            return jointlik.wss_joint_tensor(mix_mfcc, self.wss_set())
        raise ValueError(f"unknown estimator {estimator!r}")

    def decode_mixture(self, mix: MixtureRecord, estimator: str,
                       variant: DnnVariant = DnnVariant()) -> MixtureResult:
        ref_a = self.corpus.utterances[mix.target_id].words
        ref_b = self.corpus.utterances[mix.masker_id].words
        beam = self.cfg.beam or None
        try:
            if estimator == "separate_marginals":
                res_a = self._decode_marginal(mix, "a")
                res_b = self._decode_marginal(mix, "b")
                words_a, words_b = res_a.words_a, res_b.words_a
                log_score = res_a.log_score + res_b.log_score
            else:
                tensor = self.build_tensor(mix, estimator, variant)
                gain = self.mixture_gain(mix)
                model_a, model_b = self._pair_models(mix, gain)
                result = decoder.joint_decode(tensor, self.target_net,
                                              self.masker_net,
                                              (model_a, model_b), beam)
                words_a, words_b = result.words_a, result.words_b
                log_score = result.log_score
        except DecodeFailure:
            return MixtureResult(mix.mix_id, mix.tmr_db, mix.condition,
                                 [], [], ref_a, ref_b, False, False,
                                 float("-inf"), failed=True)
        li = self.corpus.grammar.slot_index("letter")
        ni = self.corpus.grammar.slot_index("number")
        return MixtureResult(
            mix.mix_id, mix.tmr_db, mix.condition, words_a, words_b,
            ref_a, ref_b, words_a[li] == ref_a[li], words_a[ni] == ref_a[ni],
            log_score)

    def _decode_marginal(self, mix: MixtureRecord, side: str):
        variant = DnnVariant(multi_gain=self.cfg.multi_gain_training,
                             gain_feature=self.cfg.gain_feature,
                             marginal=side)
        net = self.net(variant)
        gain = self.mixture_gain(mix)
        gain_db = 20.0 * math.log10(gain) if variant.gain_feature else 0.0
        spk = (self.corpus.utterances[mix.target_id].speaker_id,
               self.corpus.utterances[mix.masker_id].speaker_id)
        tensor = dnn.infer_joint_tensor(net, self.bank.mix_logmel(mix),
                                        spk, gain_db)
        marg = np.maximum(tensor.values[:, :, 0], 1e-300)
        model = self.models.adapted[spk[0 if side == "a" else 1]]
        net_words = self.target_net if side == "a" else self.masker_net
        return decoder.decode_single_chain(np.log(marg), net_words, model,
                                           self.cfg.beam or None)

    # -- runs

    def run_estimator(self, estimator: str | None = None,
                      variant: DnnVariant | None = None,
                      mixtures: list | None = None, tag: str = ""):
        """Decode the test mixtures with one estimator; returns (rows, items)."""
        estimator = estimator or self.cfg.estimator
        if variant is None:
            variant = DnnVariant(multi_gain=self.cfg.multi_gain_training,
                                 gain_feature=self.cfg.gain_feature)
        mixtures = mixtures if mixtures is not None else self.corpus.test_mixtures
        items = parallel_map(
            lambda m: self.decode_mixture(m, estimator, variant),
            mixtures, self.cfg.n_workers)
        return _accuracy_rows(items, estimator, tag), items

    def run_single_talker(self, n_components: int | None = None,
                          tag: str = ""):
        """Clean-set decode of the target utterances of every test pair."""
        models = self.models if n_components is None \
            else self.models_with(n_components)
        li = self.corpus.grammar.slot_index("letter")
        ni = self.corpus.grammar.slot_index("number")
        cache: dict[str, list] = {}
        items = []
        seen_pairs = set()
        for mix in self.corpus.test_mixtures:
            pair_key = (mix.target_id, mix.masker_id, mix.condition)
            if pair_key in seen_pairs:
                continue
            seen_pairs.add(pair_key)
            utt_id = mix.target_id
            if utt_id not in cache:
                spk = self.corpus.utterances[utt_id].speaker_id
                fs = self.bank.utt_mfcc(utt_id)
                ll = acoustic.log_likelihood_matrix(models.adapted[spk],
                                                    fs.frames)
                res = decoder.decode_single_chain(ll, self.target_net,
                                                  models.adapted[spk])
                cache[utt_id] = res.words_a
            words = cache[utt_id]
            ref = self.corpus.utterances[utt_id].words
            items.append(MixtureResult(
                f"clean:{utt_id}", None, mix.condition, words, [], ref, (),
                words[li] == ref[li], words[ni] == ref[ni], 0.0))
        return _accuracy_rows(items, f"single_talker[{models.base.states[0].n_components}]",
                              tag), items


def run_joint_experiment(cfg: ExperimentConfig, workdir: str):
    """Build everything from the config and run its configured estimator."""
    session = ExperimentSession(cfg, workdir)
    return session.run_estimator()


def run_single_talker_baseline(cfg: ExperimentConfig, workdir: str,
                               n_components: int | None = None):
    session = ExperimentSession(cfg, workdir)
    return session.run_single_talker(n_components)


def sweep(cfg: ExperimentConfig, axis: str, workdir: str,
          values=None, csv_path=None, plot_path=None):
    """Cross-product run varying one axis; returns (rows, items_by_value).

    axis "tmr" reports one row per TMR for the configured estimator;
    "estimator" runs each named estimator; "gain_mode" toggles oracle gain
    against grid estimation.
    """
    session = ExperimentSession(cfg, workdir)
    rows = []
    items_by_value = {}
    if axis == "tmr":
        values = list(values) if values is not None else list(cfg.tmr_set)
        all_rows, items = session.run_estimator()
        for tmr in values:
            for r in all_rows:
                if r.tmr_db == tmr and r.condition == "overall":
                    rows.append(replace(r, tag=f"tmr={tmr:g}"))
        items_by_value[cfg.estimator] = items
    elif axis == "estimator":
        values = list(values) if values is not None else list(ESTIMATORS)
        for est in values:
            est_rows, items = session.run_estimator(estimator=est)
            rows.extend(r for r in est_rows
                        if r.condition == "overall" and r.tmr_db is None)
            items_by_value[est] = items
    elif axis == "gain_mode":
        values = list(values) if values is not None else ["oracle", "estimated"]
        for mode in values:
            session.cfg = replace(session.cfg, oracle_gain=(mode == "oracle"))
            mode_rows, items = session.run_estimator(tag=mode)
            rows.extend(r for r in mode_rows
                        if r.condition == "overall" and r.tmr_db is None)
            items_by_value[mode] = items
        session.cfg = cfg
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")

    if csv_path:
        write_report_csv(csv_path, rows)
    if plot_path:
        _plot_sweep(rows, axis, plot_path)
    return rows, items_by_value


def _plot_sweep(rows, axis, plot_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if axis == "tmr":
        by_est: dict[str, list] = {}
        for r in rows:
            by_est.setdefault(r.estimator, []).append((r.tmr_db, r.combined_acc))
        for est, pts in by_est.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=est)
        ax.set_xlabel("TMR (dB)")
    else:
        labels = [r.tag or r.estimator for r in rows]
        ax.bar(range(len(rows)), [r.combined_acc for r in rows])
        ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylabel("combined accuracy (%)")
    ax.legend() if axis == "tmr" else None
    fig.tight_layout()
    fig.savefig(plot_path, format="svg")
    plt.close(fig)
