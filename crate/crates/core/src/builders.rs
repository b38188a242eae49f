//! Detection datasets built by negative sampling, and synthetic corpora
//! with known ground truth.
//!
//! Every sentence gets its own RNG stream derived from `(seed, sentence
//! index)`, so outputs are a pure function of the input and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::data::{ProbingExample, ProbingTarget, SpanIndex};
use crate::error::{Error, Result};
use crate::store::LayeredEmbeddings;

pub const POSITIVE: &str = "1";
pub const NEGATIVE: &str = "0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub negative_ratio: usize,
    pub seed: u64,
    /// Rejection draws per negative before choosing directly among the
    /// remaining free spans.
    pub max_attempts: usize,
}

impl SamplerConfig {
    pub fn constituent_detection(seed: u64) -> Self {
        SamplerConfig {
            negative_ratio: 1,
            seed,
            max_attempts: 100,
        }
    }

    pub fn mention_detection(seed: u64) -> Self {
        SamplerConfig {
            negative_ratio: 5,
            seed,
            max_attempts: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.negative_ratio == 0 || self.max_attempts == 0 {
            return Err(Error::Config(
                "negative ratio and attempt cap must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sentence sampling outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceReport {
    pub sentence: usize,
    pub positives: usize,
    pub negatives: usize,
    /// Negatives requested but not found within the attempt cap.
    pub shortfall: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOutput {
    pub examples: Vec<ProbingExample>,
    pub report: Vec<SentenceReport>,
}

impl BuildOutput {
    pub fn total_shortfall(&self) -> usize {
        self.report.iter().map(|r| r.shortfall).sum()
    }

    pub fn write_report<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["sentence", "positives", "negatives", "shortfall"])?;
        for r in &self.report {
            csv.write_record([
                r.sentence.to_string(),
                r.positives.to_string(),
                r.negatives.to_string(),
                r.shortfall.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

fn sentence_rng(seed: u64, sentence: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sentence as u64);
    rng
}

fn gold_spans(example: &ProbingExample) -> BTreeSet<SpanIndex> {
    example
        .targets
        .iter()
        .flat_map(|t| std::iter::once(t.span1).chain(t.span2))
        .collect()
}

fn labeled(
    example: &ProbingExample,
    positives: &BTreeSet<SpanIndex>,
    negatives: &[SpanIndex],
) -> ProbingExample {
    let mut targets: Vec<ProbingTarget> = positives
        .iter()
        .map(|&s| ProbingTarget::single(s, POSITIVE))
        .collect();
    targets.extend(
        negatives
            .iter()
            .map(|&s| ProbingTarget::single(s, NEGATIVE)),
    );
    ProbingExample {
        words: example.words.clone(),
        targets,
        info: example.info.clone(),
    }
}

fn free_spans(
    len: usize,
    words: usize,
    gold: &BTreeSet<SpanIndex>,
    taken: &BTreeSet<SpanIndex>,
) -> Vec<SpanIndex> {
    if len == 0 || len > words {
        return Vec::new();
    }
    (0..=words - len)
        .map(|start| SpanIndex {
            start,
            end: start + len,
        })
        .filter(|s| !gold.contains(s) && !taken.contains(s))
        .collect()
}

/// Rejection-samples a span of `len` words that is neither gold nor already
/// taken; returns `None` once `attempts` draws have all collided.
fn sample_span<R: Rng>(
    rng: &mut R,
    len: usize,
    words: usize,
    gold: &BTreeSet<SpanIndex>,
    taken: &BTreeSet<SpanIndex>,
    attempts: usize,
) -> Option<SpanIndex> {
    if len == 0 || len > words {
        return None;
    }
    for _ in 0..attempts {
        let start = rng.gen_range(0..=words - len);
        let span = SpanIndex {
            start,
            end: start + len,
        };
        if !gold.contains(&span) && !taken.contains(&span) {
            return Some(span);
        }
    }
    None
}

/// Index drawn with probability proportional to `weights` (positive total).
fn weighted_pick<R: Rng>(rng: &mut R, weights: &[usize]) -> usize {
    let mut pick = rng.gen_range(0..weights.iter().sum::<usize>());
    for (i, &w) in weights.iter().enumerate() {
        if pick < w {
            return i;
        }
        pick -= w;
    }
    unreachable!("pick below the weight total")
}

/// Constituent detection: every (deduplicated) gold constituent is a
/// positive, each paired with one random non-constituent of the same length.
pub fn build_constituent_detection(
    sources: &[ProbingExample],
    config: &SamplerConfig,
) -> Result<BuildOutput> {
    config.validate()?;
    let mut examples = Vec::with_capacity(sources.len());
    let mut report = Vec::with_capacity(sources.len());
    for (i, ex) in sources.iter().enumerate() {
        let gold = gold_spans(ex);
        let mut rng = sentence_rng(config.seed, i);
        let mut taken = BTreeSet::new();
        let mut negatives = Vec::new();
        let mut shortfall = 0;
        for positive in &gold {
            for _ in 0..config.negative_ratio {
                let len = positive.len();
                let words = ex.word_count();
                let drawn = sample_span(&mut rng, len, words, &gold, &taken, config.max_attempts)
                    .or_else(|| {
                        // crowded sentence: choose among the remaining candidates directly
                        let free = free_spans(len, words, &gold, &taken);
                        (!free.is_empty()).then(|| free[rng.gen_range(0..free.len())])
                    });
                match drawn {
                    Some(span) => {
                        taken.insert(span);
                        negatives.push(span);
                    }
                    None => shortfall += 1,
                }
            }
        }
        report.push(SentenceReport {
            sentence: i,
            positives: gold.len(),
            negatives: negatives.len(),
            shortfall,
        });
        examples.push(labeled(ex, &gold, &negatives));
    }
    Ok(BuildOutput { examples, report })
}

/// Mention detection: gold mentions (all spans of the source targets) are
/// positives; `negative_ratio` distinct non-mention negatives per mention,
/// with lengths drawn from the corpus-wide distribution of mention lengths.
pub fn build_mention_detection(
    sources: &[ProbingExample],
    config: &SamplerConfig,
) -> Result<BuildOutput> {
    config.validate()?;
    let golds: Vec<BTreeSet<SpanIndex>> = sources.iter().map(gold_spans).collect();
    let mut length_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for span in golds.iter().flatten() {
        *length_counts.entry(span.len()).or_default() += 1;
    }

    let mut examples = Vec::with_capacity(sources.len());
    let mut report = Vec::with_capacity(sources.len());
    for (i, (ex, gold)) in sources.iter().zip(&golds).enumerate() {
        let mut rng = sentence_rng(config.seed, i);
        let words = ex.word_count();
        let feasible: Vec<(usize, usize)> = length_counts
            .iter()
            .filter(|(&len, _)| len <= words)
            .map(|(&len, &count)| (len, count))
            .collect();
        let weight_total: usize = feasible.iter().map(|(_, c)| c).sum();
        let wanted = gold.len() * config.negative_ratio;
        let mut taken = BTreeSet::new();
        let mut negatives = Vec::new();
        if weight_total > 0 {
            for _ in 0..wanted {
                let weights: Vec<usize> = feasible.iter().map(|&(_, c)| c).collect();
                let mut found = None;
                for _ in 0..config.max_attempts {
                    let len = feasible[weighted_pick(&mut rng, &weights)].0;
                    if let Some(span) = sample_span(&mut rng, len, words, gold, &taken, 1) {
                        found = Some(span);
                        break;
                    }
                }
                if found.is_none() {
                    // crowded sentence: restrict the length draw to lengths
                    // that still have a free span, then pick among those spans
                    let free: Vec<Vec<SpanIndex>> = feasible
                        .iter()
                        .map(|&(len, _)| free_spans(len, words, gold, &taken))
                        .collect();
                    let open: Vec<usize> = weights
                        .iter()
                        .zip(&free)
                        .map(|(&w, f)| if f.is_empty() { 0 } else { w })
                        .collect();
                    if open.iter().any(|&w| w > 0) {
                        let spans = &free[weighted_pick(&mut rng, &open)];
                        found = Some(spans[rng.gen_range(0..spans.len())]);
                    }
                }
                if let Some(span) = found {
                    taken.insert(span);
                    negatives.push(span);
                }
            }
        }
        report.push(SentenceReport {
            sentence: i,
            positives: gold.len(),
            negatives: negatives.len(),
            shortfall: wanted - negatives.len(),
        });
        examples.push(labeled(ex, gold, &negatives));
    }
    Ok(BuildOutput { examples, report })
}

/// Ground-truth rule of a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Label is the parity of the first and last token classes; the interior is noise.
    Boundary,
    /// Label says whether a trigger class occurs strictly inside the span;
    /// span endpoints never carry the trigger.
    Content,
    /// Label is the sign of the summed class polarities, linear in the average.
    Separable,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(Regime::Boundary),
            "content" => Ok(Regime::Content),
            "separable" => Ok(Regime::Separable),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (boundary|content|separable)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub regime: Regime,
    pub train_targets: usize,
    pub valid_targets: usize,
    pub d_model: usize,
    pub layer_count: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(regime: Regime, train_targets: usize, valid_targets: usize, seed: u64) -> Self {
        SyntheticConfig {
            regime,
            train_targets,
            valid_targets,
            d_model: 32,
            layer_count: 2,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<ProbingExample>,
    pub valid: Vec<ProbingExample>,
    /// Embeddings for every sentence of both splits, keyed by `info.sentence_id`.
    pub sentences: Vec<LayeredEmbeddings>,
}

/// Ordinary token classes; the content regime adds one trigger class on top.
const CLASSES: usize = 6;
const TRIGGER: usize = CLASSES;
const MIN_WORDS: usize = 14;
const MAX_WORDS: usize = 20;

struct Generator<'a> {
    config: &'a SyntheticConfig,
    class_vectors: Vec<Vec<f32>>,
    polarity: Vec<i32>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn span_len_range(&self) -> (usize, usize) {
        match self.config.regime {
            Regime::Boundary => (1, 12),
            Regime::Content => (3, 12),
            Regime::Separable => (1, 9),
        }
    }

    fn random_class(&mut self) -> usize {
        self.rng.gen_range(0..CLASSES)
    }

    /// Fills `classes[start..end]` for one target and returns its label.
    fn fill_target(&mut self, classes: &mut [usize], start: usize, end: usize) -> bool {
        match self.config.regime {
            Regime::Boundary => {
                for c in &mut classes[start..end] {
                    *c = self.rng.gen_range(0..CLASSES);
                }
                (classes[start] + classes[end - 1]) % 2 == 1
            }
            Regime::Content => {
                let positive = self.rng.gen_bool(0.5);
                for c in &mut classes[start..end] {
                    *c = self.rng.gen_range(0..CLASSES);
                }
                if positive {
                    let inside = self.rng.gen_range(start + 1..end - 1);
                    classes[inside] = TRIGGER;
                }
                positive
            }
            Regime::Separable => loop {
                for c in &mut classes[start..end] {
                    *c = self.rng.gen_range(0..CLASSES);
                }
                let total: i32 = classes[start..end].iter().map(|&c| self.polarity[c]).sum();
                if total != 0 {
                    break total > 0;
                }
            },
        }
    }

    fn sentence(&mut self, id: u64, wanted_targets: usize) -> (ProbingExample, LayeredEmbeddings) {
        let words = self.rng.gen_range(MIN_WORDS..=MAX_WORDS);
        let mut classes: Vec<usize> = (0..words).map(|_| self.random_class()).collect();
        let (min_len, max_len) = self.span_len_range();
        // targets get disjoint word ranges so filling one cannot relabel another
        let mut free_from = 0;
        let mut targets = Vec::new();
        while targets.len() < wanted_targets {
            let len = self.rng.gen_range(min_len..=max_len);
            if free_from + len > words {
                break;
            }
            let start = self
                .rng
                .gen_range(free_from..=(words - len).min(free_from + 2));
            let label = self.fill_target(&mut classes, start, start + len);
            targets.push(ProbingTarget::single(
                SpanIndex {
                    start,
                    end: start + len,
                },
                if label {
                    crate::builders::POSITIVE
                } else {
                    crate::builders::NEGATIVE
                },
            ));
            free_from = start + len;
        }

        // subtoken 0 and the last subtoken are boundary markers outside every word
        let subtokens = words + 2;
        let dim = self.config.d_model;
        let layers = self.config.layer_count;
        let marker = CLASSES + 1;
        let mut values = Vec::with_capacity(layers * subtokens * dim);
        for l in 0..layers {
            for t in 0..subtokens {
                let class = if t == 0 || t == subtokens - 1 {
                    marker
                } else {
                    classes[t - 1]
                };
                values.extend_from_slice(&self.class_vectors[class * layers + l]);
            }
        }
        let alignment = (0..words).map(|w| (w + 1, w + 2)).collect();
        let emb = LayeredEmbeddings::new(id, layers, subtokens, dim, alignment, values)
            .expect("generator produces consistent shapes");
        let mut info = Map::new();
        info.insert("sentence_id".into(), Value::from(id));
        let text = classes.iter().map(|c| format!("c{c}")).collect();
        (
            ProbingExample {
                words: text,
                targets,
                info,
            },
            emb,
        )
    }
}

/// Generates train/valid corpora and their embeddings. Token embeddings are
/// fixed pseudo-random vectors per (class, layer).
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.train_targets == 0
        || config.valid_targets == 0
        || config.d_model == 0
        || config.layer_count == 0
    {
        return Err(Error::Config("synthetic sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vector_count = (CLASSES + 2) * config.layer_count;
    let class_vectors: Vec<Vec<f32>> = (0..vector_count)
        .map(|_| {
            (0..config.d_model)
                .map(|_| {
                    // sum of uniforms: cheap, bounded, roughly normal
                    let u: f32 = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).sum();
                    u * 0.5
                })
                .collect()
        })
        .collect();
    let polarity = (0..CLASSES)
        .map(|c| if c % 2 == 0 { 1 } else { -1 })
        .collect();
    let mut generator = Generator {
        config,
        class_vectors,
        polarity,
        rng,
    };

    let mut sentences = Vec::new();
    let mut next_id = 0u64;
    let mut split = |generator: &mut Generator<'_>, wanted: usize| {
        let mut examples = Vec::new();
        let mut produced = 0;
        while produced < wanted {
            let per_sentence = generator.rng.gen_range(1..=3).min(wanted - produced);
            let (ex, emb) = generator.sentence(next_id, per_sentence);
            next_id += 1;
            produced += ex.targets.len();
            if !ex.targets.is_empty() {
                examples.push(ex);
                sentences.push(emb);
            }
        }
        examples
    };
    let train = split(&mut generator, config.train_targets);
    let valid = split(&mut generator, config.valid_targets);
    Ok(SyntheticCorpus {
        train,
        valid,
        sentences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::encode_store;

    fn source(words: usize, spans: &[(usize, usize)]) -> ProbingExample {
        ProbingExample {
            words: (0..words).map(|i| format!("w{i}")).collect(),
            targets: spans
                .iter()
                .map(|&(s, e)| ProbingTarget::single(SpanIndex { start: s, end: e }, "NP"))
                .collect(),
            info: Map::new(),
        }
    }

    fn spans_with(ex: &ProbingExample, label: &str) -> Vec<SpanIndex> {
        ex.targets
            .iter()
            .filter(|t| t.labels.contains(label))
            .map(|t| t.span1)
            .collect()
    }

    #[test]
    fn constituent_negatives_from_exhaustive_candidates() {
        // all length-2 spans of 5 words minus the golds
        let candidates: BTreeSet<SpanIndex> = (0..4)
            .map(|s| SpanIndex {
                start: s,
                end: s + 2,
            })
            .filter(|s| {
                *s != SpanIndex { start: 0, end: 2 } && *s != SpanIndex { start: 3, end: 5 }
            })
            .collect();
        assert_eq!(candidates.len(), 2);
        for seed in 0..20 {
            let out = build_constituent_detection(
                &[source(5, &[(0, 2), (3, 5)])],
                &SamplerConfig::constituent_detection(seed),
            )
            .unwrap();
            let ex = &out.examples[0];
            assert_eq!(spans_with(ex, POSITIVE).len(), 2);
            let negs: BTreeSet<SpanIndex> = spans_with(ex, NEGATIVE).into_iter().collect();
            assert_eq!(negs, candidates);
            assert_eq!(out.total_shortfall(), 0);
        }
    }

    #[test]
    fn whole_sentence_constituent_is_skipped() {
        let out = build_constituent_detection(
            &[source(4, &[(0, 4)])],
            &SamplerConfig::constituent_detection(1),
        )
        .unwrap();
        assert_eq!(out.report[0].shortfall, 1);
        assert!(spans_with(&out.examples[0], NEGATIVE).is_empty());
        assert_eq!(spans_with(&out.examples[0], POSITIVE).len(), 1);
    }

    #[test]
    fn duplicate_golds_are_merged() {
        let out = build_constituent_detection(
            &[source(6, &[(1, 3), (1, 3)])],
            &SamplerConfig::constituent_detection(2),
        )
        .unwrap();
        assert_eq!(out.report[0].positives, 1);
        assert_eq!(out.report[0].negatives, 1);
    }

    #[test]
    fn mention_ratio_and_exhaustion() {
        let out = build_mention_detection(
            &[source(6, &[(2, 3)])],
            &SamplerConfig::mention_detection(0),
        )
        .unwrap();
        let negs = spans_with(&out.examples[0], NEGATIVE);
        assert_eq!(negs.len(), 5);
        assert_eq!(negs.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(!negs.contains(&SpanIndex { start: 2, end: 3 }));

        let full = build_mention_detection(
            &[source(1, &[(0, 1)])],
            &SamplerConfig::mention_detection(0),
        )
        .unwrap();
        assert_eq!(full.report[0].negatives, 0);
        assert_eq!(full.report[0].shortfall, 5);
    }

    #[test]
    fn builders_are_deterministic() {
        let corpus = vec![source(12, &[(0, 2), (3, 7)]), source(9, &[(4, 5)])];
        let cfg = SamplerConfig::mention_detection(42);
        assert_eq!(
            build_mention_detection(&corpus, &cfg).unwrap(),
            build_mention_detection(&corpus, &cfg).unwrap()
        );
        let cfg = SamplerConfig::constituent_detection(42);
        assert_eq!(
            build_constituent_detection(&corpus, &cfg).unwrap(),
            build_constituent_detection(&corpus, &cfg).unwrap()
        );
    }

    #[test]
    fn report_csv() {
        let out = build_constituent_detection(
            &[source(4, &[(0, 4)])],
            &SamplerConfig::constituent_detection(1),
        )
        .unwrap();
        let mut buf = Vec::new();
        out.write_report(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sentence,positives,negatives,shortfall\n0,1,0,1\n"
        );
    }

    fn class_of(word: &str) -> usize {
        word[1..].parse().unwrap()
    }

    #[test]
    fn boundary_labels_follow_endpoints() {
        let corpus = gen_synthetic(&SyntheticConfig::new(Regime::Boundary, 200, 50, 7)).unwrap();
        for ex in corpus.train.iter().chain(&corpus.valid) {
            for t in &ex.targets {
                let first = class_of(&ex.words[t.span1.start]);
                let last = class_of(&ex.words[t.span1.end - 1]);
                let expected = if (first + last) % 2 == 1 {
                    POSITIVE
                } else {
                    NEGATIVE
                };
                assert!(t.labels.contains(expected));
            }
        }
    }

    #[test]
    fn content_labels_follow_interior_trigger() {
        let corpus = gen_synthetic(&SyntheticConfig::new(Regime::Content, 300, 50, 3)).unwrap();
        let mut positives = 0;
        for ex in &corpus.train {
            for t in &ex.targets {
                let s = t.span1;
                assert!(s.len() >= 3);
                assert_ne!(class_of(&ex.words[s.start]), TRIGGER);
                assert_ne!(class_of(&ex.words[s.end - 1]), TRIGGER);
                let inside = ex.words[s.start + 1..s.end - 1]
                    .iter()
                    .any(|w| class_of(w) == TRIGGER);
                assert_eq!(t.labels.contains(POSITIVE), inside);
                positives += usize::from(inside);
            }
        }
        assert!(positives > 100 && positives < 200, "{positives}");
    }

    #[test]
    fn synthetic_sizes_and_determinism() {
        let cfg = SyntheticConfig::new(Regime::Separable, 100, 30, 11);
        let a = gen_synthetic(&cfg).unwrap();
        let count = |xs: &[ProbingExample]| xs.iter().map(|e| e.targets.len()).sum::<usize>();
        assert_eq!(count(&a.train), 100);
        assert_eq!(count(&a.valid), 30);
        assert_eq!(a.sentences.len(), a.train.len() + a.valid.len());
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(
            encode_store(&a.sentences).unwrap(),
            encode_store(&b.sentences).unwrap()
        );
        assert_eq!(a.train, b.train);
    }
}
