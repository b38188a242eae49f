//! Oracles shared by the integration suites and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanprobe::builders::{BuildOutput, NEGATIVE, POSITIVE};
use spanprobe::{ProbingExample, ProbingTarget, SpanIndex};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn all_spans(words: usize, len: usize) -> Vec<SpanIndex> {
    if len == 0 || len > words {
        return Vec::new();
    }
    (0..=words - len)
        .map(|start| SpanIndex {
            start,
            end: start + len,
        })
        .collect()
}

/// Random sentences with random (possibly duplicated or nested) labeled spans.
pub fn random_sources(seed: u64, sentences: usize, max_spans: usize) -> Vec<ProbingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|i| {
            let words = rng.gen_range(1..=12);
            let targets = (0..rng.gen_range(0..=max_spans))
                .map(|_| {
                    let start = rng.gen_range(0..words);
                    let end = rng.gen_range(start + 1..=(start + 4).min(words));
                    ProbingTarget::single(
                        SpanIndex { start, end },
                        ["NP", "VP", "PP"][rng.gen_range(0..3)],
                    )
                })
                .collect();
            let mut info = serde_json::Map::new();
            info.insert("sentence_id".into(), (i as u64).into());
            ProbingExample {
                words: (0..words).map(|w| format!("w{w}")).collect(),
                targets,
                info,
            }
        })
        .collect()
}

fn gold_set(ex: &ProbingExample) -> BTreeSet<SpanIndex> {
    ex.targets
        .iter()
        .flat_map(|t| std::iter::once(t.span1).chain(t.span2))
        .collect()
}

fn split(ex: &ProbingExample) -> Result<(Vec<SpanIndex>, Vec<SpanIndex>), String> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in &ex.targets {
        let label: Vec<&String> = t.labels.iter().collect();
        match label.as_slice() {
            [l] if l.as_str() == POSITIVE => pos.push(t.span1),
            [l] if l.as_str() == NEGATIVE => neg.push(t.span1),
            other => return Err(format!("unexpected labels {other:?}")),
        }
        ensure!(t.span2.is_none(), "detection targets have one span");
    }
    Ok((pos, neg))
}

/// Every gold constituent appears once as a positive; each negative is a
/// distinct non-gold span; per length, negatives = min(positives, available
/// non-gold spans) by exhaustive enumeration; the report agrees.
pub fn check_constituent_output(sources: &[ProbingExample], out: &BuildOutput) -> Check {
    ensure!(
        out.examples.len() == sources.len(),
        "sentence count changed"
    );
    for (i, (src, ex)) in sources.iter().zip(&out.examples).enumerate() {
        ensure!(src.words == ex.words, "sentence {i}: words changed");
        let gold = gold_set(src);
        let (pos, neg) = split(ex)?;
        ensure!(
            pos.iter().copied().collect::<BTreeSet<_>>() == gold && pos.len() == gold.len(),
            "sentence {i}: positives != deduplicated golds"
        );
        let distinct: BTreeSet<_> = neg.iter().collect();
        ensure!(
            distinct.len() == neg.len(),
            "sentence {i}: repeated negative"
        );
        let mut by_len_pos: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &gold {
            *by_len_pos.entry(g.len()).or_default() += 1;
        }
        let mut by_len_neg: BTreeMap<usize, usize> = BTreeMap::new();
        for n in &neg {
            ensure!(!gold.contains(n), "sentence {i}: negative {n} is gold");
            ensure!(
                n.within(src.words.len()),
                "sentence {i}: negative {n} out of bounds"
            );
            *by_len_neg.entry(n.len()).or_default() += 1;
        }
        for (&len, &count) in &by_len_neg {
            ensure!(
                by_len_pos.contains_key(&len),
                "sentence {i}: negative length {len} has no positive"
            );
            ensure!(
                count <= by_len_pos[&len],
                "sentence {i}: more length-{len} negatives than positives"
            );
        }
        let mut skipped = 0;
        for (&len, &p) in &by_len_pos {
            let available = all_spans(src.words.len(), len)
                .into_iter()
                .filter(|s| !gold.contains(s))
                .count();
            let got = by_len_neg.get(&len).copied().unwrap_or(0);
            ensure!(
                got == p.min(available),
                "sentence {i}: {got} length-{len} negatives, expected {}",
                p.min(available)
            );
            skipped += p - got;
        }
        let r = &out.report[i];
        ensure!(
            r.positives == gold.len() && r.negatives == neg.len() && r.shortfall == skipped,
            "sentence {i}: report {r:?} disagrees"
        );
    }
    Ok(())
}

/// Negatives are distinct non-gold spans with a length seen among the corpus
/// mentions; exactly `ratio` per mention wherever enough such spans exist,
/// otherwise every available one.
pub fn check_mention_output(sources: &[ProbingExample], out: &BuildOutput, ratio: usize) -> Check {
    let lengths: BTreeSet<usize> = sources.iter().flat_map(gold_set).map(|s| s.len()).collect();
    let (mut total_pos, mut total_neg) = (0, 0);
    for (i, (src, ex)) in sources.iter().zip(&out.examples).enumerate() {
        let gold = gold_set(src);
        let (pos, neg) = split(ex)?;
        ensure!(
            pos.iter().copied().collect::<BTreeSet<_>>() == gold && pos.len() == gold.len(),
            "sentence {i}: positives != golds"
        );
        let distinct: BTreeSet<_> = neg.iter().collect();
        ensure!(
            distinct.len() == neg.len(),
            "sentence {i}: repeated negative"
        );
        for n in &neg {
            ensure!(!gold.contains(n), "sentence {i}: negative {n} is a mention");
            ensure!(
                lengths.contains(&n.len()),
                "sentence {i}: negative length {} never seen",
                n.len()
            );
        }
        let available = lengths
            .iter()
            .flat_map(|&l| all_spans(src.words.len(), l))
            .filter(|s| !gold.contains(s))
            .count();
        let wanted = ratio * gold.len();
        ensure!(
            neg.len() == wanted.min(available),
            "sentence {i}: {} negatives, expected min({wanted} wanted, {available} available)",
            neg.len()
        );
        ensure!(
            out.report[i].shortfall == wanted - neg.len(),
            "sentence {i}: shortfall misreported"
        );
        total_pos += gold.len();
        total_neg += neg.len();
    }
    ensure!(
        total_neg <= ratio * total_pos,
        "corpus ratio above {ratio}:1"
    );
    Ok(())
}
