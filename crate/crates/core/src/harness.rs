//! Evaluation plumbing: splitting, match accounting, synthetic corpora, ablations.

use std::collections::HashSet;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoding::{encode_password, Charset, DataVector};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, MaskKind};
use crate::rng;
use crate::sampling::{generate, MembershipOracle, SamplingConfig, SamplingMode, SeenSet};
use crate::training::{train, TrainConfig};

pub const MILESTONES: [u64; 5] = [10_000, 100_000, 1_000_000, 10_000_000, 100_000_000];

const NAMES: &str = include_str!("../data/names.txt");
const WORDS: &str = include_str!("../data/words.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub train_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8, train_subsample: None, seed: 0 }
    }
}

/// Shuffles, cuts at `train_fraction`, optionally subsamples the training side,
/// then deduplicates the test side and removes anything present in the returned
/// training list.
pub fn split_and_clean(corpus: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("train fraction must be in (0, 1), got {}", spec.train_fraction)));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut shuffled = corpus.to_vec();
    shuffled.shuffle(&mut rng::stream(spec.seed, rng::purpose::SPLIT));
    let cut = (spec.train_fraction * shuffled.len() as f64).round() as usize;
    let rest = shuffled.split_off(cut);
    let mut train = shuffled;
    if let Some(k) = spec.train_subsample {
        train.truncate(k);
    }
    let in_train: HashSet<&str> = train.iter().map(String::as_str).collect();
    let mut kept = HashSet::new();
    let test: Vec<String> =
        rest.into_iter().filter(|p| !in_train.contains(p.as_str()) && kept.insert(p.clone())).collect();
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilestoneRow {
    pub guesses: u64,
    pub unique: u64,
    pub matched: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub guesses: u64,
    pub unique: u64,
    pub matched: u64,
    /// Size of the target set.
    pub targets: u64,
    pub rows: Vec<MilestoneRow>,
}

impl MatchReport {
    pub fn match_rate(&self) -> f64 {
        rate(self.matched, self.targets)
    }

    /// Tab-separated milestone rows with a header line.
    pub fn milestone_table(&self) -> String {
        let mut out = String::from("milestone\tguesses\tunique\tmatched\tmatch_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6}\n",
                r.guesses,
                r.guesses,
                r.unique,
                r.matched,
                rate(r.matched, self.targets)
            ));
        }
        out
    }
}

fn rate(matched: u64, targets: u64) -> f64 {
    if targets == 0 {
        0.0
    } else {
        matched as f64 / targets as f64
    }
}

/// Single-pass counter over a guess stream.
#[derive(Debug, Clone)]
pub struct MatchTracker {
    seen: SeenSet,
    targets: u64,
    guesses: u64,
    unique: u64,
    matched: u64,
    /// Milestones still ahead, ascending; the planned total is appended when it is not one.
    pending: Vec<u64>,
    rows: Vec<MilestoneRow>,
}

impl MatchTracker {
    pub fn new(targets: usize, planned: u64, seen_cap: usize) -> Self {
        let mut pending: Vec<u64> = MILESTONES.iter().copied().filter(|&m| m <= planned).collect();
        if planned > 0 && !pending.contains(&planned) {
            pending.push(planned);
        }
        pending.reverse();
        Self { seen: SeenSet::new(seen_cap), targets: targets as u64, guesses: 0, unique: 0, matched: 0, pending, rows: Vec::new() }
    }

    pub fn seen(&self, guess: &str) -> bool {
        self.seen.contains(guess)
    }

    /// Counts one guess. `hit` says whether it is in the target set.
    pub fn observe(&mut self, guess: &str, hit: bool) -> bool {
        self.guesses += 1;
        let fresh = self.seen.insert(guess);
        if fresh {
            self.unique += 1;
            if hit {
                self.matched += 1;
            }
        }
        if self.pending.last() == Some(&self.guesses) {
            self.pending.pop();
            self.rows.push(MilestoneRow { guesses: self.guesses, unique: self.unique, matched: self.matched });
        }
        fresh
    }

    pub fn is_approximate(&self) -> bool {
        self.seen.is_approximate()
    }

    pub fn finish(self) -> MatchReport {
        MatchReport { guesses: self.guesses, unique: self.unique, matched: self.matched, targets: self.targets, rows: self.rows }
    }
}

/// Counts guesses, distinct guesses and distinct guesses present in `test`.
pub fn evaluate<I, S>(guesses: I, test: &HashSet<String>) -> MatchReport
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let guesses: Vec<S> = guesses.into_iter().collect();
    let mut t = MatchTracker::new(test.len(), guesses.len() as u64, usize::MAX);
    for g in &guesses {
        let g = g.as_ref();
        t.observe(g, test.contains(g));
    }
    t.finish()
}

/// Relative template weights for [`gen_synthetic_corpus`]:
/// name+year, word+digit, word+symbol+digits, plain word, leetified word.
pub type TemplateWeights = [f64; 5];

pub const DEFAULT_TEMPLATE_WEIGHTS: TemplateWeights = [0.3, 0.2, 0.15, 0.2, 0.15];

const SYMBOLS: [char; 6] = ['!', '@', '#', '$', '.', '_'];
const DIGIT_TAILS: [&str; 8] = ["1", "12", "123", "01", "07", "69", "99", "2"];
const MAX_SYNTHETIC_LEN: usize = 10;

fn list(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Popularity falls off as 1/rank.
fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| 1.0 / r as f64)).expect("non-empty list")
}

fn leetify(word: &str) -> String {
    word.chars()
        .map(|c| match c {
            'a' => '4',
            'e' => '3',
            'i' => '1',
            'o' => '0',
            's' => '5',
            't' => '7',
            c => c,
        })
        .collect()
}

/// Draws `n` passwords from a fixed template family. Deterministic in `seed`.
pub fn gen_synthetic_corpus(n: usize, seed: u64, weights: &TemplateWeights) -> Result<Vec<String>> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("template weights must be non-negative and sum to 1".into()));
    }
    let names = list(NAMES);
    let words = list(WORDS);
    let name_pop = zipf(names.len());
    let word_pop = zipf(words.len());
    let tail_pop = zipf(DIGIT_TAILS.len());
    let template = WeightedIndex::new(weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut r = rng::stream(seed, rng::purpose::CORPUS);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let word = words[r.sample(&word_pop)];
        let p = match r.sample(&template) {
            0 => {
                // Years cluster around the late eighties to early noughties.
                let year = (85 + (r.gen::<f64>() * r.gen::<f64>() * 30.0) as u32) % 100;
                format!("{}{:02}", names[r.sample(&name_pop)], year)
            }
            1 => format!("{word}{}", r.gen_range(0..10)),
            2 => format!("{word}{}{}", SYMBOLS[r.gen_range(0..SYMBOLS.len())], DIGIT_TAILS[r.sample(&tail_pop)]),
            3 => word.to_owned(),
            _ => leetify(word),
        };
        if p.len() <= MAX_SYNTHETIC_LEN {
            out.push(p);
        }
    }
    Ok(out)
}

fn encode_many(passwords: &[String], cs: &Charset, dim: usize) -> Result<Vec<DataVector>> {
    passwords.iter().map(|p| encode_password(p, cs, dim)).collect()
}

/// Shared settings for the comparison experiments.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub guesses: u64,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub final_loss: f64,
    pub report: MatchReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("config\tfinal_loss\tguesses\tunique\tmatched\tmatch_rate\n");
        for r in &self.rows {
            let m = &r.report;
            out.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\t{}\t{:.6}\n",
                r.label,
                r.final_loss,
                m.guesses,
                m.unique,
                m.matched,
                m.match_rate()
            ));
        }
        out
    }
}

fn train_and_score(train_set: &[String], test: &[String], flow: FlowConfig, cfg: &ExperimentConfig) -> Result<(f64, MatchReport)> {
    let cs = Charset::default();
    let data = encode_many(train_set, &cs, flow.dim)?;
    let mut model = FlowModel::new(flow, cs, cfg.model_seed)?;
    let outcome = train(&mut model, &data, &cfg.train, &mut |_| {})?;
    let final_loss = outcome.best_epoch.map_or(outcome.initial_loss, |e| outcome.history[e - 1]);
    let oracle = MembershipOracle::from_passwords(test.iter().cloned());
    let sampling = SamplingConfig::new(SamplingMode::Static, cfg.guesses, cfg.sample_seed);
    let run = generate(&model, Some(&oracle), &sampling, &mut |_| Ok(()))?;
    Ok((final_loss, run.matches))
}

/// Trains one model per mask kind under identical seeds and scores static guessing.
pub fn masking_ablation(train_set: &[String], test: &[String], kinds: &[MaskKind], cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("at least one mask kind is required".into()));
    }
    let mut rows = Vec::new();
    for &kind in kinds {
        let flow = FlowConfig { mask: kind, ..cfg.flow };
        let (final_loss, report) = train_and_score(train_set, test, flow, cfg)?;
        rows.push(ComparisonRow { label: kind.to_string(), final_loss, report });
    }
    Ok(ComparisonTable { rows })
}

/// Trains on growing prefixes of `train_set` and scores each model the same way.
pub fn train_size_sweep(train_set: &[String], test: &[String], sizes: &[usize], cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for &n in sizes {
        let n = n.min(train_set.len());
        if n == 0 {
            return Err(Error::EmptySplit("train"));
        }
        let (final_loss, report) = train_and_score(&train_set[..n], test, cfg.flow, cfg)?;
        rows.push(ComparisonRow { label: n.to_string(), final_loss, report });
    }
    Ok(ComparisonTable { rows })
}
