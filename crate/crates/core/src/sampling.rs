//! Guess generation.
//!
//! Three strategies share one batch loop:
//!
//! - **static**: `z ~ N(0, I)`, invert, decode.
//! - **dynamic**: once more than `α` targets have been matched, latents are drawn
//!   from a mixture of `N(zᵢ, σ²I)` centred on the latents of matched guesses.
//!   Component `i` carries weight `φ(uses(i), γ)`, a step function that drops a
//!   component after it has taken part in `γ` refresh rounds.
//! - **dynamic-gs**: dynamic, plus data-space Gaussian smoothing: a decoded guess
//!   already emitted is perturbed in data space until it decodes to something new.
//!
//! The prior is refreshed at batch boundaries. Every batch draws from its own
//! random stream `(seed, batch index)`, so output does not depend on the number
//! of worker threads used to invert the flow.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::encoding::{decode_vector, Charset};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::harness::{MatchReport, MatchTracker};
use crate::linalg::Matrix;
use crate::rng;

/// `(guesses, α, σ, γ)` rows used when dynamic parameters are not given.
pub const PARAMETER_TABLE: [(u64, usize, f64, u64); 5] = [
    (10_000, 1, 0.12, 2),
    (100_000, 1, 0.12, 2),
    (1_000_000, 5, 0.12, 2),
    (10_000_000, 50, 0.12, 10),
    (100_000_000, 50, 0.15, 10),
];

pub const DEFAULT_BATCH: usize = 1024;
pub const DEFAULT_SEEN_CAP: usize = 1 << 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Static,
    Dynamic,
    DynamicGs,
}

impl SamplingMode {
    pub fn is_dynamic(self) -> bool {
        !matches!(self, SamplingMode::Static)
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Static => "static",
            SamplingMode::Dynamic => "dynamic",
            SamplingMode::DynamicGs => "dynamic-gs",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(SamplingMode::Static),
            "dynamic" => Ok(SamplingMode::Dynamic),
            "dynamic-gs" | "dynamic_gs" => Ok(SamplingMode::DynamicGs),
            _ => Err(Error::InvalidConfig(format!("unknown sampling mode {s:?}"))),
        }
    }
}

/// Mixture-prior parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicParams {
    /// The mixture activates once more than `alpha` targets are matched.
    pub alpha: usize,
    /// Standard deviation of every mixture component.
    pub sigma: f64,
    /// Penalization threshold; `None` disables penalization (φ ≡ 1).
    pub gamma: Option<u64>,
}

impl DynamicParams {
    /// Row of [`PARAMETER_TABLE`] whose guess count is nearest to `n` on a log scale.
    pub fn for_budget(n: u64) -> Self {
        let target = (n.max(1) as f64).log10();
        let &(_, alpha, sigma, gamma) = PARAMETER_TABLE
            .iter()
            .min_by(|a, b| {
                let da = ((a.0 as f64).log10() - target).abs();
                let db = ((b.0 as f64).log10() - target).abs();
                da.total_cmp(&db)
            })
            .expect("table is non-empty");
        Self { alpha, sigma, gamma: Some(gamma) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.gamma == Some(0) {
            return Err(Error::InvalidConfig("gamma must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub n_guesses: u64,
    pub seed: u64,
    pub dynamic: DynamicParams,
    pub gs_sigma: f64,
    pub gs_max_attempts: usize,
    /// Draws per prior refresh.
    pub batch_size: usize,
    pub workers: usize,
    /// Exact seen-set capacity before switching to an approximate filter.
    pub seen_cap: usize,
}

impl SamplingConfig {
    pub fn new(mode: SamplingMode, n_guesses: u64, seed: u64) -> Self {
        Self {
            mode,
            n_guesses,
            seed,
            dynamic: DynamicParams::for_budget(n_guesses),
            gs_sigma: 0.01,
            gs_max_attempts: 10,
            batch_size: DEFAULT_BATCH,
            workers: 1,
            seen_cap: DEFAULT_SEEN_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.mode.is_dynamic() {
            self.dynamic.validate()?;
        }
        if !(self.gs_sigma >= 0.0 && self.gs_sigma.is_finite()) {
            return Err(Error::InvalidConfig("gs sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Step penalization: 1 while a component has been used fewer than `gamma` times.
pub fn phi(count: u64, gamma: Option<u64>) -> f64 {
    match gamma {
        Some(g) if count >= g => 0.0,
        _ => 1.0,
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| normal(rng)).collect()
}

/// Draws from `Σᵢ wᵢ N(cᵢ, σ²I) / Σ w`, or from `N(0, I)` when no weight is positive.
pub fn mixture_sample<R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    weights: &[f64],
    sigma: f64,
    dim: usize,
    rng: &mut R,
) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if centers.is_empty() || total <= 0.0 {
        return standard_normal(dim, rng);
    }
    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        chosen = Some(i);
        if pick < w {
            break;
        }
        pick -= w;
    }
    let c = &centers[chosen.expect("some weight is positive")];
    c.iter().map(|&m| m + sigma * normal(rng)).collect()
}

/// Matched-set bookkeeping for dynamic sampling.
#[derive(Debug, Clone)]
pub struct DynamicSamplerState {
    params: DynamicParams,
    matched: HashSet<String>,
    latents: Vec<Vec<f64>>,
    usage: Vec<u64>,
}

impl DynamicSamplerState {
    pub fn new(params: DynamicParams) -> Self {
        Self { params, matched: HashSet::new(), latents: Vec::new(), usage: Vec::new() }
    }

    pub fn params(&self) -> &DynamicParams {
        &self.params
    }

    pub fn matched(&self) -> &HashSet<String> {
        &self.matched
    }

    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn is_active(&self) -> bool {
        self.latents.len() > self.params.alpha
    }

    /// Records a match; only the first latent per password is kept.
    pub fn record_match(&mut self, password: &str, z: &[f64]) -> bool {
        if !self.matched.insert(password.to_owned()) {
            return false;
        }
        self.latents.push(z.to_vec());
        self.usage.push(0);
        true
    }

    /// Component weights for the next round, or `None` while the standard prior applies.
    pub fn weights(&self) -> Option<Vec<f64>> {
        if !self.is_active() {
            return None;
        }
        let w: Vec<f64> = self.usage.iter().map(|&c| phi(c, self.params.gamma)).collect();
        w.iter().any(|&v| v > 0.0).then_some(w)
    }

    /// Counts one round of use for every component that carried weight.
    pub fn end_round(&mut self, weights: &[f64]) {
        for (u, &w) in self.usage.iter_mut().zip(weights) {
            if w > 0.0 {
                *u += 1;
            }
        }
    }
}

/// Target set. Plaintext or SHA-256 digests of the UTF-8 password bytes.
#[derive(Debug, Clone)]
pub enum MembershipOracle {
    Plaintext(HashSet<String>),
    Sha256(HashSet<[u8; 32]>),
}

impl MembershipOracle {
    pub fn from_passwords<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        MembershipOracle::Plaintext(items.into_iter().map(Into::into).collect())
    }

    /// Parses a target file: plain passwords, or a `digest: <algo>` header followed by hex digests.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        let first = text.split('\n').next().unwrap_or("").trim_end_matches('\r');
        if let Some(algo) = first.strip_prefix("digest:") {
            lines.next();
            let algo = algo.trim();
            if !algo.eq_ignore_ascii_case("sha256") {
                return Err(Error::UnsupportedDigest(algo.to_owned()));
            }
            let mut set = HashSet::new();
            for l in lines.filter(|l| !l.trim().is_empty()) {
                let bytes = hex::decode(l.trim())
                    .ok()
                    .and_then(|b| <[u8; 32]>::try_from(b).ok())
                    .ok_or_else(|| Error::OracleUnavailable(format!("bad sha256 digest line {l:?}")))?;
                set.insert(bytes);
            }
            return Ok(MembershipOracle::Sha256(set));
        }
        Ok(MembershipOracle::Plaintext(lines.filter(|l| !l.is_empty()).map(str::to_owned).collect()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::OracleUnavailable(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, password: &str) -> bool {
        match self {
            MembershipOracle::Plaintext(s) => s.contains(password),
            MembershipOracle::Sha256(s) => s.contains(&<[u8; 32]>::from(Sha256::digest(password.as_bytes()))),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MembershipOracle::Plaintext(s) => s.len(),
            MembershipOracle::Sha256(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Bloom filter used once the exact seen-set reaches its cap.
#[derive(Debug, Clone)]
struct Bloom {
    bits: Vec<u64>,
    hashes: u32,
}

impl Bloom {
    /// Sized for `capacity` entries at a false-positive rate of about 1e-3.
    fn with_capacity(capacity: usize) -> Self {
        let nbits = ((capacity.max(1) as f64) * 14.4).ceil() as usize;
        Self { bits: vec![0; nbits.div_ceil(64)], hashes: 10 }
    }

    fn probes(&self, s: &str) -> impl Iterator<Item = usize> {
        let mut a = DefaultHasher::new();
        s.hash(&mut a);
        let h1 = a.finish();
        let mut b = DefaultHasher::new();
        (0xb10u16, s).hash(&mut b);
        let h2 = b.finish() | 1;
        let m = (self.bits.len() * 64) as u64;
        (0..self.hashes as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    fn insert(&mut self, s: &str) -> bool {
        let mut fresh = false;
        for p in self.probes(s).collect::<Vec<_>>() {
            let (w, b) = (p / 64, p % 64);
            fresh |= self.bits[w] & (1 << b) == 0;
            self.bits[w] |= 1 << b;
        }
        fresh
    }

    fn contains(&self, s: &str) -> bool {
        self.probes(s).all(|p| self.bits[p / 64] & (1 << (p % 64)) != 0)
    }
}

/// Set of emitted strings: exact up to `cap` entries, approximate afterwards.
#[derive(Debug, Clone)]
pub struct SeenSet {
    exact: HashSet<String>,
    cap: usize,
    overflow: Option<Bloom>,
}

impl SeenSet {
    pub fn new(cap: usize) -> Self {
        Self { exact: HashSet::new(), cap, overflow: None }
    }

    pub fn contains(&self, s: &str) -> bool {
        self.exact.contains(s) || self.overflow.as_ref().is_some_and(|b| b.contains(s))
    }

    /// Inserts `s`; returns whether it was (believed to be) new.
    pub fn insert(&mut self, s: &str) -> bool {
        if self.exact.contains(s) {
            return false;
        }
        if self.exact.len() < self.cap {
            self.exact.insert(s.to_owned());
            return true;
        }
        self.overflow.get_or_insert_with(|| Bloom::with_capacity(self.cap)).insert(s)
    }

    pub fn is_approximate(&self) -> bool {
        self.overflow.is_some()
    }
}

/// Perturbs `x` in data space until it decodes to a string `seen` rejects.
///
/// Noise accumulates across attempts. Returns the first unseen decoding, or the
/// last one tried when every attempt collides.
pub fn gaussian_smooth<R: Rng + ?Sized>(
    x: &[f64],
    seen: &dyn Fn(&str) -> bool,
    gs_sigma: f64,
    max_attempts: usize,
    cs: &Charset,
    rng: &mut R,
) -> String {
    let mut p = decode_vector(x, cs);
    if !seen(&p) {
        return p;
    }
    let mut cur = x.to_vec();
    for _ in 0..max_attempts {
        for v in &mut cur {
            *v += gs_sigma * normal(rng);
        }
        p = decode_vector(&cur, cs);
        if !seen(&p) {
            break;
        }
    }
    p
}

/// Inverts rows of `z`, splitting the rows across `workers` threads.
pub fn invert_parallel(model: &FlowModel, z: &Matrix, workers: usize) -> Result<Matrix> {
    let workers = workers.max(1).min(z.rows().max(1));
    if workers == 1 {
        return model.inverse_batch(z);
    }
    let per = z.rows().div_ceil(workers);
    let chunks: Vec<Matrix> = (0..z.rows()).step_by(per).map(|s| z.slice_rows(s, (s + per).min(z.rows()))).collect();
    let parts = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks.iter().map(|c| scope.spawn(move || model.inverse_batch(c))).collect();
        handles.into_iter().map(|h| h.join().expect("inversion worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let mut data = Vec::with_capacity(z.rows() * z.cols());
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Ok(Matrix::from_vec(z.rows(), z.cols(), data))
}

/// Outcome of a guessing run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: SamplingMode,
    pub seed: u64,
    pub batch_size: usize,
    pub dynamic: Option<DynamicParams>,
    pub gs: Option<(f64, usize)>,
    pub matches: MatchReport,
    /// Matched passwords in discovery order.
    pub matched_list: Vec<String>,
    pub approximate_unique: bool,
}

impl RunReport {
    /// Deterministic `key: value` text followed by the milestone table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let m = &self.matches;
        out.push_str(&format!("mode: {}\n", self.mode));
        out.push_str(&format!("guesses: {}\n", m.guesses));
        out.push_str(&format!("unique: {}\n", m.unique));
        out.push_str(&format!("matched: {}\n", m.matched));
        out.push_str(&format!("targets: {}\n", m.targets));
        out.push_str(&format!("match_rate: {:.6}\n", m.match_rate()));
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("batch: {}\n", self.batch_size));
        if let Some(d) = &self.dynamic {
            out.push_str(&format!("alpha: {}\n", d.alpha));
            out.push_str(&format!("sigma: {}\n", d.sigma));
            match d.gamma {
                Some(g) => out.push_str(&format!("gamma: {g}\n")),
                None => out.push_str("gamma: none\n"),
            }
        }
        if let Some((s, a)) = self.gs {
            out.push_str(&format!("gs_sigma: {s}\n"));
            out.push_str(&format!("gs_attempts: {a}\n"));
        }
        if self.approximate_unique {
            out.push_str("unique_is_approximate: true\n");
        }
        out.push('\n');
        out.push_str(&m.milestone_table());
        out
    }
}

/// Runs a guessing session, passing every guess to `sink` in order.
///
/// `oracle` may be `None` only in static mode; matches are then not counted.
pub fn generate(
    model: &FlowModel,
    oracle: Option<&MembershipOracle>,
    cfg: &SamplingConfig,
    sink: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.mode.is_dynamic() && oracle.is_none() {
        return Err(Error::OracleUnavailable("dynamic sampling needs a target set".into()));
    }
    let dim = model.dim();
    let cs = model.charset();
    let mut state = DynamicSamplerState::new(cfg.dynamic);
    let mut tracker = MatchTracker::new(oracle.map_or(0, MembershipOracle::len), cfg.n_guesses, cfg.seen_cap);
    let mut matched_list = Vec::new();
    let mut remaining = cfg.n_guesses;
    let mut batch_index = 0u64;

    while remaining > 0 {
        let rows = (cfg.batch_size as u64).min(remaining) as usize;
        let mut r = rng::stream(cfg.seed, rng::purpose::SAMPLE + batch_index);
        let weights = if cfg.mode.is_dynamic() { state.weights() } else { None };
        let mut z = Matrix::zeros(rows, dim);
        for i in 0..rows {
            let draw = match &weights {
                Some(w) => mixture_sample(state.latents(), w, cfg.dynamic.sigma, dim, &mut r),
                None => standard_normal(dim, &mut r),
            };
            z.row_mut(i).copy_from_slice(&draw);
        }
        if let Some(w) = &weights {
            state.end_round(w);
        }
        let x = invert_parallel(model, &z, cfg.workers)?;
        for i in 0..rows {
            let guess = if cfg.mode == SamplingMode::DynamicGs {
                let seen = |p: &str| tracker.seen(p);
                gaussian_smooth(x.row(i), &seen, cfg.gs_sigma, cfg.gs_max_attempts, cs, &mut r)
            } else {
                decode_vector(x.row(i), cs)
            };
            let hit = oracle.is_some_and(|o| o.contains(&guess));
            tracker.observe(&guess, hit);
            if hit && state.record_match(&guess, z.row(i)) {
                matched_list.push(guess.clone());
            }
            sink(&guess)?;
        }
        remaining -= rows as u64;
        batch_index += 1;
    }

    Ok(RunReport {
        mode: cfg.mode,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        dynamic: cfg.mode.is_dynamic().then_some(cfg.dynamic),
        gs: (cfg.mode == SamplingMode::DynamicGs).then_some((cfg.gs_sigma, cfg.gs_max_attempts)),
        approximate_unique: tracker.is_approximate(),
        matches: tracker.finish(),
        matched_list,
    })
}

/// Static sampling of `n` guesses.
pub fn sample_static(model: &FlowModel, n: u64, seed: u64) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(n as usize);
    let cfg = SamplingConfig::new(SamplingMode::Static, n, seed);
    generate(model, None, &cfg, &mut |g| {
        out.push(g.to_owned());
        Ok(())
    })?;
    Ok(out)
}

/// Dynamic (or dynamic-gs) run against an oracle.
pub fn dynamic_sample(
    model: &FlowModel,
    oracle: &MembershipOracle,
    cfg: &SamplingConfig,
    sink: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<RunReport> {
    generate(model, Some(oracle), cfg, sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_password;
    use crate::flow::FlowConfig;

    fn toy_model(seed: u64) -> FlowModel {
        let cfg = FlowConfig { dim: 6, layers: 4, hidden: 8, blocks: 1, ..FlowConfig::default() };
        let mut m = FlowModel::new(cfg, Charset::default(), seed).unwrap();
        m.perturb(seed, 0.05);
        m
    }

    fn identity_model() -> FlowModel {
        let cfg = FlowConfig { dim: 6, layers: 2, hidden: 4, blocks: 1, ..FlowConfig::default() };
        FlowModel::new(cfg, Charset::default(), 0).unwrap()
    }

    #[test]
    fn phi_is_a_step() {
        assert_eq!(phi(1, Some(2)), 1.0);
        assert_eq!(phi(2, Some(2)), 0.0);
        for g in 1..5 {
            assert_eq!(phi(0, Some(g)), 1.0);
        }
        assert_eq!(phi(1_000, None), 1.0);
    }

    #[test]
    fn parameter_table_lookup() {
        assert_eq!(DynamicParams::for_budget(1_000_000), DynamicParams { alpha: 5, sigma: 0.12, gamma: Some(2) });
        assert_eq!(DynamicParams::for_budget(100_000).alpha, 1);
        assert_eq!(DynamicParams::for_budget(20_000_000), DynamicParams { alpha: 50, sigma: 0.12, gamma: Some(10) });
        assert_eq!(DynamicParams::for_budget(1_000_000_000).sigma, 0.15);
        assert_eq!(DynamicParams::for_budget(10).alpha, 1);
    }

    #[test]
    fn mixture_edge_cases() {
        let mut r = rng::stream(1, 0);
        let mut r2 = rng::stream(1, 0);
        // Empty mixture consumes randomness exactly like a standard draw.
        assert_eq!(mixture_sample(&[], &[], 0.1, 3, &mut r), standard_normal(3, &mut r2));
        let z1 = vec![1.0, -2.0, 0.5];
        let p = mixture_sample(std::slice::from_ref(&z1), &[1.0], 1e-12, 3, &mut r);
        for (a, b) in p.iter().zip(&z1) {
            assert!((a - b).abs() < 1e-9);
        }
        let z2 = vec![10.0, 10.0, 10.0];
        for _ in 0..200 {
            let p = mixture_sample(&[z1.clone(), z2.clone()], &[1.0, 0.0], 0.01, 3, &mut r);
            assert!((p[0] - 1.0).abs() < 0.1);
        }
    }

    fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
        let d = |c: &Vec<f64>| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..centers.len()).min_by(|&a, &b| d(&centers[a]).total_cmp(&d(&centers[b]))).unwrap()
    }

    #[test]
    fn mixture_frequencies_follow_weights() {
        let centers = vec![vec![-5.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let weights = [1.0, 1.0, 0.0];
        let n = 100_000;
        let mut r = rng::stream(9, 0);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[nearest(&mixture_sample(&centers, &weights, 0.1, 2, &mut r), &centers)] += 1;
        }
        let band = 3.0 * (n as f64 * 0.25).sqrt();
        assert!((counts[0] as f64 - n as f64 / 2.0).abs() <= band, "{counts:?}");
        assert_eq!(counts[2], 0);
    }

    proptest::proptest! {
        #[test]
        fn exhausted_components_are_never_picked(usage in proptest::collection::vec(0u64..5, 1..6), gamma in 1u64..5, seed in 0u64..100) {
            let centers: Vec<Vec<f64>> = (0..usage.len()).map(|i| vec![10.0 * i as f64]).collect();
            let w: Vec<f64> = usage.iter().map(|&c| phi(c, Some(gamma))).collect();
            let mut r = rng::stream(seed, 0);
            for _ in 0..200 {
                let p = mixture_sample(&centers, &w, 0.01, 1, &mut r);
                if w.iter().any(|&v| v > 0.0) {
                    proptest::prop_assert!(w[nearest(&p, &centers)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn state_activation_and_penalization() {
        let mut s = DynamicSamplerState::new(DynamicParams { alpha: 1, sigma: 0.1, gamma: Some(2) });
        assert!(s.record_match("a", &[0.0]));
        assert!(!s.record_match("a", &[1.0]));
        assert_eq!(s.weights(), None);
        assert!(s.record_match("b", &[1.0]));
        assert!(s.is_active());
        let w = s.weights().unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        s.end_round(&w);
        s.end_round(&s.weights().unwrap());
        // Both exhausted: fall back to the standard prior.
        assert_eq!(s.weights(), None);
        s.record_match("c", &[2.0]);
        assert_eq!(s.weights().unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(s.matched().len(), s.latents().len());
    }

    #[test]
    fn smoothing_edge_cases() {
        let cs = Charset::default();
        let x = encode_password("abc", &cs, 6).unwrap().into_inner();
        let mut r = rng::stream(3, 0);
        assert_eq!(gaussian_smooth(&x, &|_| false, 0.0, 5, &cs, &mut r), "abc");
        assert_eq!(gaussian_smooth(&x, &|_| true, 0.1, 0, &cs, &mut r), "abc");
        let seen_abc = |p: &str| p == "abc";
        let escaped = (0..200).filter(|_| gaussian_smooth(&x, &seen_abc, 0.5 / 96.0, 10, &cs, &mut r) != "abc").count();
        assert!(escaped > 0);
    }

    #[test]
    fn oracle_parsing() {
        let o = MembershipOracle::parse("abc\r\nxyz\n\n").unwrap();
        assert!(o.contains("abc") && o.contains("xyz") && !o.contains(""));
        assert_eq!(o.len(), 2);
        let digest = hex::encode(Sha256::digest(b"hello"));
        let o = MembershipOracle::parse(&format!("digest: sha256\n{digest}\n")).unwrap();
        assert!(o.contains("hello") && !o.contains("hellO"));
        assert!(matches!(MembershipOracle::parse("digest: md5\nabc\n"), Err(Error::UnsupportedDigest(_))));
        assert!(MembershipOracle::parse("digest: sha256\nnothex\n").is_err());
    }

    #[test]
    fn seen_set_overflows_to_filter() {
        let mut s = SeenSet::new(3);
        for w in ["a", "b", "c"] {
            assert!(s.insert(w));
        }
        assert!(!s.is_approximate());
        assert!(s.insert("d"));
        assert!(s.is_approximate());
        assert!(s.contains("a") && s.contains("d"));
        assert!(!s.insert("d"));
        let false_hits = (0..10_000).filter(|i| s.contains(&format!("zz{i}"))).count();
        assert!(false_hits < 50, "{false_hits}");
    }

    #[test]
    fn static_sampling_contract() {
        let m = toy_model(1);
        assert!(sample_static(&m, 0, 1).unwrap().is_empty());
        let a = sample_static(&m, 3000, 7).unwrap();
        assert_eq!(a.len(), 3000);
        assert_eq!(a, sample_static(&m, 3000, 7).unwrap());
        assert_ne!(a, sample_static(&m, 3000, 8).unwrap());
        // Null model: raw Gaussian noise decodes to short strings mostly.
        let id = sample_static(&identity_model(), 100, 1).unwrap();
        assert_eq!(id.len(), 100);
    }

    #[test]
    fn workers_do_not_change_output() {
        let m = toy_model(2);
        let oracle = MembershipOracle::from_passwords(["a", "b"]);
        let run = |workers| {
            let mut cfg = SamplingConfig::new(SamplingMode::Dynamic, 2500, 3);
            cfg.workers = workers;
            let mut out = Vec::new();
            let rep = generate(&m, Some(&oracle), &cfg, &mut |g| {
                out.push(g.to_owned());
                Ok(())
            })
            .unwrap();
            (out, rep)
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn dynamic_with_unreachable_alpha_equals_static() {
        let m = toy_model(3);
        let stat = sample_static(&m, 2048, 5).unwrap();
        let oracle = MembershipOracle::from_passwords(stat.iter().take(50).cloned());
        let mut cfg = SamplingConfig::new(SamplingMode::Dynamic, 2048, 5);
        cfg.dynamic.alpha = usize::MAX;
        let mut dynamic = Vec::new();
        generate(&m, Some(&oracle), &cfg, &mut |g| {
            dynamic.push(g.to_owned());
            Ok(())
        })
        .unwrap();
        assert_eq!(stat, dynamic);

        // An oracle that never matches keeps the prior untouched as well.
        let never = MembershipOracle::from_passwords(Vec::<String>::new());
        let mut cfg = SamplingConfig::new(SamplingMode::Dynamic, 2048, 5);
        cfg.dynamic.alpha = 0;
        let mut out = Vec::new();
        let rep = generate(&m, Some(&never), &cfg, &mut |g| {
            out.push(g.to_owned());
            Ok(())
        })
        .unwrap();
        assert_eq!(out, stat);
        assert_eq!(rep.matches.matched, 0);
    }

    #[test]
    fn dynamic_needs_oracle() {
        let cfg = SamplingConfig::new(SamplingMode::Dynamic, 10, 0);
        assert!(matches!(generate(&toy_model(1), None, &cfg, &mut |_| Ok(())), Err(Error::OracleUnavailable(_))));
    }

    #[test]
    fn report_accounting() {
        let m = toy_model(4);
        let stat = sample_static(&m, 5000, 1).unwrap();
        let oracle = MembershipOracle::from_passwords(stat.iter().step_by(7).cloned());
        for mode in [SamplingMode::Static, SamplingMode::Dynamic, SamplingMode::DynamicGs] {
            let cfg = SamplingConfig::new(mode, 5000, 2);
            let rep = generate(&m, Some(&oracle), &cfg, &mut |_| Ok(())).unwrap();
            let r = &rep.matches;
            assert_eq!(r.guesses, 5000);
            assert!(r.matched <= r.unique && r.unique <= r.guesses);
            assert_eq!(rep.matched_list.len() as u64, r.matched);
            assert!(rep.to_text().contains(&format!("mode: {mode}")));
        }
    }
}
