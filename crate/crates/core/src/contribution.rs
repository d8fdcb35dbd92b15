//! Contribution evaluation: coalition utilities, exact Shapley, GTG-Shapley,
//! Leave-One-Out, ADP and score normalisation.
//!
//! Coalitions are bitmasks over 0-based client indices. The utility of a
//! coalition is the validation utility of the FedAvg aggregate of its
//! members' submitted updates; the empty coalition is the previous global
//! model.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{fed_avg_mask, RoundUpdateSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{forward_loss, ModelParams};

/// Largest client count accepted by [`exact_shapley`].
pub const MAX_EXACT_PLAYERS: usize = 16;

/// Coalition utilities are "higher is better" for both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    /// Negated mean validation loss.
    #[default]
    NegLoss,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeMethod {
    Sv,
    Gtg,
    Loo,
    Adp,
}

impl CeMethod {
    pub fn name(self) -> &'static str {
        match self {
            CeMethod::Sv => "sv",
            CeMethod::Gtg => "gtg",
            CeMethod::Loo => "loo",
            CeMethod::Adp => "adp",
        }
    }
}

/// A transferable-utility game over `players()` players.
pub trait CoalitionGame {
    fn players(&self) -> usize;
    fn value(&self, mask: u64) -> f64;

    fn grand_coalition(&self) -> u64 {
        full_mask(self.players())
    }
}

pub fn full_mask(players: usize) -> u64 {
    if players >= 64 {
        u64::MAX
    } else {
        (1u64 << players) - 1
    }
}

/// A game given by an explicit value table indexed by coalition mask.
#[derive(Debug, Clone)]
pub struct TableGame {
    players: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(players: usize, values: Vec<f64>) -> Result<Self> {
        if players > 20 || values.len() != 1usize << players {
            return Err(Error::Dimension(format!(
                "value table of length {} does not cover 2^{players} coalitions",
                values.len()
            )));
        }
        Ok(Self { players, values })
    }

    /// Tabulate any game.
    pub fn from_game(game: &impl CoalitionGame) -> Self {
        let players = game.players();
        let values = (0..1u64 << players).map(|m| game.value(m)).collect();
        Self { players, values }
    }
}

impl CoalitionGame for TableGame {
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, mask: u64) -> f64 {
        self.values[mask as usize]
    }
}

/// `v(S)` for one round: aggregate the coalition, evaluate on the server's
/// validation set, memoise per bitmask.
pub struct CoalitionEvaluator<'a> {
    set: &'a RoundUpdateSet,
    validation: &'a Dataset,
    utility: UtilityKind,
    cache: Mutex<HashMap<u64, f64>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<'a> CoalitionEvaluator<'a> {
    pub fn new(set: &'a RoundUpdateSet, validation: &'a Dataset, utility: UtilityKind) -> Result<Self> {
        if set.clients() > 63 {
            return Err(Error::config("clients", "at most 63 clients per coalition game"));
        }
        // surfaces dimension/emptiness problems once, up front
        forward_loss(&set.prev_global, validation)?;
        Ok(Self {
            set,
            validation,
            utility,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn update_set(&self) -> &RoundUpdateSet {
        self.set
    }

    pub fn validation(&self) -> &Dataset {
        self.validation
    }

    pub fn utility_kind(&self) -> UtilityKind {
        self.utility
    }

    /// Utility of a concrete model.
    pub fn utility_of(&self, model: &ModelParams) -> f64 {
        let r = forward_loss(model, self.validation).expect("validated at construction");
        match self.utility {
            UtilityKind::NegLoss => -r.loss,
            UtilityKind::Accuracy => r.accuracy,
        }
    }

    /// `v(S)` without touching the cache.
    pub fn evaluate_uncached(&self, mask: u64) -> f64 {
        self.utility_of(&fed_avg_mask(self.set, mask))
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn cache_misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

impl CoalitionGame for CoalitionEvaluator<'_> {
    fn players(&self) -> usize {
        self.set.clients()
    }

    fn value(&self, mask: u64) -> f64 {
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&mask) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return v;
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = self.evaluate_uncached(mask);
        // first writer wins; every writer computes the same value
        *self.cache.lock().expect("cache lock").entry(mask).or_insert(v)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact Shapley values by enumerating every coalition.
pub fn exact_shapley(game: &impl CoalitionGame) -> Result<Vec<f64>> {
    let k_total = game.players();
    if k_total == 0 {
        return Err(Error::Empty("game has no players".into()));
    }
    if k_total > MAX_EXACT_PLAYERS {
        return Err(Error::config(
            "clients",
            format!("exact Shapley supports at most {MAX_EXACT_PLAYERS} players, got {k_total}"),
        ));
    }
    let weights: Vec<f64> = (0..k_total).map(|s| 1.0 / (k_total as f64 * binomial(k_total - 1, s))).collect();
    let values: Vec<f64> = (0..1u64 << k_total).map(|m| game.value(m)).collect();
    Ok((0..k_total)
        .map(|k| {
            let bit = 1u64 << k;
            (0..1u64 << k_total)
                .filter(|m| m & bit == 0)
                .map(|m| weights[m.count_ones() as usize] * (values[(m | bit) as usize] - values[m as usize]))
                .sum()
        })
        .collect())
}

/// `v([K]) - v([K] \ {k})` for every client.
pub fn leave_one_out(game: &impl CoalitionGame) -> Result<Vec<f64>> {
    let k_total = game.players();
    if k_total < 2 {
        return Err(Error::config("clients", "leave-one-out needs at least 2 clients"));
    }
    let full = game.grand_coalition();
    let v_full = game.value(full);
    Ok((0..k_total).map(|k| v_full - game.value(full & !(1u64 << k))).collect())
}

/// GTG-Shapley thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtgConfig {
    /// Round truncation: skip the round when `|v([K]) - v(empty)| < eps0`.
    pub eps0: f64,
    /// Fraction of `min(K!, max_permutations)` permutations sampled.
    pub eps1: f64,
    /// Within-permutation truncation: once `|marginal| < eps2`, later
    /// positions of that permutation contribute 0.
    pub eps2: f64,
    pub max_permutations: usize,
}

impl Default for GtgConfig {
    fn default() -> Self {
        Self { eps0: 0.0002, eps1: 0.75, eps2: 0.0001, max_permutations: 120 }
    }
}

impl GtgConfig {
    /// Truncation off, full permutation coverage for up to 8 players.
    pub fn exhaustive() -> Self {
        Self { eps0: 0.0, eps1: 1.0, eps2: 0.0, max_permutations: 40320 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 >= 0.0) {
            return Err(Error::config("gtg.eps0", "must be >= 0"));
        }
        if !(self.eps1 > 0.0 && self.eps1 <= 1.0) {
            return Err(Error::config("gtg.eps1", "must lie in (0, 1]"));
        }
        if !(self.eps2 >= 0.0) {
            return Err(Error::config("gtg.eps2", "must be >= 0"));
        }
        if self.max_permutations == 0 {
            return Err(Error::config("gtg.max_permutations", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of permutations drawn for `players` clients.
    pub fn permutation_count(&self, players: usize) -> usize {
        let cap = factorial_capped(players, self.max_permutations);
        ((self.eps1 * cap as f64 - 1e-9).ceil() as usize).clamp(1, cap)
    }
}

fn factorial_capped(n: usize, cap: usize) -> usize {
    let mut f: usize = 1;
    for i in 2..=n {
        f = match f.checked_mul(i) {
            Some(v) if v <= cap => v,
            _ => return cap,
        };
    }
    f.min(cap)
}

fn all_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in all_permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Tails are enumerated (and drawn without replacement) up to this many.
const ENUMERATE_TAILS_UP_TO: usize = 40320;

/// Guided permutation sample: the leading position rotates round-robin over
/// the clients so each leads equally often before any leads again; the
/// remaining positions are a random order of the other clients. For small
/// `players` the tails for each leader are drawn without replacement, so
/// `count = players!` yields every permutation exactly once.
pub fn guided_permutations(players: usize, count: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    if players == 0 {
        return Vec::new();
    }
    let per_leader = count.div_ceil(players);
    let tail_count = factorial_capped(players.saturating_sub(1), ENUMERATE_TAILS_UP_TO + 1);
    let tails: Vec<Vec<Vec<usize>>> = (0..players)
        .map(|leader| {
            let others: Vec<usize> = (0..players).filter(|&k| k != leader).collect();
            if tail_count <= ENUMERATE_TAILS_UP_TO {
                let mut all = all_permutations(&others);
                all.shuffle(rng);
                all.truncate(per_leader);
                all
            } else {
                (0..per_leader)
                    .map(|_| {
                        let mut t = others.clone();
                        t.shuffle(rng);
                        t
                    })
                    .collect()
            }
        })
        .collect();
    (0..count)
        .map(|i| {
            let leader = i % players;
            let tail = &tails[leader][(i / players) % tails[leader].len()];
            let mut p = Vec::with_capacity(players);
            p.push(leader);
            p.extend_from_slice(tail);
            p
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtgOutcome {
    pub values: Vec<f64>,
    /// The whole round was skipped by the `eps0` rule.
    pub skipped: bool,
    pub permutations: usize,
}

/// GTG-Shapley: round truncation, guided permutation sampling and
/// within-permutation truncation.
pub fn gtg_shapley(game: &impl CoalitionGame, cfg: &GtgConfig, rng: &mut impl Rng) -> Result<GtgOutcome> {
    cfg.validate()?;
    let k_total = game.players();
    if k_total == 0 {
        return Err(Error::Empty("game has no players".into()));
    }
    let v_empty = game.value(0);
    let v_full = game.value(game.grand_coalition());
    if (v_full - v_empty).abs() < cfg.eps0 {
        return Ok(GtgOutcome { values: vec![0.0; k_total], skipped: true, permutations: 0 });
    }
    let count = cfg.permutation_count(k_total);
    let perms = guided_permutations(k_total, count, rng);
    let mut sums = vec![0.0; k_total];
    for perm in &perms {
        let mut prefix = 0u64;
        let mut prev = v_empty;
        for &k in perm {
            let next = prefix | 1u64 << k;
            let cur = game.value(next);
            let marginal = cur - prev;
            sums[k] += marginal;
            if marginal.abs() < cfg.eps2 {
                break;
            }
            prefix = next;
            prev = cur;
        }
    }
    let m = perms.len() as f64;
    Ok(GtgOutcome { values: sums.iter().map(|s| s / m).collect(), skipped: false, permutations: perms.len() })
}

/// A client's score written as a linear combination of coalition values,
/// `sum_i coeff_i * v(mask_i)`. Every marginal-difference score used here
/// has this form, which lets the attacks differentiate through it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreFunctional {
    terms: Vec<(u64, f64)>,
}

impl ScoreFunctional {
    fn from_map(map: HashMap<u64, f64>) -> Self {
        let mut terms: Vec<(u64, f64)> = map.into_iter().filter(|(_, c)| *c != 0.0).collect();
        terms.sort_by_key(|(m, _)| *m);
        Self { terms }
    }

    pub fn terms(&self) -> &[(u64, f64)] {
        &self.terms
    }

    /// LOO score of `client`.
    pub fn leave_one_out(client: usize, players: usize) -> Self {
        let full = full_mask(players);
        Self { terms: vec![(full & !(1u64 << client), -1.0), (full, 1.0)] }
    }

    /// Exact Shapley value of `client`.
    pub fn shapley(client: usize, players: usize) -> Self {
        let bit = 1u64 << client;
        let mut map = HashMap::new();
        for m in (0..1u64 << players).filter(|m| m & bit == 0) {
            let w = 1.0 / (players as f64 * binomial(players - 1, m.count_ones() as usize));
            *map.entry(m | bit).or_insert(0.0) += w;
            *map.entry(m).or_insert(0.0) -= w;
        }
        Self::from_map(map)
    }

    /// Untruncated permutation estimate of `client`'s Shapley value over a
    /// fixed permutation sample.
    pub fn permutation(client: usize, perms: &[Vec<usize>]) -> Self {
        let mut map = HashMap::new();
        let w = 1.0 / perms.len() as f64;
        for perm in perms {
            let mut prefix = 0u64;
            for &k in perm {
                if k == client {
                    *map.entry(prefix | 1u64 << k).or_insert(0.0) += w;
                    *map.entry(prefix).or_insert(0.0) -= w;
                    break;
                }
                prefix |= 1u64 << k;
            }
        }
        Self::from_map(map)
    }

    pub fn evaluate(&self, game: &impl CoalitionGame) -> f64 {
        self.terms.iter().map(|&(m, c)| c * game.value(m)).sum()
    }
}

/// One method's per-client scores for one round (or the final aggregate).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub method: CeMethod,
    pub round: usize,
    pub values: Vec<f64>,
    /// Round carries no information (GTG round truncation).
    pub skipped: bool,
}

impl ScoreVector {
    pub fn new(method: CeMethod, round: usize, values: Vec<f64>) -> Self {
        Self { method, round, values, skipped: false }
    }

    pub fn normalized(&self) -> ScoreVector {
        ScoreVector { values: normalize_scores(&self.values), ..self.clone() }
    }
}

/// Shift by the minimum and divide by the sum, so the result lies in
/// `[0, 1]` and sums to 1. All-equal input maps to the uniform vector.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let k = raw.len();
    if k == 0 {
        return Vec::new();
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = raw.iter().map(|v| v - min).collect();
    let sum: f64 = shifted.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return vec![1.0 / k as f64; k];
    }
    shifted.iter().map(|v| v / sum).collect()
}

/// How round-wise scores combine into a final score before normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoundAggregation {
    #[default]
    Mean,
    Sum,
}

/// Combine round-wise normalised scores of one method: per-client mean (or
/// sum) over the non-skipped rounds, then normalise again. If every round
/// was skipped the result is uniform.
pub fn aggregate_final_scores(rounds: &[ScoreVector], mode: RoundAggregation) -> Result<ScoreVector> {
    let first = rounds.first().ok_or_else(|| Error::Empty("no round scores".into()))?;
    let k = first.values.len();
    if rounds.iter().any(|r| r.method != first.method) {
        return Err(Error::config("ce_methods", "cannot aggregate scores of different methods"));
    }
    if rounds.iter().any(|r| r.values.len() != k) {
        return Err(Error::Dimension("score vectors of different lengths".into()));
    }
    let used: Vec<&ScoreVector> = rounds.iter().filter(|r| !r.skipped).collect();
    let last_round = rounds.iter().map(|r| r.round).max().unwrap_or(0);
    if used.is_empty() {
        return Ok(ScoreVector::new(first.method, last_round, vec![1.0 / k as f64; k]));
    }
    let mut acc = vec![0.0; k];
    for r in &used {
        for (a, v) in acc.iter_mut().zip(&r.values) {
            *a += v;
        }
    }
    if mode == RoundAggregation::Mean {
        acc.iter_mut().for_each(|a| *a /= used.len() as f64);
    }
    Ok(ScoreVector::new(first.method, last_round, normalize_scores(&acc)))
}

/// Running ADP state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdpState {
    pub theta: Vec<f64>,
    /// Number of completed rounds (0 before the first aggregation).
    pub t: usize,
}

impl AdpState {
    pub fn new(clients: usize) -> Self {
        Self { theta: vec![0.0; clients], t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdpOutcome {
    pub state: AdpState,
    pub scores: Vec<f64>,
    /// Clients whose cosine hit a zero-norm vector (treated as orthogonal).
    pub zero_norm: Vec<usize>,
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// `(1 - e^{-1/theta}) / (1 + e^{-1/theta})`, with the limit 1 at theta = 0.
pub fn adp_score(theta: f64) -> f64 {
    if theta <= 0.0 {
        1.0
    } else {
        (0.5 / theta).tanh()
    }
}

/// One ADP step. The cosine is between each client's weights and the
/// aggregated weights, or between their deltas from `set.prev_global` when
/// `on_deltas` is set.
pub fn adp_round(state: &AdpState, set: &RoundUpdateSet, global: &ModelParams, on_deltas: bool) -> Result<AdpOutcome> {
    if state.theta.len() != set.clients() {
        return Err(Error::Dimension("ADP state and update set disagree on client count".into()));
    }
    global.check_same_arch(&set.prev_global)?;
    let t = state.t as f64;
    let reference: Vec<f64> = if on_deltas { global.delta(&set.prev_global) } else { global.values().to_vec() };
    let mut zero_norm = Vec::new();
    let theta: Vec<f64> = set
        .updates
        .iter()
        .zip(&state.theta)
        .enumerate()
        .map(|(k, (u, &th))| {
            let own: Vec<f64> = if on_deltas { u.delta(&set.prev_global) } else { u.values().to_vec() };
            let c = cosine(&own, &reference).unwrap_or_else(|| {
                zero_norm.push(k);
                0.0
            });
            (t * th + 1.0 - c) / (t + 1.0)
        })
        .collect();
    let scores = theta.iter().map(|&th| adp_score(th)).collect();
    Ok(AdpOutcome { state: AdpState { theta, t: state.t + 1 }, scores, zero_norm })
}
