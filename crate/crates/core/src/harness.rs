//! Round protocol, multi-seed experiments and the reports built on them.

use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{aggregate, AggregationRule, RoundUpdateSet};
use crate::attacks::{
    gradient_flip, label_flip, self_improvement, targeted_decrease, AttackContext, AttackKind, AttackOutcome,
};
use crate::config::{DataSource, ExperimentConfig, NoiseKind, Partition};
use crate::contribution::{
    adp_round, aggregate_final_scores, exact_shapley, gtg_shapley, leave_one_out, AdpState, CeMethod,
    CoalitionEvaluator, RoundAggregation, ScoreVector,
};
use crate::data::{
    dirichlet_partition, generate_synthetic, iid_partition, inject_linear_label_noise, load_csv, Dataset,
};
use crate::error::{Error, Result};
use crate::numerics::{forward_loss, local_train, Arch, ModelParams, TrainingHyperParams};
use crate::rng::{domain, stream};
use crate::stats::{anderson_darling_k2, mean, paired_t_test, rmse, sample_sd, Tail};

/// Everything fixed for one repetition before round 1.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub seed: u64,
    pub clients: Vec<Dataset>,
    pub taus: Vec<usize>,
    pub validation: Dataset,
    /// Part of `validation` the score attacker can see.
    pub validation_view: Dataset,
    pub init: ModelParams,
}

impl RunSetup {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }

    /// n_k / n
    pub fn data_ratios(&self) -> Vec<f64> {
        let n: usize = self.clients.iter().map(Dataset::len).sum();
        self.clients.iter().map(|c| c.len() as f64 / n as f64).collect()
    }
}

/// Load the CSV source once; synthetic data is regenerated per seed.
pub fn load_source(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    match &cfg.data.source {
        DataSource::Csv { path, label_column, normalization } => {
            Ok(Some(load_csv(path, label_column, *normalization)?))
        }
        DataSource::Synthetic { .. } => Ok(None),
    }
}

/// Build data, partitions, step counts and the initial model for `seed`.
pub fn setup_run(cfg: &ExperimentConfig, seed: u64, csv: Option<&Dataset>) -> Result<RunSetup> {
    let k = cfg.clients;
    let full = match (&cfg.data.source, csv) {
        (DataSource::Synthetic { n, dim, classes, separation }, _) => {
            generate_synthetic(*n, *dim, *classes, *separation, seed)?
        }
        (DataSource::Csv { .. }, Some(d)) => {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream(seed, domain::DATA, 1, 0));
            d.subset(&idx)
        }
        (DataSource::Csv { .. }, None) => return Err(Error::config("data.source", "csv data was not loaded")),
    };
    if full.len() < cfg.data.validation_size + k {
        return Err(Error::config("data.validation_size", "leaves fewer rows than clients"));
    }
    let (validation, train) = full.split_at(cfg.data.validation_size);
    let mut clients = match cfg.data.partition {
        Partition::Iid => iid_partition(&train, k, seed)?,
        Partition::Dirichlet { alpha } => dirichlet_partition(&train, k, alpha, seed)?,
    };
    if cfg.data.noise == NoiseKind::Linear {
        clients = inject_linear_label_noise(&clients, seed)?;
    }
    if cfg.attack.kind == AttackKind::LabelFlip {
        let a = cfg.attack.attacker();
        clients[a] = label_flip(&clients[a])?;
    }
    let taus = match cfg.data.tau_range {
        None => vec![cfg.hp.tau; k],
        Some([lo, hi]) => {
            let mut rng = stream(seed, domain::TAU, 0, 0);
            (0..k).map(|_| rng.random_range(lo..=hi)).collect()
        }
    };
    let validation_view =
        validation.sample_fraction(cfg.attack.val_fraction, &mut stream(seed, domain::VALIDATION_VIEW, 0, 0));
    let arch = Arch { input_dim: full.dim(), hidden: cfg.model.hidden, classes: full.classes() };
    let init = ModelParams::init(arch, &mut stream(seed, domain::INIT, 0, 0));
    Ok(RunSetup { seed, clients, taus, validation, validation_view, init })
}

/// Mutable state carried between rounds.
#[derive(Debug, Clone)]
pub struct RunState {
    pub global: ModelParams,
    pub adp: AdpState,
    /// Rounds completed so far.
    pub round: usize,
}

impl RunState {
    pub fn new(setup: &RunSetup) -> Self {
        Self { global: setup.init.clone(), adp: AdpState::new(setup.clients.len()), round: 0 }
    }
}

/// What the score attacker did in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub honest_score: f64,
    pub attacked_score: f64,
    pub constraint_slack: Option<f64>,
    pub infeasible_start: bool,
    pub accepted_steps: usize,
}

impl From<&AttackOutcome> for AttackRecord {
    fn from(o: &AttackOutcome) -> Self {
        Self {
            honest_score: o.honest_score,
            attacked_score: o.attacked_score,
            constraint_slack: o.constraint_slack,
            infeasible_start: o.infeasible_start,
            accepted_steps: o.accepted_steps,
        }
    }
}

/// One round's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub seed: u64,
    /// 1-based.
    pub round: usize,
    pub global_loss: f64,
    pub global_accuracy: f64,
    /// Raw scores, one vector per configured method in (sv, gtg, loo, adp)
    /// order.
    pub raw: Vec<ScoreVector>,
    pub normalized: Vec<ScoreVector>,
    /// 0-based client index.
    pub krum_selected: Option<usize>,
    pub zeno_kept: Option<Vec<usize>>,
    pub attack: Option<AttackRecord>,
    /// Clients whose ADP cosine hit a zero-norm vector.
    pub adp_zero_norm: Vec<usize>,
    /// The updates the server received.
    pub submitted: Vec<ModelParams>,
}

impl RoundRecord {
    pub fn normalized_for(&self, m: CeMethod) -> Option<&ScoreVector> {
        self.normalized.iter().find(|s| s.method == m)
    }

    pub fn raw_for(&self, m: CeMethod) -> Option<&ScoreVector> {
        self.raw.iter().find(|s| s.method == m)
    }
}

fn local_hp(cfg: &ExperimentConfig, tau: usize) -> TrainingHyperParams {
    let mu = if cfg.aggregator.rule == AggregationRule::Fedprox { cfg.hp.mu } else { 0.0 };
    TrainingHyperParams { tau, mu, ..cfg.hp }
}

/// One training round: local training, Byzantine and score attacks,
/// aggregation, then contribution scores on the submitted updates.
pub fn run_round(state: &mut RunState, setup: &RunSetup, cfg: &ExperimentConfig) -> Result<RoundRecord> {
    let t = state.round + 1;
    let seed = setup.seed;
    let k_total = setup.clients.len();
    let prev = state.global.clone();

    let mut updates = Vec::with_capacity(k_total);
    for (k, data) in setup.clients.iter().enumerate() {
        let hp = local_hp(cfg, setup.taus[k]);
        let mut rng = stream(seed, domain::TRAIN, t as u64, k as u64);
        updates.push(local_train(&prev, data, &hp, &mut rng)?);
    }

    let attacker = cfg.attack.attacker();
    let mut attack = None;
    match cfg.attack.kind {
        AttackKind::GradientFlip => updates[attacker] = gradient_flip(&updates[attacker], &prev)?,
        kind if kind.is_score_poisoning() && cfg.attack.active_in(t) => {
            let honest_set = RoundUpdateSet::new(prev.clone(), updates.clone(), setup.sizes(), setup.taus.clone())?;
            let ctx = AttackContext {
                set: &honest_set,
                attacker,
                validation_view: &setup.validation_view,
                score: cfg.attack.score,
                gtg: cfg.gtg,
                hp: local_hp(cfg, setup.taus[attacker]),
            };
            let mut rng = stream(seed, domain::ATTACK, t as u64, 0);
            let outcome = if kind == AttackKind::SelfImprovement {
                self_improvement(&ctx, &cfg.attack, &mut rng)?
            } else {
                targeted_decrease(&ctx, cfg.attack.target(), &cfg.attack, &mut rng)?
            };
            attack = Some(AttackRecord::from(&outcome));
            updates[attacker] = outcome.update;
        }
        _ => {}
    }

    let set = RoundUpdateSet::new(prev, updates, setup.sizes(), setup.taus.clone())?;
    let agg = aggregate(&set, &cfg.aggregator, &setup.validation)?;
    if !agg.global.is_finite() {
        return Err(Error::NonFinite(format!("global model after round {t}")));
    }

    let evaluator = CoalitionEvaluator::new(&set, &setup.validation, cfg.utility)?;
    let mut raw = Vec::new();
    let mut adp_zero_norm = Vec::new();
    let mut next_adp = None;
    for m in cfg.methods_sorted() {
        let sv = match m {
            CeMethod::Sv => ScoreVector::new(m, t, exact_shapley(&evaluator)?),
            CeMethod::Loo => ScoreVector::new(m, t, leave_one_out(&evaluator)?),
            CeMethod::Gtg => {
                let mut rng = stream(seed, domain::GTG, t as u64, 0);
                let out = gtg_shapley(&evaluator, &cfg.gtg, &mut rng)?;
                ScoreVector { skipped: out.skipped, ..ScoreVector::new(m, t, out.values) }
            }
            CeMethod::Adp => {
                let out = adp_round(&state.adp, &set, &agg.global, cfg.adp_on_deltas)?;
                adp_zero_norm = out.zero_norm;
                next_adp = Some(out.state);
                ScoreVector::new(m, t, out.scores)
            }
        };
        raw.push(sv);
    }
    let normalized = raw.iter().map(ScoreVector::normalized).collect();
    let eval = forward_loss(&agg.global, &setup.validation)?;

    state.global = agg.global;
    if let Some(a) = next_adp {
        state.adp = a;
    }
    state.round = t;
    Ok(RoundRecord {
        seed,
        round: t,
        global_loss: eval.loss,
        global_accuracy: eval.accuracy,
        raw,
        normalized,
        krum_selected: agg.krum_selected,
        zeno_kept: agg.zeno_kept,
        attack,
        adp_zero_norm,
        submitted: set.updates,
    })
}

/// One repetition.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
    /// Per-method final normalised scores, in (sv, gtg, loo, adp) order.
    pub final_scores: Vec<ScoreVector>,
    /// Round-aggregated scores before the final normalisation.
    pub final_raw: Vec<ScoreVector>,
}

impl RunResult {
    pub fn final_for(&self, m: CeMethod) -> Option<&ScoreVector> {
        self.final_scores.iter().find(|s| s.method == m)
    }

    pub fn final_raw_for(&self, m: CeMethod) -> Option<&ScoreVector> {
        self.final_raw.iter().find(|s| s.method == m)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.global_loss).collect()
    }

    pub fn data_ratios(&self) -> Vec<f64> {
        let n: usize = self.sizes.iter().sum();
        self.sizes.iter().map(|&s| s as f64 / n as f64).collect()
    }
}

pub fn run_repetition(cfg: &ExperimentConfig, seed: u64, csv: Option<&Dataset>) -> Result<RunResult> {
    let setup = setup_run(cfg, seed, csv)?;
    let mut state = RunState::new(&setup);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        rounds.push(run_round(&mut state, &setup, cfg)?);
    }
    let mut final_scores = Vec::new();
    let mut final_raw = Vec::new();
    for m in cfg.methods_sorted() {
        let per_round: Vec<ScoreVector> = rounds.iter().filter_map(|r| r.normalized_for(m).cloned()).collect();
        final_scores.push(aggregate_final_scores(&per_round, cfg.score_rounds_aggregation)?);
        final_raw.push(combine_rounds(m, &per_round, cfg.score_rounds_aggregation));
    }
    Ok(RunResult { seed, sizes: setup.sizes(), rounds, final_scores, final_raw })
}

/// Mean (or sum) over non-skipped rounds, without normalising. Uniform when
/// every round was skipped.
fn combine_rounds(m: CeMethod, rounds: &[ScoreVector], mode: RoundAggregation) -> ScoreVector {
    let k = rounds.first().map_or(0, |r| r.values.len());
    let last = rounds.iter().map(|r| r.round).max().unwrap_or(0);
    let used: Vec<&ScoreVector> = rounds.iter().filter(|r| !r.skipped).collect();
    if used.is_empty() {
        return ScoreVector::new(m, last, vec![1.0 / k as f64; k]);
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
    ScoreVector::new(m, last, acc)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: String,
    /// Ordered by repetition.
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    /// Final normalised score of `client` under `m`, one entry per seed.
    pub fn final_samples(&self, m: CeMethod, client: usize) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.final_for(m).map(|s| s.values[client])).collect()
    }

    /// Per-client mean of the final normalised scores.
    pub fn mean_final(&self, m: CeMethod) -> Vec<f64> {
        let k = self.runs.first().and_then(|r| r.final_for(m)).map_or(0, |s| s.values.len());
        (0..k).map(|c| mean(&self.final_samples(m, c))).collect()
    }
}

/// Run every repetition (concurrently); results are ordered by seed index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let csv = load_source(cfg)?;
    let runs = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, cfg.seed_of(r), csv.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { config_hash: cfg.hash(), runs })
}

/// Baseline (no attack) and attacked runs with shared seeds.
pub fn run_paired(cfg: &ExperimentConfig) -> Result<(ExperimentResult, ExperimentResult)> {
    let mut base = cfg.clone();
    base.attack.kind = AttackKind::None;
    let (b, a) = rayon::join(|| run_experiment(&base), || run_experiment(cfg));
    Ok((b?, a?))
}

/// One (aggregator, method, client) line of an aggregator comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub aggregator: AggregationRule,
    pub method: CeMethod,
    /// 0-based.
    pub client: usize,
    pub mean: f64,
    pub sd: f64,
    /// AD test against the FedAvg reference; absent with fewer than two
    /// repetitions.
    pub ad_statistic: Option<f64>,
    pub ad_p: Option<f64>,
    /// RMSE between this aggregator's mean score vector and FedAvg's.
    pub rmse: f64,
}

/// Compare final scores of every aggregator against the FedAvg run.
pub fn compare_report(
    reference: &ExperimentResult,
    results: &[(AggregationRule, ExperimentResult)],
    methods: &[CeMethod],
    clients: usize,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for (rule, res) in results {
        for &m in methods {
            let e = rmse(&res.mean_final(m), &reference.mean_final(m))?;
            for c in 0..clients {
                let xs = res.final_samples(m, c);
                let refs = reference.final_samples(m, c);
                let ad = if xs.len() >= 2 { Some(anderson_darling_k2(&xs, &refs)?) } else { None };
                rows.push(CompareRow {
                    aggregator: *rule,
                    method: m,
                    client: c,
                    mean: mean(&xs),
                    sd: sample_sd(&xs),
                    ad_statistic: ad.map(|a| a.statistic),
                    ad_p: ad.map(|a| a.p_value),
                    rmse: e,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Attacker,
    Target,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Attacker => "attacker",
            Role::Target => "target",
        }
    }
}

/// Roles tracked for an attack kind, with their 0-based clients.
pub fn tracked_roles(cfg: &ExperimentConfig) -> Vec<(Role, usize)> {
    match cfg.attack.kind {
        AttackKind::TargetedDecrease => {
            vec![(Role::Target, cfg.attack.target()), (Role::Attacker, cfg.attack.attacker())]
        }
        _ => vec![(Role::Attacker, cfg.attack.attacker())],
    }
}

/// Paired normalised score of one client in one round (or the final score
/// when `round` is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDiff {
    pub seed: u64,
    pub round: Option<usize>,
    pub method: CeMethod,
    pub role: Role,
    pub client: usize,
    pub baseline: f64,
    pub attacked: f64,
}

impl PairedDiff {
    pub fn delta(&self) -> f64 {
        self.attacked - self.baseline
    }

    /// `|attacked - baseline| / baseline`; absent when the baseline is 0.
    pub fn rel_delta(&self) -> Option<f64> {
        (self.baseline != 0.0).then(|| self.delta().abs() / self.baseline)
    }
}

/// Per-round and final paired differences, ordered by (seed, round,
/// method, role).
pub fn paired_diffs(
    cfg: &ExperimentConfig,
    base: &ExperimentResult,
    att: &ExperimentResult,
) -> Result<Vec<PairedDiff>> {
    if base.runs.len() != att.runs.len() {
        return Err(Error::Dimension("paired runs differ in repetition count".into()));
    }
    let roles = tracked_roles(cfg);
    let methods = cfg.methods_sorted();
    let mut out = Vec::new();
    for (b, a) in base.runs.iter().zip(&att.runs) {
        for (rb, ra) in b.rounds.iter().zip(&a.rounds) {
            for &m in &methods {
                let (sb, sa) = (rb.normalized_for(m).expect("configured"), ra.normalized_for(m).expect("configured"));
                for &(role, c) in &roles {
                    out.push(PairedDiff {
                        seed: b.seed,
                        round: Some(rb.round),
                        method: m,
                        role,
                        client: c,
                        baseline: sb.values[c],
                        attacked: sa.values[c],
                    });
                }
            }
        }
        for &m in &methods {
            let (sb, sa) = (b.final_for(m).expect("configured"), a.final_for(m).expect("configured"));
            for &(role, c) in &roles {
                out.push(PairedDiff {
                    seed: b.seed,
                    round: None,
                    method: m,
                    role,
                    client: c,
                    baseline: sb.values[c],
                    attacked: sa.values[c],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestScope {
    Round(usize),
    /// Concatenation of every per-round difference.
    Pooled,
    /// Final (round-aggregated) scores.
    Final,
}

impl TestScope {
    pub fn label(self) -> String {
        match self {
            TestScope::Round(t) => t.to_string(),
            TestScope::Pooled => "pooled".into(),
            TestScope::Final => "final".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTestRow {
    pub method: CeMethod,
    pub role: Role,
    pub scope: TestScope,
    pub n: usize,
    pub mean_delta: f64,
    pub mean_rel_delta: Option<f64>,
    pub t: f64,
    pub p_greater: f64,
    pub p_less: f64,
    pub p_two_sided: f64,
}

/// Paired t-tests per round, pooled over rounds, and on final scores.
pub fn attack_ttests(cfg: &ExperimentConfig, diffs: &[PairedDiff]) -> Result<Vec<TTestRow>> {
    let mut rows = Vec::new();
    let mut scopes: Vec<TestScope> = (1..=cfg.rounds).map(TestScope::Round).collect();
    scopes.push(TestScope::Pooled);
    scopes.push(TestScope::Final);
    for m in cfg.methods_sorted() {
        for (role, _) in tracked_roles(cfg) {
            for &scope in &scopes {
                let sel: Vec<&PairedDiff> = diffs
                    .iter()
                    .filter(|d| d.method == m && d.role == role)
                    .filter(|d| match scope {
                        TestScope::Round(t) => d.round == Some(t),
                        TestScope::Pooled => d.round.is_some(),
                        TestScope::Final => d.round.is_none(),
                    })
                    .collect();
                let deltas: Vec<f64> = sel.iter().map(|d| d.delta()).collect();
                if deltas.len() < 2 {
                    continue;
                }
                let rels: Vec<f64> = sel.iter().filter_map(|d| d.rel_delta()).collect();
                let g = paired_t_test(&deltas, Tail::Greater)?;
                rows.push(TTestRow {
                    method: m,
                    role,
                    scope,
                    n: deltas.len(),
                    mean_delta: g.mean,
                    mean_rel_delta: (!rels.is_empty()).then(|| mean(&rels)),
                    t: g.t,
                    p_greater: g.p_value,
                    p_less: paired_t_test(&deltas, Tail::Less)?.p_value,
                    p_two_sided: paired_t_test(&deltas, Tail::TwoSided)?.p_value,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"
clients = 3
rounds = 2
repetitions = 2
base_seed = 5
{extra}
[data]
validation_size = 30
source = {{ kind = "synthetic", n = 150, dim = 2, classes = 2, separation = 2.0 }}
[hp]
eta = 0.2
tau = 3
[aggregator]
rule = "fedavg"
"#
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn rounds_are_deterministic() {
        let c = cfg("");
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.rounds, y.rounds);
            assert_eq!(x.final_scores, y.final_scores);
        }
    }

    #[test]
    fn every_method_scores_every_round() {
        let c = cfg("");
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.runs.len(), 2);
        for run in &r.runs {
            assert_eq!(run.final_scores.len(), 4);
            for round in &run.rounds {
                assert_eq!(round.raw.len(), 4);
                for s in &round.normalized {
                    assert!((s.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_round_final_equals_round_scores() {
        let mut c = cfg("");
        c.rounds = 1;
        c.ce_methods = vec![CeMethod::Sv, CeMethod::Loo, CeMethod::Adp];
        let r = run_experiment(&c).unwrap();
        for run in &r.runs {
            for f in &run.final_scores {
                let round = run.rounds[0].normalized_for(f.method).unwrap();
                for (a, b) in f.values.iter().zip(&round.values) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn paired_runs_share_first_round_benign_updates() {
        let mut c = cfg("");
        c.attack.kind = AttackKind::SelfImprovement;
        c.attack.steps = 3;
        c.rounds = 1;
        let (b, a) = run_paired(&c).unwrap();
        for (rb, ra) in b.runs.iter().zip(&a.runs) {
            let (ub, ua) = (&rb.rounds[0].submitted, &ra.rounds[0].submitted);
            for k in 0..3 {
                if k != c.attack.attacker() {
                    assert_eq!(ub[k], ua[k]);
                }
            }
            assert!(ra.rounds[0].attack.is_some());
            assert!(rb.rounds[0].attack.is_none());
        }
    }
}
