//! Byzantine baselines (label flip, gradient flip) and the two
//! score-poisoning attacks (self improvement, targeted decrease).
//!
//! Both score attacks run on the attacker's copy of the round: the benign
//! updates are known, and the attacked contribution score is a linear
//! combination of coalition utilities ([`ScoreFunctional`]). Each coalition
//! aggregate is linear in the attacker's weights with coefficient
//! `n_a / n_S`, so the score gradient is a weighted sum of validation-loss
//! gradients at the coalition aggregates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{fed_avg, fed_avg_mask, RoundUpdateSet};
use crate::contribution::{guided_permutations, CoalitionEvaluator, GtgConfig, ScoreFunctional, UtilityKind};
use crate::data::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{forward_loss, local_train, loss_and_gradient, ModelParams, TrainingHyperParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    GradientFlip,
    SelfImprovement,
    TargetedDecrease,
}

impl AttackKind {
    pub fn is_score_poisoning(self) -> bool {
        matches!(self, AttackKind::SelfImprovement | AttackKind::TargetedDecrease)
    }
}

/// Which contribution score the attacker optimises against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackScore {
    #[default]
    Loo,
    Gtg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfImprovementMode {
    /// Gradient ascent directly on the attacker's score.
    #[default]
    Direct,
    /// Train on the visible validation data instead of the score.
    Surrogate,
}

/// Attack settings. Client ids are 1-based, as in the output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default)]
    pub kind: AttackKind,
    #[serde(default = "default_attacker")]
    pub attacker_id: usize,
    #[serde(default = "default_target")]
    pub target_id: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Fraction of the server validation set the attacker sees.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Score the attacker differentiates (LOO or GTG).
    #[serde(default)]
    pub score: AttackScore,
    #[serde(default)]
    pub mode: SelfImprovementMode,
    /// 1-based rounds in which the score attack is active; all rounds when
    /// absent.
    #[serde(default)]
    pub active_rounds: Option<Vec<usize>>,
}

fn default_attacker() -> usize {
    1
}
fn default_target() -> usize {
    2
}
fn default_gamma() -> f64 {
    0.001
}
fn default_epsilon() -> f64 {
    0.005
}
fn default_val_fraction() -> f64 {
    1.0
}
fn default_steps() -> usize {
    50
}
fn default_step_size() -> f64 {
    0.1
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            attacker_id: default_attacker(),
            target_id: default_target(),
            gamma: default_gamma(),
            epsilon: default_epsilon(),
            val_fraction: default_val_fraction(),
            steps: default_steps(),
            step_size: default_step_size(),
            score: AttackScore::Loo,
            mode: SelfImprovementMode::Direct,
            active_rounds: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        if self.attacker_id == 0 || self.attacker_id > clients {
            return Err(Error::config("attack.attacker_id", format!("must be in 1..={clients}")));
        }
        if self.kind == AttackKind::TargetedDecrease {
            if self.target_id == 0 || self.target_id > clients {
                return Err(Error::config("attack.target_id", format!("must be in 1..={clients}")));
            }
            if self.target_id == self.attacker_id {
                return Err(Error::config("attack.target_id", "target must differ from attacker"));
            }
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("attack.gamma", "must be finite and >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("attack.epsilon", "must be > 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 1.0) {
            return Err(Error::config("attack.val_fraction", "must lie in (0, 1]"));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::config("attack.step_size", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn attacker(&self) -> usize {
        self.attacker_id - 1
    }

    pub fn target(&self) -> usize {
        self.target_id - 1
    }

    /// Whether a score attack fires in 1-based `round`.
    pub fn active_in(&self, round: usize) -> bool {
        self.active_rounds.as_ref().is_none_or(|r| r.contains(&round))
    }
}

/// Every label `y` becomes `(y + 1) mod C`.
pub fn label_flip(data: &Dataset) -> Result<Dataset> {
    if data.classes() < 2 {
        return Err(Error::config("classes", "label flip needs at least 2 classes"));
    }
    let c = data.classes();
    let mut out = data.clone();
    out.set_labels(data.labels().iter().map(|&y| (y + 1) % c).collect());
    out.provenance = Provenance::LabelFlipped;
    Ok(out)
}

/// Reflect the honest update about the previous global model.
pub fn gradient_flip(honest_update: &ModelParams, prev_global: &ModelParams) -> Result<ModelParams> {
    honest_update.check_same_arch(prev_global)?;
    let values = prev_global.values().iter().zip(honest_update.values()).map(|(p, h)| 2.0 * p - h).collect();
    Ok(prev_global.with_values(values))
}

/// A client's contribution score as a differentiable function of the
/// attacker's weights, evaluated on the attacker's validation view with
/// negative-loss utility.
pub struct ScoreObjective<'a> {
    set: &'a RoundUpdateSet,
    attacker: usize,
    functional: ScoreFunctional,
    validation: &'a Dataset,
}

impl<'a> ScoreObjective<'a> {
    pub fn new(
        set: &'a RoundUpdateSet,
        attacker: usize,
        functional: ScoreFunctional,
        validation: &'a Dataset,
    ) -> Result<Self> {
        if attacker >= set.clients() {
            return Err(Error::config("attack.attacker_id", "attacker index out of range"));
        }
        if validation.is_empty() {
            return Err(Error::Empty("attacker validation view".into()));
        }
        forward_loss(&set.prev_global, validation)?;
        Ok(Self { set, attacker, functional, validation })
    }

    fn with_attacker(&self, x: &[f64]) -> RoundUpdateSet {
        self.set.with_update(self.attacker, self.set.prev_global.with_values(x.to_vec()))
    }

    /// Score with the attacker submitting `x`, computed through a fresh
    /// (uncached) coalition evaluator.
    pub fn value(&self, x: &[f64]) -> f64 {
        let set = self.with_attacker(x);
        let ev = CoalitionEvaluator::new(&set, self.validation, UtilityKind::NegLoss).expect("validated");
        self.functional.evaluate(&ev)
    }

    /// d(score)/d(x).
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let set = self.with_attacker(x);
        let a_bit = 1u64 << self.attacker;
        let n_a = set.sizes[self.attacker] as f64;
        let mut g = vec![0.0; x.len()];
        for &(mask, coeff) in self.functional.terms() {
            if mask & a_bit == 0 {
                continue;
            }
            let n_s: usize = (0..set.clients()).filter(|&k| mask >> k & 1 == 1).map(|k| set.sizes[k]).sum();
            let agg = fed_avg_mask(&set, mask);
            let (_, lg) = loss_and_gradient(&agg, self.validation, None).expect("validated");
            // utility is -loss
            let w = -coeff * n_a / n_s as f64;
            for (gi, li) in g.iter_mut().zip(&lg) {
                *gi += w * li;
            }
        }
        g
    }
}

/// Normalised-gradient hill climbing with step halving.
///
/// Each iteration tries `x + s * g / |g|`; the step is halved (up to 40
/// times) until the candidate is feasible and strictly improves `value`, and
/// after an accepted step `s` doubles again up to `step_size`. The path
/// length never exceeds `steps * step_size`. Returns the final (and best)
/// iterate, its value and the number of accepted steps.
pub fn climb(
    start: &[f64],
    steps: usize,
    step_size: f64,
    value: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    feasible: impl Fn(&[f64]) -> bool,
) -> (Vec<f64>, f64, usize) {
    let mut x = start.to_vec();
    let mut fx = value(&x);
    let mut s = step_size;
    let mut accepted = 0;
    for _ in 0..steps {
        let g = gradient(&x);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + s * gi / norm).collect();
            if cand.iter().all(|v| v.is_finite()) && feasible(&cand) {
                let fc = value(&cand);
                if fc > fx {
                    x = cand;
                    fx = fc;
                    moved = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !moved {
            break;
        }
        accepted += 1;
        s = (2.0 * s).min(step_size);
    }
    (x, fx, accepted)
}

/// What the attacker knows and optimises against in one round.
pub struct AttackContext<'a> {
    /// Submitted set with the attacker's honest update in its slot.
    pub set: &'a RoundUpdateSet,
    pub attacker: usize,
    pub validation_view: &'a Dataset,
    pub score: AttackScore,
    /// GTG settings the attacker assumes (permutation count).
    pub gtg: GtgConfig,
    /// Client optimiser, used by the surrogate mode.
    pub hp: TrainingHyperParams,
}

impl AttackContext<'_> {
    /// Score functional for `client`. GTG uses one frozen guided sample for
    /// the whole attack.
    fn functional(&self, client: usize, perms: &[Vec<usize>]) -> ScoreFunctional {
        match self.score {
            AttackScore::Loo => ScoreFunctional::leave_one_out(client, self.set.clients()),
            AttackScore::Gtg => ScoreFunctional::permutation(client, perms),
        }
    }

    fn frozen_permutations(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        match self.score {
            AttackScore::Loo => Vec::new(),
            AttackScore::Gtg => {
                let k = self.set.clients();
                guided_permutations(k, self.gtg.permutation_count(k), rng)
            }
        }
    }
}

/// Result of a score-poisoning attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub update: ModelParams,
    /// Attacked score (attacker's own for self improvement, the target's
    /// for targeted decrease) at the honest update, as the attacker sees it.
    pub honest_score: f64,
    pub attacked_score: f64,
    /// `epsilon - (f(w) - f(w_hat))^2` at the returned update (targeted
    /// decrease only).
    pub constraint_slack: Option<f64>,
    /// The honest update already violated the constraint.
    pub infeasible_start: bool,
    pub accepted_steps: usize,
}

/// Maximise the attacker's own score.
pub fn self_improvement(ctx: &AttackContext, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackOutcome> {
    let honest = ctx.set.updates[ctx.attacker].clone();
    let perms = ctx.frozen_permutations(rng);
    let objective =
        ScoreObjective::new(ctx.set, ctx.attacker, ctx.functional(ctx.attacker, &perms), ctx.validation_view)?;
    let honest_score = objective.value(honest.values());

    match cfg.mode {
        SelfImprovementMode::Direct => {
            let (x, fx, accepted) = climb(
                honest.values(),
                cfg.steps,
                cfg.step_size,
                |x| objective.value(x),
                |x| objective.gradient(x),
                |_| true,
            );
            Ok(AttackOutcome {
                update: honest.with_values(x),
                honest_score,
                attacked_score: fx,
                constraint_slack: None,
                infeasible_start: false,
                accepted_steps: accepted,
            })
        }
        SelfImprovementMode::Surrogate => {
            if cfg.steps == 0 {
                return Ok(AttackOutcome {
                    update: honest,
                    honest_score,
                    attacked_score: honest_score,
                    constraint_slack: None,
                    infeasible_start: false,
                    accepted_steps: 0,
                });
            }
            let hp = TrainingHyperParams { tau: cfg.steps, eta: cfg.step_size, mu: 0.0, ..ctx.hp };
            let trained = local_train(&honest, ctx.validation_view, &hp, rng)?;
            let s = objective.value(trained.values());
            // best iterate of {honest, trained}
            let (update, attacked_score) = if s > honest_score { (trained, s) } else { (honest, honest_score) };
            Ok(AttackOutcome {
                update,
                honest_score,
                attacked_score,
                constraint_slack: None,
                infeasible_start: false,
                accepted_steps: usize::from(s > honest_score),
            })
        }
    }
}

/// Squared validation-loss gap between the aggregate with `x` in the
/// attacker slot and the benign-only aggregate.
fn loss_gap_sq(set: &RoundUpdateSet, attacker: usize, x: &[f64], benign_loss: f64, view: &Dataset) -> f64 {
    let all: Vec<usize> = (0..set.clients()).collect();
    let with_x = set.with_update(attacker, set.prev_global.with_values(x.to_vec()));
    let agg = fed_avg(&with_x, &all).expect("nonempty");
    let l = forward_loss(&agg, view).expect("validated").loss;
    (l - benign_loss).powi(2)
}

/// Minimise `target score + gamma * ||w_a||^2` subject to
/// `(f(w) - f(w_hat))^2 < epsilon`, where `w` includes the attacker and
/// `w_hat` aggregates the benign clients only. Returns the honest update
/// (flagged) when it is itself infeasible.
pub fn targeted_decrease(
    ctx: &AttackContext,
    target: usize,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackOutcome> {
    if target >= ctx.set.clients() || target == ctx.attacker {
        return Err(Error::config("attack.target_id", "target must be another client"));
    }
    let honest = ctx.set.updates[ctx.attacker].clone();
    let perms = ctx.frozen_permutations(rng);
    let objective = ScoreObjective::new(ctx.set, ctx.attacker, ctx.functional(target, &perms), ctx.validation_view)?;
    let honest_score = objective.value(honest.values());

    let benign: Vec<usize> = (0..ctx.set.clients()).filter(|&k| k != ctx.attacker).collect();
    let benign_loss = forward_loss(&fed_avg(ctx.set, &benign)?, ctx.validation_view)?.loss;
    let gap = |x: &[f64]| loss_gap_sq(ctx.set, ctx.attacker, x, benign_loss, ctx.validation_view);

    let honest_gap = gap(honest.values());
    if honest_gap >= cfg.epsilon {
        return Ok(AttackOutcome {
            update: honest,
            honest_score,
            attacked_score: honest_score,
            constraint_slack: Some(cfg.epsilon - honest_gap),
            infeasible_start: true,
            accepted_steps: 0,
        });
    }

    let gamma = cfg.gamma;
    let penalised = |x: &[f64]| -(objective.value(x) + gamma * x.iter().map(|v| v * v).sum::<f64>());
    let (x, _, accepted) = climb(
        honest.values(),
        cfg.steps,
        cfg.step_size,
        penalised,
        |x| {
            let g = objective.gradient(x);
            g.iter().zip(x).map(|(gi, xi)| -(gi + 2.0 * gamma * xi)).collect()
        },
        |x| gap(x) < cfg.epsilon,
    );
    let slack = cfg.epsilon - gap(&x);
    let attacked_score = objective.value(&x);
    Ok(AttackOutcome {
        update: honest.with_values(x),
        honest_score,
        attacked_score,
        constraint_slack: Some(slack),
        infeasible_start: false,
        accepted_steps: accepted,
    })
}

/// Feasibility of a candidate update under the targeted-decrease constraint.
pub fn td_constraint_holds(
    set: &RoundUpdateSet,
    attacker: usize,
    update: &ModelParams,
    view: &Dataset,
    epsilon: f64,
) -> Result<bool> {
    let benign: Vec<usize> = (0..set.clients()).filter(|&k| k != attacker).collect();
    let benign_loss = forward_loss(&fed_avg(set, &benign)?, view)?.loss;
    Ok(loss_gap_sq(set, attacker, update.values(), benign_loss, view) < epsilon)
}
