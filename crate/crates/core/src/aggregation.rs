//! Server-side aggregation rules: FedAvg (also used for FedProx, whose
//! change is client-side), FedNova, Krum and Zeno.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{forward_loss, ModelParams};

/// Relative tolerance under which two Krum scores count as tied.
pub const KRUM_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    Fedavg,
    Fedprox,
    Fednova,
    Krum,
    Zeno,
}

impl AggregationRule {
    pub const ALL: [AggregationRule; 5] = [
        AggregationRule::Fedavg,
        AggregationRule::Fedprox,
        AggregationRule::Fednova,
        AggregationRule::Krum,
        AggregationRule::Zeno,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationRule::Fedavg => "fedavg",
            AggregationRule::Fedprox => "fedprox",
            AggregationRule::Fednova => "fednova",
            AggregationRule::Krum => "krum",
            AggregationRule::Zeno => "zeno",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// How FedNova's coefficients are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NovaMode {
    /// `w_prev - sum_k tau_k n_k / (tau n) * (w_prev - w_k)`, exactly as
    /// written; equal clients move by only `1/K` of a FedAvg step.
    #[default]
    Literal,
    /// Classic FedNova: `w_prev - tau_eff * sum_k (n_k/n) (w_prev - w_k) / tau_k`
    /// with `tau_eff = sum_k (n_k/n) tau_k`. Equal `tau_k` reduces to FedAvg.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub rule: AggregationRule,
    /// Tolerated Byzantine clients (Krum and Zeno).
    #[serde(default)]
    pub kappa: usize,
    /// Zeno norm regulariser.
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub nova_mode: NovaMode,
}

impl AggregatorConfig {
    pub fn new(rule: AggregationRule) -> Self {
        Self { rule, kappa: 0, rho: 0.0, nova_mode: NovaMode::default() }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        match self.rule {
            AggregationRule::Krum if clients < self.kappa + 3 => Err(Error::config(
                "aggregator.kappa",
                format!("krum needs K - kappa - 2 >= 1 (K = {clients}, kappa = {})", self.kappa),
            )),
            AggregationRule::Zeno if clients <= self.kappa => Err(Error::config(
                "aggregator.kappa",
                format!("zeno needs K - kappa >= 1 (K = {clients}, kappa = {})", self.kappa),
            )),
            AggregationRule::Zeno if !(self.rho >= 0.0) || !self.rho.is_finite() => {
                Err(Error::config("aggregator.rho", "must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Everything the server received in one round.
#[derive(Debug, Clone)]
pub struct RoundUpdateSet {
    pub prev_global: ModelParams,
    pub updates: Vec<ModelParams>,
    pub sizes: Vec<usize>,
    pub taus: Vec<usize>,
}

impl RoundUpdateSet {
    pub fn new(
        prev_global: ModelParams,
        updates: Vec<ModelParams>,
        sizes: Vec<usize>,
        taus: Vec<usize>,
    ) -> Result<Self> {
        if updates.is_empty() {
            return Err(Error::Empty("round has no client updates".into()));
        }
        if sizes.len() != updates.len() || taus.len() != updates.len() {
            return Err(Error::Dimension("sizes/taus length differs from update count".into()));
        }
        if sizes.contains(&0) || taus.contains(&0) {
            return Err(Error::config("sizes", "client sizes and taus must be positive"));
        }
        for u in &updates {
            prev_global.check_same_arch(u)?;
        }
        Ok(Self { prev_global, updates, sizes, taus })
    }

    pub fn clients(&self) -> usize {
        self.updates.len()
    }

    pub fn total_size(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Same round with client `k`'s update replaced.
    pub fn with_update(&self, k: usize, update: ModelParams) -> RoundUpdateSet {
        let mut out = self.clone();
        out.updates[k] = update;
        out
    }
}

/// Size-weighted average of the updates in `subset`.
pub fn fed_avg(set: &RoundUpdateSet, subset: &[usize]) -> Result<ModelParams> {
    if subset.is_empty() {
        return Err(Error::Empty("fed_avg subset".into()));
    }
    let total: usize = subset.iter().map(|&k| set.sizes[k]).sum();
    let mut acc = vec![0.0; set.prev_global.values().len()];
    for &k in subset {
        let w = set.sizes[k] as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(set.updates[k].values()) {
            *a += w * v;
        }
    }
    Ok(set.prev_global.with_values(acc))
}

/// Size-weighted average over a coalition bitmask; the empty coalition is
/// the previous global model.
pub fn fed_avg_mask(set: &RoundUpdateSet, mask: u64) -> ModelParams {
    let members: Vec<usize> = (0..set.clients()).filter(|&k| mask >> k & 1 == 1).collect();
    if members.is_empty() {
        set.prev_global.clone()
    } else {
        fed_avg(set, &members).expect("nonempty coalition")
    }
}

pub fn fed_nova(set: &RoundUpdateSet, mode: NovaMode) -> ModelParams {
    let n = set.total_size() as f64;
    let tau: f64 = set.taus.iter().map(|&t| t as f64).sum();
    let k_total = set.clients();
    let coeffs: Vec<f64> = match mode {
        NovaMode::Literal => (0..k_total).map(|k| set.taus[k] as f64 * set.sizes[k] as f64 / (tau * n)).collect(),
        NovaMode::Normalized => {
            let tau_eff: f64 = (0..k_total).map(|k| set.sizes[k] as f64 / n * set.taus[k] as f64).sum();
            (0..k_total).map(|k| tau_eff * (set.sizes[k] as f64 / n) / set.taus[k] as f64).collect()
        }
    };
    let prev = set.prev_global.values();
    let mut out = prev.to_vec();
    for (k, c) in coeffs.iter().enumerate() {
        for ((o, p), w) in out.iter_mut().zip(prev).zip(set.updates[k].values()) {
            // delta oriented as w_prev - w_k
            *o -= c * (p - w);
        }
    }
    set.prev_global.with_values(out)
}

/// Krum scores: sum of squared distances to the `K - kappa - 2` nearest
/// other updates.
pub fn krum_scores(set: &RoundUpdateSet, kappa: usize) -> Result<Vec<f64>> {
    let k_total = set.clients();
    if k_total < kappa + 3 {
        return Err(Error::config("aggregator.kappa", "krum needs K - kappa - 2 >= 1"));
    }
    let neighbours = k_total - kappa - 2;
    Ok((0..k_total)
        .map(|k| {
            let mut d: Vec<f64> =
                (0..k_total).filter(|&j| j != k).map(|j| set.updates[k].distance_sq(&set.updates[j])).collect();
            d.sort_by(f64::total_cmp);
            d[..neighbours].iter().sum()
        })
        .collect())
}

/// Single Krum. Scores within a relative `1e-12` of the minimum are treated
/// as tied and the lowest client index wins.
pub fn krum(set: &RoundUpdateSet, kappa: usize) -> Result<(ModelParams, usize)> {
    let scores = krum_scores(set, kappa)?;
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = KRUM_TIE_RTOL * best.abs().max(f64::MIN_POSITIVE);
    let idx = scores.iter().position(|&s| s <= best + tol).expect("nonempty scores");
    Ok((set.updates[idx].clone(), idx))
}

/// Zeno descent scores: mean validation-loss drop minus `rho * ||w_k||^2`.
pub fn zeno_scores(set: &RoundUpdateSet, rho: f64, validation: &Dataset) -> Result<Vec<f64>> {
    if validation.is_empty() {
        return Err(Error::Empty("zeno validation set".into()));
    }
    let base = forward_loss(&set.prev_global, validation)?.loss;
    set.updates.iter().map(|u| Ok(base - forward_loss(u, validation)?.loss - rho * u.norm_sq())).collect()
}

/// Keeps the `K - kappa` highest Zeno scores (ties to the lowest index) and
/// returns their size-weighted average with the kept indices, ascending.
pub fn zeno(set: &RoundUpdateSet, kappa: usize, rho: f64, validation: &Dataset) -> Result<(ModelParams, Vec<usize>)> {
    let k_total = set.clients();
    if k_total <= kappa {
        return Err(Error::config("aggregator.kappa", "zeno needs K - kappa >= 1"));
    }
    let scores = zeno_scores(set, rho, validation)?;
    let mut order: Vec<usize> = (0..k_total).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k_total - kappa].to_vec();
    kept.sort_unstable();
    Ok((fed_avg(set, &kept)?, kept))
}

/// Result of one aggregation step.
#[derive(Debug, Clone)]
pub struct AggregationOutcome {
    pub global: ModelParams,
    pub krum_selected: Option<usize>,
    pub zeno_kept: Option<Vec<usize>>,
}

/// Apply the configured rule. `validation` is required only by Zeno.
pub fn aggregate(set: &RoundUpdateSet, cfg: &AggregatorConfig, validation: &Dataset) -> Result<AggregationOutcome> {
    cfg.validate(set.clients())?;
    let all: Vec<usize> = (0..set.clients()).collect();
    Ok(match cfg.rule {
        AggregationRule::Fedavg | AggregationRule::Fedprox => {
            AggregationOutcome { global: fed_avg(set, &all)?, krum_selected: None, zeno_kept: None }
        }
        AggregationRule::Fednova => {
            AggregationOutcome { global: fed_nova(set, cfg.nova_mode), krum_selected: None, zeno_kept: None }
        }
        AggregationRule::Krum => {
            let (global, idx) = krum(set, cfg.kappa)?;
            AggregationOutcome { global, krum_selected: Some(idx), zeno_kept: None }
        }
        AggregationRule::Zeno => {
            let (global, kept) = zeno(set, cfg.kappa, cfg.rho, validation)?;
            AggregationOutcome { global, krum_selected: None, zeno_kept: Some(kept) }
        }
    })
}
