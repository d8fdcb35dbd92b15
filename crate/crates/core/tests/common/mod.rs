#![allow(dead_code)]

use fedscore::aggregation::RoundUpdateSet;
use fedscore::config::ExperimentConfig;
use fedscore::data::Dataset;
use fedscore::numerics::{Arch, ModelParams};
use fedscore::rng::{from_seed, Stream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Stream {
    from_seed(seed)
}

pub fn normal(rng: &mut Stream) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian features, uniform labels (every class present when n >= classes).
pub fn random_dataset(rng: &mut Stream, n: usize, dim: usize, classes: usize) -> Dataset {
    let features = (0..n * dim).map(|_| normal(rng)).collect();
    let labels = (0..n).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    Dataset::new(features, labels, dim, classes).unwrap()
}

pub fn random_params(rng: &mut Stream, arch: Arch, scale: f64) -> ModelParams {
    let v = (0..arch.param_count()).map(|_| scale * normal(rng)).collect();
    ModelParams::new(arch, v).unwrap()
}

/// Updates scattered around a random previous global model.
pub fn random_update_set(rng: &mut Stream, clients: usize, arch: Arch) -> RoundUpdateSet {
    let prev = random_params(rng, arch, 0.5);
    let updates = (0..clients)
        .map(|_| {
            let v = prev.values().iter().map(|w| w + 0.3 * normal(rng)).collect();
            ModelParams::new(arch, v).unwrap()
        })
        .collect();
    let sizes = (0..clients).map(|_| rng.random_range(5..60)).collect();
    let taus = (0..clients).map(|_| rng.random_range(1..8)).collect();
    RoundUpdateSet::new(prev, updates, sizes, taus).unwrap()
}

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).unwrap()
}

pub fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Shapley values by averaging marginals over every ordering.
pub fn shapley_by_permutations(players: usize, v: impl Fn(u64) -> f64) -> Vec<f64> {
    fn rec(prefix: &mut Vec<usize>, left: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let k = left.remove(i);
            prefix.push(k);
            rec(prefix, left, out);
            prefix.pop();
            left.insert(i, k);
        }
    }
    let mut perms = Vec::new();
    rec(&mut Vec::new(), &mut (0..players).collect(), &mut perms);
    let mut sv = vec![0.0; players];
    for p in &perms {
        let mut mask = 0u64;
        for &k in p {
            let before = v(mask);
            mask |= 1 << k;
            sv[k] += v(mask) - before;
        }
    }
    sv.iter().map(|s| s / perms.len() as f64).collect()
}

/// Central finite-difference gradient.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b|_2 / max(|b|_2, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(floor);
    num / den
}

/// Permutation p-value of the two-sample AD statistic.
pub fn ad_permutation_p(a: &[f64], b: &[f64], draws: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let observed = fedscore::stats::anderson_darling_k2(a, b).unwrap().statistic;
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut r = rng(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        pooled.shuffle(&mut r);
        let s = fedscore::stats::anderson_darling_k2(&pooled[..a.len()], &pooled[a.len()..]).unwrap().statistic;
        if s >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (draws + 1) as f64
}

// Configurations shared by the acceptance suite and integration tests.

/// Five IID clients, client 1 sends flipped gradients.
pub const BFT: &str = r#"
clients = 5
rounds = 10
repetitions = 10
base_seed = 100
ce_methods = ["adp"]
[data]
validation_size = 200
source = { kind = "synthetic", n = 1200, dim = 4, classes = 3, separation = 2.0 }
[hp]
eta = 0.1
tau = 10
batch_size = 32
[aggregator]
rule = "krum"
kappa = 1
rho = 0.0005
[attack]
kind = "gradient_flip"
attacker_id = 1
"#;

/// Highly skewed label partitions over many classes.
pub const NON_IID: &str = r#"
clients = 5
rounds = 10
repetitions = 10
base_seed = 200
ce_methods = ["gtg", "adp"]
adp_on_deltas = true
[data]
validation_size = 500
source = { kind = "synthetic", n = 10000, dim = 50, classes = 50, separation = 4.0 }
partition = { kind = "dirichlet", alpha = 0.1 }
[hp]
eta = 0.1
tau = 10
batch_size = 32
[aggregator]
rule = "fedavg"
"#;

pub const SELF_IMPROVEMENT: &str = r#"
clients = 5
rounds = 3
repetitions = 10
base_seed = 300
ce_methods = ["loo"]
[data]
validation_size = 300
source = { kind = "synthetic", n = 1500, dim = 4, classes = 3, separation = 2.0 }
[hp]
eta = 0.1
tau = 10
batch_size = 32
[aggregator]
rule = "fedavg"
[attack]
kind = "self_improvement"
attacker_id = 1
score = "loo"
"#;

/// The attacker sees 3% of a large server validation set.
pub const TARGETED_DECREASE: &str = r#"
clients = 5
rounds = 12
repetitions = 10
base_seed = 400
ce_methods = ["loo"]
[data]
validation_size = 3000
source = { kind = "synthetic", n = 4200, dim = 4, classes = 3, separation = 2.0 }
partition = { kind = "dirichlet", alpha = 1.0 }
[hp]
eta = 0.1
tau = 10
batch_size = 32
[aggregator]
rule = "fedavg"
[attack]
kind = "targeted_decrease"
attacker_id = 1
target_id = 2
score = "loo"
val_fraction = 0.03
"#;

/// Long targeted-decrease runs on a harder ten-class task.
pub const DIVERGENCE: &str = r#"
clients = 5
rounds = 40
repetitions = 10
base_seed = 400
ce_methods = ["loo"]
[data]
validation_size = 1000
source = { kind = "synthetic", n = 3000, dim = 20, classes = 10, separation = 2.0 }
partition = { kind = "dirichlet", alpha = 1.0 }
[hp]
eta = 0.1
tau = 10
batch_size = 32
[aggregator]
rule = "fedavg"
[attack]
kind = "targeted_decrease"
attacker_id = 1
target_id = 2
score = "loo"
val_fraction = 0.02
"#;

/// Small all-method run for CLI and determinism checks.
pub const SMALL: &str = r#"
experiment_id = "small"
clients = 4
rounds = 3
repetitions = 2
base_seed = 7
[data]
validation_size = 60
source = { kind = "synthetic", n = 300, dim = 3, classes = 3, separation = 2.5 }
partition = { kind = "dirichlet", alpha = 0.5 }
[hp]
eta = 0.1
tau = 5
batch_size = 16
[aggregator]
rule = "fedavg"
"#;

/// Same config with a different score method and rule.
pub fn with_score(text: &str, score: &str) -> ExperimentConfig {
    let t = text
        .replace("score = \"loo\"", &format!("score = \"{score}\""))
        .replace("ce_methods = [\"loo\"]", &format!("ce_methods = [\"{score}\"]"));
    config(&t)
}
