//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails. Run with `cargo test -p fedscore --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use common::*;
use fedscore::aggregation::AggregationRule;
use fedscore::attacks::ScoreObjective;
use fedscore::config::ExperimentConfig;
use fedscore::contribution::{
    exact_shapley, gtg_shapley, guided_permutations, CeMethod, CoalitionEvaluator, CoalitionGame, GtgConfig,
    ScoreFunctional, UtilityKind,
};
use fedscore::harness::{
    attack_ttests, paired_diffs, run_experiment, run_paired, ExperimentResult, Role, TTestRow, TestScope,
};
use fedscore::numerics::{forward_loss, gradient, Arch};
use fedscore::stats::{
    anderson_darling_k2, loss_divergence_monitor, mean, paired_t_test, spearman, Tail, DEFAULT_DIVERGENCE_FACTOR,
    DEFAULT_DIVERGENCE_WINDOW,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    measured: String,
}

fn outcome(pass: bool, measured: impl Into<String>) -> Outcome {
    Outcome { pass, measured: measured.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst_eff = 0.0f64;
    let mut worst_gtg = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng(1000 + i);
        let k = r.random_range(2..=5);
        let arch = if i % 3 == 0 { Arch::mlp(3, 4, 3) } else { Arch::logistic(3, 3) };
        let set = random_update_set(&mut r, k, arch);
        let val = random_dataset(&mut r, 40, 3, 3);
        let game = CoalitionEvaluator::new(&set, &val, UtilityKind::NegLoss).unwrap();
        let sv = exact_shapley(&game).unwrap();
        let total = game.value(game.grand_coalition()) - game.value(0);
        worst_eff = worst_eff.max((sv.iter().sum::<f64>() - total).abs());
        let gtg = gtg_shapley(&game, &GtgConfig::exhaustive(), &mut r).unwrap();
        for (a, b) in gtg.values.iter().zip(&sv) {
            worst_gtg = worst_gtg.max((a - b).abs());
        }
        let oracle = shapley_by_permutations(k, |m| game.value(m));
        for (a, b) in oracle.iter().zip(&sv) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
    }
    let el = t0.elapsed();
    outcome(
        worst_eff < 1e-9 && worst_gtg < 1e-9 && worst_oracle < 1e-9 && el.as_secs_f64() < 60.0,
        format!(
            "max efficiency gap {worst_eff:.2e}, max |gtg - exact| {worst_gtg:.2e}, max |perm oracle - exact| {worst_oracle:.2e}, {}",
            secs(el)
        ),
    )
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut worst_model = 0.0f64;
    let mut worst_attack = 0.0f64;
    for i in 0..100u64 {
        let mut r = rng(2000 + i);
        let arch = if i % 2 == 0 { Arch::mlp(4, 5, 3) } else { Arch::logistic(4, 3) };
        let data = random_dataset(&mut r, 30, 4, 3);
        let w = random_params(&mut r, arch, 0.7);
        let anchor = random_params(&mut r, arch, 0.7);
        let mu = if i % 4 < 2 { 0.0 } else { r.random_range(0.01..1.0) };
        let g = gradient(&w, &data, Some(&anchor), mu).unwrap();
        let fd = fd_gradient(w.values(), 1e-5, |x| {
            let p = w.with_values(x.to_vec());
            let prox: f64 = x.iter().zip(anchor.values()).map(|(a, b)| (a - b).powi(2)).sum();
            forward_loss(&p, &data).unwrap().loss + 0.5 * mu * prox
        });
        worst_model = worst_model.max(rel_err(&g, &fd, 1e-4));

        let k = r.random_range(3..=5);
        let set = random_update_set(&mut r, k, arch);
        let val = random_dataset(&mut r, 25, 4, 3);
        let attacker = r.random_range(0..k);
        let client = if i % 2 == 0 { attacker } else { (attacker + 1) % k };
        let functional = if i % 4 < 2 {
            ScoreFunctional::leave_one_out(client, k)
        } else {
            ScoreFunctional::permutation(client, &guided_permutations(k, 6, &mut r))
        };
        let obj = ScoreObjective::new(&set, attacker, functional, &val).unwrap();
        let x = set.updates[attacker].values();
        let g = obj.gradient(x);
        let fd = fd_gradient(x, 1e-5, |y| obj.value(y));
        worst_attack = worst_attack.max(rel_err(&g, &fd, 1e-4));
    }
    let el = t0.elapsed();
    outcome(
        worst_model < 1e-5 && worst_attack < 1e-4 && el.as_secs_f64() < 30.0,
        format!("max rel err model {worst_model:.2e}, attack chain {worst_attack:.2e}, {}", secs(el)),
    )
}

fn criterion_3() -> Outcome {
    let krum_cfg = config(BFT);
    let attacker = krum_cfg.attack.attacker();
    let krum = run_experiment(&krum_cfg).unwrap();
    let krum_ok = krum
        .runs
        .iter()
        .filter(|run| run.rounds.iter().all(|r| r.krum_selected.is_some_and(|s| s != attacker)))
        .count();
    let zeno = run_experiment(&krum_cfg.with_rule(AggregationRule::Zeno)).unwrap();
    let zeno_ok = zeno
        .runs
        .iter()
        .filter(|run| run.rounds.iter().all(|r| r.zeno_kept.as_ref().is_some_and(|kept| !kept.contains(&attacker))))
        .count();
    outcome(
        krum_ok == 10 && zeno_ok >= 9,
        format!("krum avoided attacker in {krum_ok}/10 seeds, zeno excluded it in {zeno_ok}/10 (every round)"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = config(BFT).with_rule(AggregationRule::Fedavg);
    let attacker = cfg.attack.attacker();
    let res = run_experiment(&cfg).unwrap();
    let lowest = res
        .runs
        .iter()
        .filter(|run| {
            let v = &run.final_for(CeMethod::Adp).unwrap().values;
            (0..v.len()).all(|k| k == attacker || v[k] > v[attacker])
        })
        .count();
    let m = res.mean_final(CeMethod::Adp);
    let others = mean(&m.iter().enumerate().filter(|(k, _)| *k != attacker).map(|(_, v)| *v).collect::<Vec<_>>());
    outcome(
        lowest >= 9,
        format!(
            "attacker strictly lowest in {lowest}/10 seeds (mean ADP attacker {:.3} vs others {others:.3})",
            m[attacker]
        ),
    )
}

fn criteria_5_6() -> (Outcome, Outcome) {
    let cfg = config(NON_IID);
    let res = run_experiment(&cfg).unwrap();
    let rho: Vec<f64> = res
        .runs
        .iter()
        .map(|run| spearman(&run.final_for(CeMethod::Adp).unwrap().values, &run.data_ratios()).unwrap())
        .collect();
    let rho_mean = mean(&rho);
    let gtg = res.mean_final(CeMethod::Gtg);
    let s = spread(&gtg);
    let shown: Vec<String> = gtg.iter().map(|v| format!("{v:.3}")).collect();
    (
        outcome(rho_mean > 0.9, format!("mean Spearman(ADP, data ratio) {rho_mean:.3} over 10 seeds")),
        outcome(s < 0.08, format!("GTG mean final scores [{}], spread {s:.4}", shown.join(", "))),
    )
}

fn paired(cfg: &ExperimentConfig) -> (ExperimentResult, ExperimentResult, Vec<TTestRow>) {
    let (base, att) = run_paired(cfg).unwrap();
    let diffs = paired_diffs(cfg, &base, &att).unwrap();
    let tests = attack_ttests(cfg, &diffs).unwrap();
    (base, att, tests)
}

fn row(tests: &[TTestRow], role: Role, scope: TestScope) -> &TTestRow {
    tests.iter().find(|r| r.role == role && r.scope == scope).expect("t-test row")
}

fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for score in ["loo", "gtg"] {
        let cfg = with_score(SELF_IMPROVEMENT, score);
        let (_, _, tests) = paired(&cfg);
        let fin = row(&tests, Role::Attacker, TestScope::Final);
        let pooled = row(&tests, Role::Attacker, TestScope::Pooled);
        pass &= fin.mean_delta > 0.0 && fin.p_greater < 0.05;
        parts.push(format!(
            "{score}: final delta {:+.4} p {:.2e} (pooled {:+.4} p {:.2e})",
            fin.mean_delta, fin.p_greater, pooled.mean_delta, pooled.p_greater
        ));
    }
    let el = t0.elapsed();
    pass &= el.as_secs_f64() < 300.0;
    outcome(pass, format!("{}, {}", parts.join("; "), secs(el)))
}

/// Runs of criterion 8, reused by criterion 9.
struct TdRuns {
    score: &'static str,
    tests: Vec<TTestRow>,
    records: usize,
    infeasible: usize,
}

fn td_runs() -> (Vec<TdRuns>, Duration) {
    let t0 = Instant::now();
    let runs = ["loo", "gtg"]
        .into_iter()
        .map(|score| {
            let cfg = with_score(TARGETED_DECREASE, score);
            let (_, att, tests) = paired(&cfg);
            let recs: Vec<_> = att.runs.iter().flat_map(|r| &r.rounds).filter_map(|r| r.attack.as_ref()).collect();
            let infeasible = recs.iter().filter(|a| !a.constraint_slack.is_some_and(|s| s > 0.0)).count();
            TdRuns { score, tests, records: recs.len(), infeasible }
        })
        .collect();
    (runs, t0.elapsed())
}

fn criterion_8(runs: &[TdRuns], el: Duration) -> Outcome {
    let mut pass = el.as_secs_f64() < 600.0;
    let mut parts = Vec::new();
    for r in runs {
        let fin = row(&r.tests, Role::Target, TestScope::Final);
        let pooled = row(&r.tests, Role::Target, TestScope::Pooled);
        pass &= fin.mean_delta < 0.0 && fin.p_two_sided < 0.05 && r.infeasible == 0;
        parts.push(format!(
            "{}: target final delta {:+.4} p {:.4} (pooled {:+.4} p {:.2e}), infeasible updates {}/{}",
            r.score, fin.mean_delta, fin.p_two_sided, pooled.mean_delta, pooled.p_two_sided, r.infeasible, r.records
        ));
    }
    outcome(pass, format!("{}, {}", parts.join("; "), secs(el)))
}

fn criterion_9(runs: &[TdRuns]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let att = row(&r.tests, Role::Attacker, TestScope::Final);
        let tgt = row(&r.tests, Role::Target, TestScope::Final);
        pass &= att.mean_delta < 0.0;
        parts.push(format!(
            "{}: attacker final delta {:+.4} vs target {:+.4} (attacker reduced more: {})",
            r.score,
            att.mean_delta,
            tgt.mean_delta,
            att.mean_delta < tgt.mean_delta
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let cfg = config(DIVERGENCE);
    let (base, att) = run_paired(&cfg).unwrap();
    let flagged = |res: &ExperimentResult| {
        res.runs
            .iter()
            .filter(|r| {
                loss_divergence_monitor(&r.losses(), DEFAULT_DIVERGENCE_WINDOW, DEFAULT_DIVERGENCE_FACTOR)
                    .unwrap()
                    .flagged
            })
            .count()
    };
    let (fa, fb) = (flagged(&att), flagged(&base));
    // how far the attacked loss climbs above its running minimum
    let rise: Vec<f64> = att
        .runs
        .iter()
        .map(|r| {
            let l = r.losses();
            let min_so_far = |t: usize| l[..=t].iter().copied().fold(f64::INFINITY, f64::min);
            (0..l.len()).map(|t| l[t] / min_so_far(t)).fold(0.0, f64::max)
        })
        .collect();
    outcome(
        fa >= 8 && fb == 0,
        format!(
            "monitor flagged {fa}/10 attacked runs and {fb}/10 baselines over {} rounds (mean peak loss/running-min ratio {:.2})",
            cfg.rounds,
            mean(&rise)
        ),
    )
}

fn criterion_11() -> Outcome {
    let mut agree = 0;
    let mut lines = Vec::new();
    for i in 0..20u64 {
        let mut r = rng(11_000 + i);
        let (n1, n2) = (r.random_range(15..30), r.random_range(15..30));
        // half the instances share a distribution, half are shifted
        let shift = if i % 2 == 0 { 0.0 } else { 1.5 };
        let a: Vec<f64> = (0..n1).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..n2).map(|_| normal(&mut r) + shift).collect();
        let p = anderson_darling_k2(&a, &b).unwrap().p_value;
        let perm = ad_permutation_p(&a, &b, 10_000, 12_000 + i);
        if (p < 0.05) == (perm < 0.05) {
            agree += 1;
        } else {
            lines.push(format!("instance {i}: p {p:.3} vs permutation {perm:.3}"));
        }
    }
    let t = paired_t_test(&[1.0, 2.0, 3.0], Tail::Greater).unwrap().p_value;
    let mut measured = format!("AD agrees with permutation oracle on {agree}/20, t-test p {t:.5}");
    if !lines.is_empty() {
        measured.push_str(&format!(" ({})", lines.join(", ")));
    }
    outcome(agree == 20 && (t - 0.0371).abs() <= 0.0005, measured)
}

fn criterion_12(suite_start: Instant) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let configs = [("small", SMALL.to_string()), ("bft", BFT.replace("repetitions = 10", "repetitions = 3"))];
    for (name, text) in &configs {
        let cfg_path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&cfg_path, text).unwrap();
        let mut outputs = Vec::new();
        for rerun in 0..2 {
            let out = dir.path().join(format!("{name}-{rerun}"));
            let code = fedscore::cli::main_with_args([
                "fedscore",
                "run",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0, "cli run failed for {name}");
            outputs.push(std::fs::read(out.join("scores.csv")).unwrap());
        }
        if outputs[0] == outputs[1] && !outputs[0].is_empty() {
            identical += 1;
        }
    }
    let el = suite_start.elapsed();
    outcome(
        identical == configs.len() && el.as_secs_f64() < 1200.0,
        format!("{identical}/{} configs rerun byte-identical, suite wall time {}", configs.len(), secs(el)),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, o: Outcome| {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.measured);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let (c5, c6) = criteria_5_6();
    report(5, c5);
    report(6, c6);
    report(7, criterion_7());
    let (td, td_time) = td_runs();
    report(8, criterion_8(&td, td_time));
    report(9, criterion_9(&td));
    report(10, criterion_10());
    report(11, criterion_11());
    report(12, criterion_12(start));

    let failed: Vec<String> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.to_string()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
