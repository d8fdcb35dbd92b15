//! Command-line front end: `run`, `compare` and `attack`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::aggregation::AggregationRule;
use crate::config::ExperimentConfig;
use crate::contribution::CeMethod;
use crate::error::{Error, Result};
use crate::harness::{
    attack_ttests, compare_report, paired_diffs, run_experiment, run_paired, ExperimentResult, PairedDiff, TestScope,
};
use crate::stats::{loss_divergence_monitor, mean, DEFAULT_DIVERGENCE_FACTOR, DEFAULT_DIVERGENCE_WINDOW};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fedscore",
    version,
    about = "Contribution-score fragility experiments for simulated federated learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Override `base_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `repetitions`.
    #[arg(long)]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment; writes scores.csv, rounds.csv, manifest.json.
    Run(Common),
    /// Run the config under several aggregators against FedAvg; writes
    /// compare.csv, ad_tests.csv, rmse.csv, scores.csv, manifest.json.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated aggregation rules (fedavg is always included).
        #[arg(long, short, value_delimiter = ',', required = true)]
        aggregators: Vec<String>,
    },
    /// Paired baseline and attack runs; writes attack_diffs.csv,
    /// ttests.csv, losses.csv, divergence.csv, manifest.json.
    Attack(Common),
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Run(c) => cmd_run(c),
        Command::Compare { common, aggregators } => cmd_compare(common, aggregators),
        Command::Attack(c) => cmd_attack(c),
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = common.repetitions {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Shortest round-trip decimal.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write_to(&self, w: impl std::io::Write) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv fields are utf-8")
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    tool_version: &'static str,
    base_seed: u64,
    repetitions: usize,
    artifacts: Vec<String>,
    wall_time_secs: f64,
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    artifacts: &[&str],
    started: Instant,
) -> Result<()> {
    let m = Manifest {
        command,
        config_hash: cfg.hash(),
        tool_version: env!("CARGO_PKG_VERSION"),
        base_seed: cfg.base_seed,
        repetitions: cfg.repetitions,
        artifacts: artifacts.iter().map(|a| out.join(a).display().to_string()).collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serialises") + "\n";
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn scores_table(cfg: &ExperimentConfig, results: &[(AggregationRule, &ExperimentResult)]) -> Table {
    let mut t = Table::new(&["experiment_id", "seed", "ce_method", "aggregator", "client", "raw_score", "norm_score"]);
    let methods = cfg.methods_sorted();
    for (rule, res) in results {
        for run in &res.runs {
            for c in 0..cfg.clients {
                for &m in &methods {
                    let raw = run.final_raw_for(m).expect("configured");
                    let norm = run.final_for(m).expect("configured");
                    t.push(vec![
                        cfg.experiment_id.clone(),
                        run.seed.to_string(),
                        m.name().into(),
                        rule.name().into(),
                        (c + 1).to_string(),
                        fmt(raw.values[c]),
                        fmt(norm.values[c]),
                    ]);
                }
            }
        }
    }
    t
}

/// The scores.csv table of `run` as a string.
pub fn scores_csv(cfg: &ExperimentConfig, res: &ExperimentResult) -> String {
    scores_table(cfg, &[(cfg.aggregator.rule, res)]).to_csv_string()
}

/// Wide per-round table.
pub fn rounds_table_header(cfg: &ExperimentConfig) -> Vec<String> {
    let mut h: Vec<String> = ["seed", "round", "global_loss", "global_accuracy", "krum_selected", "zeno_kept"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in cfg.methods_sorted() {
        for c in 1..=cfg.clients {
            h.push(format!("{}_norm_{c}", m.name()));
        }
    }
    h
}

fn rounds_table(cfg: &ExperimentConfig, res: &ExperimentResult) -> Table {
    let header = rounds_table_header(cfg);
    let mut t = Table { header, rows: Vec::new() };
    for run in &res.runs {
        for r in &run.rounds {
            let mut row = vec![
                run.seed.to_string(),
                r.round.to_string(),
                fmt(r.global_loss),
                fmt(r.global_accuracy),
                r.krum_selected.map(|k| (k + 1).to_string()).unwrap_or_default(),
                r.zeno_kept
                    .as_ref()
                    .map(|v| v.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(";"))
                    .unwrap_or_default(),
            ];
            for s in &r.normalized {
                row.extend(s.values.iter().map(|&v| fmt(v)));
            }
            t.push(row);
        }
    }
    t
}

pub fn cmd_run(common: &Common) -> Result<()> {
    let started = Instant::now();
    let cfg = load(common)?;
    let res = run_experiment(&cfg)?;
    std::fs::create_dir_all(&common.out)?;
    scores_table(&cfg, &[(cfg.aggregator.rule, &res)]).write(&common.out.join("scores.csv"))?;
    rounds_table(&cfg, &res).write(&common.out.join("rounds.csv"))?;
    write_manifest(&common.out, "run", &cfg, &["scores.csv", "rounds.csv"], started)?;
    println!("wrote {} runs to {}", res.runs.len(), common.out.display());
    Ok(())
}

pub fn cmd_compare(common: &Common, aggregators: &[String]) -> Result<()> {
    let started = Instant::now();
    let cfg = load(common)?;
    let mut rules = vec![AggregationRule::Fedavg];
    for name in aggregators {
        let r = AggregationRule::parse(name.trim())
            .ok_or_else(|| Error::config("aggregators", format!("unknown aggregation rule `{name}`")))?;
        if !rules.contains(&r) {
            rules.push(r);
        }
    }
    let configs: Vec<ExperimentConfig> = rules.iter().map(|&r| cfg.with_rule(r)).collect();
    for c in &configs {
        c.validate()?;
    }
    let mut results = Vec::new();
    for (rule, c) in rules.iter().zip(&configs) {
        results.push((*rule, run_experiment(c)?));
    }
    let methods = cfg.methods_sorted();
    let rows = compare_report(&results[0].1, &results, &methods, cfg.clients)?;

    std::fs::create_dir_all(&common.out)?;
    let mut compare = Table::new(&["aggregator", "ce_method", "client", "mean", "sd", "ad_p", "rmse"]);
    let mut ad = Table::new(&["aggregator", "ce_method", "client", "ad_statistic", "ad_p"]);
    let mut rm = Table::new(&["aggregator", "ce_method", "rmse"]);
    for r in &rows {
        let (agg, m, c) = (r.aggregator.name().to_string(), r.method.name().to_string(), (r.client + 1).to_string());
        compare.push(vec![agg.clone(), m.clone(), c.clone(), fmt(r.mean), fmt(r.sd), fmt_opt(r.ad_p), fmt(r.rmse)]);
        ad.push(vec![agg.clone(), m.clone(), c, fmt_opt(r.ad_statistic), fmt_opt(r.ad_p)]);
        if r.client == 0 {
            rm.push(vec![agg, m, fmt(r.rmse)]);
        }
    }
    compare.write(&common.out.join("compare.csv"))?;
    ad.write(&common.out.join("ad_tests.csv"))?;
    rm.write(&common.out.join("rmse.csv"))?;
    let refs: Vec<(AggregationRule, &ExperimentResult)> = results.iter().map(|(r, e)| (*r, e)).collect();
    scores_table(&cfg, &refs).write(&common.out.join("scores.csv"))?;
    write_manifest(&common.out, "compare", &cfg, &["compare.csv", "ad_tests.csv", "rmse.csv", "scores.csv"], started)?;
    println!("compared {} aggregators in {}", rules.len(), common.out.display());
    Ok(())
}

fn summary_row(scope: &str, group: &[&PairedDiff]) -> Vec<String> {
    let d0 = group[0];
    let base = mean(&group.iter().map(|d| d.baseline).collect::<Vec<_>>());
    let att = mean(&group.iter().map(|d| d.attacked).collect::<Vec<_>>());
    let delta = att - base;
    let rel = (base != 0.0).then(|| delta.abs() / base);
    vec![
        "all".into(),
        scope.into(),
        d0.method.name().into(),
        d0.role.name().into(),
        (d0.client + 1).to_string(),
        fmt(base),
        fmt(att),
        fmt(delta),
        fmt_opt(rel),
    ]
}

pub fn cmd_attack(common: &Common) -> Result<()> {
    let started = Instant::now();
    let cfg = load(common)?;
    if !cfg.attack.kind.is_score_poisoning() {
        return Err(Error::config("attack.kind", "attack command needs self_improvement or targeted_decrease"));
    }
    let (base, att) = run_paired(&cfg)?;
    let diffs = paired_diffs(&cfg, &base, &att)?;
    let tests = attack_ttests(&cfg, &diffs)?;
    std::fs::create_dir_all(&common.out)?;

    let mut dt =
        Table::new(&["seed", "round", "ce_method", "role", "client", "baseline", "attacked", "delta", "rel_delta"]);
    for d in &diffs {
        dt.push(vec![
            d.seed.to_string(),
            d.round.map_or("final".into(), |r| r.to_string()),
            d.method.name().into(),
            d.role.name().into(),
            (d.client + 1).to_string(),
            fmt(d.baseline),
            fmt(d.attacked),
            fmt(d.delta()),
            fmt_opt(d.rel_delta()),
        ]);
    }
    // seed-averaged rows per round, pooled over rounds, and for final scores
    let keys: BTreeSet<(CeMethod, &'static str)> = diffs.iter().map(|d| (d.method, d.role.name())).collect();
    for (m, role) in keys {
        let of = |f: &dyn Fn(&PairedDiff) -> bool| -> Vec<&PairedDiff> {
            diffs.iter().filter(|d| d.method == m && d.role.name() == role && f(d)).collect()
        };
        for t in 1..=cfg.rounds {
            let g = of(&|d| d.round == Some(t));
            if !g.is_empty() {
                dt.push(summary_row(&t.to_string(), &g));
            }
        }
        let g = of(&|d| d.round.is_some());
        if !g.is_empty() {
            dt.push(summary_row("pooled", &g));
        }
        let g = of(&|d| d.round.is_none());
        if !g.is_empty() {
            dt.push(summary_row("final", &g));
        }
    }
    dt.write(&common.out.join("attack_diffs.csv"))?;

    let mut tt = Table::new(&[
        "ce_method",
        "role",
        "client",
        "scope",
        "n",
        "mean_delta",
        "mean_rel_delta",
        "t",
        "p_greater",
        "p_less",
        "p_two_sided",
    ]);
    let roles = crate::harness::tracked_roles(&cfg);
    for r in &tests {
        let client = roles.iter().find(|(role, _)| *role == r.role).map_or(0, |(_, c)| *c);
        tt.push(vec![
            r.method.name().into(),
            r.role.name().into(),
            (client + 1).to_string(),
            r.scope.label(),
            r.n.to_string(),
            fmt(r.mean_delta),
            fmt_opt(r.mean_rel_delta),
            fmt(r.t),
            fmt(r.p_greater),
            fmt(r.p_less),
            fmt(r.p_two_sided),
        ]);
    }
    tt.write(&common.out.join("ttests.csv"))?;

    let mut lt = Table::new(&["seed", "round", "baseline_loss", "attack_loss", "baseline_accuracy", "attack_accuracy"]);
    let mut dv =
        Table::new(&["seed", "baseline_flagged", "baseline_first_round", "attack_flagged", "attack_first_round"]);
    let mut flagged = 0;
    for (b, a) in base.runs.iter().zip(&att.runs) {
        for (rb, ra) in b.rounds.iter().zip(&a.rounds) {
            lt.push(vec![
                b.seed.to_string(),
                rb.round.to_string(),
                fmt(rb.global_loss),
                fmt(ra.global_loss),
                fmt(rb.global_accuracy),
                fmt(ra.global_accuracy),
            ]);
        }
        let fb = loss_divergence_monitor(&b.losses(), DEFAULT_DIVERGENCE_WINDOW, DEFAULT_DIVERGENCE_FACTOR)?;
        let fa = loss_divergence_monitor(&a.losses(), DEFAULT_DIVERGENCE_WINDOW, DEFAULT_DIVERGENCE_FACTOR)?;
        flagged += usize::from(fa.flagged);
        dv.push(vec![
            b.seed.to_string(),
            fb.flagged.to_string(),
            fb.first_round.map(|r| r.to_string()).unwrap_or_default(),
            fa.flagged.to_string(),
            fa.first_round.map(|r| r.to_string()).unwrap_or_default(),
        ]);
    }
    lt.write(&common.out.join("losses.csv"))?;
    dv.write(&common.out.join("divergence.csv"))?;
    write_manifest(
        &common.out,
        "attack",
        &cfg,
        &["attack_diffs.csv", "ttests.csv", "losses.csv", "divergence.csv"],
        started,
    )?;
    for r in tests.iter().filter(|r| r.scope == TestScope::Pooled) {
        println!(
            "{} {}: mean delta {:.5}, p(greater) {:.4}, p(less) {:.4}, p(two-sided) {:.4}",
            r.method.name(),
            r.role.name(),
            r.mean_delta,
            r.p_greater,
            r.p_less,
            r.p_two_sided
        );
    }
    println!("loss divergence flagged in {flagged}/{} attacked runs", att.runs.len());
    Ok(())
}
