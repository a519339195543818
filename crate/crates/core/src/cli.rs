//! Command-line entry points: `synth`, `ingest`, `train`, `eval`, `ablate`
//! and `plot`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{ingest_events, write_events, Dataset, HierarchyManifest};
use crate::eval::{evaluate, EvalReport, Target};
use crate::synth::{generate, SynthProfile};
use crate::train::{eval_setup, fit_with, Checkpoint, TrainConfig, Variant};

pub const EVENTS_FILE: &str = "events.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GAMMA_FILE: &str = "gamma.csv";
pub const SEEDS_FILE: &str = "seeds.json";
pub const REPORT_FILE: &str = "report.json";

/// Input data location; without both paths the `synth` profile is generated
/// in memory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub events: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

/// Every knob of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub overwrite: bool,
    pub data: DataConfig,
    pub synth: SynthProfile,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            overwrite: false,
            data: DataConfig::default(),
            synth: SynthProfile::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML, apply `key.path=value` overrides, reject unknown keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing config")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(toml::Value::Table(table)).context("invalid config")
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.events, &self.data.manifest) {
            (Some(events), Some(manifest)) => Dataset::load(events, manifest)
                .with_context(|| format!("loading {}", events.display())),
            (None, None) => Ok(generate(&self.synth)?),
            _ => bail!("data.events and data.manifest must be given together"),
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{key}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "coalrec", version, about = "Cross-domain sequential recommendation with Shapley loss re-balancing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    pub overwrite: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.overwrite |= self.overwrite;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event log and manifest.
    Synth(ConfigArgs),
    /// Validate an event log against a manifest and write a normalized copy.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one model into a run directory.
    Train(ConfigArgs),
    /// Re-evaluate a run directory's checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        target: String,
    },
    /// Train every requested variant and seed and tabulate NDCG@5.
    Ablate(ConfigArgs),
    /// Draw γ trajectories and per-domain NDCG@5 bars as SVG.
    Plot {
        /// Run directories (or an ablation directory containing runs).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` and run, printing errors to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(&args.resolve()?).map(|_| ()),
        Command::Ingest {
            events,
            manifest,
            out,
            overwrite,
        } => cmd_ingest(&events, &manifest, &out, overwrite),
        Command::Train(args) => cmd_train(&args.resolve()?).map(|_| ()),
        Command::Eval { run, target } => {
            let target = match target.as_str() {
                "test" => Target::Test,
                "valid" => Target::Valid,
                other => bail!("unknown target `{other}` (expected test or valid)"),
            };
            let report = cmd_eval(&run, target)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Ablate(args) => cmd_ablate(&args.resolve()?).map(|_| ()),
        Command::Plot { runs, out } => cmd_plot(&runs, &out).map(|_| ()),
    }
}

/// Create `dir`, refusing to reuse a non-empty one unless `overwrite`.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            bail!("{} exists and is not empty (pass --overwrite to replace)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_file(&dir.join(MANIFEST_FILE), ds.manifest.to_json())?;
    let path = dir.join(EVENTS_FILE);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_events(&mut w, &ds.sequences, &ds.vocab)?;
    w.flush()?;
    Ok(())
}

/// Write `events.tsv` and `manifest.json` for the synthetic profile.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate(&cfg.synth)?;
    prepare_dir(&cfg.out_dir, cfg.overwrite)?;
    write_dataset(&cfg.out_dir, &ds)?;
    let events: usize = ds.sequences.iter().map(|s| s.len()).sum();
    println!(
        "wrote {} users, {} events, {} domains to {}",
        ds.sequences.len(),
        events,
        ds.domain_count(),
        cfg.out_dir.display()
    );
    Ok(cfg.out_dir.clone())
}

#[derive(Debug, Serialize)]
struct IngestReport<'a> {
    users: usize,
    events: usize,
    rejected: &'a [crate::data::Diagnostic],
}

pub fn cmd_ingest(events: &Path, manifest: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let m = HierarchyManifest::load(manifest)?;
    let file = File::open(events).with_context(|| format!("opening {}", events.display()))?;
    let ingested = ingest_events(BufReader::new(file), &m)?;
    let ds = Dataset::from_ingested(m, ingested)?;
    prepare_dir(out, overwrite)?;
    write_dataset(out, &ds)?;
    let report = IngestReport {
        users: ds.sequences.len(),
        events: ds.sequences.iter().map(|s| s.len()).sum(),
        rejected: &ds.rejected,
    };
    write_file(&out.join("ingest_report.json"), serde_json::to_string_pretty(&report)?)?;
    for d in &ds.rejected {
        eprintln!("line {}: {}", d.line, d.message);
    }
    println!(
        "ingested {} users, {} events ({} lines rejected)",
        report.users,
        report.events,
        ds.rejected.len()
    );
    Ok(())
}

/// Summary written to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub refreshes: usize,
    pub final_gamma: Vec<f64>,
    pub excluded_users: usize,
    pub valid: EvalReport,
    pub test: EvalReport,
}

/// Train, then evaluate the selected checkpoint on the test targets.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    let ds = cfg.dataset()?;
    train_into(cfg, &ds, &cfg.out_dir)
}

fn train_into(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<RunReport> {
    prepare_dir(dir, cfg.overwrite)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let tc = &cfg.train;
    let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    let result = fit_with(ds, tc, |log| {
        eprintln!(
            "[{} seed {}] epoch {:>3}  loss {:.4}  valid ndcg@5 {:.4}  ({:.1}s)",
            tc.variant, tc.seed, log.epoch, log.train_loss, log.valid_ndcg5, log.seconds
        );
        let _ = metrics.serialize(log);
    })?;
    metrics.flush()?;
    result.best.save(&dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(SEEDS_FILE), serde_json::to_string_pretty(&result.seeds)?)?;
    if tc.variant.uses_gamma() {
        write_file(&dir.join(GAMMA_FILE), result.trajectory.to_csv(ds.vocab.domain_names()))?;
    }
    let test = evaluate(&result.best.model, &ds.vocab, &result.splits, Target::Test, &eval_setup(tc))?;
    write_file(&dir.join("test_metrics.csv"), test.to_csv())?;
    let report = RunReport {
        variant: tc.variant,
        seed: tc.seed,
        best_epoch: result.best.epoch,
        refreshes: result.refreshes,
        final_gamma: result.final_gamma.clone(),
        excluded_users: result.excluded_users,
        valid: result.best_valid.clone(),
        test,
    };
    write_file(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    println!("{}: best epoch {}", dir.display(), report.best_epoch);
    print!("{}", report.test.to_csv());
    Ok(report)
}

/// Evaluate a run directory's checkpoint against its configured dataset.
pub fn cmd_eval(run: &Path, target: Target) -> Result<EvalReport> {
    let cfg = RunConfig::load(Some(&run.join(CONFIG_FILE)), &[])?;
    let ckpt = Checkpoint::load(&run.join(CHECKPOINT_FILE))?;
    let ds = cfg.dataset()?;
    ckpt.check_vocab(&ds.vocab)?;
    let (splits, _) = crate::data::split_all(&ds.sequences);
    let report = evaluate(&ckpt.model, &ds.vocab, &splits, target, &eval_setup(&ckpt.config))?;
    let name = match target {
        Target::Test => "eval_test",
        Target::Valid => "eval_valid",
    };
    write_file(&run.join(format!("{name}.csv")), report.to_csv())?;
    write_file(&run.join(format!("{name}.json")), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// One NDCG@5 cell of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub domain: String,
    pub ndcg5: f64,
}

/// Train each variant for each seed under `out_dir/<variant>-s<seed>` and
/// write `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    prepare_dir(&cfg.out_dir, cfg.overwrite)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let ds = cfg.dataset()?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for &variant in &cfg.ablate.variants {
            let mut sub = cfg.clone();
            sub.train.variant = variant;
            sub.train.seed = seed;
            let dir = cfg.out_dir.join(format!("{variant}-s{seed}"));
            sub.out_dir = dir.clone();
            let report = train_into(&sub, &ds, &dir)?;
            for d in &report.test.domains {
                rows.push(AblationRow {
                    variant,
                    seed,
                    domain: d.domain.clone(),
                    ndcg5: d.metrics.ndcg5,
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(cfg.out_dir.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    print!("{}", ablation_summary(&rows, ds.vocab.domain_names()));
    Ok(rows)
}

/// Mean NDCG@5 per variant (rows) and domain (columns).
pub fn ablation_summary(rows: &[AblationRow], domains: &[String]) -> String {
    let mut out = format!("variant,{}\n", domains.join(","));
    for v in Variant::ALL {
        let cells: Vec<f64> = domains
            .iter()
            .map(|d| {
                let xs: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.variant == v && &r.domain == d)
                    .map(|r| r.ndcg5)
                    .collect();
                xs.iter().sum::<f64>() / xs.len().max(1) as f64
            })
            .collect();
        if rows.iter().any(|r| r.variant == v) {
            let cells: Vec<String> = cells.iter().map(|c| format!("{c:.4}")).collect();
            out.push_str(&format!("{v},{}\n", cells.join(",")));
        }
    }
    out
}

fn is_run_dir(dir: &Path) -> bool {
    dir.join(REPORT_FILE).is_file()
}

/// Expand ablation directories into their runs.
fn collect_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in paths {
        if is_run_dir(p) {
            runs.push(p.clone());
            continue;
        }
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| is_run_dir(e))
                .collect();
            inner.sort();
            runs.extend(inner);
        }
    }
    if runs.is_empty() {
        bail!("no run directories with {REPORT_FILE} found");
    }
    Ok(runs)
}

/// Write `gamma_<run>.svg` for runs with a γ trajectory and one grouped
/// NDCG@5 bar chart over all runs. Returns the written files.
pub fn cmd_plot(paths: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let runs = collect_runs(paths)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut bars: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for run in &runs {
        let name = run.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
        let gamma = run.join(GAMMA_FILE);
        if gamma.is_file() {
            let (domains, rows) = read_gamma(&gamma)?;
            let target = out.join(format!("gamma_{name}.svg"));
            crate::plot::gamma_chart(&target, &name, &domains, &rows)?;
            written.push(target);
        }
        let report: RunReport = serde_json::from_str(&fs::read_to_string(run.join(REPORT_FILE))?)?;
        bars.push((
            name,
            report.test.domains.iter().map(|d| (d.domain.clone(), d.metrics.ndcg5)).collect(),
        ));
    }
    let target = out.join("ndcg5.svg");
    crate::plot::ndcg_bars(&target, &bars)?;
    written.push(target);
    for w in &written {
        println!("wrote {}", w.display());
    }
    Ok(written)
}

type GammaRows = Vec<(f64, Vec<f64>)>;

fn read_gamma(path: &Path) -> Result<(Vec<String>, GammaRows)> {
    let mut r = csv::Reader::from_path(path)?;
    let domains: Vec<String> = r
        .headers()?
        .iter()
        .skip(1)
        .map(|h| h.trim_start_matches("gamma_").to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec.iter().map(str::parse).collect::<Result<_, _>>()?;
        rows.push((vals[0], vals[1..].to_vec()));
    }
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok((domains, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 4\n",
            &["train.variant=bsa".into(), "synth.users=10".into(), "out_dir=x/y".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.variant, Variant::Bsa);
        assert_eq!(cfg.synth.users, 10);
        assert_eq!(cfg.out_dir, PathBuf::from("x/y"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepocs = 4\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["bogus=1".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
