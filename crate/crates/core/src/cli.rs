//! Command-line front end.
//!
//! Configuration precedence, lowest first: built-in defaults, `--config`
//! file, the `TKGMEM_OUT` environment variable (output directory only),
//! `--set key=value` pairs, dedicated flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, FilterMode, GateMode, Timing};
use crate::data::{Split, TkgDataset};
use crate::engine::{ReprMode, StreamState};
use crate::error::{Error, Result};
use crate::evaluator::{
    delta_rr, efficiency_counters, evaluate_window, gate_trace, state_before, write_gate_trace, EvalContext, RankReport,
    DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES,
};
use crate::memory::{EmaVariant, OperatorKind};
use crate::model::{read_checkpoint, Model};
use crate::synth::{generate, SyntheticSpec};
use crate::trainer::{fit, write_curve};

pub const OUT_ENV: &str = "TKGMEM_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "tkgmem", version, about = "Temporal knowledge-graph link prediction with adaptive per-entity memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Quadruple TSV: subject, relation, object, timestamp
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name-keyed embedding TSV
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Generate a synthetic drift dataset from the synth_* keys
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    has_header: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// ema | ema-entity | ema-dim | gru | attention
    #[arg(long)]
    operator: Option<String>,
    /// before | after
    #[arg(long)]
    timing: Option<String>,
    #[arg(long = "horizon-pct")]
    horizon_pct: Option<f64>,
    #[arg(long)]
    disable_prior: bool,
    #[arg(long)]
    disable_memory: bool,
    /// Replace the adaptive gate by the constant 0.5
    #[arg(long)]
    constant_gate: bool,
    /// Filter known-true objects across all timestamps
    #[arg(long)]
    static_filter: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with early stopping; writes checkpoint, curve, memory snapshot and metrics
    Train(Common),
    /// Evaluate a checkpoint on a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stream snapshot positioned at the split start
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// valid | test
        #[arg(long, default_value = "test")]
        split: String,
        /// full | zero | both
        #[arg(long, default_value = "both")]
        mode: String,
        /// Restrict the gate trace to these entity names
        #[arg(long = "trace-entity")]
        trace_entities: Vec<String>,
    },
    /// Train and evaluate a family of ablation cells with a shared seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// grid | gate | operators | ema | timing | horizon | all
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Delta-RR strata, gate statistics and horizon sweeps from report CSVs
    Analyze {
        #[arg(long)]
        full: Option<PathBuf>,
        #[arg(long)]
        zero: Option<PathBuf>,
        /// PCT=report.csv (repeatable)
        #[arg(long = "horizon-report")]
        horizon_reports: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        depth_edges: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        update_edges: Option<Vec<u64>>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset (facts, annotations, embeddings)
    Synth(Common),
    /// Print the configuration and parameter table of a checkpoint
    InspectCheckpoint { path: PathBuf },
}

/// Run the CLI and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NumericAbort { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => cmd_train(&c),
        Command::Eval {
            common,
            checkpoint,
            snapshot,
            split,
            mode,
            trace_entities,
        } => cmd_eval(&common, &checkpoint, snapshot.as_deref(), &split, &mode, &trace_entities),
        Command::Ablate { common, suite } => cmd_ablate(&common, &suite),
        Command::Analyze {
            full,
            zero,
            horizon_reports,
            depth_edges,
            update_edges,
            out,
        } => cmd_analyze(
            full.as_deref(),
            zero.as_deref(),
            &horizon_reports,
            depth_edges.as_deref().unwrap_or(DEFAULT_DEPTH_EDGES),
            update_edges.as_deref().unwrap_or(DEFAULT_UPDATE_EDGES),
            out,
        ),
        Command::Synth(c) => cmd_synth(&c),
        Command::InspectCheckpoint { path } => cmd_inspect(&path),
    }
}

fn resolve(c: &Common, base: Config) -> Result<Config> {
    let mut cfg = base;
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text, p)
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Ok(dir) = std::env::var(OUT_ENV) {
        if !dir.is_empty() {
            cfg.out = PathBuf::from(dir);
        }
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(d) = &c.data {
        cfg.data = Some(d.clone());
    }
    if let Some(e) = &c.embeddings {
        cfg.embeddings = Some(e.clone());
    }
    if c.has_header {
        cfg.has_header = true;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = c.lr {
        cfg.lr = lr;
    }
    if let Some(d) = c.dim {
        cfg.dim = d;
    }
    if let Some(op) = &c.operator {
        cfg.set("operator", op)?;
    }
    if let Some(t) = &c.timing {
        cfg.set("timing", t)?;
    }
    if let Some(h) = c.horizon_pct {
        cfg.horizon = h;
    }
    if c.disable_prior {
        cfg.use_prior = false;
    }
    if c.disable_memory {
        cfg.use_memory = false;
    }
    if c.constant_gate {
        cfg.gate = GateMode::Constant;
    }
    if c.static_filter {
        cfg.filter = FilterMode::Static;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synthetic_spec(cfg: &Config) -> SyntheticSpec {
    SyntheticSpec {
        types: cfg.synth_types,
        entities_per_type: cfg.synth_entities_per_type,
        relations_per_type: cfg.synth_relations_per_type,
        timestamps: cfg.synth_timestamps,
        drift: cfg.synth_drift,
        emerging: cfg.synth_emerging,
        facts_per_entity: cfg.synth_facts_per_entity,
        noise: cfg.synth_noise,
        embed_dim: cfg.dim,
        split: cfg.split,
        seed: cfg.seed,
    }
}

/// Load, augment with inverses, split and truncate to the horizon.
pub fn prepare_dataset(cfg: &Config) -> Result<TkgDataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or --synthetic".into()))?;
    let raw = TkgDataset::load_tsv(path, cfg.has_header)?;
    prepare_loaded(&raw, cfg)
}

pub fn prepare_loaded(raw: &TkgDataset, cfg: &Config) -> Result<TkgDataset> {
    let mut d = raw.augment_inverse()?.chronological_split(cfg.split)?;
    if cfg.horizon < 100.0 {
        d = d.truncate_horizon(cfg.horizon)?;
    }
    Ok(d)
}

/// Materialise a synthetic dataset into `dir` and point the config at it.
fn materialise_synthetic(cfg: &mut Config, dir: &Path) -> Result<()> {
    let g = generate(&synthetic_spec(cfg))?;
    let sdir = dir.join("synthetic");
    g.write(&sdir)?;
    cfg.data = Some(sdir.join("facts.tsv"));
    cfg.embeddings = Some(sdir.join("embeddings.tsv"));
    cfg.has_header = false;
    Ok(())
}

fn train_config(c: &Common) -> Result<Config> {
    let mut cfg = resolve(c, Config::default())?;
    fs::create_dir_all(&cfg.out)?;
    if c.synthetic {
        let out = cfg.out.clone();
        materialise_synthetic(&mut cfg, &out)?;
    }
    if cfg.data.is_none() {
        return Err(Error::Config("no dataset: pass --data or --synthetic".into()));
    }
    Ok(cfg)
}

struct RunResult {
    model: Model,
    test_full: RankReport,
    test_zero: RankReport,
    state_at_test: StreamState,
    valid_mrr: f64,
    best_epoch: usize,
    seconds: f64,
}

fn train_and_test(cfg: &Config, data: &TkgDataset, curve_path: Option<&Path>) -> Result<RunResult> {
    let start = Instant::now();
    let model = Model::new(cfg, data)?;
    let outcome = fit(model, data, &mut |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid mrr {:.4}  ({:.1}s)",
            m.epoch, m.train_loss, m.valid_mrr_all, m.seconds
        );
    })?;
    if let Some(p) = curve_path {
        write_curve(&outcome.curve, p)?;
    }
    let model = outcome.best;
    let ctx = EvalContext::new(data, cfg.filter)?;
    let state = state_before(&model, data, Split::Test)?;
    let (lo, hi) = data.split_window(Split::Test)?;
    let test_full = evaluate_window(&model, &mut state.clone(), data, &ctx, lo, hi, ReprMode::Full)?;
    let test_zero = evaluate_window(&model, &mut state.clone(), data, &ctx, lo, hi, ReprMode::ZeroGate)?;
    let valid_mrr = outcome
        .curve
        .iter()
        .find(|m| m.epoch == outcome.best_epoch)
        .map(|m| m.valid_mrr_all)
        .unwrap_or(f64::NAN);
    Ok(RunResult {
        model,
        test_full,
        test_zero,
        state_at_test: state,
        valid_mrr,
        best_epoch: outcome.best_epoch,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = train_config(c)?;
    let out = cfg.out.clone();
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let data = prepare_dataset(&cfg)?;
    data.entities().write_tsv(&out.join("entities.tsv"))?;
    data.relations().write_tsv(&out.join("relations.tsv"))?;
    data.write_slice_csv(&out.join("slices.csv"))?;
    let r = train_and_test(&cfg, &data, Some(&out.join("curve.csv")))?;
    r.model.save(&out.join("checkpoint.bin"))?;
    fs::write(out.join("memory.bin"), r.state_at_test.to_bytes())?;
    r.test_full.write_csv(&out.join("report_test_full.csv"))?;
    r.test_zero.write_csv(&out.join("report_test_zero.csv"))?;
    let metrics = serde_json::json!({
        "best_epoch": r.best_epoch,
        "valid_mrr": r.valid_mrr,
        "test_full": r.test_full.aggregates(),
        "test_zero": r.test_zero.aggregates(),
        "parameters": efficiency_counters(&r.model),
        "memory_checksum": r.state_at_test.bank.checksum(),
        "seconds": r.seconds,
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics).unwrap())?;
    println!("{}", r.test_full.aggregates_json());
    Ok(())
}

fn cmd_eval(c: &Common, ckpt: &Path, snapshot: Option<&Path>, split: &str, mode: &str, trace: &[String]) -> Result<()> {
    let bytes = fs::read(ckpt)?;
    let info = read_checkpoint(&bytes)?;
    let cfg = resolve(c, info.config.clone())?;
    if cfg.fingerprint() != info.fingerprint {
        return Err(Error::Config("model keys may not be overridden at evaluation".into()));
    }
    let split = match split {
        "valid" => Split::Valid,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let modes: Vec<(ReprMode, &str)> = match mode {
        "full" => vec![(ReprMode::Full, "full")],
        "zero" => vec![(ReprMode::ZeroGate, "zero")],
        "both" => vec![(ReprMode::Full, "full"), (ReprMode::ZeroGate, "zero")],
        other => return Err(Error::Config(format!("unknown mode `{other}`"))),
    };
    let data = prepare_dataset(&cfg)?;
    let model = Model::from_bytes(&bytes, &data)?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let state = match snapshot {
        Some(p) => StreamState::from_bytes(&fs::read(p)?, &model)?,
        None => state_before(&model, &data, split)?,
    };
    let ctx = EvalContext::new(&data, cfg.filter)?;
    let (lo, hi) = data.split_window(split)?;
    let mut reports = Vec::new();
    for (m, name) in modes {
        let rep = evaluate_window(&model, &mut state.clone(), &data, &ctx, lo, hi, m)?;
        let stem = format!("report_{}_{name}", split.as_str());
        rep.write_csv(&out.join(format!("{stem}.csv")))?;
        rep.write_json(&out.join(format!("{stem}.json")))?;
        println!("{name}: {}", rep.aggregates_json());
        reports.push(rep);
    }
    let ids: Vec<usize> = trace
        .iter()
        .map(|n| {
            data.entities().id(n).ok_or_else(|| Error::Lookup {
                kind: "entity",
                name: n.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let filter = (!ids.is_empty()).then_some(&ids[..]);
    write_gate_trace(&gate_trace(&reports[0]), &data, filter, &out.join("gate_trace.csv"))?;
    if reports.len() == 2 {
        delta_rr(&reports[0], &reports[1], DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES)?.write_csv(&out.join("delta_rr.csv"))?;
    }
    Ok(())
}

/// Ablation cells for a suite: `(suite, cell, config)`.
pub fn ablation_cells(base: &Config, suite: &str) -> Result<Vec<(String, String, Config)>> {
    let mut cells = Vec::new();
    let mut add = |s: &str, name: &str, f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        cells.push((s.to_string(), name.to_string(), c));
    };
    let all = suite == "all";
    let known = ["all", "grid", "gate", "operators", "ema", "timing", "horizon"];
    if !known.contains(&suite) {
        return Err(Error::Config(format!("unknown suite `{suite}`")));
    }
    if all || suite == "grid" {
        for (name, prior, memory) in [
            ("static-transductive", false, false),
            ("static-inductive", true, false),
            ("adaptive-transductive", false, true),
            ("adaptive-inductive", true, true),
        ] {
            add("grid", name, &|c| {
                c.use_prior = prior;
                c.use_memory = memory;
            });
        }
    }
    if all || suite == "gate" {
        add("gate", "adaptive", &|c| c.gate = GateMode::Adaptive);
        add("gate", "constant-0.5", &|c| c.gate = GateMode::Constant);
    }
    if all || suite == "operators" {
        for op in [OperatorKind::Ema(EmaVariant::Shared), OperatorKind::Gru, OperatorKind::Attention] {
            add("operators", op.name(), &|c| c.operator = op);
        }
    }
    if all || suite == "ema" {
        for v in [EmaVariant::Shared, EmaVariant::PerEntity, EmaVariant::PerDimension] {
            let op = OperatorKind::Ema(v);
            add("ema", op.name(), &|c| c.operator = op);
        }
    }
    if all || suite == "timing" {
        add("timing", "before", &|c| c.timing = Timing::Before);
        add("timing", "after", &|c| c.timing = Timing::After);
    }
    if all || suite == "horizon" {
        for h in [25.0, 50.0, 100.0] {
            add("horizon", &format!("{h}%"), &|c| c.horizon = h);
        }
    }
    Ok(cells)
}

fn cmd_ablate(c: &Common, suite: &str) -> Result<()> {
    let cfg = train_config(c)?;
    let cells = ablation_cells(&cfg, suite)?;
    let out = cfg.out.clone();
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let raw = TkgDataset::load_tsv(cfg.data.as_ref().unwrap(), cfg.has_header)?;
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("ablation.csv"))?);
    writeln!(
        w,
        "suite,cell,mrr,hits3,hits10,mrr_emerging,mrr_unknown,mrr_zero_gate,n,params,best_epoch,seconds,memory_checksum"
    )?;
    for (s, name, cell_cfg) in cells {
        eprintln!("== {s}/{name}");
        let data = prepare_loaded(&raw, &cell_cfg)?;
        let r = train_and_test(&cell_cfg, &data, None)?;
        let all = r.test_full.slice("all");
        writeln!(
            w,
            "{s},{name},{},{},{},{},{},{},{},{},{},{:.1},{}",
            all.mrr,
            all.hits3,
            all.hits10,
            r.test_full.slice("emerging").mrr,
            r.test_full.slice("unknown").mrr,
            r.test_zero.mrr(),
            all.n,
            r.model.params.total(),
            r.best_epoch,
            r.seconds,
            r.state_at_test.bank.checksum()
        )?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_analyze(
    full: Option<&Path>,
    zero: Option<&Path>,
    horizons: &[String],
    depth_edges: &[u64],
    update_edges: &[u64],
    out: Option<PathBuf>,
) -> Result<()> {
    let out = out
        .or_else(|| std::env::var(OUT_ENV).ok().filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out)?;
    if full.is_none() && horizons.is_empty() {
        return Err(Error::Config("nothing to analyze: pass --full/--zero or --horizon-report".into()));
    }
    if let Some(fp) = full {
        let f = RankReport::read_csv(fp)?;
        if let Some(zp) = zero {
            let z = RankReport::read_csv(zp)?;
            delta_rr(&f, &z, depth_edges, update_edges)?.write_csv(&out.join("delta_rr.csv"))?;
        }
        // gate statistics stratified by the subject's test-time updates
        let mut w = std::io::BufWriter::new(fs::File::create(out.join("gate_stats.csv"))?);
        writeln!(w, "lo,hi,mean_gate,count")?;
        for (i, &lo) in update_edges.iter().enumerate() {
            let hi = update_edges.get(i + 1).copied();
            let g: Vec<f64> = f
                .records
                .iter()
                .filter(|r| r.test_updates >= lo && hi.is_none_or(|h| r.test_updates < h))
                .map(|r| r.gate_mean)
                .collect();
            let mean = if g.is_empty() { f64::NAN } else { g.iter().sum::<f64>() / g.len() as f64 };
            let hs = hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
            writeln!(w, "{lo},{hs},{mean},{}", g.len())?;
        }
        w.flush()?;
    }
    if !horizons.is_empty() {
        let mut w = std::io::BufWriter::new(fs::File::create(out.join("horizon.csv"))?);
        writeln!(w, "horizon_pct,mrr,mrr_emerging,mrr_unknown,n")?;
        for h in horizons {
            let (pct, path) = h
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected PCT=path, got `{h}`")))?;
            let r = RankReport::read_csv(Path::new(path))?;
            writeln!(
                w,
                "{pct},{},{},{},{}",
                r.mrr(),
                r.slice("emerging").mrr,
                r.slice("unknown").mrr,
                r.records.len()
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(c: &Common) -> Result<()> {
    let cfg = resolve(c, Config::default())?;
    let g = generate(&synthetic_spec(&cfg))?;
    g.write(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    println!(
        "{} facts, {} entities, {} relations -> {}",
        g.dataset.facts().len(),
        g.dataset.num_entities(),
        g.dataset.num_relations(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let info = read_checkpoint(&fs::read(path)?)?;
    println!("fingerprint {}", info.fingerprint);
    print!("{}", info.config.to_text());
    let mut total = 0;
    for (name, t) in &info.params {
        println!("{name:<24} {:?} {}", t.shape(), t.len());
        total += t.len();
    }
    println!("total {total}");
    Ok(())
}
