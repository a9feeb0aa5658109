//! `co4` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use co4_core::bench::{self, BenchConfig, BenchModel, BenchReport, KRule};
use co4_core::classifier::experiments::{self, GridRow};
use co4_core::classifier::{load_dataset, train, DataSource, DatasetSpec, ModelKind, RunManifest, TrainConfig};
use co4_core::co4::{LatentInit, Readout};
use co4_core::config;
use co4_core::macs::{macs_estimate, MacModel};
use co4_core::mod_laws::BurstRegime;
use co4_core::report::{self, ReportInputs};
use co4_core::rl::{self, PolicyKind, RlConfig};
use co4_core::spiking::{self, GridReport, NeuronParams, SimConfig};
use co4_core::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "co4", version, about = "Triadic-modulation layers: training, benchmarks and simulations")]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Single-threaded execution and zeroed wall-clock columns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Config file (JSON or key = value lines) for the chosen command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one image classifier.
    Train(TrainArgs),
    /// Time inference over a sweep of sequence lengths.
    Bench(BenchArgs),
    /// Closed-form MAC counts, optionally checked against the instrumented counter.
    Macs(MacsArgs),
    /// Sweeps over modulation variants, k, heads or model type.
    Ablate(AblateArgs),
    /// Train a cart-pole policy with evolution strategies.
    Rl(RlArgs),
    /// Simulate the adaptive LIF population across input regimes.
    Spiking(SpikingArgs),
    /// Collect run outputs into plot-ready tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataArg {
    Cifar10,
    Blobs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReadoutArg {
    Topk,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Normal,
    Projection,
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum)]
    data: Option<DataArg>,
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_enum)]
    readout: Option<ReadoutArg>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated models: co4_topk, co4_mlp, vit.
    #[arg(long, default_value = "co4_topk,co4_mlp,vit")]
    model: String,
    /// Comma-separated sequence lengths.
    #[arg(long)]
    ns: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// `sqrt` or a fixed integer.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Skip timing and only write operation counts.
    #[arg(long)]
    counts_only: bool,
}

#[derive(Args, Debug)]
struct MacsArgs {
    /// standard, co4-basic or co4.
    #[arg(long, default_value = "co4")]
    model: String,
    #[arg(long, default_value_t = 1)]
    layers: u64,
    #[arg(long, default_value_t = 196)]
    n: u64,
    #[arg(long, default_value_t = 384)]
    e: u64,
    #[arg(long, default_value_t = 12)]
    k: u64,
    /// Latent count of the basic form; defaults to N.
    #[arg(long)]
    l: Option<u64>,
    /// Also count one forward pass and compare term by term.
    #[arg(long)]
    audit: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sweep {
    Variants,
    K,
    Heads,
    Compare,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum, default_value = "variants")]
    sweep: Sweep,
    /// `all`, or comma-separated ids/names.
    #[arg(long, default_value = "all")]
    variants: String,
    /// k values of the k sweep.
    #[arg(long, default_value = "8,12,16,24,44")]
    ks: String,
    /// Head counts of the heads sweep.
    #[arg(long, default_value = "1,4")]
    head_counts: String,
    /// Comma-separated seeds; defaults to the global seed.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct RlArgs {
    #[arg(long, default_value = "cartpole")]
    env: String,
    #[arg(long)]
    model: Option<String>,
    /// Shuffle observations during training.
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    pop_size: Option<usize>,
}

#[derive(Args, Debug)]
struct SpikingArgs {
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    duration_ms: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Comma-separated regimes among LL, HL, LH, HH.
    #[arg(long, default_value = "LL,HL,LH,HH")]
    regimes: String,
    /// Write one raster CSV per regime.
    #[arg(long)]
    raster: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directories searched recursively for run outputs.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::Shape(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.deterministic {
        par::set_sequential(true);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Train(a) => cmd_train(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::Macs(a) => cmd_macs(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
        Command::Rl(a) => cmd_rl(cli, a),
        Command::Spiking(a) => cmd_spiking(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

/// Defaults, overlaid by the config file when one is given.
fn base_config<T: Serialize + DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(p) => config::load_config(p),
        None => Ok(T::default()),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| Error::config(format!("bad {what} entry {p:?}"))))
        .collect()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    write(dir, name, &serde_json::to_string_pretty(v)?)
}

fn train_config(cli: &Cli, o: &TrainOpts) -> Result<TrainConfig> {
    let mut c: TrainConfig = base_config(cli)?;
    c.seed = cli.seed;
    c.deterministic |= cli.deterministic;
    if let Some(m) = &o.model {
        c.model.kind = m.parse::<ModelKind>()?;
    }
    match o.data {
        Some(DataArg::Blobs) => {
            let d = &c.data;
            c.data = DatasetSpec::blobs(d.num_classes, d.train_limit, d.val_limit);
        }
        Some(DataArg::Cifar10) => c.data.source = DataSource::Cifar10Bin,
        None => {}
    }
    if let Some(d) = &o.data_dir {
        c.data.root = Some(d.clone());
    }
    if let Some(v) = o.train_limit {
        c.data.train_limit = v;
    }
    if let Some(v) = o.val_limit {
        c.data.val_limit = v;
    }
    if let Some(v) = o.epochs {
        c.epochs = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.lr {
        c.opt.lr = v;
    }
    if o.max_steps.is_some() {
        c.max_steps = o.max_steps;
    }
    if let Some(v) = o.embed_dim {
        c.model.embed_dim = v;
    }
    if let Some(v) = o.k {
        c.model.co4.k = v;
    }
    if let Some(v) = o.heads {
        c.model.co4.heads = v;
        c.model.vit.heads = v;
    }
    match o.readout {
        Some(ReadoutArg::Topk) => c.model.co4.readout = Readout::TopkAttn,
        Some(ReadoutArg::Mlp) => c.model.co4.readout = Readout::MlpOnly,
        None => {}
    }
    match o.init {
        Some(InitArg::Normal) => c.model.co4.variant = LatentInit::NormalInit,
        Some(InitArg::Projection) => c.model.co4.variant = LatentInit::ProjectionInit,
        None => {}
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, &a.opts)?;
    let data = load_dataset(&cfg.data)?;
    let t = train(&cfg, &data, Some(&cli.out))?;
    println!(
        "{} seed {}: final val acc {:.4}, train loss {:.4}",
        t.manifest.model,
        t.manifest.seed,
        t.manifest.final_val_acc(),
        t.manifest.final_train_loss()
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let base = train_config(cli, &a.opts)?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => parse_list(s, "seed")?,
        None => vec![cli.seed],
    };
    let configs = match a.sweep {
        Sweep::Variants => experiments::ablation_configs(&base, &experiments::parse_variants(&a.variants)?),
        Sweep::K => experiments::k_sweep_configs(&base, &parse_list(&a.ks, "k")?),
        Sweep::Heads => experiments::heads_configs(&base, &parse_list(&a.head_counts, "heads")?),
        Sweep::Compare => experiments::comparison_configs(&base),
    };
    let data = load_dataset(&base.data)?;
    let rows = experiments::run_grid(&configs, &seeds, &data)?;
    write(&cli.out, "grid.csv", &experiments::grid_csv(&rows))?;
    for (key, label, _) in &configs {
        println!("{label}: mean val acc {:.4}", experiments::mean_acc(&rows, key));
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let mut base: BenchConfig = base_config(cli)?;
    base.seed = cli.seed;
    if let Some(ns) = &a.ns {
        base.ns = parse_list(ns, "N")?;
    }
    if let Some(e) = a.embed_dim {
        base.embed_dim = e;
    }
    if let Some(k) = &a.k {
        base.k_rule = k.parse::<KRule>()?;
    }
    if let Some(r) = a.repetitions {
        base.repetitions = r;
    }
    if let Some(w) = a.warmup {
        base.warmup = w;
    }
    base.validate()?;
    let models: Vec<BenchModel> = parse_list(&a.model, "model")?;
    let mut counts = Vec::new();
    for &m in &models {
        let mc = BenchConfig { model: m, ..base.clone() };
        for &n in &base.ns {
            let k = mc.k_for(n);
            counts.push((m, n, k, bench::op_counts(m, n, base.embed_dim, k, base.batch, base.seed)?));
        }
    }
    write(&cli.out, "opcounts.csv", &bench::opcounts_csv(&counts))?;
    if a.counts_only {
        return Ok(());
    }
    let mut reports: Vec<BenchReport> = Vec::new();
    for &m in &models {
        let rep = bench::bench_runtime(&BenchConfig { model: m, ..base.clone() })?;
        println!("{}: log-log slope {:.3}", rep.model, rep.slope);
        reports.push(rep);
    }
    write(&cli.out, "runtime.csv", &bench::runtime_csv(&reports, cli.deterministic))?;
    if !cli.deterministic {
        write_json(&cli.out, "bench.json", &reports)?;
    }
    Ok(())
}

fn cmd_macs(cli: &Cli, a: &MacsArgs) -> Result<()> {
    let model: MacModel = a.model.parse()?;
    let total = macs_estimate(model, a.layers, a.n, a.e, a.k, a.l.unwrap_or(a.n));
    println!("{total}");
    let mut csv = format!(
        "model,layers,n,e,k,l,macs\n{},{},{},{},{},{},{total}\n",
        a.model,
        a.layers,
        a.n,
        a.e,
        a.k,
        a.l.unwrap_or(a.n)
    );
    if a.audit {
        let audit = bench::mac_audit(a.n as usize, a.e as usize, a.k as usize, cli.seed)?;
        csv.push_str("\nterm,counted,modeled,rel_err\n");
        for r in &audit.rows {
            println!(
                "{:<12} counted {:>12} modeled {:>12} ({:+.2}%)",
                r.term,
                r.counted,
                r.modeled,
                100.0 * r.rel_err()
            );
            csv.push_str(&format!("{},{},{},{}\n", r.term, r.counted, r.modeled, r.rel_err()));
        }
        for (t, v) in &audit.unmodeled {
            println!("{t:<12} counted {v:>12} (not modeled)");
        }
        println!(
            "modeled terms: counted {} vs {} ({:.2}% off); unit-constant closed form {}",
            audit.counted_total,
            audit.modeled_total,
            100.0 * audit.rel_err(),
            audit.closed_form
        );
    }
    write(&cli.out, "macs.csv", &csv)
}

fn cmd_rl(cli: &Cli, a: &RlArgs) -> Result<()> {
    if a.env != "cartpole" {
        return Err(Error::config(format!(
            "unsupported environment {:?}; only cartpole is built in",
            a.env
        )));
    }
    let mut cfg: RlConfig = base_config(cli)?;
    cfg.es.seed = cli.seed;
    cfg.es.shuffle |= a.shuffle;
    if let Some(m) = &a.model {
        cfg.policy = m.parse::<PolicyKind>()?;
    }
    if let Some(g) = a.generations {
        cfg.es.generations = g;
    }
    if let Some(p) = a.pop_size {
        cfg.es.pop_size = p;
    }
    let run = rl::run_rl(&cfg)?;
    write(&cli.out, "fitness.csv", &rl::es::fitness_csv(&run.result.history))?;
    if let Some(h) = &run.heatmap {
        write(&cli.out, "heatmap.csv", &rl::es::heatmap_csv(h))?;
    }
    println!(
        "{} seed {}: elite fitness {:.1} after {} generations; held-out {:.1} unshuffled, {:.1} shuffled",
        run.policy.as_str(),
        run.seed,
        run.result.best_fitness,
        run.result.history.len(),
        run.eval_unshuffled,
        run.eval_shuffled
    );
    Ok(())
}

fn cmd_spiking(cli: &Cli, a: &SpikingArgs) -> Result<()> {
    let mut sim: SimConfig = base_config(cli)?;
    if let Some(p) = a.population {
        sim.population = p;
    }
    if let Some(d) = a.duration_ms {
        sim.duration_ms = d;
    }
    if let Some(dt) = a.dt {
        sim.dt = dt;
    }
    let regimes: Vec<BurstRegime> = parse_list(&a.regimes, "regime")?;
    let neuron = NeuronParams::default();
    let runs = spiking::run_regime_grid(&regimes, &sim, &neuron, cli.seed)?;
    let mut csv = String::from("regime,drive_na,spikes,burst_spikes,p_burst,mean_rate_hz\n");
    for r in &runs {
        let s = &r.summary;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.regime, s.drive_na, s.spikes, s.burst_spikes, s.p_burst, s.mean_rate_hz
        ));
        println!("{}: P(burst) {:.4}, rate {:.2} Hz", s.regime, s.p_burst, s.mean_rate_hz);
        if a.raster {
            write(&cli.out, &format!("raster_{}.csv", s.regime), &spiking::raster_csv(&r.trains))?;
        }
    }
    write(&cli.out, "regimes.csv", &csv)?;
    let report = GridReport {
        seed: cli.seed,
        sim,
        neuron,
        regimes: runs.into_iter().map(|r| r.summary).collect(),
    };
    write_json(&cli.out, "regimes.json", &report)
}

fn collect(dir: &Path, inputs: &mut ReportInputs) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, inputs)?;
            continue;
        }
        match p.file_name().and_then(|n| n.to_str()) {
            Some("manifest.json") => inputs.manifests.push(RunManifest::load(&p)?),
            Some("bench.json") => inputs
                .benches
                .extend(serde_json::from_str::<Vec<BenchReport>>(&fs::read_to_string(&p)?)?),
            Some("regimes.json") => inputs.regimes.push(serde_json::from_str::<GridReport>(&fs::read_to_string(&p)?)?),
            Some("grid.csv") => {
                let rows: Vec<GridRow> = report::read_grid_csv(&fs::read_to_string(&p)?)?;
                inputs.k_sweep.extend(rows.into_iter().filter(|r| r.label.starts_with("k=")));
            }
            _ => {}
        }
    }
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut inputs = ReportInputs::default();
    for d in &a.inputs {
        collect(d, &mut inputs)?;
    }
    let bundle = report::emit_report(&inputs)?;
    bundle.write(&cli.out)?;
    for t in bundle.tables() {
        println!("{}: {} rows", t.name, t.rows.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str], out: &Path) -> Cli {
        let mut full = vec!["co4", "--out", out.to_str().unwrap()];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap()
    }

    fn err_code(args: &[&str]) -> u8 {
        let dir = tempfile::tempdir().unwrap();
        exit_code(&run(&cli(args, dir.path())).unwrap_err())
    }

    #[test]
    fn argument_errors_are_config_errors() {
        assert_eq!(err_code(&["macs", "--model", "nope"]), 2);
        assert_eq!(err_code(&["bench", "--ns", "64,32"]), 2);
        assert_eq!(err_code(&["bench", "--ns", "32,x"]), 2);
        assert_eq!(err_code(&["rl", "--env", "pendulum"]), 2);
        assert_eq!(err_code(&["spiking", "--regimes", "XX"]), 2);
        assert!(Cli::try_parse_from(["co4", "frobnicate"]).is_err());
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = err_code(&[
            "train",
            "--data",
            "cifar10",
            "--data-dir",
            dir.path().join("none").to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn macs_writes_worked_example() {
        let dir = tempfile::tempdir().unwrap();
        run(&cli(
            &["macs", "--model", "co4", "--n", "196", "--e", "384", "--k", "12"],
            dir.path(),
        ))
        .unwrap();
        let csv = fs::read_to_string(dir.path().join("macs.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with(",29032639"), "{csv}");
    }

    #[test]
    fn config_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("sim.conf");
        fs::write(&cfg, "population = 3\nduration_ms = 200\n").unwrap();
        let out = dir.path().join("out");
        run(&cli(&["--config", cfg.to_str().unwrap(), "spiking", "--regimes", "HH"], &out)).unwrap();
        let rep: GridReport = serde_json::from_str(&fs::read_to_string(out.join("regimes.json")).unwrap()).unwrap();
        assert_eq!(rep.sim.population, 3);
        assert_eq!(rep.sim.duration_ms, 200.0);
        assert_eq!(rep.regimes.len(), 1);

        fs::write(&cfg, "populaton = 3\n").unwrap();
        let e = run(&cli(&["--config", cfg.to_str().unwrap(), "spiking"], &out)).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn train_then_report() {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs");
        let train = [
            "train",
            "--data",
            "blobs",
            "--train-limit",
            "64",
            "--val-limit",
            "16",
            "--epochs",
            "2",
            "--embed-dim",
            "8",
        ];
        run(&cli(&train, &runs.join("a"))).unwrap();
        let sweep = [
            "ablate",
            "--sweep",
            "k",
            "--ks",
            "2,3",
            "--data",
            "blobs",
            "--train-limit",
            "32",
            "--val-limit",
            "16",
            "--epochs",
            "1",
            "--embed-dim",
            "8",
        ];
        run(&cli(&sweep, &runs.join("b"))).unwrap();
        run(&cli(&["spiking", "--population", "2", "--duration-ms", "100"], &runs.join("c"))).unwrap();

        let out = dir.path().join("report");
        run(&cli(&["report", "--inputs", runs.to_str().unwrap()], &out)).unwrap();
        let acc = fs::read_to_string(out.join("accuracy_vs_epoch.csv")).unwrap();
        assert_eq!(acc.lines().count(), 1 + 2, "{acc}");
        let ks = fs::read_to_string(out.join("k_sweep.csv")).unwrap();
        assert_eq!(ks.lines().count(), 1 + 2, "{ks}");
        let reg = fs::read_to_string(out.join("regime_grid.csv")).unwrap();
        assert_eq!(reg.lines().count(), 1 + 4, "{reg}");
    }

    #[test]
    fn counts_only_bench_skips_timing() {
        let dir = tempfile::tempdir().unwrap();
        run(&cli(&["bench", "--ns", "8,16", "--embed-dim", "8", "--counts-only"], dir.path())).unwrap();
        assert!(dir.path().join("opcounts.csv").exists());
        assert!(!dir.path().join("runtime.csv").exists());
    }
}
