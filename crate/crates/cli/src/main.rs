use std::f64::consts::LN_2;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use asyndgan_core::experiment::{
    report, run_experiment, runs_root, save_generator, write_report, RunConfig, Scenario, CHECKPOINT_FILE, CONFIG_FILE,
    LOSSES_FILE, TRANSCRIPT_FILE,
};
use asyndgan_core::gan::{write_loss_csv, GeneratorTrainer, MixtureWeights};
use asyndgan_core::metrics::{aji, dice, hd95, read_pgm, sensitivity, specificity};
use asyndgan_core::mixture::{self, normal_pdf, Component, MixtureSpec, Shard};
use asyndgan_core::oracle::{generator_value, optimal_value, pair_loss, DensityPair, Grid};
use asyndgan_core::protocol::{
    comm_cost, connect_tcp, gradient_sharing_cost, protocol_cost, run_discriminator_node, run_generator_server,
    write_transcript, TcpAcceptor,
};
use asyndgan_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "asyndgan",
    version,
    about = "Distributed conditional GAN with per-shard discriminators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment scenario and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `<runs root>/<scenario>_seed<init>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host the generator and wait for discriminator nodes over TCP.
    ServeGenerator {
        #[arg(long)]
        bind: String,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve one data shard as a discriminator node.
    ServeDiscriminator {
        #[arg(long)]
        server: String,
        /// Two-column `x,y` CSV.
        #[arg(long)]
        shard: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Requested node id; the server assigns the lowest free id if omitted.
        #[arg(long)]
        node_id: Option<u16>,
        #[arg(long, default_value_t = 3)]
        attempts: u32,
    },
    /// Write the configured dataset's shards as `shard_<j>.csv`.
    MakeShards {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segmentation metrics over ground-truth / prediction PGM pairs.
    EvalMetrics {
        #[arg(long, value_enum, default_value_t = MaskMode::Binary)]
        mode: MaskMode,
        /// Alternating ground truth and prediction paths.
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
    /// Check the optimal-discriminator identities numerically.
    OracleCheck {
        /// Take the mixture from this run config instead of the default.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Comparison table over finished run directories.
    Report { dirs: Vec<PathBuf> },
    /// Bytes per node per iteration for image and gradient exchange.
    CommCost {
        #[arg(long, default_value_t = 128)]
        height: u64,
        #[arg(long, default_value_t = 128)]
        width: u64,
        #[arg(long, default_value_t = 1)]
        channels: u64,
        #[arg(long, default_value_t = 128)]
        batch: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_scalar: u64,
        /// Parameter count for the gradient-sharing comparison.
        #[arg(long, default_value_t = 40_000_000)]
        params: u64,
        /// Components in the auxiliary one-hot, for the protocol breakdown.
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value_t = 1)]
        k_d: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskMode {
    /// Nonzero pixels are foreground.
    Binary,
    /// Pixel values are instance labels, 0 is background.
    Instance,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => train(&config, out),
        Command::ServeGenerator {
            bind,
            nodes,
            config,
            out,
        } => serve_generator(&bind, nodes, &config, out),
        Command::ServeDiscriminator {
            server,
            shard,
            config,
            node_id,
            attempts,
        } => serve_discriminator(&server, &shard, &config, node_id, attempts),
        Command::MakeShards { config, out } => make_shards(&config, &out),
        Command::EvalMetrics { mode, files } => eval_metrics(mode, &files),
        Command::OracleCheck { config } => oracle_check(config.as_deref()),
        Command::Report { dirs } => {
            let rows = report(&dirs)?;
            let stdout = io::stdout();
            write_report(&mut stdout.lock(), &rows)
        }
        Command::CommCost {
            height,
            width,
            channels,
            batch,
            bytes_per_scalar,
            params,
            components,
            k_d,
        } => {
            let p = protocol_cost(batch as usize, components, k_d);
            let mut out = io::stdout().lock();
            writeln!(out, "item,bytes")?;
            writeln!(
                out,
                "fake_batch,{}",
                comm_cost(height, width, channels, batch, bytes_per_scalar)
            )?;
            writeln!(
                out,
                "gradient_sharing,{}",
                gradient_sharing_cost(params, bytes_per_scalar)
            )?;
            writeln!(out, "protocol_round_begin,{}", p.round_begin)?;
            writeln!(out, "protocol_aux_batch,{}", p.aux_batch)?;
            writeln!(out, "protocol_fake_batch,{}", p.fake_batch)?;
            writeln!(out, "protocol_fake_grad,{}", p.fake_grad)?;
            writeln!(out, "protocol_loss,{}", p.loss)?;
            writeln!(out, "protocol_total,{}", p.total())?;
            Ok(())
        }
    }
}

/// Reads and validates a config, keeping the raw text for the snapshot.
/// An unreadable file is a config error.
fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    Ok((cfg, text))
}

fn default_dir(label: &str, seed: u64) -> PathBuf {
    runs_root().join(format!("{}_seed{seed}", label.replace(':', "_")))
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(config)?;
    let dir = out.unwrap_or_else(|| default_dir(&cfg.scenario.to_string(), cfg.seed_init));
    let art = run_experiment(&cfg, &text, &dir)?;
    let s = &art.summary;
    let mut out = io::stdout().lock();
    writeln!(out, "run: {}", art.dir.display())?;
    writeln!(out, "scenario: {}", s.scenario)?;
    writeln!(out, "js_marginal: {:.6}", s.scores.js_marginal)?;
    for (j, js) in s.scores.js_components.iter().enumerate() {
        writeln!(out, "js_component_{j}: {js:.6}")?;
    }
    writeln!(out, "bytes_total: {}", s.bytes_total)?;
    writeln!(out, "privacy_violations: {}", s.privacy_violations)?;
    Ok(())
}

fn serve_generator(bind: &str, nodes: usize, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(config)?;
    if cfg.scenario != Scenario::AsynDgan {
        return Err(Error::Config(format!(
            "serve-generator needs scenario asyndgan, not {}",
            cfg.scenario
        )));
    }
    if nodes == 0 {
        return Err(Error::Config("--nodes must be at least 1".into()));
    }
    let dir = out.unwrap_or_else(|| default_dir("serve", cfg.seed_init));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), &text)?;

    let mut acceptor = TcpAcceptor::bind(bind)?;
    // Printed on stdout so callers binding port 0 can find the real address.
    writeln!(io::stdout(), "listening {}", acceptor.local_addr()?)?;
    io::stdout().flush()?;
    let mut scfg = cfg.server_config();
    scfg.expected_nodes = nodes;
    let mut trainer = GeneratorTrainer::new(&cfg.train_config())?;
    let started = Instant::now();
    let outcome = run_generator_server(&mut acceptor, &mut trainer, &scfg)?;
    info!(
        "served {} rounds in {:.1}s",
        outcome.reports.len(),
        started.elapsed().as_secs_f64()
    );

    let mut f = BufWriter::new(File::create(dir.join(LOSSES_FILE))?);
    write_loss_csv(&mut f, &outcome.reports)?;
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join(TRANSCRIPT_FILE))?);
    write_transcript(&mut f, &outcome.transcript)?;
    f.flush()?;
    save_generator(trainer.generator(), &dir.join(CHECKPOINT_FILE))?;
    let mut out = io::stdout().lock();
    writeln!(out, "run: {}", dir.display())?;
    writeln!(out, "bytes_total: {}", outcome.ledger.total())?;
    Ok(())
}

fn read_shard(path: &Path, node_id: u16) -> Result<Shard> {
    let file = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let samples = mixture::read_samples_csv(BufReader::new(file))?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{}: shard is empty", path.display())));
    }
    Ok(Shard { node_id, samples })
}

fn serve_discriminator(server: &str, shard: &Path, config: &Path, node_id: Option<u16>, attempts: u32) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let shard = read_shard(shard, node_id.unwrap_or(0))?;
    let mut link = connect_tcp(server, attempts)?;
    let summary = run_discriminator_node(&mut link, shard, &cfg.train_config(), node_id)?;
    info!("node {} finished after {} rounds", summary.node_id, summary.rounds);
    Ok(())
}

fn make_shards(config: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let dataset = cfg.dataset()?;
    fs::create_dir_all(out)?;
    for shard in cfg.shards(&dataset)? {
        let path = out.join(format!("shard_{}.csv", shard.node_id));
        let mut f = BufWriter::new(File::create(&path)?);
        mixture::write_samples_csv(&mut f, &shard.samples)?;
        f.flush()?;
        writeln!(io::stdout(), "{}", path.display())?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn eval_metrics(mode: MaskMode, files: &[PathBuf]) -> Result<()> {
    if !files.len().is_multiple_of(2) {
        return Err(Error::Config(
            "eval-metrics takes ground truth / prediction pairs".into(),
        ));
    }
    let load = |p: &Path| read_pgm(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
    let columns: &[&str] = match mode {
        MaskMode::Binary => &["Dice", "Sens", "Spec", "HD95"],
        MaskMode::Instance => &["Dice", "AJI"],
    };
    let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for pair in files.chunks(2) {
        let (g, s) = (load(&pair[0])?, load(&pair[1])?);
        let values = match mode {
            MaskMode::Binary => {
                let (g, s) = (g.to_binary()?, s.to_binary()?);
                // HD95 is undefined when either mask is empty; left blank.
                let hd = hd95(&g, &s).ok();
                vec![
                    Some(dice(&g, &s)?),
                    Some(sensitivity(&g, &s)?),
                    Some(specificity(&g, &s)?),
                    hd,
                ]
            }
            MaskMode::Instance => {
                let (g, s) = (g.to_instances()?, s.to_instances()?);
                vec![Some(dice(&g.foreground(), &s.foreground())?), Some(aji(&g, &s)?)]
            }
        };
        rows.push((pair[1].display().to_string(), values));
    }
    let mut out = io::stdout().lock();
    writeln!(out, "pair,{}", columns.join(","))?;
    for (name, values) in &rows {
        let cells: Vec<String> = values.iter().map(|&v| fmt_opt(v)).collect();
        writeln!(out, "{name},{}", cells.join(","))?;
    }
    let means: Vec<String> = (0..columns.len())
        .map(|c| fmt_opt(mean(&rows.iter().map(|r| r.1[c]).collect::<Vec<_>>())))
        .collect();
    writeln!(out, "mean,{}", means.join(","))?;
    Ok(())
}

struct Identity {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn oracle_check(config: Option<&Path>) -> Result<()> {
    let spec = match config {
        Some(p) => load_config(p)?.0.mixture,
        None => MixtureSpec::three_gaussians(true),
    };
    let grid = Grid::default();
    let k = spec.len();
    let mut rows = Vec::new();

    let same = DensityPair::from_specs(spec.clone(), spec.clone());
    let shifted = DensityPair::new(
        Box::new(|y, _| normal_pdf(y, 0.0, 1.0)),
        Box::new(|y, _| normal_pdf(y, 1.0, 1.0)),
    );
    let mut half = true;
    for x in 0..k {
        for i in -40..=40 {
            half &= same.optimal_discriminator(i as f64 * 0.25, x)? == 0.5;
        }
    }
    let mid = shifted.optimal_discriminator(0.5, 0)?;
    rows.push(Identity {
        name: "optimal discriminator p/(p+q)",
        pass: half && (mid - 0.5).abs() <= 1e-12,
        detail: format!("q = p gives 0.5: {half}; N(0,1) vs N(1,1) at 0.5 gives {mid}"),
    });

    let mut worst: f64 = 0.0;
    for x in 0..k {
        let a = |y| spec.pdf(y, Some(x));
        worst = worst.max((pair_loss(a, a, &grid)? + 2.0 * LN_2).abs());
    }
    let apart = pair_loss(|y| normal_pdf(y, 2.0, 1.0), |y| normal_pdf(y, 0.0, 1.0), &grid)?;
    rows.push(Identity {
        name: "pair bound -2 log 2",
        pass: worst < 1e-5 && apart > -2.0 * LN_2,
        detail: format!("max |L(a,a) + 2 log 2| = {worst:.2e}; L(N(2,1), N(0,1)) = {apart:.6}"),
    });

    let uniform = MixtureWeights::uniform(k);
    let at_truth = generator_value(&spec, &spec, &uniform, &grid)?;
    let mut smallest_gap = f64::INFINITY;
    for j in 0..k {
        let mut q = spec.clone();
        let c = q.components[j];
        q.components[j] = Component {
            mean: c.mean + 0.5,
            spread: c.spread,
        };
        smallest_gap = smallest_gap.min(generator_value(&spec, &q, &uniform, &grid)? - optimal_value());
    }
    rows.push(Identity {
        name: "generator optimum -log 4",
        pass: (at_truth - optimal_value()).abs() < 1e-5 && smallest_gap > 1e-6,
        detail: format!("value at q = p {at_truth:.8}; smallest perturbed gap {smallest_gap:.2e}"),
    });

    let mut out = io::stdout().lock();
    writeln!(out, "{:<32} {:<6} detail", "identity", "result")?;
    for r in &rows {
        writeln!(
            out,
            "{:<32} {:<6} {}",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        )?;
    }
    if rows.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Error::Domain("oracle identities failed".into()))
    }
}
