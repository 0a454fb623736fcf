use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedforest::data::{prepare_nodes, PartitionManifest, PartitionSpec};
use fedforest::eval::{improvement_report, provenance_matrix, write_metrics_csv};
use fedforest::experiment::{execute, read_run, write_json, write_run, DatasetSource, RunConfig};
use fedforest::federation::TopologySpec;
use fedforest::ledger::{verify_chain, Ledger, Verdict};
use fedforest::{Error, Result};

#[derive(Parser)]
#[command(name = "fedforest", version, about = "Decentralized federated random forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset across nodes and write the partition statistics.
    Partition {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 20)]
        parts: usize,
        #[arg(long, default_value_t = 0.7)]
        imbalance: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a federated experiment.
    Run {
        /// Run configuration (JSON); flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// disconnected, ring, complete, or a JSON file with an edge list.
        #[arg(long)]
        topology: Option<String>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        n_new: Option<usize>,
        #[arg(long)]
        n_share: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Metrics, improvement and provenance CSVs from finished runs.
    Report {
        /// Run directory to report on.
        #[arg(long)]
        run: PathBuf,
        /// Disconnected run to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check a ledger file; exits non-zero at the first bad record.
    Verify {
        /// A ledger.jsonl file or a run directory containing one.
        ledger: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a `Class` column, or `synthetic`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn parse_topology(arg: &str) -> Result<TopologySpec> {
    TopologySpec::parse_preset(arg).or_else(|_| {
        let text = fs::read_to_string(arg).map_err(|e| Error::io(arg, e))?;
        Ok(serde_json::from_str(&text)?)
    })
}

fn partition(data: DataArgs, parts: usize, imbalance: f64, out_dir: PathBuf) -> Result<()> {
    let seed = data.seed.unwrap_or(0);
    let source = DatasetSource::parse(data.dataset.as_deref().unwrap_or("synthetic"), seed);
    let spec = PartitionSpec {
        n_parts: parts,
        imbalance,
        seed,
        ..PartitionSpec::default()
    };
    let nodes = prepare_nodes(&source.load()?, &spec)?;
    let manifest = PartitionManifest::new(spec, &nodes)?;
    create_dir(&out_dir)?;
    write_json(out_dir.join("partition.json"), &manifest)?;
    let mut w = csv::Writer::from_writer(create(out_dir.join("partition.csv"))?);
    w.write_record(["node", "train_rows", "train_positives", "test_rows", "test_positives"])?;
    for n in &nodes {
        w.write_record([
            n.node_id.to_string(),
            n.train.len().to_string(),
            n.train.positives().to_string(),
            n.test.len().to_string(),
            n.test.positives().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&out_dir, e))?;
    println!("{} rows in {} parts -> {}", nodes.iter().map(|n| n.train.len() + n.test.len()).sum::<usize>(), parts, out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: Option<PathBuf>,
    data: DataArgs,
    topology: Option<String>,
    rounds: Option<u32>,
    n_new: Option<usize>,
    n_share: Option<usize>,
    n_max: Option<usize>,
    out_dir: PathBuf,
) -> Result<()> {
    let seed = data.seed.unwrap_or(0);
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(DatasetSource::parse("synthetic", seed), TopologySpec::Ring, seed),
    };
    if let Some(s) = data.seed {
        cfg.seed = s;
        cfg.partition.seed = s;
        if let DatasetSource::Synthetic(spec) = &mut cfg.dataset {
            spec.seed = s;
        }
    }
    if let Some(d) = data.dataset {
        cfg.dataset = DatasetSource::parse(&d, cfg.seed);
    }
    if let Some(t) = topology {
        cfg.topology = parse_topology(&t)?;
    }
    cfg.rounds = rounds.unwrap_or(cfg.rounds);
    cfg.n_new = n_new.unwrap_or(cfg.n_new);
    cfg.n_share = n_share.unwrap_or(cfg.n_share);
    cfg.n_max = n_max.unwrap_or(cfg.n_max);

    let nodes = cfg.nodes()?;
    let artifacts = execute(&cfg, &nodes)?;
    write_run(&out_dir, &cfg, &artifacts)?;
    println!(
        "{} rounds on {} nodes: {} snapshots, {} ledger records -> {}",
        cfg.rounds,
        nodes.len(),
        artifacts.output.snapshots.len(),
        artifacts.output.ledger.len(),
        out_dir.display()
    );
    Ok(())
}

fn report(run: PathBuf, baseline: Option<PathBuf>, out_dir: PathBuf) -> Result<()> {
    let (snapshots, _) = read_run(&run)?;
    create_dir(&out_dir)?;
    write_metrics_csv(&snapshots, create(out_dir.join("metrics.csv"))?)?;
    let mut rounds: Vec<u32> = snapshots.iter().map(|s| s.round).collect();
    rounds.dedup();
    for r in rounds {
        provenance_matrix(&snapshots, r)?.write_csv(create(out_dir.join(format!("provenance_round{r}.csv")))?)?;
    }
    if let Some(base) = baseline {
        let (base_snaps, _) = read_run(&base)?;
        let imp = improvement_report(&snapshots, &base_snaps)?;
        imp.write_csv(create(out_dir.join("improvement.csv"))?)?;
        imp.write_summary_csv(create(out_dir.join("improvement_summary.csv"))?)?;
    }
    println!("reports -> {}", out_dir.display());
    Ok(())
}

fn verify(path: PathBuf) -> Result<bool> {
    let path = if path.is_dir() { path.join("ledger.jsonl") } else { path };
    let records = Ledger::read_records(&path)?;
    match verify_chain(&records) {
        Verdict::Ok => {
            println!("ok: {} records", records.len());
            Ok(true)
        }
        Verdict::Bad { index, reason } => {
            println!("bad record {index}: {reason}");
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Partition {
            data,
            parts,
            imbalance,
            out_dir,
        } => partition(data, parts, imbalance, out_dir).map(|_| true),
        Command::Run {
            config,
            data,
            topology,
            rounds,
            n_new,
            n_share,
            n_max,
            out_dir,
        } => run(config, data, topology, rounds, n_new, n_share, n_max, out_dir).map(|_| true),
        Command::Report { run, baseline, out_dir } => report(run, baseline, out_dir).map(|_| true),
        Command::Verify { ledger } => verify(ledger),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
