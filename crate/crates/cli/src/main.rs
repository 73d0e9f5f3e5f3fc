//! Command-line front end: one subcommand per pipeline stage. Every run
//! writes its artifacts plus a `run.toml` manifest into `--out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rnadiff::ablation::{dim_sweep, dim_table, tau_ablation};
use rnadiff::checkpoint::Checkpoint;
use rnadiff::config::{Config, RunManifest};
use rnadiff::data::{
    gen_synthetic, parse_pdb_backbone, read_dataset, read_fasta, split_dataset, write_dataset, write_fasta,
    RnaRecord, Split, Splits, MANIFEST_FILE,
};
use rnadiff::evaluate::{sample_designs, score_designs};
use rnadiff::fold::fold_mfe;
use rnadiff::pretrain::{log_table, train_ldm};
use rnadiff::sampler::probability_table;
use rnadiff::sequence::seq_to_string;
use rnadiff::trainer::{curve_table, finetune, STAGE_KEY};
use rnadiff::{Error, ErrorCategory, Result};

#[derive(Debug, Parser)]
#[command(name = "rnadiff", version, about = "Structure-conditioned latent diffusion for RNA design")]
struct Cli {
    /// TOML config; omitted sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for reward and evaluation parallelism; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a corpus and split it into train, fine-tune and test sets.
    GenData,
    /// Train the autoencoder, then the latent denoiser.
    Pretrain(DataArg),
    /// Reward fine-tuning of a pre-trained checkpoint.
    Finetune(ModelArgs),
    /// Design sequences for backbones.
    Sample(SampleArgs),
    /// Minimum-energy secondary structures for a FASTA file.
    Fold {
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample designs and report every metric.
    Evaluate(ModelArgs),
    /// Fine-tune once per reward threshold arm.
    AblateTau(ModelArgs),
    /// Autoencoder recovery across latent widths.
    AblateDim(DataArg),
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; its test split is designed for.
    #[arg(long, required_unless_present = "pdb", conflicts_with = "pdb")]
    data: Option<PathBuf>,
    /// PDB files to design for instead of a dataset.
    #[arg(long, num_args = 1..)]
    pdb: Vec<PathBuf>,
    #[arg(long, default_value_t = 'A')]
    chain: char,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Diverged => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes artifacts under the output directory and tracks them for the
/// manifest.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        self.manifest.add_output(&self.out, &path)?;
        Ok(path)
    }

    fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<()> {
        self.write(rel, ck.to_bytes()?).map(|_| ())
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        self.manifest.add_input(path)?;
        Checkpoint::load(path)
    }

    fn load_dataset(&mut self, dir: &Path, cfg: &Config, neighbors: usize) -> Result<Splits> {
        self.manifest.add_input(&dir.join(MANIFEST_FILE))?;
        read_dataset(dir, &cfg.energy()?, neighbors)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cli.workers)))?;
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let mut run = Run {
        out: cli.out.clone(),
        manifest: RunManifest::new(command_name(&cli.command), cli.seed, cli.workers, &cfg),
    };
    if let Some(p) = &cli.config {
        run.manifest.add_input(p)?;
    }
    pool.install(|| dispatch(cli, &cfg, &mut run))?;
    let path = run.manifest.write(&run.out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::Sample(_) => "sample",
        Command::Fold { .. } => "fold",
        Command::Evaluate(_) => "evaluate",
        Command::AblateTau(_) => "ablate-tau",
        Command::AblateDim(_) => "ablate-dim",
    }
}

fn dispatch(cli: &Cli, cfg: &Config, run: &mut Run) -> Result<()> {
    let seed = cli.seed;
    let em = cfg.energy()?;
    match &cli.command {
        Command::GenData => {
            let records = gen_synthetic(&cfg.synth(), &em, seed)?;
            let splits = split_dataset(records, cfg.data.split, seed)?;
            for path in write_dataset(&run.out, &splits)? {
                run.manifest.add_output(&run.out, &path)?;
            }
            let sizes = Split::ALL.map(|s| splits.get(s).len());
            log::info!("wrote {} / {} / {} records", sizes[0], sizes[1], sizes[2]);
        }
        Command::Pretrain(a) => {
            let splits = run.load_dataset(&a.data, cfg, cfg.model.neighbors)?;
            let sched = cfg.schedule()?;
            let (state, log) = train_ldm(
                splits.get(Split::Train),
                splits.get(Split::Finetune),
                cfg.model,
                &cfg.train,
                &sched,
                seed,
            )?;
            let mut ck = Checkpoint::new(state);
            ck.meta.insert(STAGE_KEY.into(), "pretrained".into());
            run.write("train_log.tsv", log_table(&log))?;
            run.save_checkpoint("pretrained.ckpt", &ck)?;
        }
        Command::Finetune(a) => {
            let ck = run.load_checkpoint(&a.checkpoint)?;
            let splits = run.load_dataset(&a.data, cfg, ck.state.config.neighbors)?;
            let sched = cfg.schedule()?;
            let (out, curve) = finetune(
                splits.get(Split::Finetune),
                &ck,
                &cfg.reward_spec(),
                &cfg.ppo,
                &sched,
                &em,
                seed,
            )?;
            run.write("curve.tsv", curve_table(&curve))?;
            run.save_checkpoint("finetuned.ckpt", &out)?;
        }
        Command::Sample(a) => {
            let ck = run.load_checkpoint(&a.checkpoint)?;
            let k = ck.state.config.neighbors;
            let records = match &a.data {
                Some(dir) => run.load_dataset(dir, cfg, k)?.get(Split::Test).to_vec(),
                None => pdb_records(run, &a.pdb, a.chain, cfg, k)?,
            };
            let per = cfg.sampler.designs_per_record;
            let designs = sample_designs(&ck.state, &records, per, &cfg.schedule()?, cfg.sampler.kind(), seed)?;
            let mut named = Vec::new();
            let mut probs = String::new();
            for (rec, ds) in records.iter().zip(&designs) {
                for (j, d) in ds.iter().enumerate() {
                    let name = format!("{}_{j}", rec.id);
                    let _ = writeln!(probs, ">{name}\n{}", probability_table(&d.probs));
                    named.push((name, &d.sequence));
                }
            }
            run.write(
                "designs.fasta",
                write_fasta(named.iter().map(|(n, s)| (n.as_str(), s.as_slice()))),
            )?;
            run.write("designs.probs.tsv", probs)?;
        }
        Command::Fold { input } => {
            run.manifest.add_input(input)?;
            let text = std::fs::read_to_string(input).map_err(io_err(input))?;
            let mut table = String::from("id\tstructure\tenergy\n");
            for (id, seq) in read_fasta(&text)? {
                let f = fold_mfe(&seq, &em)?;
                let line = format!("{id}\t{}\t{:.1}", f.structure, f.energy);
                println!("{line}");
                let _ = writeln!(table, "{line}");
            }
            run.write("folds.tsv", table)?;
        }
        Command::Evaluate(a) => {
            let ck = run.load_checkpoint(&a.checkpoint)?;
            let splits = run.load_dataset(&a.data, cfg, ck.state.config.neighbors)?;
            let test = splits.get(Split::Test);
            let spec = cfg.reward_spec();
            let designs = sample_designs(
                &ck.state,
                test,
                cfg.sampler.designs_per_record,
                &cfg.schedule()?,
                cfg.sampler.kind(),
                seed,
            )?;
            let report = score_designs(test, &designs, &spec, &em)?;
            print!("{}", report.summary_table());
            run.write("summary.tsv", report.summary_table())?;
            run.write("designs.tsv", report.design_table())?;
        }
        Command::AblateTau(a) => {
            let ck = run.load_checkpoint(&a.checkpoint)?;
            let splits = run.load_dataset(&a.data, cfg, ck.state.config.neighbors)?;
            let arms = tau_ablation(
                splits.get(Split::Finetune),
                &ck,
                &cfg.reward_spec(),
                &cfg.ppo,
                &cfg.schedule()?,
                &em,
                seed,
            )?;
            for (arm, curve) in arms {
                run.write(&format!("curves/{}.tsv", arm.name), curve_table(&curve))?;
            }
        }
        Command::AblateDim(a) => {
            let splits = run.load_dataset(&a.data, cfg, cfg.model.neighbors)?;
            let rows = dim_sweep(
                splits.get(Split::Train),
                splits.get(Split::Test),
                &cfg.ablation.latent_dims,
                cfg.model,
                &cfg.train,
                seed,
            )?;
            print!("{}", dim_table(&rows));
            run.write("dim_sweep.tsv", dim_table(&rows))?;
        }
    }
    Ok(())
}

fn pdb_records(run: &mut Run, paths: &[PathBuf], chain: char, cfg: &Config, k: usize) -> Result<Vec<RnaRecord>> {
    let em = cfg.energy()?;
    paths
        .iter()
        .map(|p| {
            run.manifest.add_input(p)?;
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            let c = parse_pdb_backbone(&text, chain)?;
            let id = p.file_stem().map_or_else(|| "target".into(), |s| s.to_string_lossy().into_owned());
            let db = fold_mfe(&c.sequence, &em)?.structure;
            log::debug!("{id}: {} residues, {}", c.sequence.len(), seq_to_string(&c.sequence));
            RnaRecord::new(id, c.sequence, c.coords, db, k)
        })
        .collect()
}
