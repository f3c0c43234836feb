use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scm_core::data::{generate_synthetic, load_train, save_test, save_train, LexicalIndex, SynthConfig};
use scm_core::experiments::{cmd_ablate, cmd_eval, cmd_sweep, cmd_train, EvalOptions, SweepAxis};
use scm_core::persist::{RunConfig, SEED_ENV};
use scm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "scm", about = "Response selection with a candidate comparison module", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints plus loss.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on a test corpus.
    Eval(EvalArgs),
    /// Train and evaluate full SCM, both ablations and the plain encoder.
    Ablate(RunArgs),
    /// Vary one SCM hyperparameter with the other two pinned.
    Sweep {
        /// n, n_head or dim_ffd
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the grid values valid at d.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic train.tsv and test.tsv.
    Synth {
        /// separable or comparison
        #[arg(long, default_value = "separable")]
        kind: String,
        #[arg(long, default_value_t = 50)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 10)]
        topics: usize,
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or query the lexical index over a response pool.
    #[command(subcommand)]
    Index(IndexCmd),
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        /// Training corpus whose responses form the pool.
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// bi or poly
    #[arg(long)]
    model: Option<String>,
    /// off, full, no_context_aware or no_gate
    #[arg(long)]
    scm: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_head: Option<usize>,
    #[arg(long)]
    dim_ffd: Option<usize>,
    #[arg(long)]
    poly_m: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("model", self.model.clone());
        put("scm", self.scm.clone());
        put("n", self.n.map(|v| v.to_string()));
        put("n_head", self.n_head.map(|v| v.to_string()));
        put("dim_ffd", self.dim_ffd.map(|v| v.to_string()));
        put("poly_m", self.poly_m.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("train", path(&self.train));
        put("test", path(&self.test));
        put("out", path(&self.out));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let env_seed = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(self.config.as_deref(), env_seed.as_deref(), &o)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Grow each candidate list to this size with mined negatives.
    #[arg(long)]
    extend: Option<usize>,
    /// Replace one negative per sample with a context turn.
    #[arg(long)]
    adversarial: bool,
    /// Training corpus used as the mining pool.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// JSON-lines cache of mined candidates.
    #[arg(long)]
    mined_cache: Option<PathBuf>,
    /// Seed for the adversarial choice; SCM_SEED overrides the default.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn write_report(dir: &Path, stem: &str, json: &str, table: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    fs::write(dir.join(format!("{stem}.txt")), table)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = args.resolve()?;
            let out = cmd_train(&cfg)?;
            let last = out.fit.epoch_means.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} for {} steps, final epoch loss {last:.4}",
                cfg.model.tag(),
                out.fit.steps
            );
            println!("checkpoint {}", out.checkpoint.display());
            println!("loss curve {}", out.loss_curve.display());
        }
        Cmd::Eval(a) => {
            if a.extend.is_some() && a.pool.is_none() && a.mined_cache.as_ref().is_none_or(|p| !p.exists()) {
                return Err(Error::Config("--extend needs --pool or an existing --mined-cache".into()));
            }
            let opts = EvalOptions {
                extend: a.extend,
                adversarial: a.adversarial,
                pool: a.pool,
                mined_cache: a.mined_cache,
                seed: a.seed.or(env_seed()?).unwrap_or(50),
            };
            let report = cmd_eval(&a.checkpoint, &a.test, &opts)?;
            let table = report.table();
            print!("{table}");
            let dir = a.out.unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            write_report(&dir, "report", &report.to_json()?, &table)?;
        }
        Cmd::Ablate(args) => {
            let cfg = args.resolve()?;
            print!("{}", cmd_ablate(&cfg)?.text());
        }
        Cmd::Sweep { axis, values, run } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = run.resolve()?;
            let values = if values.is_empty() {
                axis.default_values(cfg.model.d)
            } else {
                values
            };
            print!("{}", cmd_sweep(&cfg, axis, &values)?.text());
        }
        Cmd::Synth {
            kind,
            seed,
            n_train,
            n_test,
            topics,
            m,
            out,
        } => {
            let cfg = SynthConfig {
                kind: kind.parse()?,
                seed: env_seed()?.unwrap_or(seed),
                n_train,
                n_test,
                n_topics: topics,
                m,
            };
            let (train, test) = generate_synthetic(&cfg)?;
            fs::create_dir_all(&out)?;
            save_train(out.join("train.tsv"), &train)?;
            save_test(out.join("test.tsv"), &test)?;
            println!("wrote {} train sessions and {} test samples to {}", train.len(), test.len(), out.display());
        }
        Cmd::Index(IndexCmd::Build { pool, out }) => {
            let sessions = load_train(&pool)?;
            let index = LexicalIndex::build(sessions.iter().map(|s| s.response.as_str()));
            fs::write(&out, serde_json::to_string(&index)?)?;
            println!("indexed {} responses into {}", index.len(), out.display());
        }
        Cmd::Index(IndexCmd::Query { index, text, k }) => {
            let raw = fs::read_to_string(&index)?;
            let index: LexicalIndex = serde_json::from_str(&raw)
                .map_err(|e| Error::Data(format!("{}: {e}", index.display())))?;
            for hit in index.query(&text, k, &HashSet::new())? {
                println!("{:.6}\t{}", hit.score, index.doc(hit.id));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
