use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use proto_mtl::checkpoint::load_checkpoint;
use proto_mtl::config::{AblationRow, TrainConfig};
use proto_mtl::experiments::{inspect_prototype, run_ablation, ABLATION_FILE};
use proto_mtl::gradcheck::{standard_suite, SUITE_TOLERANCE};
use proto_mtl::synthdata::{generate_dataset, GenConfig, LabelProtocol, MANIFEST_FILE};
use proto_mtl::training::{train_loaded, LoadedData, Trainer};
use proto_mtl::Error;

const THREADS_VAR: &str = "PROTO_MTL_THREADS";

#[derive(Parser)]
#[command(name = "proto-mtl", version, about = "Prototype-based knowledge retrieval for partially labeled multi-task learning")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-task dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        /// Training samples.
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        /// Image side length.
        #[arg(long, default_value_t = 32)]
        hw: usize,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        /// one-label, random-label:N or full.
        #[arg(long, default_value = "one-label")]
        protocol: LabelProtocol,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model; writes checkpoint.bin, metrics.csv and report.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-task mean affinities and the prototype matrix.
    InspectPrototype {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also dump last-block cross-attention weights.
        #[arg(long)]
        attention: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the four ablation rows over several seeds and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn require_data(dir: &Path) -> Result<(), Failure> {
    require(&dir.join(MANIFEST_FILE), "dataset manifest")
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        Some(p) => {
            require(p, "config file")?;
            Ok(TrainConfig::load(p)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn check_threads() -> Result<(), Failure> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            // every kernel runs on the calling thread, so any positive cap is met
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got '{v}'"))),
        },
    }
}

fn restore(checkpoint: &Path, data: &LoadedData) -> Result<Trainer, Failure> {
    let ckpt = load_checkpoint(checkpoint)?;
    let m = &data.manifest;
    Ok(Trainer::from_checkpoint(&ckpt, &m.tasks, (m.height, m.width))?)
}

fn run(cmd: Command) -> Result<(), Failure> {
    check_threads()?;
    match cmd {
        Command::GenerateData {
            out,
            n,
            n_test,
            hw,
            tasks,
            protocol,
            shapes,
            seed,
        } => {
            let cfg = GenConfig {
                n_samples: n,
                n_test,
                height: hw,
                width: hw,
                n_shapes: shapes,
                tasks,
                protocol,
                seed,
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let m = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} train / {} test samples to {}",
                m.sample_count,
                m.test_count,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            require_data(&data)?;
            let resume = match resume {
                Some(p) => {
                    require(&p, "checkpoint")?;
                    Some(load_checkpoint(&p)?)
                }
                None => None,
            };
            let loaded = LoadedData::load(&data)?;
            let start = Instant::now();
            let outcome = train_loaded(&cfg, &loaded, &out, resume.as_ref())?;
            for e in &outcome.log {
                let l = &e.losses;
                println!(
                    "epoch {:>3}  total {:.5}  mtl {:.5}  tae {:.5}  akg {:.5}",
                    e.epoch, l.total, l.mtl, l.tae, l.akg
                );
            }
            for e in &outcome.report.entries {
                println!("{} {} {:.5}", e.task, e.metric, e.value);
            }
            println!(
                "checkpoint {} ({:.1}s)",
                outcome.checkpoint_path.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Evaluate { checkpoint, data, out } => {
            require(&checkpoint, "checkpoint")?;
            require_data(&data)?;
            let loaded = LoadedData::load(&data)?;
            let trainer = restore(&checkpoint, &loaded)?;
            let report = trainer.evaluate(&loaded.test, &loaded.manifest.protocol.to_string())?;
            write(&out, &report.to_csv())?;
            for e in &report.entries {
                println!("{} {} {:.5}", e.task, e.metric, e.value);
            }
        }
        Command::InspectPrototype {
            checkpoint,
            data,
            out,
            attention,
        } => {
            require(&checkpoint, "checkpoint")?;
            require_data(&data)?;
            let loaded = LoadedData::load(&data)?;
            let trainer = restore(&checkpoint, &loaded)?;
            let split = if loaded.test.is_empty() { &loaded.train } else { &loaded.test };
            let report = inspect_prototype(&trainer.model, split, 16)?;
            let names: Vec<&str> = trainer.model.tasks.iter().map(|t| t.role.name()).collect();
            write(&out.join("prototype_affinity.csv"), &report.affinity_csv(&names))?;
            write(&out.join("prototype_slots.csv"), &report.slots_csv(&names))?;
            if attention {
                if let Some(csv) = report.attention_csv(&names) {
                    write(&out.join("attention.csv"), &csv)?;
                }
            }
            println!(
                "mean-affinity argmax matches its task for {} of {} tasks",
                report.argmax_matches(),
                names.len()
            );
        }
        Command::Gradcheck { seed } => {
            let start = Instant::now();
            let mut failed = 0;
            for r in standard_suite(seed) {
                let ok = r.passed(SUITE_TOLERANCE);
                println!(
                    "{:<24} {}  max rel error {:.3e} over {} probes",
                    r.name,
                    if ok { "pass" } else { "FAIL" },
                    r.max_rel_error,
                    r.probes
                );
                failed += usize::from(!ok);
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(Failure::Runtime(Error::GradCheck(format!("{failed} check(s) failed"))));
            }
        }
        Command::Ablate {
            config,
            data,
            out,
            seeds,
        } => {
            let cfg = load_config(config.as_deref())?;
            require_data(&data)?;
            if seeds.is_empty() {
                return Err(Failure::Usage("at least one seed is required".into()));
            }
            let loaded = LoadedData::load(&data)?;
            let summary = run_ablation(&cfg, &loaded, &out, &AblationRow::ALL, &seeds)?;
            print!("{}", summary.to_csv());
            println!("wrote {}", out.join(ABLATION_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `proto-mtl --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
