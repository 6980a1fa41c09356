use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use agkit_cli::commands::{self, exit_code, Scope};
use agkit_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "agkit", version, about = "Attention-gated segmentation and classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Localization quantile threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Localization blur, in pixels.
    #[arg(long)]
    blur: Option<f64>,
    /// Checkpoint to read; defaults to `<out>/checkpoint.agk`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> agkit::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(t) = self.tau {
            c.tau = t;
        }
        if let Some(b) = self.blur {
            c.blur = b;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and attention maps.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bounding boxes from classifier attention maps.
    Localize(Common),
    /// Write attention maps of the first test images as PGM files.
    ExportAttention(Common),
}

fn run(cmd: Command) -> agkit::Result<u8> {
    match cmd {
        Command::Train(c) => {
            let cfg = c.load()?;
            let s = commands::train(&cfg)?;
            println!("trained {} for {} epochs; artifacts in {}", cfg.run_id(), s.epochs, cfg.out.display());
            if let Some(v) = s.final_val {
                println!("final validation macro DSC {:.4}, accuracy {:.4}", v.macro_dsc(), v.accuracy);
            }
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let rec = commands::eval(&cfg, &commands::checkpoint_path(&cfg, c.checkpoint.as_deref()))?;
            for m in &rec.per_class {
                println!(
                    "class {}: dsc {:.4} precision {:.4} recall {:.4} iou {:.4}",
                    m.class, m.dsc, m.precision, m.recall, m.iou
                );
            }
        }
        Command::Gradcheck { scope, seed } => {
            let ok = commands::gradcheck(commands::gradcheck_cases(scope)?, seed, &mut std::io::stdout())?;
            return Ok(if ok { 0 } else { 1 });
        }
        Command::Localize(c) => {
            let cfg = c.load()?;
            let out = commands::localize_cmd(&cfg, &commands::checkpoint_path(&cfg, c.checkpoint.as_deref()))?;
            for s in out.score.per_class.iter().flatten() {
                println!(
                    "class {}: n {} mean IoU {:.3} correct {:.3} relative {:.3}",
                    s.class, s.count, s.mean_iou, s.correctness, s.relative_correctness
                );
            }
            println!("overall mean IoU {:.3}", out.score.mean_iou);
        }
        Command::ExportAttention(c) => {
            let cfg = c.load()?;
            let files = commands::export_attention(&cfg, &commands::checkpoint_path(&cfg, c.checkpoint.as_deref()))?;
            println!("wrote {} attention maps", files.len());
        }
    }
    Ok(0)
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
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
