use std::path::PathBuf;
use std::process::ExitCode;

use breen::sequence::Stage;
use breen::synthdata::Mode;
use breen::teacher::TeacherSpec;
use breen_cli::*;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

/// `println!` that treats a closed stdout (`breen config | head`) as a quiet exit.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($t)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

#[derive(Parser)]
#[command(name = "breen", version, about = "Encoder-free multimodal transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Caption,
    Qa,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Prealign,
    Pretrain,
    Sft,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Grad,
    Pool,
    Route,
    Freeze,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the synthetic teacher.
        #[arg(long, default_value_t = 0x7eac)]
        teacher_seed: u64,
        #[arg(long, default_value_t = 32)]
        teacher_dim: usize,
    },
    /// Train one stage, or all stages in order.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from a mid-stage checkpoint.
        #[arg(long, conflicts_with = "from_scratch")]
        resume: Option<PathBuf>,
        /// Start a later stage from freshly initialized weights.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Run self-check suites and print a pass/fail table.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
    /// Average-pool a teacher feature grid.
    Pool {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention heatmaps for one sample.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Defaults to the middle layer.
        #[arg(long)]
        layer: Option<usize>,
        /// `fine`, `coarse`, or a stride.
        #[arg(long, default_value = "fine")]
        granularity: String,
        /// Output position; defaults to the answer position for qa samples
        /// and the last position otherwise.
        #[arg(long)]
        token: Option<usize>,
        #[arg(long)]
        all_layers: bool,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean losses of a checkpoint on a dataset.
    EvalLoss {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Print a complete config for a preset.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        defaults: PresetArg,
    },
}

fn run(cmd: Command) -> breen::Result<i32> {
    match cmd {
        Command::GenData {
            seed,
            n,
            mode,
            out,
            teacher_seed,
            teacher_dim,
        } => {
            let mode = match mode {
                ModeArg::Caption => Mode::Caption,
                ModeArg::Qa => Mode::Qa,
            };
            let n = cmd_gen_data(seed, n as usize, mode, &out, &TeacherSpec::synthetic(teacher_seed, teacher_dim))?;
            out!("wrote {n} records to {}", out.display());
        }
        Command::Train {
            config,
            stage,
            resume,
            from_scratch,
        } => {
            let cfg = RunConfig::load(&config)?;
            let select = match stage {
                StageArg::Prealign => StageSelect::One(Stage::Prealign),
                StageArg::Pretrain => StageSelect::One(Stage::Pretrain),
                StageArg::Sft => StageSelect::One(Stage::Sft),
                StageArg::All => StageSelect::All,
            };
            let threads = threads_from_env()?;
            let done = cmd_train(&cfg, select, resume.as_deref(), from_scratch, threads, &mut |m| out!("{m}"))?;
            for o in done {
                out!("{}: wrote {}", o.stage, o.checkpoint.display());
            }
        }
        Command::Verify { suite } => {
            let name = match suite {
                SuiteArg::Grad => "grad",
                SuiteArg::Pool => "pool",
                SuiteArg::Route => "route",
                SuiteArg::Freeze => "freeze",
                SuiteArg::All => "all",
            };
            let checks = cmd_verify(name)?;
            out!("{}", format_checks(&checks).trim_end());
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_FAILED_CHECKS);
            }
        }
        Command::Pool { input, stride, out } => {
            let n = cmd_pool(&input, stride, &out)?;
            out!("wrote {n} tokens to {}", out.display());
        }
        Command::Viz {
            ckpt,
            data,
            sample,
            layer,
            granularity,
            token,
            all_layers,
            out,
        } => {
            let files = cmd_viz(&VizRequest {
                ckpt,
                data,
                sample,
                layer,
                granularity,
                token,
                all_layers,
                out,
            })?;
            for f in files {
                out!("{}", f.display());
            }
        }
        Command::EvalLoss { ckpt, data, alpha, beta } => {
            let r = cmd_eval_loss(&ckpt, &data, alpha, beta)?;
            out!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Config { defaults } => {
            let p = match defaults {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            };
            out!("{}", RunConfig::preset(p).to_json());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(EXIT_USAGE as u8);
        }
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
