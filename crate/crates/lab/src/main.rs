use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisemia_lab::config::ExperimentConfig;
use noisemia_lab::pipeline::{self, ExperimentReport, Layout};
use noisemia_lab::{error_kind, exit_code};

#[derive(Parser)]
#[command(name = "noisemia", version, about = "Initial-noise membership inference lab for small diffusion models")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the attack stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "NOISEMIA_OUT", default_value = "out")]
    out: PathBuf,
    /// Override any config field, e.g. `--set finetune.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic member/non-member dataset.
    GenData,
    /// SNR and sqrt(alpha_bar) at the last timestep for every schedule.
    ScheduleReport,
    /// Train the base model on the pretraining partition.
    Pretrain(TrainFlags),
    /// Fine-tune the base model on the member partition.
    Finetune(FinetuneFlags),
    /// Score members and non-members with the selected attacks.
    Attack(AttackFlags),
    /// Compute metrics from the score files.
    Evaluate(EvaluateFlags),
    /// Inversion attack over the i_step x gamma2 grid.
    Sweep,
    /// gen-data, schedule-report, pretrain, finetune, attack, evaluate.
    RunAll,
    /// Print the effective config and its digest.
    ShowConfig,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct FinetuneFlags {
    #[command(flatten)]
    train: TrainFlags,
    /// Enable the memorization-score defense.
    #[arg(long)]
    defense: bool,
    #[arg(long)]
    ss_threshold: Option<f64>,
}

#[derive(Args)]
struct AttackFlags {
    /// Comma-separated subset of inversion, naive, loss_baseline.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    i_step: Option<usize>,
    #[arg(long)]
    inference_steps: Option<usize>,
    /// normalized_l2, l1 or cosine.
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args)]
struct EvaluateFlags {
    #[arg(long)]
    percentile_k: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
}

fn push<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn quoted(s: &str) -> String {
    format!("\"{s}\"")
}

impl TrainFlags {
    fn overrides(&self, section: &str, out: &mut Vec<String>) {
        push(out, &format!("{section}.epochs"), self.epochs);
        push(out, &format!("{section}.batch_size"), self.batch_size);
        push(out, &format!("{section}.learning_rate"), self.learning_rate.map(|v| format!("{v:?}")));
    }
}

impl Command {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Command::Pretrain(f) => f.overrides("pretrain", &mut out),
            Command::Finetune(f) => {
                f.train.overrides("finetune", &mut out);
                if f.defense {
                    out.push("defense.enabled=true".into());
                }
                push(&mut out, "defense.ss_threshold", f.ss_threshold.map(|v| format!("{v:?}")));
            }
            Command::Attack(f) => {
                if !f.methods.is_empty() {
                    let list: Vec<String> = f.methods.iter().map(|m| quoted(m.trim())).collect();
                    out.push(format!("attack.methods=[{}]", list.join(",")));
                }
                push(&mut out, "attack.gamma1", f.gamma1.map(|v| format!("{v:?}")));
                push(&mut out, "attack.gamma2", f.gamma2.map(|v| format!("{v:?}")));
                push(&mut out, "attack.i_step", f.i_step);
                push(&mut out, "attack.inference_steps", f.inference_steps);
                push(&mut out, "attack.metric", f.metric.as_deref().map(quoted));
            }
            Command::Evaluate(f) => {
                push(&mut out, "evaluate.percentile_k", f.percentile_k.map(|v| format!("{v:?}")));
                push(&mut out, "evaluate.bins", f.bins);
            }
            _ => {}
        }
        out
    }
}

fn print_report(r: &ExperimentReport) {
    for e in &r.reports {
        let tpr: Vec<String> = e.tpr_at_fpr.iter().map(|t| format!("tpr@{}={:.4}", t.fpr, t.tpr)).collect();
        println!(
            "{:<14} auc={:.4} asr={:.4} tau={:.6} {}",
            e.method.to_string(),
            e.auc,
            e.asr,
            e.threshold_tau,
            tpr.join(" ")
        );
    }
    if let Some(d) = &r.delta {
        println!("delta member={:+.4} nonmember={:+.4}", d.member_delta, d.nonmember_delta);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => pipeline::stage_gen_data(&cfg, &layout)?,
        Command::ScheduleReport => pipeline::stage_schedule_report(&cfg, &layout)?,
        Command::Pretrain(_) => pipeline::stage_pretrain(&cfg, &layout)?,
        Command::Finetune(_) => pipeline::stage_finetune(&cfg, &layout)?,
        Command::Attack(_) => pipeline::stage_attack(&cfg, &layout, cli.jobs)?,
        Command::Evaluate(_) => print_report(&pipeline::stage_evaluate(&cfg, &layout)?),
        Command::Sweep => {
            for c in pipeline::stage_sweep(&cfg, &layout, cli.jobs)?.cells {
                println!("i_step={:<4} gamma2={:<4} auc={:.4}", c.i_step, c.gamma2, c.report.auc);
            }
        }
        Command::RunAll => print_report(&pipeline::run_all(&cfg, &layout, cli.jobs)?),
        Command::ShowConfig => {
            println!("# config_digest={}", cfg.digest_hex());
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
