use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segrl::pipeline::{self, files, AblationAxis, ExperimentConfig, Run, Stage, StageOutcome};
use segrl::task::TokenSequence;
use segrl::Error;

#[derive(Parser)]
#[command(name = "segrl", version, about = "Segment-level rewards and PPO on a synthetic keyphrase task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set ppo.kl_beta=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (overrides `out_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Rerun even when the manifest says the outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the task spec, SFT corpus, preference pairs and prompts.
    GenData(StageArgs),
    /// Train the SFT model.
    TrainSft(StageArgs),
    /// Cache segment boundaries for the preference pairs.
    Segment(StageArgs),
    /// Train the reward model.
    TrainRm(StageArgs),
    /// Fit the location-aware normalizer.
    FitNorm(StageArgs),
    /// Train the policy with PPO.
    TrainPpo(StageArgs),
    /// Evaluate SFT and PPO policies and the reward model.
    Eval(StageArgs),
    /// Run every stage, skipping the ones already current.
    Run(StageArgs),
    /// Print per-segment rewards for one response.
    DumpRewards {
        #[command(flatten)]
        common: Common,
        /// Take the response from this JSONL file inside the run directory.
        #[arg(long, default_value = files::EVAL_SAMPLES)]
        source: String,
        /// Record index in `source`; pair files use the chosen response.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Use the rejected response of a pair record.
        #[arg(long)]
        rejected: bool,
    },
    /// Run an ablation axis over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// granularity | normalizer | interpolation | c_ent_sweep
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn load(common: &Common) -> segrl::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> segrl::Result<()> {
    let mut run = Run::open(load(&args.common)?)?;
    for &s in stages {
        let outcome = run.run_stage(s, args.force)?;
        let verb = if outcome == StageOutcome::Ran { "ran" } else { "up to date" };
        eprintln!("{:<14} {verb}", s.name());
    }
    if stages.contains(&Stage::Eval) {
        let r = run.eval_report()?;
        println!(
            "sft oracle {:.4} len {:.2} | policy oracle {:.4} len {:.2} | rm acc {:.3} | avg seg len {:.2}",
            r.sft.mean_oracle_score, r.sft.mean_resp_len, r.policy.mean_oracle_score, r.policy.mean_resp_len, r.rm_accuracy, r.avg_segment_length
        );
    }
    Ok(())
}

fn dump(common: &Common, source: &str, index: usize, rejected: bool) -> segrl::Result<()> {
    let run = Run::open(load(common)?)?;
    let spec = run.spec()?;
    let sft = run.model(files::SFT, &spec)?;
    let rm = run.model(files::RM, &spec)?;
    let norm = run.normalizer()?;
    let path = run.dir.join(source);
    let seq = if source.starts_with("pairs") {
        let pairs = run.pairs(source)?;
        let p = pairs.into_iter().nth(index).ok_or_else(|| Error::Config(format!("{source} has no record {index}")))?;
        if rejected {
            p.rejected
        } else {
            p.chosen
        }
    } else {
        let seqs: Vec<TokenSequence> = pipeline::read_jsonl(&path)?;
        seqs.into_iter().nth(index).ok_or_else(|| Error::Config(format!("{source} has no record {index}")))?
    };
    if seq.response_tokens.is_empty() {
        return Err(Error::Config(format!("record {index} of {source} has an empty response")));
    }
    print!("{}", pipeline::dump_segment_rewards(&rm, &sft, &norm, &seq, run.cfg.ppo.c_ent, Some(&spec))?);
    Ok(())
}

fn ablate(common: &Common, axis: &str, seeds: &[u64]) -> segrl::Result<()> {
    let cfg = load(common)?;
    let axis = AblationAxis::from_name(axis).ok_or_else(|| Error::Config(format!("unknown ablation axis `{axis}`")))?;
    let rows = pipeline::run_ablation_matrix(&cfg, axis, seeds)?;
    println!("{:<18} {:>16} {:>14} {:>14} {:>6}", "variant", "oracle", "resp len", "seg len", "fails");
    for r in rows {
        println!(
            "{:<18} {:>8.4} ± {:<6.4} {:>6.2} ± {:<5.2} {:>6.2} ± {:<5.2} {:>4}",
            r.variant, r.oracle_mean, r.oracle_std, r.resp_len_mean, r.resp_len_std, r.avg_seg_len_mean, r.avg_seg_len_std, r.failed_cells
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => run_stages(a, &[Stage::GenData]),
        Cmd::TrainSft(a) => run_stages(a, &[Stage::TrainSft]),
        Cmd::Segment(a) => run_stages(a, &[Stage::SegmentCache]),
        Cmd::TrainRm(a) => run_stages(a, &[Stage::TrainRm]),
        Cmd::FitNorm(a) => run_stages(a, &[Stage::FitNorm]),
        Cmd::TrainPpo(a) => run_stages(a, &[Stage::TrainPpo]),
        Cmd::Eval(a) => run_stages(a, &[Stage::Eval]),
        Cmd::Run(a) => run_stages(a, &Stage::ALL),
        Cmd::DumpRewards { common, source, index, rejected } => dump(common, source, *index, *rejected),
        Cmd::Ablate { common, axis, seeds } => ablate(common, axis, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let config = match &e {
                Error::Stage { source, .. } => source.is_config(),
                e => e.is_config(),
            };
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}
