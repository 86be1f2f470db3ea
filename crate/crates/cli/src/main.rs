use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gsbmdpo::config::{Ablation, RunConfig};
use gsbmdpo::toylab::{run_toy, write_toy_outputs, ToyConfig};
use gsbmdpo::trainer::{self, evaluate, Trainer};
use gsbmdpo::{oracles, rng};

#[derive(Parser)]
#[command(name = "gsbmdpo", version, about = "Path-space mirror-descent policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Run the Gaussian-mixture tilting toy.
    Toy(ToyArgs),
    /// Run the numerical identity checks.
    Verify(VerifyArgs),
    /// Run single-switch ablations or a generation-step sweep, one after another.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $RUN_OUT_DIR or runs/, plus a run name).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    algo: Option<String>,
    /// Per-key overrides in kebab case, e.g. `--kl-coef 0 --num-envs 16`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Continue from a checkpoint with its stored config; metrics go to --out
    /// or the config's run directory.
    #[arg(long, conflicts_with_all = ["config", "seed", "env", "algo", "overrides"])]
    resume: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train` (e.g. RUN/checkpoints/final.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Sample with noise instead of the deterministic flow.
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated generation-step counts, e.g. 4,8,16,32.
    #[arg(long, value_delimiter = ',')]
    flow_steps: Vec<usize>,
    /// Comma-separated variants among default, no-kl, no-ref,
    /// stochastic-eval, no-clip. All of them when neither list is given.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[command(flatten)]
    run: RunArgs,
}

/// Turns `--key value` / `--key=value` pairs into override tuples.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            bail!("expected a `--key value` override, found `{tok}`");
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("override `--{flag}` is missing a value"))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_run_config(args: &RunArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::from_json_str(
            &fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        )?,
        None => RunConfig::from_json_str("{}")?,
    };
    let mut ov = Vec::new();
    if let Some(s) = args.seed {
        ov.push(("seed".to_string(), s.to_string()));
    }
    if let Some(e) = &args.env {
        ov.push(("env".to_string(), e.clone()));
    }
    if let Some(a) = &args.algo {
        ov.push(("algo".to_string(), a.clone()));
    }
    if let Some(o) = &args.out {
        ov.push(("out_dir".to_string(), serde_json::to_string(&o.to_string_lossy())?));
    }
    ov.extend(parse_overrides(&args.overrides)?);
    Ok(base.with_overrides(&ov)?)
}

fn print_final(rows: &[trainer::MetricsRow]) {
    if let Some(r) = rows.iter().rev().find(|r| r.kind == "eval") {
        print!("final eval after {} env steps: mean return {:.3}", r.env_steps, r.mean_return.unwrap_or(f64::NAN));
        if let Some(d) = r.final_distance {
            print!(", final distance {d:.4}");
        }
        println!();
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if let Some(ck) = &args.resume {
        let mut t = Trainer::load_bundle(ck).with_context(|| format!("loading {}", ck.display()))?;
        let dir = args.run.out.clone().unwrap_or_else(|| trainer::run_dir(&t.cfg));
        println!("resuming {} on {} at update {} into {}", t.cfg.algo, t.cfg.env, t.iteration, dir.display());
        let rows = t.run(Some(&dir))?;
        print_final(&rows);
        return Ok(());
    }
    let args = &args.run;
    let cfg = load_run_config(args)?;
    let dir = trainer::run_dir(&cfg);
    println!("training {} on {} (seed {}) into {}", cfg.algo, cfg.env, cfg.seed, dir.display());
    let (t, rows) = trainer::train(&cfg, &dir)?;
    print_final(&rows);
    if t.aborted_updates > 0 {
        println!("aborted updates: {}", t.aborted_updates);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let Some(path) = &args.checkpoint else {
        bail!("eval needs a checkpoint: pass --checkpoint RUN/checkpoints/final.ckpt");
    };
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let t = Trainer::load_bundle(path).with_context(|| format!("loading {}", path.display()))?;
    let seed = args.seed.map_or_else(|| t.eval_seed(), |s| rng::sub_seed(s, 5));
    let res = evaluate(
        &t.actor,
        &t.normalizer,
        t.cfg.normalize_observations,
        &t.sched,
        t.cfg.env,
        args.episodes.unwrap_or(t.cfg.eval_episodes),
        !args.stochastic,
        seed,
    )?;
    let report = serde_json::json!({
        "env": t.cfg.env.to_string(),
        "algo": t.cfg.algo.to_string(),
        "env_steps": t.env_steps,
        "deterministic": !args.stochastic,
        "mean_return": res.mean_return,
        "mean_length": res.mean_length,
        "final_distance": res.final_distance,
        "returns": res.returns,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_toy(args: &ToyArgs) -> Result<()> {
    let mut cfg: ToyConfig = match &args.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing toy config {}", p.display()))?,
        None => ToyConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.clone().unwrap_or_else(|| default_base().join(format!("toy-seed{}", cfg.seed)));
    let rep = run_toy(&cfg)?;
    write_toy_outputs(&out, &cfg, &rep)?;
    println!("target masses  {:?}", rep.target_masses.map(|m| (m * 1e4).round() / 1e4));
    println!("learned masses {:?}", rep.learned_masses.map(|m| (m * 1e4).round() / 1e4));
    println!("quadrant-mass l1 error {:.4}, modes {}", rep.l1_error, rep.mode_count());
    println!("outputs in {}", out.display());
    Ok(())
}

fn default_base() -> PathBuf {
    std::env::var_os("RUN_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let rep = oracles::run_verify(args.seed)?;
    print!("{rep}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&rep)?)?;
    }
    Ok(rep.all_passed())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = load_run_config(&args.run)?;
    let root: PathBuf = match &base.out_dir {
        Some(d) => PathBuf::from(d),
        None => default_base().join(format!("ablate-{}", base.env)),
    };
    let mut runs: Vec<(String, RunConfig)> = Vec::new();
    for n in &args.flow_steps {
        let mut c = base.clone();
        c.generation_steps = *n;
        runs.push((format!("steps{n}"), c));
    }
    let variants: Vec<Ablation> = if args.variants.is_empty() && args.flow_steps.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        args.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
    };
    for v in variants {
        runs.push((v.name().to_string(), v.apply(&base)));
    }
    for (name, mut cfg) in runs {
        let dir = root.join(format!("{name}-seed{}", cfg.seed));
        cfg.out_dir = Some(dir.to_string_lossy().into_owned());
        println!("ablation {name} into {}", dir.display());
        let (t, rows) = trainer::train(&cfg, Path::new(&dir))?;
        print_final(&rows);
        println!("aborted updates: {}", t.aborted_updates);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Toy(a) => cmd_toy(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => match cmd_verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: some identity checks failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
