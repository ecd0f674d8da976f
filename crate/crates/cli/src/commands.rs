//! One function per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use diffclone_core::dataset::Dataset;
use diffclone_core::diagnostics::{self, BimodalConfig, Diagnostic};
use diffclone_core::encoder::{pretrain, EncoderConfig, EncoderNet};
use diffclone_core::policies::AnyPolicy;
use diffclone_core::rng;
use diffclone_core::sim::{evaluate, generate_dataset, EvalSummary, ExpertPolicy};

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::pipeline::{self, Agent};
use crate::{resolve_config, Command, DiagKind, UsageError};

pub const MODEL_FILE: &str = "model.ck";
pub const ENCODER_FILE: &str = "encoder.ck";
pub const NORM_FILE: &str = "norm.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            episodes,
            noise_levels,
            out,
        } => {
            let cfg = resolve_config(
                common,
                &[("episodes", episodes.map(|e| e.to_string())), ("noise_levels", noise_levels.clone())],
            )?;
            gen_data(&cfg, out)
        }
        Command::Pretrain {
            common,
            data,
            objective,
            epochs,
            out,
        } => {
            let cfg = resolve_config(
                common,
                &[("pretrain_objective", objective.clone()), ("pretrain_epochs", epochs.map(|e| e.to_string()))],
            )?;
            pretrain_encoder(&cfg, data, out)
        }
        Command::Train {
            common,
            agent,
            data,
            encoder,
            epochs,
            out,
        } => {
            let epochs_key = match agent {
                Agent::Bc => "bc_epochs",
                _ => "epochs",
            };
            let cfg = resolve_config(common, &[("encoder", encoder.clone()), (epochs_key, epochs.map(|e| e.to_string()))])?;
            train(*agent, &cfg, data, out)
        }
        Command::Eval {
            common,
            checkpoint,
            expert,
            episodes,
            jobs,
            out,
        } => {
            let cfg = resolve_config(common, &[("eval_episodes", episodes.map(|e| e.to_string()))])?;
            let target = match (checkpoint, expert) {
                (Some(path), false) => EvalTarget::Checkpoint(path),
                _ => EvalTarget::Expert,
            };
            eval(&cfg, target, *jobs, out)
        }
        Command::Diag {
            common,
            which,
            steps,
            points,
            out,
        } => {
            let cfg = resolve_config(common, &[("diffusion_steps", steps.map(|t| t.to_string()))])?;
            diag(&cfg, *which, *points, out.as_deref())
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Min, lower quartile, median, upper quartile and max with linear
/// interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> [f64; 5] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.env(), cfg.episodes, &cfg.noise_levels, cfg.seed)?;
    ensure_parent(out)?;
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    let rewards: Vec<f64> = ds.trajectories.iter().map(|t| t.total_reward()).collect();
    let [min, q1, median, q3, max] = quartiles(&rewards);
    println!(
        "episodes={} steps={} reward_min={min} reward_q1={q1} reward_median={median} reward_q3={q3} reward_max={max}",
        ds.len(),
        ds.num_steps()
    );
    Ok(())
}

pub fn pretrain_encoder(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outputs = [out.join(ENCODER_FILE), out.join(LOSS_FILE)];
    RunManifest::new("pretrain", cfg, &[data], &outputs)?.write(&out.join(MANIFEST_FILE))?;
    let mut enc = EncoderNet::build(EncoderConfig::new(ds.dims.obs_dim), rng::derive_seed(cfg.seed, "init"))?;
    let report = pretrain(&mut enc, &ds, cfg.objective()?, &cfg.pretrain(), cfg.seed)?;
    enc.save(&outputs[0])?;
    report.save_csv(&outputs[1])?;
    println!("objective={} epochs={} final_loss={:?}", cfg.pretrain_objective, report.len(), report.final_loss());
    Ok(())
}

pub fn train(agent: Agent, cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let encoder = pipeline::load_encoder(&cfg.encoder, ds.dims.obs_dim)?;
    let prep = pipeline::prepare(cfg, &ds, encoder)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outputs = [out.join(MODEL_FILE), out.join(NORM_FILE), out.join(LOSS_FILE)];
    let encoder_path = PathBuf::from(&cfg.encoder);
    let mut inputs = vec![data];
    if cfg.encoder != "identity" {
        inputs.push(&encoder_path);
    }
    RunManifest::new(&format!("train {agent}"), cfg, &inputs, &outputs)?.write(&out.join(MANIFEST_FILE))?;
    let (policy, report) = pipeline::train(agent, cfg, &prep)?;
    policy.save(&outputs[0])?;
    prep.stats.save(&outputs[1])?;
    report.save_csv(&outputs[2])?;
    println!(
        "agent={agent} trajectories={}/{} epochs={} final_loss={}",
        prep.dataset.len(),
        ds.len(),
        report.len(),
        report.final_loss().map_or("none".into(), |l| l.to_string())
    );
    Ok(())
}

pub enum EvalTarget<'a> {
    Checkpoint(&'a Path),
    Expert,
}

pub fn eval(cfg: &RunConfig, target: EvalTarget, jobs: usize, out: &Path) -> Result<()> {
    if jobs == 0 {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    let mut env = cfg.env();
    let summary: EvalSummary = match target {
        EvalTarget::Checkpoint(path) => {
            let policy = AnyPolicy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if cfg.explicit.contains("action_dim") && cfg.action_dim != policy.action_dim() {
                bail!(UsageError(format!(
                    "checkpoint acts in {} dims, config asks for {}",
                    policy.action_dim(),
                    cfg.action_dim
                )));
            }
            env.action_dim = policy.action_dim();
            env.validate()?;
            evaluate(&policy, &env, cfg.eval_episodes, cfg.seed, jobs)?
        }
        EvalTarget::Expert => {
            let expert = ExpertPolicy {
                config: env.clone(),
                mode: None,
                noise_scale: 0.0,
            };
            evaluate(&expert, &env, cfg.eval_episodes, cfg.seed, jobs)?
        }
    };
    ensure_parent(out)?;
    std::fs::write(out, summary.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!("mean_reward={} success_rate={}%", summary.mean_reward, summary.success_rate);
    Ok(())
}

pub fn run_diag(cfg: &RunConfig, which: DiagKind, points: usize) -> Result<Diagnostic> {
    Ok(match which {
        DiagKind::Gradcheck => diagnostics::gradcheck(points, cfg.seed)?,
        DiagKind::Schedule => diagnostics::schedule(cfg.diffusion_steps)?,
        DiagKind::Bimodal => diagnostics::bimodal(&BimodalConfig::default(), cfg.seed)?,
    })
}

pub fn diag(cfg: &RunConfig, which: DiagKind, points: usize, out: Option<&Path>) -> Result<()> {
    let report = run_diag(cfg, which, points)?;
    println!("{report}");
    if let Some(path) = out {
        ensure_parent(path)?;
        std::fs::write(path, format!("{report}\n"))?;
    }
    if !report.passed() {
        bail!("diagnostic {} failed", report.name);
    }
    Ok(())
}
