//! Experiment orchestration: initialization, the phase loop over training
//! algorithms, periodic Monte-Carlo evaluation, checkpoints and CSV output.

pub mod artifacts;
pub mod checkpoint;
pub mod config;

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::algos::{a2c_episode, q_learning_episode, reinforce_episode, EpisodeStats, ReplayBuffer};
use crate::baseline::{dare, mc_return_from, mpc_policy, BaselineError, MpcProblem, ReturnEstimate};
use crate::diffqp::QpError;
use crate::envs::Env;
use crate::lifting::{
    build_mpc_lifting, edmd_pretrain, sysid_least_squares, Dictionary, LiftingError, LiftingNet, PretrainConfig,
    Trajectory,
};
use crate::unified::UnifiedParams;

use artifacts::{content_hash, fmt_f64, stream, write_atomic, Cell, CsvTable, Stream};
pub use checkpoint::CheckpointError;
use config::{Algo, EnvKind, InitKind, Phase, RunConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("environment mismatch: {0}")]
    EnvMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) | HarnessError::EnvMismatch(_) => 2,
            HarnessError::Numerical(_) => 3,
            HarnessError::Checkpoint(_) | HarnessError::Io(_) => 1,
        }
    }
}

impl From<QpError> for HarnessError {
    fn from(e: QpError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<LiftingError> for HarnessError {
    fn from(e: LiftingError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

impl From<BaselineError> for HarnessError {
    fn from(e: BaselineError) -> Self {
        HarnessError::Numerical(e.to_string())
    }
}

pub const CURVES_HEADER: [&str; 6] = ["episode", "phase", "return_mean", "return_stderr", "critic_loss", "td_mean_sq"];
pub const EPISODES_HEADER: [&str; 7] = ["episode", "phase", "steps", "updates", "episode_return", "critic_loss", "td_mean_sq"];
pub const COMPARE_HEADER: [&str; 3] = ["initial_state", "learned_return", "mpc_return"];
pub const SUMMARY_HEADER: [&str; 6] = ["n_rollouts", "learned_mean", "learned_stderr", "mpc_mean", "mpc_stderr", "ratio"];

pub fn make_env(cfg: &RunConfig) -> Env {
    match cfg.env {
        EnvKind::Linear => Env::linear(),
        EnvKind::Pendulum => Env::pendulum(),
    }
}

/// Diagnostics of the initialization step.
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub sysid_residual: Option<f64>,
    pub pretrain_mse: Option<f64>,
}

fn random_transitions(
    env: &Env,
    n: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let input_box = env.spec().input_box;
    (0..n)
        .map(|_| {
            let x = env.reset(rng);
            let u = input_box.sample(rng);
            let mut xn = env.step(&x, &u).next_state;
            for v in xn.iter_mut() {
                *v += noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            (x, u, xn)
        })
        .collect()
}

fn pretrain_trajectories(env: &Env, n: usize, steps: usize, rng: &mut impl Rng) -> Vec<Trajectory> {
    let input_box = env.spec().input_box;
    (0..n)
        .map(|_| {
            let mut x = env.reset(rng);
            let mut t = Trajectory {
                states: vec![x.clone()],
                inputs: Vec::new(),
            };
            for _ in 0..steps {
                let u = input_box.sample(rng);
                x = env.step(&x, &u).next_state;
                t.inputs.push(u);
                t.states.push(x.clone());
            }
            t
        })
        .collect()
}

/// Builds the starting θ for a run from the `init` stream.
pub fn initial_theta(cfg: &RunConfig) -> Result<(UnifiedParams, InitReport), HarnessError> {
    let env = make_env(cfg);
    let spec = env.spec();
    let mut rng = stream(cfg.seed, Stream::Init);
    let ic = &cfg.init;
    match ic.kind {
        InitKind::MpcSysid => {
            let Env::Linear(lin) = &env else {
                return Err(HarnessError::EnvMismatch("mpc_sysid needs the linear system".into()));
            };
            let data = random_transitions(&env, ic.sysid_samples, ic.sysid_noise, &mut rng);
            let model = sysid_least_squares(&data)?;
            let n = lin.a.nrows();
            let l = build_mpc_lifting(&model, ic.horizon, &DMatrix::identity(n, n), &spec.state_box, &spec.input_box);
            let theta = UnifiedParams::from_mpc(&l, ic.sigma, ic.sigma_min, cfg.soft.clone());
            Ok((
                theta,
                InitReport {
                    sysid_residual: Some(model.residual_norm),
                    pretrain_mse: None,
                },
            ))
        }
        InitKind::KoopmanDict | InitKind::Random => {
            let dict = match cfg.env {
                EnvKind::Pendulum => Dictionary::pendulum(),
                EnvKind::Linear => Dictionary::identity(spec.n_x),
            };
            let mut sizes = vec![spec.n_x];
            sizes.extend(&ic.hidden);
            sizes.push(dict.n_z());
            let mut net = LiftingNet::mlp(&sizes, &mut rng);
            let mut pretrain_mse = None;
            if ic.kind == InitKind::KoopmanDict {
                let trajs = pretrain_trajectories(&env, ic.pretrain_trajectories, ic.pretrain_steps, &mut rng);
                let fit = edmd_pretrain(&dict, &trajs, &net, &PretrainConfig::default())?;
                net = fit.net;
                pretrain_mse = Some(fit.mse);
            }
            let theta = UnifiedParams::random(
                net,
                ic.n_mu,
                ic.m_eq,
                &spec.input_box,
                ic.scale,
                ic.sigma,
                ic.sigma_min,
                cfg.soft.clone(),
                &mut rng,
            );
            Ok((
                theta,
                InitReport {
                    sysid_residual: None,
                    pretrain_mse,
                },
            ))
        }
    }
}

/// Initial states of the periodic evaluation; identical at every eval point.
pub fn eval_states(cfg: &RunConfig) -> Vec<DVector<f64>> {
    let env = make_env(cfg);
    let mut rng = stream(cfg.seed, Stream::Eval);
    (0..cfg.eval.n_rollouts).map(|_| env.reset(&mut rng)).collect()
}

/// Undiscounted return of the deterministic policy from each state.
pub fn evaluate_policy(env: &Env, theta: &UnifiedParams, states: &[DVector<f64>], t_max: usize) -> Result<ReturnEstimate, HarnessError> {
    Ok(mc_return_from(env, |x: &DVector<f64>| theta.policy(x), states, 1.0, t_max)?)
}

/// Mean `|θ|` over the last `window` steps of a deterministic pendulum
/// rollout of `t_max` steps, one entry per initial state.
pub fn final_angle_error(
    env: &Env,
    theta: &UnifiedParams,
    states: &[DVector<f64>],
    t_max: usize,
    window: usize,
) -> Result<Vec<f64>, HarnessError> {
    let mut out = Vec::with_capacity(states.len());
    for x0 in states {
        let mut x = x0.clone();
        let mut angles = Vec::with_capacity(t_max);
        for _ in 0..t_max {
            let u = theta.policy(&x)?;
            x = env.step(&x, &u).next_state;
            angles.push(x[0].abs());
        }
        let tail = &angles[angles.len().saturating_sub(window)..];
        out.push(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub episode: usize,
    pub phase: String,
    pub estimate: ReturnEstimate,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub curves: CsvTable,
    pub episodes: CsvTable,
    pub evals: Vec<EvalPoint>,
    pub theta: UnifiedParams,
    pub init_report: InitReport,
}

fn state_label(x: &DVector<f64>) -> String {
    x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

fn write_manifest(cfg: &RunConfig, dir: &Path, status: &str, files: &[&str]) -> std::io::Result<()> {
    let canonical = cfg.canonical();
    let mut s = String::new();
    s.push_str(&format!("status = {status}\n"));
    s.push_str(&format!("input_hash = {}\n", content_hash(canonical.as_bytes())));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    s.push_str("\n[config]\n");
    s.push_str(&canonical);
    s.push_str("\n[artifacts]\n");
    for f in files {
        if let Ok(bytes) = std::fs::read(dir.join(f)) {
            s.push_str(&format!("{f} = {}\n", content_hash(&bytes)));
        }
    }
    write_atomic(&dir.join("manifest.txt"), s.as_bytes())
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    env: Env,
    theta: UnifiedParams,
    target: UnifiedParams,
    buffer: ReplayBuffer,
    rollout_rng: rand_chacha::ChaCha8Rng,
    explore_rng: rand_chacha::ChaCha8Rng,
    replay_rng: rand_chacha::ChaCha8Rng,
}

impl Trainer<'_> {
    fn episode(&mut self, algo: Algo) -> Result<EpisodeStats, HarnessError> {
        let x0 = self.env.reset(&mut self.rollout_rng);
        let t = &self.cfg.train;
        let stats = match algo {
            Algo::QLearn => q_learning_episode(
                &self.env,
                &mut self.theta,
                &mut self.target,
                &mut self.buffer,
                t,
                &x0,
                &mut self.explore_rng,
                &mut self.replay_rng,
            )?,
            Algo::A2c | Algo::Reinforce => {
                let f = if algo == Algo::A2c { a2c_episode } else { reinforce_episode };
                let (th, tg, s) = f(&self.env, &self.theta, &self.target, t, &x0, &mut self.explore_rng)?;
                self.theta = th;
                self.target = tg;
                s
            }
        };
        if !self.theta.to_flat().iter().all(|v| v.is_finite()) {
            return Err(HarnessError::Numerical("non-finite parameters after update".into()));
        }
        Ok(stats)
    }
}

/// Executes a full run and writes its artifacts into `cfg.output_dir`. On a
/// training failure the artifacts gathered so far are still written and the
/// manifest records the error.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts, HarnessError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let (theta, init_report) = initial_theta(cfg)?;
    let env = make_env(cfg);
    let states = eval_states(cfg);

    let mut curves = CsvTable::new(&CURVES_HEADER);
    let mut episodes = CsvTable::new(&EPISODES_HEADER);
    let mut evals = Vec::new();
    let mut tr = Trainer {
        cfg,
        env: env.clone(),
        target: theta.clone(),
        theta,
        buffer: ReplayBuffer::new(cfg.train.replay_capacity),
        rollout_rng: stream(cfg.seed, Stream::Rollout),
        explore_rng: stream(cfg.seed, Stream::Exploration),
        replay_rng: stream(cfg.seed, Stream::Replay),
    };

    let mut record_eval = |episode: usize, phase: &str, theta: &UnifiedParams, window: &[EpisodeStats], curves: &mut CsvTable| -> Result<(), HarnessError> {
        let est = evaluate_policy(&env, theta, &states, cfg.eval.t_max)?;
        let (loss, td) = if window.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n = window.len() as f64;
            (
                window.iter().map(|s| s.critic_loss).sum::<f64>() / n,
                window.iter().map(|s| s.td_mean_sq).sum::<f64>() / n,
            )
        };
        curves.push(vec![episode.into(), phase.into(), est.mean.into(), est.std_error.into(), loss.into(), td.into()]);
        checkpoint::save(theta, &dir.join(format!("checkpoints/episode_{episode:05}.ckpt")))?;
        evals.push(EvalPoint {
            episode,
            phase: phase.to_string(),
            estimate: est,
        });
        Ok(())
    };

    let mut outcome: Result<(), HarnessError> = record_eval(0, "init", &tr.theta, &[], &mut curves);
    let mut episode = 0usize;
    let mut window: Vec<EpisodeStats> = Vec::new();
    'phases: for Phase { algo, episodes: count } in &cfg.phases {
        if outcome.is_err() {
            break;
        }
        for _ in 0..*count {
            let stats = match tr.episode(*algo) {
                Ok(s) => s,
                Err(e) => {
                    outcome = Err(e);
                    break 'phases;
                }
            };
            episode += 1;
            episodes.push(vec![
                episode.into(),
                algo.name().into(),
                stats.steps.into(),
                stats.updates.into(),
                stats.episode_return.into(),
                stats.critic_loss.into(),
                stats.td_mean_sq.into(),
            ]);
            window.push(stats);
            if episode % cfg.eval.every == 0 {
                if let Err(e) = record_eval(episode, algo.name(), &tr.theta, &window, &mut curves) {
                    outcome = Err(e);
                    break 'phases;
                }
                window.clear();
            }
        }
    }
    drop(record_eval);

    curves.write(&dir.join("curves.csv"))?;
    episodes.write(&dir.join("episodes.csv"))?;
    checkpoint::save(&tr.theta, &dir.join("final.ckpt"))?;
    let status = match &outcome {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    write_manifest(cfg, &dir, &status, &["curves.csv", "episodes.csv", "final.ckpt"])?;
    outcome?;
    Ok(RunArtifacts {
        dir,
        curves,
        episodes,
        evals,
        theta: tr.theta,
        init_report,
    })
}

/// The two-phase preset: 100 Q-learning episodes, then 100 A2C episodes on
/// the same θ.
pub fn switch_demo_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.phases = vec![
        Phase {
            algo: Algo::QLearn,
            episodes: 100,
        },
        Phase {
            algo: Algo::A2c,
            episodes: 100,
        },
    ];
    c.train.episodes = 200;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub learned: ReturnEstimate,
    pub mpc: ReturnEstimate,
    /// `mpc_mean / learned_mean`; above 1 means the learned policy collects
    /// more reward than MPC (both returns are negative).
    pub ratio: f64,
}

/// Paired evaluation of the deterministic policy of `theta` against the
/// true-model MPC; writes `compare.csv` and `compare_summary.csv`.
pub fn compare_mpc(cfg: &RunConfig, theta: &UnifiedParams) -> Result<Comparison, HarnessError> {
    if cfg.env != EnvKind::Linear {
        return Err(HarnessError::EnvMismatch("MPC comparison is defined for the linear system only".into()));
    }
    if cfg.compare_rollouts == 0 {
        return Err(HarnessError::ConfigInvalid("compare.n_rollouts must be positive".into()));
    }
    let env = make_env(cfg);
    let Env::Linear(lin) = &env else { unreachable!() };
    let mpc = MpcProblem::for_linear_env(lin, cfg.compare_horizon)?;
    let mut rng = stream(cfg.seed, Stream::Compare);
    let states: Vec<_> = (0..cfg.compare_rollouts).map(|_| env.reset(&mut rng)).collect();
    let learned = evaluate_policy(&env, theta, &states, cfg.eval.t_max)?;
    let baseline = mc_return_from(&env, |x: &DVector<f64>| mpc_policy(&mpc, x), &states, 1.0, cfg.eval.t_max)?;
    let ratio = if learned.mean == baseline.mean {
        1.0
    } else {
        baseline.mean / learned.mean
    };

    let mut table = CsvTable::new(&COMPARE_HEADER);
    for ((x, l), (_, m)) in learned.per_rollout.iter().zip(&baseline.per_rollout) {
        table.push(vec![Cell::Text(state_label(x)), (*l).into(), (*m).into()]);
    }
    let mut summary = CsvTable::new(&SUMMARY_HEADER);
    summary.push(vec![
        cfg.compare_rollouts.into(),
        learned.mean.into(),
        learned.std_error.into(),
        baseline.mean.into(),
        baseline.std_error.into(),
        ratio.into(),
    ]);
    table.write(&cfg.output_dir.join("compare.csv"))?;
    summary.write(&cfg.output_dir.join("compare_summary.csv"))?;
    Ok(Comparison {
        learned,
        mpc: baseline,
        ratio,
    })
}

/// The Riccati terminal weight of the true linear system.
pub fn linear_terminal_weight() -> Result<DMatrix<f64>, HarnessError> {
    let Env::Linear(lin) = Env::linear() else { unreachable!() };
    Ok(dare(&lin.a, &lin.b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1))?)
}
