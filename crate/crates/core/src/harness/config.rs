//! Flat `key = value` run configuration with dotted keys. Blank lines and
//! lines starting with `#` are ignored; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::algos::TrainConfig;
use crate::diffqp::SoftConfig;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Linear,
    Pendulum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    QLearn,
    A2c,
    Reinforce,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::QLearn => "qlearn",
            Algo::A2c => "a2c",
            Algo::Reinforce => "reinforce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    MpcSysid,
    KoopmanDict,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub algo: Algo,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub kind: InitKind,
    pub horizon: usize,
    pub sysid_samples: usize,
    pub sysid_noise: f64,
    pub sigma: f64,
    pub sigma_min: f64,
    pub n_mu: usize,
    pub m_eq: usize,
    pub scale: f64,
    pub hidden: Vec<usize>,
    pub pretrain_trajectories: usize,
    pub pretrain_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_rollouts: usize,
    pub every: usize,
    pub t_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub phases: Vec<Phase>,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub soft: SoftConfig,
    pub eval: EvalConfig,
    pub compare_rollouts: usize,
    pub compare_horizon: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "env",
    "env.t_max",
    "phases",
    "train.gamma",
    "train.alpha_actor",
    "train.alpha_critic",
    "train.tau_soft",
    "train.explore_sigma",
    "train.batch",
    "train.grad_clip",
    "train.replay_capacity",
    "init",
    "init.horizon",
    "init.sysid_samples",
    "init.sysid_noise",
    "init.sigma",
    "init.sigma_min",
    "init.n_mu",
    "init.m_eq",
    "init.scale",
    "init.hidden",
    "init.pretrain_trajectories",
    "init.pretrain_steps",
    "soft.rho_lin",
    "soft.rho_quad",
    "soft.soften_equalities",
    "eval.n_rollouts",
    "eval.every",
    "eval.t_max",
    "compare.n_rollouts",
    "compare.horizon",
    "seed",
    "output_dir",
];

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

/// Parses `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(invalid(format!("line {}: unknown key `{k}`", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(invalid(format!("line {}: duplicate key `{k}`", no + 1)));
        }
    }
    Ok(map)
}

struct Reader<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Reader<'_> {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, HarnessError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| invalid(format!("`{key}`: cannot parse `{s}`"))),
        }
    }
}

fn parse_phases(s: &str) -> Result<Vec<Phase>, HarnessError> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part
            .split_once(':')
            .ok_or_else(|| invalid(format!("phase `{part}`: expected `algo:episodes`")))?;
        let algo = match name.trim() {
            "qlearn" => Algo::QLearn,
            "a2c" => Algo::A2c,
            "reinforce" => Algo::Reinforce,
            other => return Err(invalid(format!("unknown algorithm `{other}`"))),
        };
        let episodes = count
            .trim()
            .parse()
            .map_err(|_| invalid(format!("phase `{part}`: bad episode count")))?;
        out.push(Phase { algo, episodes });
    }
    if out.is_empty() {
        return Err(invalid("at least one phase is required"));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let map = parse_pairs(text)?;
        let r = Reader { map: &map };
        let env = match map.get("env").map(String::as_str) {
            Some("linear") => EnvKind::Linear,
            Some("pendulum") => EnvKind::Pendulum,
            Some(other) => return Err(invalid(format!("unknown env `{other}`"))),
            None => return Err(invalid("`env` is required")),
        };
        let phases = parse_phases(map.get("phases").ok_or_else(|| invalid("`phases` is required"))?)?;
        let default_init = match env {
            EnvKind::Linear => InitKind::MpcSysid,
            EnvKind::Pendulum => InitKind::KoopmanDict,
        };
        let init_kind = match map.get("init").map(String::as_str) {
            None => default_init,
            Some("mpc_sysid") => InitKind::MpcSysid,
            Some("koopman_dict") => InitKind::KoopmanDict,
            Some("random") => InitKind::Random,
            Some(other) => return Err(invalid(format!("unknown init `{other}`"))),
        };
        let default_t_max = match env {
            EnvKind::Linear => 100,
            EnvKind::Pendulum => 200,
        };
        let t_max = r.get("env.t_max", default_t_max)?;
        let d = TrainConfig::default();
        let seed = r.get("seed", 0u64)?;
        let train = TrainConfig {
            gamma: r.get("train.gamma", d.gamma)?,
            alpha_actor: r.get("train.alpha_actor", d.alpha_actor)?,
            alpha_critic: r.get("train.alpha_critic", d.alpha_critic)?,
            tau_soft: r.get("train.tau_soft", d.tau_soft)?,
            t_max,
            episodes: phases.iter().map(|p| p.episodes).sum(),
            explore_sigma: r.get("train.explore_sigma", d.explore_sigma)?,
            batch: r.get("train.batch", d.batch)?,
            seed,
            grad_clip: r.get("train.grad_clip", d.grad_clip)?,
            replay_capacity: r.get("train.replay_capacity", d.replay_capacity)?,
        };
        let hidden = match map.get("init.hidden") {
            None => vec![16, 16],
            Some(s) if s.trim().is_empty() => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|w| w.trim().parse().map_err(|_| invalid(format!("`init.hidden`: bad width `{w}`"))))
                .collect::<Result<_, _>>()?,
        };
        let init = InitConfig {
            kind: init_kind,
            horizon: r.get("init.horizon", 10)?,
            sysid_samples: r.get("init.sysid_samples", 20)?,
            sysid_noise: r.get("init.sysid_noise", 0.05)?,
            sigma: r.get("init.sigma", 0.3)?,
            sigma_min: r.get("init.sigma_min", 1e-3)?,
            n_mu: r.get("init.n_mu", 6)?,
            m_eq: r.get("init.m_eq", 3)?,
            scale: r.get("init.scale", 0.3)?,
            hidden,
            pretrain_trajectories: r.get("init.pretrain_trajectories", 10)?,
            pretrain_steps: r.get("init.pretrain_steps", 20)?,
        };
        let ds = SoftConfig::default();
        let soft = SoftConfig {
            rho_lin: r.get("soft.rho_lin", ds.rho_lin)?,
            rho_quad: r.get("soft.rho_quad", ds.rho_quad)?,
            soften_equalities: r.get("soft.soften_equalities", ds.soften_equalities)?,
        };
        let eval = EvalConfig {
            n_rollouts: r.get("eval.n_rollouts", 20)?,
            every: r.get("eval.every", 10)?,
            t_max: r.get("eval.t_max", t_max)?,
        };
        let cfg = RunConfig {
            env,
            phases,
            train,
            init,
            soft,
            eval,
            compare_rollouts: r.get("compare.n_rollouts", 100)?,
            compare_horizon: r.get("compare.horizon", 10)?,
            seed,
            output_dir: PathBuf::from(r.get("output_dir", "runs/out".to_string())?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = &self.train;
        let checks: [(bool, &str); 14] = [
            (t.gamma > 0.0 && t.gamma <= 1.0, "train.gamma must lie in (0, 1]"),
            (t.alpha_actor >= 0.0, "train.alpha_actor must be nonnegative"),
            (t.alpha_critic >= 0.0, "train.alpha_critic must be nonnegative"),
            (t.tau_soft > 0.0 && t.tau_soft <= 1.0, "train.tau_soft must lie in (0, 1]"),
            (t.t_max >= 1, "env.t_max must be positive"),
            (t.explore_sigma > 0.0, "train.explore_sigma must be positive"),
            (t.batch >= 1, "train.batch must be positive"),
            (t.replay_capacity >= t.batch, "train.replay_capacity must hold a batch"),
            (t.grad_clip > 0.0, "train.grad_clip must be positive"),
            (self.init.horizon >= 1, "init.horizon must be positive"),
            (self.init.sigma > self.init.sigma_min && self.init.sigma_min > 0.0, "need init.sigma > init.sigma_min > 0"),
            (self.soft.rho_quad > 0.0 && self.soft.rho_lin >= 0.0, "soft.rho_quad must be positive"),
            (self.eval.n_rollouts >= 1 && self.eval.every >= 1, "eval.n_rollouts and eval.every must be positive"),
            (self.compare_rollouts >= 1, "compare.n_rollouts must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(invalid(msg));
            }
        }
        if self.init.kind == InitKind::MpcSysid && self.env != EnvKind::Linear {
            return Err(invalid("init = mpc_sysid needs env = linear"));
        }
        if self.init.kind != InitKind::MpcSysid && self.init.n_mu <= self.init.m_eq {
            return Err(invalid("init.n_mu must exceed init.m_eq"));
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line in key order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let env = match self.env {
            EnvKind::Linear => "linear",
            EnvKind::Pendulum => "pendulum",
        };
        let init = match self.init.kind {
            InitKind::MpcSysid => "mpc_sysid",
            InitKind::KoopmanDict => "koopman_dict",
            InitKind::Random => "random",
        };
        let phases: Vec<String> = self.phases.iter().map(|p| format!("{}:{}", p.algo.name(), p.episodes)).collect();
        let hidden: Vec<String> = self.init.hidden.iter().map(|h| h.to_string()).collect();
        let t = &self.train;
        let mut pairs: Vec<(&str, String)> = vec![
            ("env", env.into()),
            ("env.t_max", t.t_max.to_string()),
            ("phases", phases.join(",")),
            ("train.gamma", format!("{:?}", t.gamma)),
            ("train.alpha_actor", format!("{:?}", t.alpha_actor)),
            ("train.alpha_critic", format!("{:?}", t.alpha_critic)),
            ("train.tau_soft", format!("{:?}", t.tau_soft)),
            ("train.explore_sigma", format!("{:?}", t.explore_sigma)),
            ("train.batch", t.batch.to_string()),
            ("train.grad_clip", format!("{:?}", t.grad_clip)),
            ("train.replay_capacity", t.replay_capacity.to_string()),
            ("init", init.into()),
            ("init.horizon", self.init.horizon.to_string()),
            ("init.sysid_samples", self.init.sysid_samples.to_string()),
            ("init.sysid_noise", format!("{:?}", self.init.sysid_noise)),
            ("init.sigma", format!("{:?}", self.init.sigma)),
            ("init.sigma_min", format!("{:?}", self.init.sigma_min)),
            ("init.n_mu", self.init.n_mu.to_string()),
            ("init.m_eq", self.init.m_eq.to_string()),
            ("init.scale", format!("{:?}", self.init.scale)),
            ("init.hidden", hidden.join(",")),
            ("init.pretrain_trajectories", self.init.pretrain_trajectories.to_string()),
            ("init.pretrain_steps", self.init.pretrain_steps.to_string()),
            ("soft.rho_lin", format!("{:?}", self.soft.rho_lin)),
            ("soft.rho_quad", format!("{:?}", self.soft.rho_quad)),
            ("soft.soften_equalities", self.soft.soften_equalities.to_string()),
            ("eval.n_rollouts", self.eval.n_rollouts.to_string()),
            ("eval.every", self.eval.every.to_string()),
            ("eval.t_max", self.eval.t_max.to_string()),
            ("compare.n_rollouts", self.compare_rollouts.to_string()),
            ("compare.horizon", self.compare_horizon.to_string()),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse("env = linear\nphases = a2c:5\n").unwrap();
        assert_eq!(c.env, EnvKind::Linear);
        assert_eq!(c.init.kind, InitKind::MpcSysid);
        assert_eq!(c.train.episodes, 5);
        assert_eq!(c.phases, vec![Phase { algo: Algo::A2c, episodes: 5 }]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::parse("env = linear\nphases = a2c:5\ntrain.alpha_actr = 1\n").unwrap_err();
        assert!(matches!(e, HarnessError::ConfigInvalid(m) if m.contains("alpha_actr")));
    }

    #[test]
    fn comments_and_phase_lists() {
        let c = RunConfig::parse("# demo\nenv = linear\n\nphases = qlearn:100, a2c:100\nseed = 7\n").unwrap();
        assert_eq!(c.phases.len(), 2);
        assert_eq!(c.phases[0].algo, Algo::QLearn);
        assert_eq!(c.train.episodes, 200);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "env = linear\nphases = a2c:x\n",
            "env = cartpole\nphases = a2c:1\n",
            "env = linear\nphases = sarsa:1\n",
            "env = linear\nphases = a2c:1\ntrain.gamma = 0\n",
            "env = linear\nphases = a2c:1\neval.n_rollouts = 0\n",
            "env = linear\nphases = a2c:1\nseed = 1\nseed = 2\n",
            "env = linear\nphases =\n",
            "env = pendulum\nphases = a2c:1\ninit = mpc_sysid\n",
            "phases = a2c:1\n",
            "env linear\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn canonical_round_trips() {
        let c = RunConfig::parse("env = pendulum\nphases = a2c:3,qlearn:2\ninit.hidden = 8,8\ntrain.gamma = 0.99\n").unwrap();
        let again = RunConfig::parse(&c.canonical()).unwrap();
        assert_eq!(again, c);
    }
}
