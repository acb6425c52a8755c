//! Benchmark environments: an unstable box-constrained linear system and a
//! torque-limited pendulum. Both are pure transition functions of
//! `(state, input)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Per-coordinate closed interval bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub low: DVector<f64>,
    pub high: DVector<f64>,
}

impl BoxBounds {
    pub fn symmetric(n: usize, half_width: f64) -> Self {
        Self {
            low: DVector::from_element(n, -half_width),
            high: DVector::from_element(n, half_width),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.low.iter().zip(self.high.iter()))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn clip(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.low[i], self.high[i]))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| rng.random_range(self.low[i]..=self.high[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub n_x: usize,
    pub m_u: usize,
    pub state_box: BoxBounds,
    pub input_box: BoxBounds,
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEnv {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub init_box: BoxBounds,
    pub terminate_inner: BoxBounds,
    pub terminate_outer: BoxBounds,
    pub input_box: BoxBounds,
}

impl Default for LinearEnv {
    fn default() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.53, 0.25, -0.56, -0.52]),
            b: DMatrix::from_row_slice(2, 1, &[1.23, -0.96]),
            init_box: BoxBounds::symmetric(2, 2.0),
            terminate_inner: BoxBounds::symmetric(2, 0.1),
            terminate_outer: BoxBounds::symmetric(2, 4.0),
            input_box: BoxBounds::symmetric(1, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumEnv {
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub dt: f64,
    pub max_speed: f64,
    pub max_torque: f64,
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self {
            g: 10.0,
            m: 1.0,
            l: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 10.0,
        }
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

impl PendulumEnv {
    /// `½θ̇² + (3g/2l)·cos θ`, conserved by the continuous dynamics with u = 0.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * x[1] * x[1] + 1.5 * self.g / self.l * x[0].cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Linear(LinearEnv),
    Pendulum(PendulumEnv),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: DVector<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn linear() -> Self {
        Env::Linear(LinearEnv::default())
    }

    pub fn pendulum() -> Self {
        Env::Pendulum(PendulumEnv::default())
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::Linear(e) => EnvSpec {
                n_x: 2,
                m_u: 1,
                state_box: e.terminate_outer.clone(),
                input_box: e.input_box.clone(),
                dt: None,
            },
            Env::Pendulum(p) => EnvSpec {
                n_x: 2,
                m_u: 1,
                state_box: BoxBounds {
                    low: DVector::from_vec(vec![-PI, -p.max_speed]),
                    high: DVector::from_vec(vec![PI, p.max_speed]),
                },
                input_box: BoxBounds::symmetric(1, p.max_torque),
                dt: Some(p.dt),
            },
        }
    }

    pub fn reset(&self, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            Env::Linear(e) => e.init_box.sample(rng),
            Env::Pendulum(_) => {
                // uniform over (−π, π]
                let theta = PI - rng.random_range(0.0..2.0 * PI);
                let rate = rng.random_range(-1.0..=1.0);
                DVector::from_vec(vec![theta, rate])
            }
        }
    }

    /// Whether an episode starting (or arriving) at `x` has ended.
    pub fn is_terminal(&self, x: &DVector<f64>) -> bool {
        match self {
            Env::Linear(e) => e.terminate_inner.contains(x) || !e.terminate_outer.contains(x),
            Env::Pendulum(_) => false,
        }
    }

    /// Stage reward; `u` is clipped to the input box first.
    pub fn stage_reward(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let u = self.spec().input_box.clip(u);
        match self {
            Env::Linear(_) => -(x.norm_squared() + u.norm_squared()),
            Env::Pendulum(_) => {
                let theta = wrap_angle(x[0]);
                -(theta * theta + 0.1 * x[1] * x[1] + 0.001 * u[0] * u[0])
            }
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Step {
        let reward = self.stage_reward(x, u);
        match self {
            Env::Linear(e) => {
                let u = e.input_box.clip(u);
                let next_state = &e.a * x + &e.b * u;
                let done = self.is_terminal(&next_state);
                Step {
                    next_state,
                    reward,
                    done,
                }
            }
            Env::Pendulum(p) => {
                let u = u[0].clamp(-p.max_torque, p.max_torque);
                let (theta, rate) = (x[0], x[1]);
                let theta_next = theta + rate * p.dt;
                let rate_next = rate - 1.5 * p.g / p.l * p.dt * (theta + PI).sin()
                    + 1.5 / (p.m * p.l * p.l) * p.dt * u;
                let rate_next = rate_next.clamp(-p.max_speed, p.max_speed);
                Step {
                    next_state: DVector::from_vec(vec![wrap_angle(theta_next), rate_next]),
                    reward,
                    done: false,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn linear_first_column() {
        let env = Env::linear();
        let s = env.step(&v(&[1.0, 0.0]), &v(&[0.0]));
        assert_eq!(s.next_state, v(&[1.53, -0.56]));
        assert_eq!(s.reward, -1.0);
        assert!(!s.done);
    }

    #[test]
    fn linear_origin_is_terminal() {
        let env = Env::linear();
        let s = env.step(&v(&[0.0, 0.0]), &v(&[0.0]));
        assert_eq!(s.next_state, v(&[0.0, 0.0]));
        assert_eq!(s.reward, 0.0);
        assert!(s.done);
    }

    #[test]
    fn linear_leaving_outer_box_ends_episode() {
        let env = Env::linear();
        let s = env.step(&v(&[3.0, 0.0]), &v(&[0.0]));
        assert!(s.done);
        assert_eq!(s.reward, -9.0);
    }

    #[test]
    fn rewards_by_hand() {
        assert_eq!(Env::linear().stage_reward(&v(&[1.0, 1.0]), &v(&[1.0])), -3.0);
        let r = Env::pendulum().stage_reward(&v(&[PI / 2.0, 0.0]), &v(&[0.0]));
        assert!((r + (PI / 2.0).powi(2)).abs() < 1e-12);
        assert_eq!(Env::linear().stage_reward(&v(&[0.0, 0.0]), &v(&[0.0])), 0.0);
        assert_eq!(Env::pendulum().stage_reward(&v(&[0.0, 0.0]), &v(&[0.0])), 0.0);
    }

    #[test]
    fn input_is_clipped() {
        let env = Env::linear();
        let a = env.step(&v(&[1.0, 1.0]), &v(&[5.0]));
        let b = env.step(&v(&[1.0, 1.0]), &v(&[1.0]));
        assert_eq!(a, b);
    }

    #[test]
    fn pendulum_upright_equilibrium() {
        let s = Env::pendulum().step(&v(&[0.0, 0.0]), &v(&[0.0]));
        assert!(s.next_state.amax() < 1e-15);
        assert_eq!(s.reward, 0.0);
        assert!(!s.done);
    }

    #[test]
    fn pendulum_update_order() {
        // θ uses the pre-update rate; rate picks up gravity and torque
        let env = Env::pendulum();
        let s = env.step(&v(&[0.5, 1.0]), &v(&[2.0]));
        let theta = 0.5 + 1.0 * 0.05;
        let rate = 1.0 + 15.0 * 0.05 * 0.5f64.sin() + 1.5 * 0.05 * 2.0;
        assert!((s.next_state[0] - theta).abs() < 1e-15);
        assert!((s.next_state[1] - rate).abs() < 1e-15);
    }

    #[test]
    fn pendulum_clips_speed_and_wraps() {
        let env = Env::pendulum();
        let s = env.step(&v(&[PI - 0.01, 7.9]), &v(&[10.0]));
        assert_eq!(s.next_state[1], 8.0);
        assert!(s.next_state[0] < 0.0 && s.next_state[0] > -PI);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn seeded_resets_repeat() {
        for env in [Env::linear(), Env::pendulum()] {
            let a = env.reset(&mut ChaCha8Rng::seed_from_u64(5));
            let b = env.reset(&mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn linear_resets_are_uniform_in_init_box() {
        let env = Env::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut mean = DVector::zeros(2);
        for _ in 0..n {
            let x = env.reset(&mut rng);
            assert!(x.amax() <= 2.0);
            mean += x;
        }
        mean /= n as f64;
        assert!(mean.amax() < 0.05);
    }

    #[test]
    fn pendulum_resets_cover_circle() {
        let env = Env::pendulum();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = env.reset(&mut rng);
            assert!(x[0] > -PI && x[0] <= PI);
            assert!(x[1].abs() <= 1.0);
        }
    }

    #[test]
    fn linear_system_is_open_loop_unstable() {
        let Env::Linear(e) = Env::linear() else { unreachable!() };
        let eig = e.a.complex_eigenvalues();
        let rho = eig.iter().map(|c| c.norm()).fold(0.0, f64::max);
        // eigenvalues (1.01 ± √3.6425)/2
        let expected = (1.01 + (1.01f64 * 1.01 + 4.0 * 0.6556).sqrt()) / 2.0;
        assert!((rho - expected).abs() < 1e-12);
        assert!(rho > 1.45 && rho < 1.46);
    }

    #[test]
    fn pendulum_energy_drift_per_step_is_bounded() {
        // explicit Euler drift with u = 0 and no clipping: |ΔE| ≤ C·dt,
        // C = 13.75 is the measured sup over this grid (13.718) with margin
        const C: f64 = 13.75;
        let env = Env::pendulum();
        let Env::Pendulum(p) = &env else { unreachable!() };
        let mut worst: f64 = 0.0;
        for i in 0..=200 {
            for j in 0..=120 {
                let x = v(&[-PI + 2.0 * PI * i as f64 / 200.0, -6.0 + 12.0 * j as f64 / 120.0]);
                let s = env.step(&x, &v(&[0.0]));
                let de = (p.energy(&s.next_state) - p.energy(&x)).abs();
                worst = worst.max(de / p.dt);
            }
        }
        assert!(worst <= C, "drift {worst}");
    }

    #[test]
    fn steps_are_pure() {
        for env in [Env::linear(), Env::pendulum()] {
            let x = v(&[0.3, -0.7]);
            let u = v(&[0.4]);
            assert_eq!(env.step(&x, &u), env.step(&x, &u));
        }
    }
}
