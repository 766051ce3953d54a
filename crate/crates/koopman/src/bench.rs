//! Benchmark systems: a discrete linear map with inputs, a slow-manifold
//! nonlinear system, and an SIR model with vaccination, plus the input
//! policies that drive them. These double as test oracles and demo data
//! sources.
//!
//! Every simulator is deterministic given its parameters, policy seed,
//! initial condition, step count, and dt.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Trajectory;
use crate::error::{KoopmanError, Result};

/// Parameters of the discrete map `x_{k+1} = (μ x1, λ x2 + δ u)`.
/// Unstable parameter choices are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearExampleParams {
    pub mu: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl LinearExampleParams {
    /// μ = 0.1, λ = 1.5, δ = 1 (an unstable configuration).
    pub fn standard() -> Self {
        Self {
            mu: 0.1,
            lambda: 1.5,
            delta: 1.0,
        }
    }
}

/// Parameters of the continuous system `ẋ = (μ x1, λ (x2 − x1²) + δ u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowManifoldParams {
    pub mu: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl SlowManifoldParams {
    /// λ = 0.5, μ = 2, δ = 2.
    pub fn standard() -> Self {
        Self {
            mu: 2.0,
            lambda: 0.5,
            delta: 2.0,
        }
    }
}

/// SIR parameters: infection rate β, birth rate ν, death rate μ, recovery
/// rate γ. With ν = μ and nonnegative vaccination the total population is
/// conserved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirParams {
    pub beta: f64,
    pub nu: f64,
    pub mu: f64,
    pub gamma: f64,
}

impl SirParams {
    /// β = 10, ν = μ = γ = 1.
    pub fn standard() -> Self {
        Self {
            beta: 10.0,
            nu: 1.0,
            mu: 1.0,
            gamma: 1.0,
        }
    }
}

/// How the scalar input signal is generated during simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum InputPolicy {
    /// Zero-mean gaussian draws with the given variance.
    GaussianNoise {
        variance: f64,
        seed: u64,
    },
    /// Uniform draws in `[lo, hi)`.
    UniformNoise {
        lo: f64,
        hi: f64,
        seed: u64,
    },
    /// State feedback `u = -gain * x[state_index]`.
    StateFeedback {
        gain: f64,
        state_index: usize,
    },
    /// State feedback plus a seeded uniform exploration dither in
    /// `[-amplitude, amplitude)`. Pure feedback makes the input row of Ω an
    /// exact copy of a state row; the dither decorrelates them so the
    /// feedback law itself becomes identifiable.
    StateFeedbackDithered {
        gain: f64,
        state_index: usize,
        amplitude: f64,
        seed: u64,
    },
    /// First-order decay `u_{k+1} = (1 - rate * dt) u_k` from `u0`.
    ExpDecay {
        rate: f64,
        u0: f64,
    },
    /// Replay a fixed sequence; samples beyond its end are zero.
    Sequence(Vec<f64>),
    Zero,
}

impl InputPolicy {
    /// Default vaccination signal: a small uniform amount in [0, 0.005) per
    /// step.
    pub fn default_vaccination(seed: u64) -> Self {
        InputPolicy::UniformNoise {
            lo: 0.0,
            hi: 0.005,
            seed,
        }
    }
}

struct PolicyDriver<'a> {
    policy: &'a InputPolicy,
    rng: Option<ChaCha8Rng>,
    prev: f64,
}

impl<'a> PolicyDriver<'a> {
    fn new(policy: &'a InputPolicy, steps: usize, n_states: usize) -> Result<Self> {
        match policy {
            InputPolicy::GaussianNoise { variance, .. } if *variance < 0.0 => {
                return Err(KoopmanError::Rule(format!(
                    "gaussian input variance must be nonnegative, got {variance}"
                )));
            }
            InputPolicy::UniformNoise { lo, hi, .. } if !(hi > lo) => {
                return Err(KoopmanError::Rule(format!(
                    "uniform input range [{lo}, {hi}) is empty"
                )));
            }
            InputPolicy::StateFeedback { state_index, .. }
            | InputPolicy::StateFeedbackDithered { state_index, .. }
                if *state_index >= n_states =>
            {
                return Err(KoopmanError::Dimension(format!(
                    "feedback state index {state_index} out of range for {n_states} states"
                )));
            }
            InputPolicy::StateFeedbackDithered { amplitude, .. } if !(*amplitude > 0.0) => {
                return Err(KoopmanError::Rule(format!(
                    "feedback dither amplitude must be positive, got {amplitude}"
                )));
            }
            InputPolicy::Sequence(values) if values.len() < steps => {
                return Err(KoopmanError::InsufficientData(format!(
                    "input sequence has {} values but {} steps were requested",
                    values.len(),
                    steps
                )));
            }
            _ => {}
        }
        let rng = match policy {
            InputPolicy::GaussianNoise { seed, .. }
            | InputPolicy::UniformNoise { seed, .. }
            | InputPolicy::StateFeedbackDithered { seed, .. } => {
                Some(ChaCha8Rng::seed_from_u64(*seed))
            }
            _ => None,
        };
        Ok(Self {
            policy,
            rng,
            prev: 0.0,
        })
    }

    fn next(&mut self, k: usize, x: &[f64], dt: f64) -> f64 {
        let u = match self.policy {
            InputPolicy::GaussianNoise { variance, .. } => {
                if *variance == 0.0 {
                    0.0
                } else {
                    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std dev");
                    normal.sample(self.rng.as_mut().expect("seeded rng"))
                }
            }
            InputPolicy::UniformNoise { lo, hi, .. } => self
                .rng
                .as_mut()
                .expect("seeded rng")
                .random_range(*lo..*hi),
            InputPolicy::StateFeedback { gain, state_index } => -gain * x[*state_index],
            InputPolicy::StateFeedbackDithered {
                gain,
                state_index,
                amplitude,
                ..
            } => {
                let noise = self
                    .rng
                    .as_mut()
                    .expect("seeded rng")
                    .random_range(-amplitude..*amplitude);
                -gain * x[*state_index] + noise
            }
            InputPolicy::ExpDecay { rate, u0 } => {
                if k == 0 {
                    *u0
                } else {
                    (1.0 - rate * dt) * self.prev
                }
            }
            InputPolicy::Sequence(values) => values.get(k).copied().unwrap_or(0.0),
            InputPolicy::Zero => 0.0,
        };
        self.prev = u;
        u
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(KoopmanError::InsufficientData(
            "simulation needs at least 1 step".into(),
        ));
    }
    Ok(())
}

/// Iterate the discrete linear example for `steps` steps (dt = 1), recording
/// states and the applied input at every sample.
pub fn simulate_linear(
    params: &LinearExampleParams,
    policy: &InputPolicy,
    x0: [f64; 2],
    steps: usize,
) -> Result<Trajectory> {
    check_steps(steps)?;
    let dt = 1.0;
    let mut driver = PolicyDriver::new(policy, steps, 2)?;
    let mut states = DMatrix::zeros(2, steps + 1);
    let mut inputs = DMatrix::zeros(1, steps + 1);
    let mut x = x0;
    for k in 0..=steps {
        states[(0, k)] = x[0];
        states[(1, k)] = x[1];
        let u = driver.next(k, &x, dt);
        inputs[(0, k)] = u;
        if k < steps {
            x = [params.mu * x[0], params.lambda * x[1] + params.delta * u];
        }
    }
    Trajectory::new(states, Some(inputs), dt, "linear1")
}

/// Forward-Euler integration of the slow-manifold system. Also returns the
/// analytic derivatives of the lifted signals `(y1, y2, y3) = (x1, x2, x1²)`
/// evaluated at the samples: `(ẏ1, ẏ2, ẏ3) = (μ x1, λ(x2 − x1²) + δ u, 2 x1 ẋ1)`.
pub fn simulate_slow_manifold(
    params: &SlowManifoldParams,
    policy: &InputPolicy,
    x0: [f64; 2],
    steps: usize,
    dt: f64,
) -> Result<(Trajectory, DMatrix<f64>)> {
    check_steps(steps)?;
    if !(dt > 0.0) {
        return Err(KoopmanError::Dimension(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let mut driver = PolicyDriver::new(policy, steps, 2)?;
    let mut states = DMatrix::zeros(2, steps + 1);
    let mut inputs = DMatrix::zeros(1, steps + 1);
    let mut derivs = DMatrix::zeros(3, steps + 1);
    let mut x = x0;
    for k in 0..=steps {
        states[(0, k)] = x[0];
        states[(1, k)] = x[1];
        let u = driver.next(k, &x, dt);
        inputs[(0, k)] = u;
        let dx1 = params.mu * x[0];
        let dx2 = params.lambda * (x[1] - x[0] * x[0]) + params.delta * u;
        derivs[(0, k)] = dx1;
        derivs[(1, k)] = dx2;
        derivs[(2, k)] = 2.0 * x[0] * dx1;
        if k < steps {
            x = [x[0] + dt * dx1, x[1] + dt * dx2];
        }
    }
    let traj = Trajectory::new(states, Some(inputs), dt, "slowmanifold")?;
    Ok((traj, derivs))
}

/// Forward-Euler integration of the SIR model with a vaccination input.
/// Vaccination draws are clipped at zero. The initial compartments must sum
/// to 1 (tolerance 1e-9).
pub fn simulate_sir(
    params: &SirParams,
    vacc_policy: &InputPolicy,
    s0i0r0: [f64; 3],
    steps: usize,
    dt: f64,
) -> Result<Trajectory> {
    check_steps(steps)?;
    if !(dt > 0.0) {
        return Err(KoopmanError::Dimension(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let total: f64 = s0i0r0.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(KoopmanError::Dimension(format!(
            "initial compartments sum to {total}, expected 1"
        )));
    }
    let mut driver = PolicyDriver::new(vacc_policy, steps, 3)?;
    let mut states = DMatrix::zeros(3, steps + 1);
    let mut inputs = DMatrix::zeros(1, steps + 1);
    let mut x = s0i0r0;
    for k in 0..=steps {
        states[(0, k)] = x[0];
        states[(1, k)] = x[1];
        states[(2, k)] = x[2];
        let vacc = driver.next(k, &x, dt).max(0.0);
        inputs[(0, k)] = vacc;
        if k < steps {
            let [s, i, r] = x;
            let pop = s + i + r;
            let ds = -params.beta * s * i + params.nu * pop - params.mu * s - vacc;
            let di = params.beta * s * i - params.gamma * i - params.mu * i;
            let dr = params.gamma * i - params.mu * r + vacc;
            x = [s + dt * ds, i + dt * di, r + dt * dr];
            if params.nu == params.mu {
                debug_assert!(
                    (x.iter().sum::<f64>() - total).abs() <= 1e-9,
                    "population drifted at step {k}"
                );
            }
        }
    }
    Trajectory::new(states, Some(inputs), dt, "sir")
}
