//! Operator estimators: DMD, DMDc, and KIC fits by truncated-pseudoinverse
//! regression, including the lifted variant with separate input and output
//! dictionaries.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{SnapshotSet, Trajectory};
use crate::error::{KoopmanError, Result};
use crate::linalg::{self, TruncationRule};
use crate::models::{Diagnostics, KoopmanModel, TimeMode};
use crate::observables::{restriction_indices, ObservableSpec, TermKind};

/// Seeded uniform perturbation applied to the input rows of `Ω` only, to
/// decorrelate state-feedback inputs from the states they feed back on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dither {
    pub amplitude: f64,
    pub seed: u64,
}

impl Dither {
    pub fn new(amplitude: f64, seed: u64) -> Self {
        Self { amplitude, seed }
    }

    /// Default amplitude of 1e-3 with an explicit seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            amplitude: 1e-3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub truncation: TruncationRule,
    pub time_mode: TimeMode,
    pub dither: Option<Dither>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            truncation: TruncationRule::default(),
            time_mode: TimeMode::DiscreteMap,
            dither: None,
        }
    }
}

impl FitOptions {
    pub fn continuous() -> Self {
        Self {
            time_mode: TimeMode::ContinuousDerivative,
            ..Self::default()
        }
    }

    pub fn with_dither(mut self, dither: Dither) -> Self {
        self.dither = Some(dither);
        self
    }

    fn validate(&self) -> Result<()> {
        if let Some(d) = &self.dither {
            if !(d.amplitude > 0.0) {
                return Err(KoopmanError::Rule(format!(
                    "dither amplitude must be positive, got {}",
                    d.amplitude
                )));
            }
        }
        Ok(())
    }
}

/// Which future-input convention the KIC operator is fit under: `* = u`
/// keeps input rows in the targets so the operator also propagates the
/// input; `* = 0` drops them, which coincides with DMDc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KicMode {
    WithInputDynamics,
    NoInputDynamics,
}

struct Regression {
    operator: DMatrix<f64>,
    diagnostics: Diagnostics,
}

fn regress(
    targets: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    rule: &TruncationRule,
) -> Result<Regression> {
    let factors = linalg::svd(omega, rule)?;
    let rank_deficient = factors.rank() < omega.nrows();
    let operator = targets * factors.pseudoinverse();
    let misfit = targets - &operator * omega;
    let row_residuals = (0..targets.nrows())
        .map(|i| misfit.row(i).norm() / targets.row(i).norm().max(1e-300))
        .collect();
    Ok(Regression {
        operator,
        diagnostics: Diagnostics {
            row_residuals,
            rank_deficient,
        },
    })
}

fn apply_dither(omega: &mut DMatrix<f64>, input_rows: &[usize], dither: &Dither) {
    let mut rng = ChaCha8Rng::seed_from_u64(dither.seed);
    for &i in input_rows {
        for j in 0..omega.ncols() {
            omega[(i, j)] += rng.random_range(-dither.amplitude..dither.amplitude);
        }
    }
}

/// DMD on a measurement pair: `A = Z · Y†`, square `n_y × n_y`.
pub fn fit_dmd(ss: &SnapshotSet, opts: &FitOptions) -> Result<KoopmanModel> {
    opts.validate()?;
    if ss.upsilon().is_some() {
        return Err(KoopmanError::WrongEstimator(
            "snapshot set carries input blocks; use fit_dmdc or fit_kic".into(),
        ));
    }
    let reg = regress(ss.z(), ss.y(), &opts.truncation)?;
    let spec = ObservableSpec::identity(ss.n_y(), 0);
    KoopmanModel::new(
        reg.operator,
        spec.clone(),
        spec,
        opts.time_mode,
        ss.dt(),
        reg.diagnostics,
    )
}

/// DMDc on a measurement trio: `G̃ = Z · Ω†` with `Ω = [Y; Υ]`, shape
/// `n_y × (n_y + n_γ)`. `Ξ` is ignored when present.
pub fn fit_dmdc(ss: &SnapshotSet, opts: &FitOptions) -> Result<KoopmanModel> {
    opts.validate()?;
    if ss.upsilon().is_none() {
        return Err(KoopmanError::MissingInput(
            "DMDc needs an input block Υ; use fit_dmd for autonomous data".into(),
        ));
    }
    let mut omega = ss.omega();
    if let Some(d) = &opts.dither {
        let rows: Vec<usize> = (ss.n_y()..ss.n_y() + ss.n_gamma()).collect();
        apply_dither(&mut omega, &rows, d);
    }
    let reg = regress(ss.z(), &omega, &opts.truncation)?;
    KoopmanModel::new(
        reg.operator,
        ObservableSpec::identity(ss.n_y(), ss.n_gamma()),
        ObservableSpec::state_identity(ss.n_y(), ss.n_gamma()),
        opts.time_mode,
        ss.dt(),
        reg.diagnostics,
    )
}

/// KIC on a measurement trio. `WithInputDynamics` fits the square operator
/// `G = Δ · Ω†` over stacked state and input rows (requires `Ξ`);
/// `NoInputDynamics` restricts the targets to the state rows, which is the
/// DMDc regression.
pub fn fit_kic(ss: &SnapshotSet, mode: KicMode, opts: &FitOptions) -> Result<KoopmanModel> {
    opts.validate()?;
    if ss.upsilon().is_none() {
        return Err(KoopmanError::MissingInput(
            "KIC needs an input block Υ; use fit_dmd for autonomous data".into(),
        ));
    }
    match mode {
        KicMode::NoInputDynamics => fit_dmdc(ss, opts),
        KicMode::WithInputDynamics => {
            let delta = ss.delta()?;
            let mut omega = ss.omega();
            if let Some(d) = &opts.dither {
                let rows: Vec<usize> = (ss.n_y()..ss.n_y() + ss.n_gamma()).collect();
                apply_dither(&mut omega, &rows, d);
            }
            let reg = regress(&delta, &omega, &opts.truncation)?;
            let spec = ObservableSpec::identity(ss.n_y(), ss.n_gamma());
            KoopmanModel::new(
                reg.operator,
                spec.clone(),
                spec,
                opts.time_mode,
                ss.dt(),
                reg.diagnostics,
            )
        }
    }
}

/// KIC with observable lifting and separate input/output dictionaries:
/// `Ω` holds the input terms evaluated along the trajectory, the targets hold
/// the output terms one sample later (discrete) or their supplied analytic
/// derivatives (continuous). Returns the rectangular operator
/// `K (|output| × |input|)`.
///
/// `derivs` gives the output-term derivatives at every sample and is required
/// exactly in `ContinuousDerivative` mode. A closure-violating output term is
/// not rejected here; the fit proceeds and the per-row residuals expose it.
pub fn fit_kic_lifted(
    traj: &Trajectory,
    input_spec: &ObservableSpec,
    output_spec: &ObservableSpec,
    mode: KicMode,
    opts: &FitOptions,
    derivs: Option<&DMatrix<f64>>,
) -> Result<KoopmanModel> {
    opts.validate()?;
    restriction_indices(input_spec, output_spec)?;
    if input_spec.n_x() != traj.n_states() {
        return Err(KoopmanError::Dimension(format!(
            "spec expects {} state variables but the trajectory has {}",
            input_spec.n_x(),
            traj.n_states()
        )));
    }
    if input_spec.touches_input() && traj.n_inputs() != input_spec.n_u() {
        return Err(KoopmanError::Dimension(format!(
            "spec expects {} input variables but the trajectory has {}",
            input_spec.n_u(),
            traj.n_inputs()
        )));
    }

    let (mut omega, targets) = match opts.time_mode {
        TimeMode::DiscreteMap => {
            if traj.len() < 2 {
                return Err(KoopmanError::InsufficientData(
                    "need at least 2 samples for a discrete lifted fit".into(),
                ));
            }
            let m = traj.len() - 1;
            let lifted = input_spec.lift(traj.states(), traj.inputs())?;
            let omega = lifted.columns(0, m).into_owned();
            let states_next = traj.states().columns(1, m).into_owned();
            let targets = match mode {
                // * = u: future samples are lifted with the future input.
                KicMode::WithInputDynamics => {
                    let inputs_next = traj.inputs().map(|u| u.columns(1, m).into_owned());
                    output_spec.lift(&states_next, inputs_next.as_ref())?
                }
                // * = 0: the future-input slot is zeroed.
                KicMode::NoInputDynamics => {
                    let zeros = DMatrix::zeros(output_spec.n_u(), m);
                    output_spec.lift(&states_next, Some(&zeros))?
                }
            };
            (omega, targets)
        }
        TimeMode::ContinuousDerivative => {
            let derivs = derivs.ok_or_else(|| {
                KoopmanError::MissingInput(
                    "continuous-derivative fitting needs the output-term derivative matrix".into(),
                )
            })?;
            if derivs.nrows() != output_spec.len() || derivs.ncols() != traj.len() {
                return Err(KoopmanError::Dimension(format!(
                    "derivative matrix is {:?}, expected {:?}",
                    derivs.shape(),
                    (output_spec.len(), traj.len())
                )));
            }
            (
                input_spec.lift(traj.states(), traj.inputs())?,
                derivs.clone(),
            )
        }
    };

    if let Some(d) = &opts.dither {
        let rows: Vec<usize> = input_spec
            .terms()
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t.kind, TermKind::InputIdentity { .. }))
            .map(|(i, _)| i)
            .collect();
        apply_dither(&mut omega, &rows, d);
    }

    let reg = regress(&targets, &omega, &opts.truncation)?;
    KoopmanModel::new(
        reg.operator,
        input_spec.clone(),
        output_spec.clone(),
        opts.time_mode,
        traj.dt(),
        reg.diagnostics,
    )
}
