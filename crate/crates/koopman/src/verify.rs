//! The paper-reproduction verification suite: one item per acceptance
//! criterion, runnable from tests or the CLI.
//!
//! Each item reports a normalized or raw measurement against its pinned
//! tolerance. `tol_scale` multiplies every tolerance (1.0 for normal runs);
//! values below 1 tighten the suite, which is used as a negative control.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{self, InputPolicy, LinearExampleParams, SirParams, SlowManifoldParams};
use crate::data::{self, SnapshotSet, Trajectory};
use crate::estimators::{self, Dither, FitOptions, KicMode};
use crate::linalg::{self, TruncationRule};
use crate::models::{Diagnostics, KoopmanModel, SpectralDecomposition, TimeMode};
use crate::observables::{parse_spec, ObservableSpec};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct VerifyItem {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// Raw deviation for single-check items; worst normalized margin
    /// (deviation / tolerance) for composite items.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

enum Bound {
    /// Deviation must stay at or below the bound (scaled).
    AtMost(f64),
    /// Ratio must reach at least the bound; scaling below 1 raises the bar.
    AtLeast(f64),
}

struct Check {
    what: &'static str,
    value: f64,
    bound: Bound,
}

impl Check {
    fn at_most(what: &'static str, value: f64, bound: f64) -> Self {
        Check {
            what,
            value: if value.is_nan() { f64::INFINITY } else { value },
            bound: Bound::AtMost(bound),
        }
    }

    fn at_least(what: &'static str, value: f64, bound: f64) -> Self {
        Check {
            what,
            value: if value.is_nan() { 0.0 } else { value },
            bound: Bound::AtLeast(bound),
        }
    }

    /// Margin normalized so that <= `scale` passes.
    fn normalized(&self) -> f64 {
        match self.bound {
            Bound::AtMost(b) => self.value / b,
            Bound::AtLeast(b) => {
                if self.value == f64::INFINITY {
                    0.0
                } else {
                    b / self.value.max(1e-300)
                }
            }
        }
    }
}

fn item(id: usize, name: &'static str, checks: Vec<Check>, scale: f64) -> VerifyItem {
    let passed = checks.iter().all(|c| c.normalized() <= scale);
    let detail = checks
        .iter()
        .map(|c| match c.bound {
            Bound::AtMost(b) => format!("{} = {:.3e} (<= {:.1e})", c.what, c.value, b * scale),
            Bound::AtLeast(b) => format!("{} = {:.3e} (>= {:.1e})", c.what, c.value, b / scale),
        })
        .collect::<Vec<_>>()
        .join("; ");
    let (measured, tolerance) = if checks.len() == 1 {
        match checks[0].bound {
            Bound::AtMost(b) => (checks[0].value, b * scale),
            Bound::AtLeast(b) => (checks[0].value, b / scale),
        }
    } else {
        (
            checks.iter().map(Check::normalized).fold(0.0, f64::max),
            scale,
        )
    };
    VerifyItem {
        id,
        name,
        passed,
        measured,
        tolerance,
        detail,
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn rel_l2(pred: &DMatrix<f64>, actual: &DMatrix<f64>) -> f64 {
    let err = (pred - actual).norm() / actual.norm();
    if err.is_finite() {
        err
    } else {
        f64::INFINITY
    }
}

fn fit_example1(policy: &InputPolicy, steps: usize, dither: Option<Dither>) -> KoopmanModel {
    let traj = bench::simulate_linear(&LinearExampleParams::standard(), policy, [5.0, 2.0], steps)
        .expect("example 1 simulation");
    let ss = data::build_trio(&traj, true).expect("trio assembly");
    let opts = FitOptions {
        dither,
        ..FitOptions::default()
    };
    estimators::fit_kic(&ss, KicMode::WithInputDynamics, &opts).expect("KIC fit")
}

/// Criterion 1: random-disturbance inputs recover the state blocks; clean
/// generic inputs tighten the recovery.
pub fn example1_random_disturbance(scale: f64) -> VerifyItem {
    let g11_true = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 1.5]);
    let g12_true = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);

    let noisy = fit_example1(
        &InputPolicy::GaussianNoise {
            variance: 0.01,
            seed: 1,
        },
        6,
        None,
    );
    let nb = noisy.kic_blocks().expect("identity layout");
    let dev_noisy = max_abs_diff(&nb.g11, &g11_true).max(max_abs_diff(&nb.g12, &g12_true));

    let generic = vec![0.41, -0.73, 0.23, 0.61, -0.35, 0.18, 0.09];
    let clean = fit_example1(&InputPolicy::Sequence(generic), 6, None);
    let cb = clean.kic_blocks().expect("identity layout");
    let dev_clean = max_abs_diff(&cb.g11, &g11_true).max(max_abs_diff(&cb.g12, &g12_true));

    item(
        1,
        "example1 random disturbance: G11, G12 recovery",
        vec![
            Check::at_most("noisy G11/G12 deviation", dev_noisy, 1e-2),
            Check::at_most("clean G11/G12 deviation", dev_clean, 1e-8),
        ],
        scale,
    )
}

/// Criterion 2: state feedback with a seeded 1e-3 exploration dither on the
/// applied input (hence on Ω's input row) makes the feedback law itself
/// identifiable: the input rows of G recover `u+ = -λ x2 - δ u`.
pub fn example1_state_feedback(scale: f64) -> VerifyItem {
    let model = fit_example1(
        &InputPolicy::StateFeedbackDithered {
            gain: 1.0,
            state_index: 1,
            amplitude: 1e-3,
            seed: 2,
        },
        4000,
        None,
    );
    let b = model.kic_blocks().expect("identity layout");
    let dev_g21 = max_abs_diff(&b.g21, &DMatrix::from_row_slice(1, 2, &[0.0, -1.5]));
    let dev_g22 = max_abs_diff(&b.g22, &DMatrix::from_row_slice(1, 1, &[-1.0]));
    item(
        2,
        "example1 state feedback: G21, G22 mimic the x2 dynamics",
        vec![
            Check::at_most("G21 deviation", dev_g21, 5e-2),
            Check::at_most("G22 deviation", dev_g22, 5e-2),
        ],
        scale,
    )
}

/// Criterion 3: exogenous decaying inputs are discovered as G22 = 0.99.
pub fn example1_exogenous_decay(scale: f64) -> VerifyItem {
    let model = fit_example1(
        &InputPolicy::ExpDecay {
            rate: 0.01,
            u0: 1.0,
        },
        6,
        None,
    );
    let b = model.kic_blocks().expect("identity layout");
    let dev_g22 = max_abs_diff(&b.g22, &DMatrix::from_row_slice(1, 1, &[0.99]));
    let dev_g21 = max_abs_diff(&b.g21, &DMatrix::zeros(1, 2));
    item(
        3,
        "example1 exogenous decay: G22 = 0.99, G21 = 0",
        vec![
            Check::at_most("G22 deviation", dev_g22, 1e-6),
            Check::at_most("G21 deviation", dev_g21, 1e-6),
        ],
        scale,
    )
}

/// Criterion 4: the slow-manifold continuous operator on the lifted
/// dictionary matches its closed form.
pub fn slow_manifold_continuous_operator(scale: f64) -> VerifyItem {
    let (traj, derivs) = bench::simulate_slow_manifold(
        &SlowManifoldParams::standard(),
        &InputPolicy::GaussianNoise {
            variance: 0.01,
            seed: 42,
        },
        [5.0, 2.0],
        14,
        0.01,
    )
    .expect("example 2 simulation");
    let input_spec = parse_spec("x1,x2,x1^2,u1", 2, 1).unwrap();
    let output_spec = parse_spec("x1,x2,x1^2", 2, 1).unwrap();
    let model = estimators::fit_kic_lifted(
        &traj,
        &input_spec,
        &output_spec,
        KicMode::NoInputDynamics,
        &FitOptions::continuous(),
        Some(&derivs),
    )
    .expect("continuous lifted fit");
    let expected = DMatrix::from_row_slice(
        3,
        4,
        &[2.0, 0.0, 0.0, 0.0, 0.0, 0.5, -0.5, 2.0, 0.0, 0.0, 4.0, 0.0],
    );
    let dev = max_abs_diff(model.operator(), &expected);
    item(
        4,
        "slow manifold: continuous lifted operator",
        vec![Check::at_most("operator deviation", dev, 1e-6)],
        scale,
    )
}

struct SirSetup {
    train: Trajectory,
    holdout_x0: DVector<f64>,
    holdout_inputs: DMatrix<f64>,
    holdout_actual: DMatrix<f64>,
}

const SIR_TRAIN: usize = 200;
const SIR_HOLDOUT: usize = 200;

fn sir_setup() -> SirSetup {
    let traj = bench::simulate_sir(
        &SirParams::standard(),
        &InputPolicy::default_vaccination(7),
        [0.99, 0.01, 0.0],
        SIR_TRAIN + SIR_HOLDOUT,
        0.01,
    )
    .expect("SIR simulation");
    let train = Trajectory::new(
        traj.states().columns(0, SIR_TRAIN + 1).into_owned(),
        Some(
            traj.inputs()
                .unwrap()
                .columns(0, SIR_TRAIN + 1)
                .into_owned(),
        ),
        traj.dt(),
        "sir-train",
    )
    .unwrap();
    SirSetup {
        train,
        holdout_x0: traj.states().column(SIR_TRAIN).into_owned(),
        holdout_inputs: traj
            .inputs()
            .unwrap()
            .columns(SIR_TRAIN, SIR_HOLDOUT)
            .into_owned(),
        holdout_actual: traj
            .states()
            .columns(SIR_TRAIN, SIR_HOLDOUT + 1)
            .into_owned(),
    }
}

fn sir_fit(setup: &SirSetup, output: &str) -> KoopmanModel {
    let input_spec = parse_spec("x1,x2,x3,x1*x2,u1", 3, 1).unwrap();
    let output_spec = parse_spec(output, 3, 1).unwrap();
    estimators::fit_kic_lifted(
        &setup.train,
        &input_spec,
        &output_spec,
        KicMode::NoInputDynamics,
        &FitOptions::default(),
        None,
    )
    .expect("SIR lifted fit")
}

fn sir_prediction_error(setup: &SirSetup, model: &KoopmanModel) -> f64 {
    let pred = model
        .predict(&setup.holdout_x0, Some(&setup.holdout_inputs), SIR_HOLDOUT)
        .expect("holdout prediction");
    rel_l2(&pred.rows(0, 3).into_owned(), &setup.holdout_actual)
}

/// Criterion 5: restricted-output SIR fit predicts the held-out epidemic.
pub fn sir_restricted_output_prediction(scale: f64) -> VerifyItem {
    let setup = sir_setup();
    let model = sir_fit(&setup, "x1,x2,x3");
    let err = sir_prediction_error(&setup, &model);
    item(
        5,
        "SIR restricted output: holdout prediction error",
        vec![Check::at_most("relative L2 error", err, 1e-4)],
        scale,
    )
}

/// Criterion 6: adding the mixed term to the output space breaks closure;
/// its row residual and the prediction error both blow up.
pub fn sir_closure_failure(scale: f64) -> VerifyItem {
    let setup = sir_setup();
    let good = sir_fit(&setup, "x1,x2,x3");
    let bad = sir_fit(&setup, "x1,x2,x3,x1*x2");

    let res = &bad.diagnostics().row_residuals;
    let linear_max = res[..3].iter().copied().fold(0.0, f64::max);
    let residual_ratio = res[3] / linear_max.max(1e-300);

    let err_good = sir_prediction_error(&setup, &good);
    let err_bad = sir_prediction_error(&setup, &bad);
    let error_ratio = if err_bad == f64::INFINITY {
        f64::INFINITY
    } else {
        err_bad / err_good.max(1e-300)
    };

    item(
        6,
        "SIR closure failure: mixed output term degrades fit and prediction",
        vec![
            Check::at_least(
                "SI-row residual / max linear residual",
                residual_ratio,
                10.0,
            ),
            Check::at_least("failure / success prediction error", error_ratio, 100.0),
        ],
        scale,
    )
}

fn random_trio(rng: &mut ChaCha8Rng) -> SnapshotSet {
    let n_y = rng.random_range(1..=4usize);
    let n_g = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=8usize);
    let mut mat = |r: usize| DMatrix::from_fn(r, m, |_, _| rng.random_range(-1.0..1.0));
    let y = mat(n_y);
    let z = mat(n_y);
    let upsilon = mat(n_g);
    let xi = mat(n_g);
    SnapshotSet::new(y, z, Some(upsilon), Some(xi), 1.0).unwrap()
}

/// Criterion 7: KIC in the no-input-dynamics mode coincides with DMDc.
pub fn kic_dmdc_equivalence(scale: f64) -> VerifyItem {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let ss = random_trio(&mut rng);
        let opts = FitOptions::default();
        let kic = estimators::fit_kic(&ss, KicMode::NoInputDynamics, &opts).unwrap();
        let dmdc = estimators::fit_dmdc(&ss, &opts).unwrap();
        worst = worst.max(max_abs_diff(kic.operator(), dmdc.operator()));
    }
    item(
        7,
        "KIC (no input dynamics) equals DMDc on 50 random snapshot sets",
        vec![Check::at_most("max elementwise deviation", worst, 1e-12)],
        scale,
    )
}

/// Criterion 8: zero-width input blocks reduce KIC to plain DMD exactly.
pub fn dmd_reduction(scale: f64) -> VerifyItem {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut mismatches = 0usize;
    for _ in 0..50 {
        let n = rng.random_range(1..=5usize);
        let m = rng.random_range(1..=8usize);
        let y = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let z = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let plain = SnapshotSet::new(y.clone(), z.clone(), None, None, 1.0).unwrap();
        let zero_width = SnapshotSet::new(
            y,
            z,
            Some(DMatrix::zeros(0, m)),
            Some(DMatrix::zeros(0, m)),
            1.0,
        )
        .unwrap();
        let dmd = estimators::fit_dmd(&plain, &FitOptions::default()).unwrap();
        for mode in [KicMode::WithInputDynamics, KicMode::NoInputDynamics] {
            let kic = estimators::fit_kic(&zero_width, mode, &FitOptions::default()).unwrap();
            if kic.operator() != dmd.operator() {
                mismatches += 1;
            }
        }
    }
    item(
        8,
        "KIC with zero input width equals DMD exactly on 50 random instances",
        vec![Check::at_most(
            "instances with an inexact match",
            mismatches as f64,
            0.5,
        )],
        scale,
    )
}

/// Criterion 9: DMD on an m-cycle yields the m-th roots of unity.
pub fn periodic_spectrum(scale: f64) -> VerifyItem {
    let mut worst = 0.0f64;
    for m in [3usize, 5, 8] {
        let mut states = DMatrix::zeros(m, m + 1);
        for k in 0..=m {
            states[(k % m, k)] = 1.0;
        }
        let traj = Trajectory::new(states, None, 1.0, "cycle").unwrap();
        let ss = data::build_pair(&traj).unwrap();
        let model = estimators::fit_dmd(&ss, &FitOptions::default()).unwrap();
        let SpectralDecomposition::Eigen { eigenvalues, .. } = model.spectral() else {
            unreachable!("cycle operator is square");
        };
        for (j, lam) in eigenvalues.iter().enumerate() {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let root = nalgebra::Complex::new(theta.cos(), theta.sin());
            worst = worst.max((lam - root).norm());
        }
    }
    item(
        9,
        "periodic data: DMD spectrum is the m-th roots of unity (m = 3, 5, 8)",
        vec![Check::at_most("max eigenvalue deviation", worst, 1e-8)],
        scale,
    )
}

/// Criterion 10: randomized property suites (50 instances each) for the
/// pseudoinverse, the eigendecomposition, spectral-expansion prediction, and
/// both round trips.
pub fn property_suites(scale: f64) -> VerifyItem {
    let mut rng = ChaCha8Rng::seed_from_u64(100);

    let mut penrose_worst = 0.0f64;
    for _ in 0..50 {
        let rows = rng.random_range(1..=8usize);
        let cols = rng.random_range(1..=8usize);
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let p = linalg::pinv(&m, &TruncationRule::default()).unwrap();
        let scale_m = m.norm().max(1.0);
        let mp = &m * &p;
        let pm = &p * &m;
        let dev = [
            (&m * &p * &m - &m).norm() / scale_m,
            (&p * &m * &p - &p).norm() / p.norm().max(1.0),
            (mp.transpose() - &mp).norm() / scale_m,
            (pm.transpose() - &pm).norm() / scale_m,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        penrose_worst = penrose_worst.max(dev);
    }

    let mut eig_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=8usize);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let e = linalg::eig(&m).unwrap();
        let a: DMatrix<nalgebra::Complex<f64>> = m.map(|x| nalgebra::Complex::new(x, 0.0));
        let norm = m.norm().max(1.0);
        for j in 0..n {
            let v = e.right_vectors.column(j).into_owned();
            let w = e.left_vectors.column(j).into_owned();
            let lam = e.eigenvalues[j];
            eig_worst = eig_worst.max((&a * &v - &v * lam).norm() / norm);
            let wh = w.adjoint();
            eig_worst = eig_worst.max((&wh * &a - wh * lam).norm() / norm);
        }
    }

    let mut spectral_worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=6usize);
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let spec = ObservableSpec::identity(n, 0);
        let model = KoopmanModel::new(
            g.clone(),
            spec.clone(),
            spec,
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap();
        let z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let direct = &g * &z;
        match model.spectral_step(&z) {
            Ok(expanded) => {
                let dev = (0..n)
                    .map(|i| (expanded[i] - nalgebra::Complex::new(direct[i], 0.0)).norm())
                    .fold(0.0, f64::max)
                    / direct.norm().max(1e-12);
                spectral_worst = spectral_worst.max(dev);
            }
            Err(_) => spectral_worst = f64::INFINITY,
        }
    }

    let dir = tempfile_dir();
    let mut model_mismatches = 0usize;
    for i in 0..50 {
        let n = rng.random_range(1..=4usize);
        let g_extra = rng.random_range(0..=2usize);
        let op = DMatrix::from_fn(n, n + g_extra, |_, _| rng.random_range(-1.0..1.0));
        let model = KoopmanModel::new(
            op,
            ObservableSpec::identity(n, g_extra),
            ObservableSpec::state_identity(n, g_extra),
            if i % 2 == 0 {
                TimeMode::DiscreteMap
            } else {
                TimeMode::ContinuousDerivative
            },
            rng.random_range(0.01..1.0),
            Diagnostics {
                row_residuals: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                rank_deficient: i % 3 == 0,
            },
        )
        .unwrap();
        let path = dir.join(format!("model_{i}.json"));
        model.save(&path).unwrap();
        if KoopmanModel::load(&path).unwrap() != model {
            model_mismatches += 1;
        }
    }

    let mut csv_mismatches = 0usize;
    for i in 0..50 {
        let n_x = rng.random_range(1..=4usize);
        let n_u = rng.random_range(0..=2usize);
        let cols = rng.random_range(2..=9usize);
        let states = DMatrix::from_fn(n_x, cols, |_, _| rng.random_range(-100.0..100.0));
        let inputs =
            (n_u > 0).then(|| DMatrix::from_fn(n_u, cols, |_, _| rng.random_range(-1.0..1.0)));
        let traj = Trajectory::new(states, inputs, rng.random_range(1e-3..3.0), "rt").unwrap();
        let path = dir.join(format!("traj_{i}.csv"));
        data::save_csv(&traj, &path).unwrap();
        let back = data::load_csv(&path).unwrap();
        if back.states() != traj.states()
            || back.inputs() != traj.inputs()
            || back.dt() != traj.dt()
        {
            csv_mismatches += 1;
        }
    }
    let _ = std::fs::remove_dir_all(&dir);

    item(
        10,
        "property suites: Penrose, eigen residuals, spectral prediction, round trips",
        vec![
            Check::at_most("Penrose violation", penrose_worst, 1e-8),
            Check::at_most("eigen residual", eig_worst, 1e-8),
            Check::at_most("spectral prediction deviation", spectral_worst, 1e-8),
            Check::at_most("model round-trip mismatches", model_mismatches as f64, 0.5),
            Check::at_most("CSV round-trip mismatches", csv_mismatches as f64, 0.5),
        ],
        scale,
    )
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("koopman-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

/// Run every acceptance criterion.
pub fn run_suite(tol_scale: f64) -> Vec<VerifyItem> {
    vec![
        example1_random_disturbance(tol_scale),
        example1_state_feedback(tol_scale),
        example1_exogenous_decay(tol_scale),
        slow_manifold_continuous_operator(tol_scale),
        sir_restricted_output_prediction(tol_scale),
        sir_closure_failure(tol_scale),
        kic_dmdc_equivalence(tol_scale),
        dmd_reduction(tol_scale),
        periodic_spectrum(tol_scale),
        property_suites(tol_scale),
    ]
}
