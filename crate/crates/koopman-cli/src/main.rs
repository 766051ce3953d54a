//! `koopman` — simulate benchmark systems, fit operators, predict, and run
//! the verification suite.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage error, 3 domain
//! error, 4 rank-deficiency warning under `--strict`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use koopman::{
    bench::{self, InputPolicy, LinearExampleParams, SirParams, SlowManifoldParams},
    data, verify, Dither, FitOptions, KicMode, KoopmanError, KoopmanModel, ShapeKind, TimeMode,
    Trajectory, TruncationRule,
};

const EXIT_VERIFY_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DOMAIN: u8 = 3;
const EXIT_STRICT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "koopman",
    version,
    about = "Koopman-style operator identification toolkit"
)]
struct Cli {
    /// Seed for all randomness (input policies, dither).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output path for commands that write a trajectory CSV.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Report format for `verify`.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark system and write the trajectory CSV.
    Simulate {
        #[command(subcommand)]
        system: System,
    },
    /// Fit an operator to a trajectory CSV and write the model JSON.
    Fit(Box<FitArgs>),
    /// Step a fitted model forward and write the predicted trajectory CSV.
    Predict(PredictArgs),
    /// Run the full verification suite; exits 1 on any failure.
    Verify,
}

#[derive(Subcommand)]
enum System {
    /// Discrete linear map x+ = (mu x1, lambda x2 + delta u).
    Linear1 {
        #[arg(long, default_value_t = 0.1)]
        mu: f64,
        #[arg(long, default_value_t = 1.5)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        /// Initial state, comma separated.
        #[arg(long, default_value = "5,2")]
        x0: String,
        /// Input policy: gaussian:VAR | uniform:LO:HI | feedback:GAIN:INDEX |
        /// expdecay:RATE:U0 | sequence:V1,V2,... | zero
        #[arg(long, default_value = "gaussian:0.01")]
        policy: String,
        #[arg(long)]
        steps: usize,
    },
    /// Continuous system xdot = (mu x1, lambda (x2 - x1^2) + delta u),
    /// integrated by forward Euler.
    Slowmanifold {
        #[arg(long, default_value_t = 2.0)]
        mu: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 2.0)]
        delta: f64,
        #[arg(long, default_value = "5,2")]
        x0: String,
        #[arg(long, default_value = "gaussian:0.01")]
        policy: String,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        /// Also write the lifted-signal derivatives (y1, y2, y3 = x1^2) as a
        /// trajectory CSV, for continuous-derivative fitting.
        #[arg(long)]
        derivs_out: Option<PathBuf>,
    },
    /// SIR epidemic model with a vaccination input, forward Euler.
    Sir {
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        nu: f64,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Initial compartments S,I,R (must sum to 1).
        #[arg(long, default_value = "0.99,0.01,0")]
        x0: String,
        /// Vaccination policy; `vacc-default` draws uniformly from [0, 0.005).
        #[arg(long, default_value = "vacc-default")]
        policy: String,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
    },
}

#[derive(clap::Args)]
struct FitArgs {
    /// Trajectory CSV to fit.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    estimator: Estimator,
    #[arg(long, value_enum, default_value_t = CliKicMode::NoInputDynamics)]
    kic_mode: CliKicMode,
    /// Input-space dictionary (lifted KIC fits only), e.g. `x1,x2,x1^2,u1`.
    #[arg(long)]
    input_spec: Option<String>,
    /// Output-space dictionary; every term must appear in the input spec.
    #[arg(long)]
    output_spec: Option<String>,
    #[arg(long, value_enum, default_value_t = CliTimeMode::Discrete)]
    time_mode: CliTimeMode,
    /// Output-term derivatives as a trajectory CSV (continuous fits).
    #[arg(long)]
    derivs: Option<PathBuf>,
    /// exact | rank:K | rel:TAU
    #[arg(long, default_value = "rel:1e-12")]
    truncation: String,
    /// Dither amplitude added to the input rows of Omega (seeded by --seed).
    #[arg(long)]
    dither: Option<f64>,
    /// Fail (exit 4) instead of warning when the regression is rank deficient.
    #[arg(long)]
    strict: bool,
    /// Where to write the model JSON.
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Model JSON produced by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Initial state, comma separated.
    #[arg(long)]
    x0: String,
    /// Trajectory CSV whose input columns drive the prediction.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Generate the input signal from a policy instead of a file.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    steps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Estimator {
    Dmd,
    Dmdc,
    Kic,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliKicMode {
    WithInputDynamics,
    NoInputDynamics,
}

impl From<CliKicMode> for KicMode {
    fn from(m: CliKicMode) -> Self {
        match m {
            CliKicMode::WithInputDynamics => KicMode::WithInputDynamics,
            CliKicMode::NoInputDynamics => KicMode::NoInputDynamics,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliTimeMode {
    Discrete,
    Continuous,
}

impl From<CliTimeMode> for TimeMode {
    fn from(m: CliTimeMode) -> Self {
        match m {
            CliTimeMode::Discrete => TimeMode::DiscreteMap,
            CliTimeMode::Continuous => TimeMode::ContinuousDerivative,
        }
    }
}

/// Errors carrying their process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<KoopmanError> for CliError {
    fn from(e: KoopmanError) -> Self {
        Self {
            code: EXIT_DOMAIN,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Simulate { system } => cmd_simulate(system, cli.seed, cli.out),
        Command::Fit(args) => cmd_fit(*args, cli.seed),
        Command::Predict(args) => cmd_predict(args, cli.seed, cli.out),
        Command::Verify => Ok(cmd_verify(cli.format)),
    }
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("{what}: `{s}` is not a number")))
        })
        .collect()
}

fn parse_fixed<const N: usize>(text: &str, what: &str) -> Result<[f64; N], CliError> {
    let v = parse_floats(text, what)?;
    v.try_into()
        .map_err(|_| CliError::usage(format!("{what}: expected {N} comma-separated values")))
}

fn parse_policy(text: &str, seed: u64) -> Result<InputPolicy, CliError> {
    let bad = |msg: String| CliError::usage(format!("--policy {text}: {msg}"));
    let mut parts = text.splitn(2, ':');
    let kind = parts.next().unwrap_or("");
    let rest = parts.next();
    let args = |n: usize| -> Result<Vec<f64>, CliError> {
        let raw = rest.ok_or_else(|| bad(format!("expected {n} argument(s)")))?;
        let vals: Vec<f64> = raw
            .split(':')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("`{s}` is not a number")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != n {
            return Err(bad(format!("expected {n} argument(s), got {}", vals.len())));
        }
        Ok(vals)
    };
    match kind {
        "zero" => Ok(InputPolicy::Zero),
        "vacc-default" => Ok(InputPolicy::default_vaccination(seed)),
        "gaussian" => {
            let a = args(1)?;
            Ok(InputPolicy::GaussianNoise {
                variance: a[0],
                seed,
            })
        }
        "uniform" => {
            let a = args(2)?;
            Ok(InputPolicy::UniformNoise {
                lo: a[0],
                hi: a[1],
                seed,
            })
        }
        "feedback" => {
            let a = args(2)?;
            if a[1] < 1.0 || a[1].fract() != 0.0 {
                return Err(bad("feedback state index must be a positive integer".into()));
            }
            Ok(InputPolicy::StateFeedback {
                gain: a[0],
                state_index: a[1] as usize - 1,
            })
        }
        "expdecay" => {
            let a = args(2)?;
            Ok(InputPolicy::ExpDecay {
                rate: a[0],
                u0: a[1],
            })
        }
        "sequence" => {
            let raw = rest.ok_or_else(|| bad("expected comma-separated values".into()))?;
            let vals = parse_floats(raw, "--policy sequence")?;
            Ok(InputPolicy::Sequence(vals))
        }
        other => Err(bad(format!("unknown policy kind `{other}`"))),
    }
}

fn parse_truncation(text: &str) -> Result<TruncationRule, CliError> {
    let bad = || {
        CliError::usage(format!(
            "--truncation {text}: expected exact | rank:K | rel:TAU"
        ))
    };
    match text.split_once(':') {
        None if text == "exact" => Ok(TruncationRule::Exact),
        Some(("rank", k)) => Ok(TruncationRule::RankCap(k.parse().map_err(|_| bad())?)),
        Some(("rel", tau)) => Ok(TruncationRule::RelativeThreshold(
            tau.parse().map_err(|_| bad())?,
        )),
        _ => Err(bad()),
    }
}

fn cmd_simulate(system: System, seed: u64, out: Option<PathBuf>) -> Result<u8, CliError> {
    let (traj, derivs, default_name) = match system {
        System::Linear1 {
            mu,
            lambda,
            delta,
            x0,
            policy,
            steps,
        } => {
            let params = LinearExampleParams { mu, lambda, delta };
            let policy = parse_policy(&policy, seed)?;
            let x0 = parse_fixed::<2>(&x0, "--x0")?;
            (
                bench::simulate_linear(&params, &policy, x0, steps)?,
                None,
                "linear1.csv",
            )
        }
        System::Slowmanifold {
            mu,
            lambda,
            delta,
            x0,
            policy,
            steps,
            dt,
            derivs_out,
        } => {
            let params = SlowManifoldParams { mu, lambda, delta };
            let policy = parse_policy(&policy, seed)?;
            let x0 = parse_fixed::<2>(&x0, "--x0")?;
            let (traj, derivs) = bench::simulate_slow_manifold(&params, &policy, x0, steps, dt)?;
            let deriv_traj = derivs_out
                .map(|path| -> Result<_, KoopmanError> {
                    Ok((
                        Trajectory::new(derivs, None, dt, "slowmanifold-derivs")?,
                        path,
                    ))
                })
                .transpose()?;
            (traj, deriv_traj, "slowmanifold.csv")
        }
        System::Sir {
            beta,
            nu,
            mu,
            gamma,
            x0,
            policy,
            steps,
            dt,
        } => {
            let params = SirParams {
                beta,
                nu,
                mu,
                gamma,
            };
            let policy = parse_policy(&policy, seed)?;
            let x0 = parse_fixed::<3>(&x0, "--x0")?;
            (
                bench::simulate_sir(&params, &policy, x0, steps, dt)?,
                None,
                "sir.csv",
            )
        }
    };
    let out = out.unwrap_or_else(|| PathBuf::from(default_name));
    data::save_csv(&traj, &out)?;
    println!("wrote {} samples to {}", traj.len(), out.display());
    if let Some((dtraj, path)) = derivs {
        data::save_csv(&dtraj, &path)?;
        println!("wrote lifted derivatives to {}", path.display());
    }
    Ok(0)
}

fn cmd_fit(args: FitArgs, seed: u64) -> Result<u8, CliError> {
    let traj = data::load_csv(&args.data)?;
    let opts = FitOptions {
        truncation: parse_truncation(&args.truncation)?,
        time_mode: args.time_mode.into(),
        dither: args.dither.map(|amplitude| Dither::new(amplitude, seed)),
    };

    let lifted = args.input_spec.is_some() || args.output_spec.is_some();
    if lifted && args.estimator != Estimator::Kic {
        return Err(CliError::usage(
            "--input-spec/--output-spec require --estimator kic",
        ));
    }
    if opts.time_mode == TimeMode::ContinuousDerivative && !lifted {
        return Err(CliError::usage(
            "--time-mode continuous requires --input-spec and --output-spec",
        ));
    }

    let model = if lifted {
        let (Some(input_text), Some(output_text)) = (&args.input_spec, &args.output_spec) else {
            return Err(CliError::usage(
                "lifted fits need both --input-spec and --output-spec",
            ));
        };
        let input_spec = koopman::parse_spec(input_text, traj.n_states(), traj.n_inputs())?;
        let output_spec = koopman::parse_spec(output_text, traj.n_states(), traj.n_inputs())?;
        let derivs = match opts.time_mode {
            TimeMode::ContinuousDerivative => {
                let path = args.derivs.as_ref().ok_or_else(|| {
                    CliError::usage("--time-mode continuous requires --derivs FILE")
                })?;
                Some(data::load_csv(path)?.states().clone())
            }
            TimeMode::DiscreteMap => None,
        };
        koopman::fit_kic_lifted(
            &traj,
            &input_spec,
            &output_spec,
            args.kic_mode.into(),
            &opts,
            derivs.as_ref(),
        )?
    } else {
        match args.estimator {
            Estimator::Dmd => koopman::fit_dmd(&data::build_pair(&traj)?, &opts)?,
            Estimator::Dmdc => koopman::fit_dmdc(&data::build_trio(&traj, false)?, &opts)?,
            Estimator::Kic => {
                let mode: KicMode = args.kic_mode.into();
                let ss = data::build_trio(&traj, mode == KicMode::WithInputDynamics)?;
                koopman::fit_kic(&ss, mode, &opts)?
            }
        }
    };

    model.save(&args.out_model)?;
    print_fit_summary(&model, &args.out_model);

    if model.diagnostics().rank_deficient {
        if args.strict {
            eprintln!("error: regression is rank deficient (strict mode)");
            return Ok(EXIT_STRICT);
        }
        eprintln!("warning: regression is rank deficient; minimum-norm solution returned");
    }
    Ok(0)
}

fn print_fit_summary(model: &KoopmanModel, path: &std::path::Path) {
    let max_residual = model
        .diagnostics()
        .row_residuals
        .iter()
        .copied()
        .fold(0.0, f64::max);
    println!(
        "operator        : {}x{} ({:?})",
        model.p(),
        model.q(),
        model.shape_kind()
    );
    println!(
        "spectral radius : {:.6e}{}",
        model.spectral_radius(),
        match model.shape_kind() {
            ShapeKind::Square if model.spectral_radius() > 1.0 => "  (unstable)",
            _ => "",
        }
    );
    println!("max row residual: {:.6e}", max_residual);
    println!("model written to: {}", path.display());
}

fn cmd_predict(args: PredictArgs, seed: u64, out: Option<PathBuf>) -> Result<u8, CliError> {
    let model = KoopmanModel::load(&args.model)?;
    let x0_vals = parse_floats(&args.x0, "--x0")?;
    let n_x = model.input_spec().n_x();
    let square_len = model.q();
    let square = model.shape_kind() == ShapeKind::Square;
    if x0_vals.len() != n_x && !(square && x0_vals.len() == square_len) {
        return Err(CliError::usage(format!(
            "--x0 has {} values but the model expects {}{}",
            x0_vals.len(),
            n_x,
            if square && square_len != n_x {
                format!(" (or {square_len} for a lifted seed)")
            } else {
                String::new()
            }
        )));
    }
    let x0 = DVector::from_vec(x0_vals);

    let n_u = model.input_spec().n_u();
    let inputs: Option<DMatrix<f64>> = match (&args.inputs, &args.policy) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "--inputs and --policy are mutually exclusive",
            ));
        }
        (Some(path), None) => {
            let input_traj = data::load_csv(path)?;
            let u = input_traj.inputs().ok_or_else(|| {
                CliError::from(KoopmanError::MissingInput(format!(
                    "{} has no input columns",
                    path.display()
                )))
            })?;
            Some(u.clone())
        }
        (None, Some(policy_text)) => {
            let policy = parse_policy(policy_text, seed)?;
            if matches!(policy, InputPolicy::StateFeedback { .. }) {
                return Err(CliError::usage(
                    "feedback policies are not available for prediction; supply --inputs",
                ));
            }
            if n_u != 1 {
                return Err(CliError::from(KoopmanError::Dimension(format!(
                    "policy-driven prediction needs a single input channel, model has {n_u}"
                ))));
            }
            Some(generate_policy_inputs(&policy, args.steps.max(1))?)
        }
        (None, None) => None,
    };

    let pred = model.predict(&x0, inputs.as_ref(), args.steps)?;
    let out = out.unwrap_or_else(|| PathBuf::from("prediction.csv"));
    let traj = Trajectory::new(pred, None, model.dt(), "prediction")?;
    data::save_csv(&traj, &out)?;
    println!(
        "wrote {} predicted samples to {}",
        traj.len(),
        out.display()
    );
    Ok(0)
}

fn generate_policy_inputs(policy: &InputPolicy, steps: usize) -> Result<DMatrix<f64>, CliError> {
    // Drive the policy through the linear bench harness with an inert state.
    let traj = bench::simulate_linear(
        &LinearExampleParams {
            mu: 0.0,
            lambda: 0.0,
            delta: 0.0,
        },
        policy,
        [0.0, 0.0],
        steps,
    )?;
    Ok(traj
        .inputs()
        .expect("bench always records inputs")
        .columns(0, steps)
        .into_owned())
}

fn cmd_verify(format: Format) -> u8 {
    let scale = std::env::var("KOOPMAN_VERIFY_TOL_SCALE")
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .unwrap_or(1.0);
    let items = verify::run_suite(scale);
    let all_passed = items.iter().all(|i| i.passed);
    match format {
        Format::Csv => {
            println!("status,item,measured,tolerance");
            for i in &items {
                println!(
                    "{},\"{}\",{:.6e},{:.6e}",
                    if i.passed { "PASS" } else { "FAIL" },
                    i.name,
                    i.measured,
                    i.tolerance
                );
            }
        }
        Format::Json => {
            let report: Vec<serde_json::Value> = items
                .iter()
                .map(|i| {
                    serde_json::json!({
                        "item": i.name,
                        "status": if i.passed { "PASS" } else { "FAIL" },
                        "measured": i.measured,
                        "tolerance": i.tolerance,
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "items": report }))
                    .expect("report serialization")
            );
        }
    }
    if all_passed {
        0
    } else {
        EXIT_VERIFY_FAILED
    }
}
