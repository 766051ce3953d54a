//! Fitted operator models: spectral access, eigenfunction evaluation,
//! forward prediction, reconstruction residuals, and JSON persistence.

use std::fs;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SnapshotSet;
use crate::error::{KoopmanError, Result};
use crate::linalg::{self, TruncationRule};
use crate::observables::{ObservableSpec, TermKind};

type C64 = Complex<f64>;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Guard against division by a zero row norm in relative residuals.
const RESIDUAL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// The operator advances measurements by one sample.
    DiscreteMap,
    /// The operator maps measurements to their time derivatives.
    ContinuousDerivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Rectangular,
}

/// Per-row relative fit residuals plus a rank-deficiency warning from the
/// regression.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Diagnostics {
    pub row_residuals: Vec<f64>,
    pub rank_deficient: bool,
}

/// Spectral content of a fitted operator: an eigendecomposition when the
/// operator is square, singular triplets when it is rectangular.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralDecomposition {
    Eigen {
        eigenvalues: DVector<C64>,
        /// Columns `v_j` with `G v_j = λ_j v_j`.
        right_modes: DMatrix<C64>,
        /// Columns `w_j` with `w_jᴴ G = λ_j w_jᴴ`.
        left_modes: DMatrix<C64>,
    },
    Singular {
        singular_values: DVector<f64>,
        /// Columns `q_j` with `G v_j = σ_j q_j`.
        left_modes: DMatrix<f64>,
        right_modes: DMatrix<f64>,
    },
}

/// Blocks of a square input-bearing operator, following the layout
/// `[x_{k+1}; u_{k+1}] = [G11 G12; G21 G22] [x_k; u_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KicBlocks {
    pub g11: DMatrix<f64>,
    pub g12: DMatrix<f64>,
    pub g21: DMatrix<f64>,
    pub g22: DMatrix<f64>,
}

/// A fitted linear operator from lifted inputs to lifted outputs, with the
/// dictionaries that define both spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    operator: DMatrix<f64>,
    input_spec: ObservableSpec,
    output_spec: ObservableSpec,
    time_mode: TimeMode,
    dt: f64,
    diagnostics: Diagnostics,
    spectral: SpectralDecomposition,
}

impl KoopmanModel {
    /// Wrap a fitted operator; computes the spectral decomposition.
    pub fn new(
        operator: DMatrix<f64>,
        input_spec: ObservableSpec,
        output_spec: ObservableSpec,
        time_mode: TimeMode,
        dt: f64,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        if output_spec.len() != operator.nrows() || input_spec.len() != operator.ncols() {
            return Err(KoopmanError::Dimension(format!(
                "operator is {:?} but specs declare {} output and {} input terms",
                operator.shape(),
                output_spec.len(),
                input_spec.len()
            )));
        }
        let spectral = Self::decompose(&operator)?;
        Ok(Self {
            operator,
            input_spec,
            output_spec,
            time_mode,
            dt,
            diagnostics,
            spectral,
        })
    }

    fn decompose(operator: &DMatrix<f64>) -> Result<SpectralDecomposition> {
        if operator.is_square() {
            let e = linalg::eig(operator)?;
            Ok(SpectralDecomposition::Eigen {
                eigenvalues: e.eigenvalues,
                right_modes: e.right_vectors,
                left_modes: e.left_vectors,
            })
        } else {
            let f = linalg::svd(operator, &TruncationRule::Exact)?;
            Ok(SpectralDecomposition::Singular {
                singular_values: f.singular_values,
                left_modes: f.left_vectors,
                right_modes: f.right_vectors,
            })
        }
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn shape_kind(&self) -> ShapeKind {
        if self.operator.is_square() {
            ShapeKind::Square
        } else {
            ShapeKind::Rectangular
        }
    }

    /// Output-space dimension `p`.
    pub fn p(&self) -> usize {
        self.operator.nrows()
    }

    /// Input-space dimension `q`.
    pub fn q(&self) -> usize {
        self.operator.ncols()
    }

    /// Width of the plain input-identity block in the input space.
    pub fn n_gamma(&self) -> usize {
        self.input_spec.n_input_identity()
    }

    /// Input-space width minus the input-identity block.
    pub fn n_y(&self) -> usize {
        self.q() - self.n_gamma()
    }

    pub fn input_spec(&self) -> &ObservableSpec {
        &self.input_spec
    }

    pub fn output_spec(&self) -> &ObservableSpec {
        &self.output_spec
    }

    pub fn time_mode(&self) -> TimeMode {
        self.time_mode
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn spectral(&self) -> &SpectralDecomposition {
        &self.spectral
    }

    /// Largest eigenvalue modulus (square) or singular value (rectangular).
    pub fn spectral_radius(&self) -> f64 {
        match &self.spectral {
            SpectralDecomposition::Eigen { eigenvalues, .. } => {
                eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max)
            }
            SpectralDecomposition::Singular {
                singular_values, ..
            } => singular_values.iter().copied().fold(0.0, f64::max),
        }
    }

    /// True when the input dictionary is laid out as non-input terms followed
    /// by plain input identities, so the operator splits into `[A B]` blocks.
    fn has_identity_input_layout(&self) -> bool {
        let n_y = self.n_y();
        self.input_spec.terms().iter().enumerate().all(|(j, t)| {
            let is_input = matches!(t.kind, TermKind::InputIdentity { .. });
            if j < n_y {
                !is_input
            } else {
                is_input
            }
        })
    }

    /// Dynamics block `A`: the operator columns over non-input terms.
    pub fn a_block(&self) -> Option<DMatrix<f64>> {
        self.has_identity_input_layout()
            .then(|| self.operator.columns(0, self.n_y()).into_owned())
    }

    /// Input block `B`: the operator columns over input-identity terms.
    pub fn b_block(&self) -> Option<DMatrix<f64>> {
        self.has_identity_input_layout().then(|| {
            self.operator
                .columns(self.n_y(), self.n_gamma())
                .into_owned()
        })
    }

    /// Four-way block split of a square input-bearing operator.
    pub fn kic_blocks(&self) -> Option<KicBlocks> {
        if self.shape_kind() != ShapeKind::Square || !self.has_identity_input_layout() {
            return None;
        }
        let (n_y, n_g) = (self.n_y(), self.n_gamma());
        Some(KicBlocks {
            g11: self.operator.view((0, 0), (n_y, n_y)).into_owned(),
            g12: self.operator.view((0, n_y), (n_y, n_g)).into_owned(),
            g21: self.operator.view((n_y, 0), (n_g, n_y)).into_owned(),
            g22: self.operator.view((n_y, n_y), (n_g, n_g)).into_owned(),
        })
    }

    /// Eigenfunction values `φ_j(z)`: `⟨z, w_j⟩` for square operators,
    /// `⟨z, v_j⟩` for rectangular ones (inner product conjugate-linear in its
    /// second argument).
    pub fn eigenfunction_eval(&self, z: &DVector<f64>) -> Result<Vec<C64>> {
        if z.len() != self.q() {
            return Err(KoopmanError::Dimension(format!(
                "lifted state has length {} but the input space has {} terms",
                z.len(),
                self.q()
            )));
        }
        let zc: DVector<C64> = z.map(|x| C64::new(x, 0.0));
        Ok(match &self.spectral {
            SpectralDecomposition::Eigen { left_modes, .. } => (0..left_modes.ncols())
                .map(|j| left_modes.column(j).dotc(&zc))
                .collect(),
            SpectralDecomposition::Singular { right_modes, .. } => (0..right_modes.ncols())
                .map(|j| C64::new(right_modes.column(j).dot(z), 0.0))
                .collect(),
        })
    }

    /// Advance `z` one step through the eigen-expansion `Σ λ_j c_j v_j` with
    /// biorthogonally scaled coefficients. This is an independent route to
    /// the same result as `operator * z` for diagonalizable square operators.
    pub fn spectral_step(&self, z: &DVector<f64>) -> Result<DVector<C64>> {
        let SpectralDecomposition::Eigen {
            eigenvalues,
            right_modes,
            left_modes,
        } = &self.spectral
        else {
            return Err(KoopmanError::Numerical(
                "spectral stepping is defined for square operators only".into(),
            ));
        };
        if z.len() != self.q() {
            return Err(KoopmanError::Dimension(format!(
                "state has length {} but the operator is {}x{}",
                z.len(),
                self.p(),
                self.q()
            )));
        }
        let zc: DVector<C64> = z.map(|x| C64::new(x, 0.0));
        let mut out = DVector::from_element(self.p(), C64::new(0.0, 0.0));
        for j in 0..eigenvalues.len() {
            let w = left_modes.column(j);
            let v = right_modes.column(j);
            let pairing = w.dotc(&v.into_owned());
            if pairing.norm() < 1e-12 {
                return Err(KoopmanError::Numerical(
                    "left/right mode pairing is singular; the operator is defective".into(),
                ));
            }
            let coeff = w.dotc(&zc) / pairing;
            out += v * (eigenvalues[j] * coeff);
        }
        Ok(out)
    }

    /// Rebuild plan for one input term during prediction.
    fn plan_term(
        &self,
        term_index: usize,
        have_inputs: bool,
        state_rows: &[Option<usize>],
    ) -> Result<RebuildPlan> {
        let term = &self.input_spec.terms()[term_index];
        let evaluate = || -> Result<RebuildPlan> {
            for (var, &p) in term.state_powers(self.input_spec.n_x()).iter().enumerate() {
                if p > 0 && state_rows[var].is_none() {
                    return Err(KoopmanError::Closure {
                        term: term.label.clone(),
                        reason: format!(
                            "state variable x{} is not an output term, so the lift cannot be \
                             rebuilt between steps",
                            var + 1
                        ),
                    });
                }
            }
            Ok(RebuildPlan::Evaluate)
        };
        if term.touches_input() {
            if have_inputs {
                return evaluate();
            }
            // Without a supplied input signal the model can only propagate an
            // input term it predicts itself.
            return match self.output_spec.index_of_label(&term.label) {
                Some(row) => Ok(RebuildPlan::FromOutput(row)),
                None => Err(KoopmanError::MissingInput(format!(
                    "term `{}` needs an input signal, but none was supplied",
                    term.label
                ))),
            };
        }
        match self.output_spec.index_of_label(&term.label) {
            Some(row) => Ok(RebuildPlan::FromOutput(row)),
            None => evaluate(),
        }
    }

    /// Iterate the fitted operator forward from a raw state.
    ///
    /// `x0` is either a raw state vector (length `n_x`, lifted through the
    /// output terms to seed the recursion) or, for square operators, a full
    /// lifted vector of length `q`. `inputs` supplies one raw input column
    /// per step and may be omitted for models that propagate their own
    /// inputs. Returns the output-term trajectory, `steps + 1` columns.
    pub fn predict(
        &self,
        x0: &DVector<f64>,
        inputs: Option<&DMatrix<f64>>,
        steps: usize,
    ) -> Result<DMatrix<f64>> {
        let n_x = self.input_spec.n_x();
        let n_u = self.input_spec.n_u();
        let have_inputs = inputs.is_some();

        if let Some(u) = inputs {
            if u.nrows() != n_u {
                return Err(KoopmanError::Dimension(format!(
                    "input matrix has {} rows but the model expects {}",
                    u.nrows(),
                    n_u
                )));
            }
            if u.ncols() < steps {
                return Err(KoopmanError::InsufficientData(format!(
                    "{} input columns supplied for {} steps",
                    u.ncols(),
                    steps
                )));
            }
        }

        // Map state variable -> output row holding its identity observable.
        let mut state_rows: Vec<Option<usize>> = vec![None; n_x];
        for (row, term) in self.output_spec.terms().iter().enumerate() {
            if let TermKind::StateIdentity { index } = term.kind {
                state_rows[index] = Some(row);
            }
        }

        let input_col = |k: usize| -> Vec<f64> {
            match inputs {
                Some(u) => u.column(k).iter().copied().collect(),
                None => vec![0.0; n_u],
            }
        };

        // Seed the output vector.
        let mut current: DVector<f64> = if x0.len() == n_x {
            let needs_input = self.output_spec.touches_input();
            if needs_input && (!have_inputs || inputs.unwrap().ncols() == 0) {
                return Err(KoopmanError::MissingInput(
                    "output terms depend on the input, but no input column is available for the \
                     initial sample"
                        .into(),
                ));
            }
            let u0 = if needs_input {
                input_col(0)
            } else {
                vec![0.0; n_u]
            };
            let x: Vec<f64> = x0.iter().copied().collect();
            DVector::from_iterator(
                self.p(),
                self.output_spec.terms().iter().map(|t| t.eval(&x, &u0)),
            )
        } else if x0.len() == self.q() && self.shape_kind() == ShapeKind::Square {
            x0.clone()
        } else {
            return Err(KoopmanError::Dimension(format!(
                "initial state has length {}; expected {} (raw state){}",
                x0.len(),
                n_x,
                if self.shape_kind() == ShapeKind::Square {
                    format!(" or {} (lifted state)", self.q())
                } else {
                    String::new()
                }
            )));
        };

        let plans: Vec<RebuildPlan> = if steps > 0 {
            (0..self.q())
                .map(|j| self.plan_term(j, have_inputs, &state_rows))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut out = DMatrix::zeros(self.p(), steps + 1);
        out.column_mut(0).copy_from(&current);

        for k in 0..steps {
            let u_k = input_col(k);
            let mut x_virtual = vec![0.0; n_x];
            for (var, row) in state_rows.iter().enumerate() {
                if let Some(r) = row {
                    x_virtual[var] = current[*r];
                }
            }
            let z = DVector::from_iterator(
                self.q(),
                plans.iter().enumerate().map(|(j, plan)| match plan {
                    RebuildPlan::FromOutput(row) => current[*row],
                    RebuildPlan::Evaluate => self.input_spec.terms()[j].eval(&x_virtual, &u_k),
                }),
            );
            let stepped = &self.operator * z;
            current = match self.time_mode {
                TimeMode::DiscreteMap => stepped,
                TimeMode::ContinuousDerivative => &current + stepped * self.dt,
            };
            out.column_mut(k + 1).copy_from(&current);
        }
        Ok(out)
    }

    /// Row-wise relative residual `‖targets_row − (G·omega)_row‖ / ‖targets_row‖`.
    pub fn residual_rows(&self, omega: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Vec<f64>> {
        if omega.nrows() != self.q()
            || targets.nrows() != self.p()
            || omega.ncols() != targets.ncols()
        {
            return Err(KoopmanError::Dimension(format!(
                "residual inputs {:?} / {:?} do not match a {}x{} operator",
                omega.shape(),
                targets.shape(),
                self.p(),
                self.q()
            )));
        }
        let diff = targets - &self.operator * omega;
        Ok((0..self.p())
            .map(|i| diff.row(i).norm() / targets.row(i).norm().max(RESIDUAL_FLOOR))
            .collect())
    }

    /// Residuals against an identity-measurement snapshot set: targets are
    /// `Z` when the model outputs only the state block, `Δ = [Z; Ξ]` when it
    /// outputs state and input blocks.
    pub fn reconstruct_residual(&self, ss: &SnapshotSet) -> Result<Vec<f64>> {
        let omega = ss.omega();
        let targets = if self.p() == ss.n_y() {
            ss.z().clone()
        } else if ss.n_gamma() > 0 && self.p() == ss.n_y() + ss.n_gamma() {
            ss.delta()?
        } else {
            return Err(KoopmanError::Dimension(format!(
                "model outputs {} rows but the snapshot set provides {} (+{} input) rows",
                self.p(),
                ss.n_y(),
                ss.n_gamma()
            )));
        };
        self.residual_rows(&omega, &targets)
    }

    /// Serialize to the versioned model JSON schema.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ModelFile::from_model(self);
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| KoopmanError::ModelFile(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Load a model JSON file, validating the schema version and shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| KoopmanError::ModelFile(e.to_string()))?;
        file.into_model()
    }
}

enum RebuildPlan {
    /// Copy a predicted output row.
    FromOutput(usize),
    /// Re-evaluate the term from predicted state identities and the current
    /// raw input column.
    Evaluate,
}

// ── JSON schema ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    shape_kind: ShapeKind,
    /// Row-major operator entries.
    operator: Vec<f64>,
    dims: DimsFile,
    input_spec: ObservableSpec,
    output_spec: ObservableSpec,
    time_mode: TimeMode,
    dt: f64,
    #[serde(default)]
    diagnostics: Diagnostics,
    spectral: SpectralFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsFile {
    p: usize,
    q: usize,
    n_y: usize,
    n_gamma: usize,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct SpectralFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    singular_values: Option<Vec<f64>>,
    /// One mode per entry, each a list of `[re, im]` components.
    right_modes: Vec<Vec<[f64; 2]>>,
    left_modes: Vec<Vec<[f64; 2]>>,
}

fn complex_columns(m: &DMatrix<C64>) -> Vec<Vec<[f64; 2]>> {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|c| [c.re, c.im]).collect())
        .collect()
}

fn real_columns(m: &DMatrix<f64>) -> Vec<Vec<[f64; 2]>> {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|&x| [x, 0.0]).collect())
        .collect()
}

fn columns_to_complex(cols: &[Vec<[f64; 2]>], rows: usize, what: &str) -> Result<DMatrix<C64>> {
    for c in cols {
        if c.len() != rows {
            return Err(KoopmanError::ModelFile(format!(
                "{what}: mode length {} does not match dimension {rows}",
                c.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(rows, cols.len(), |i, j| {
        C64::new(cols[j][i][0], cols[j][i][1])
    }))
}

fn columns_to_real(cols: &[Vec<[f64; 2]>], rows: usize, what: &str) -> Result<DMatrix<f64>> {
    let c = columns_to_complex(cols, rows, what)?;
    if c.iter().any(|x| x.im != 0.0) {
        return Err(KoopmanError::ModelFile(format!(
            "{what}: singular modes must have zero imaginary parts"
        )));
    }
    Ok(c.map(|x| x.re))
}

impl ModelFile {
    fn from_model(m: &KoopmanModel) -> Self {
        let spectral = match &m.spectral {
            SpectralDecomposition::Eigen {
                eigenvalues,
                right_modes,
                left_modes,
            } => SpectralFile {
                eigenvalues: Some(eigenvalues.iter().map(|c| [c.re, c.im]).collect()),
                singular_values: None,
                right_modes: complex_columns(right_modes),
                left_modes: complex_columns(left_modes),
            },
            SpectralDecomposition::Singular {
                singular_values,
                left_modes,
                right_modes,
            } => SpectralFile {
                eigenvalues: None,
                singular_values: Some(singular_values.iter().copied().collect()),
                right_modes: real_columns(right_modes),
                left_modes: real_columns(left_modes),
            },
        };
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            shape_kind: m.shape_kind(),
            operator: m.operator.transpose().as_slice().to_vec(),
            dims: DimsFile {
                p: m.p(),
                q: m.q(),
                n_y: m.n_y(),
                n_gamma: m.n_gamma(),
            },
            input_spec: m.input_spec.clone(),
            output_spec: m.output_spec.clone(),
            time_mode: m.time_mode,
            dt: m.dt,
            diagnostics: m.diagnostics.clone(),
            spectral,
        }
    }

    fn into_model(self) -> Result<KoopmanModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(KoopmanError::ModelFile(format!(
                "unsupported schema_version {}; this build reads version {}",
                self.schema_version, MODEL_SCHEMA_VERSION
            )));
        }
        let DimsFile { p, q, n_y, n_gamma } = self.dims;
        if self.operator.len() != p * q {
            return Err(KoopmanError::ModelFile(format!(
                "operator has {} entries, expected {}x{}",
                self.operator.len(),
                p,
                q
            )));
        }
        let operator = DMatrix::from_row_slice(p, q, &self.operator);
        let square = p == q;
        if square != (self.shape_kind == ShapeKind::Square) {
            return Err(KoopmanError::ModelFile(
                "shape_kind disagrees with dims".into(),
            ));
        }
        if self.output_spec.len() != p || self.input_spec.len() != q {
            return Err(KoopmanError::ModelFile(
                "spec lengths disagree with dims".into(),
            ));
        }
        if self.input_spec.n_input_identity() != n_gamma || q - n_gamma != n_y {
            return Err(KoopmanError::ModelFile(
                "dims disagree with the input spec".into(),
            ));
        }

        let spectral = match (
            square,
            self.spectral.eigenvalues,
            self.spectral.singular_values,
        ) {
            (true, Some(eigs), None) => {
                let eigenvalues =
                    DVector::from_iterator(eigs.len(), eigs.iter().map(|c| C64::new(c[0], c[1])));
                if eigenvalues.len() != p {
                    return Err(KoopmanError::ModelFile(
                        "eigenvalue count disagrees with dims".into(),
                    ));
                }
                SpectralDecomposition::Eigen {
                    eigenvalues,
                    right_modes: columns_to_complex(&self.spectral.right_modes, q, "right_modes")?,
                    left_modes: columns_to_complex(&self.spectral.left_modes, q, "left_modes")?,
                }
            }
            (false, None, Some(sv)) => SpectralDecomposition::Singular {
                singular_values: DVector::from_vec(sv),
                left_modes: columns_to_real(&self.spectral.left_modes, p, "left_modes")?,
                right_modes: columns_to_real(&self.spectral.right_modes, q, "right_modes")?,
            },
            _ => {
                return Err(KoopmanError::ModelFile(
                    "spectral block must carry eigenvalues (square) or singular_values \
                     (rectangular)"
                        .into(),
                ));
            }
        };

        Ok(KoopmanModel {
            operator,
            input_spec: self.input_spec,
            output_spec: self.output_spec,
            time_mode: self.time_mode,
            dt: self.dt,
            diagnostics: self.diagnostics,
            spectral,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables;

    fn square_model(entries: &[f64], n: usize) -> KoopmanModel {
        KoopmanModel::new(
            DMatrix::from_row_slice(n, n, entries),
            ObservableSpec::identity(n, 0),
            ObservableSpec::identity(n, 0),
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap()
    }

    #[test]
    fn identity_operator_predicts_constant_trajectory() {
        let model = square_model(&[1.0, 0.0, 0.0, 1.0], 2);
        let x0 = DVector::from_vec(vec![3.0, -2.0]);
        let out = model.predict(&x0, None, 3).unwrap();
        assert_eq!(out.ncols(), 4);
        for k in 0..4 {
            assert_eq!(out.column(k), x0.column(0));
        }
    }

    #[test]
    fn predict_zero_steps_returns_initial_state() {
        let model = square_model(&[0.5, 0.0, 0.0, 2.0], 2);
        let x0 = DVector::from_vec(vec![1.0, 4.0]);
        let out = model.predict(&x0, None, 0).unwrap();
        assert_eq!(out.ncols(), 1);
        assert_eq!(out.column(0), x0.column(0));
    }

    #[test]
    fn eigenfunction_eval_on_standard_basis() {
        let model = square_model(&[3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0], 3);
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let phi = model.eigenfunction_eval(&e1).unwrap();
        assert!((phi[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(phi[1].norm() < 1e-12);
        assert!(phi[2].norm() < 1e-12);

        let zero = DVector::zeros(3);
        for phi in model.eigenfunction_eval(&zero).unwrap() {
            assert_eq!(phi, C64::new(0.0, 0.0));
        }
    }

    #[test]
    fn eigenfunction_eval_is_linear() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let model = KoopmanModel::new(
            g,
            ObservableSpec::identity(4, 0),
            ObservableSpec::identity(4, 0),
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap();
        let z1 = DVector::from_fn(4, |i, _| (i + 1) as f64);
        let z2 = DVector::from_fn(4, |i, _| (i as f64) - 1.5);
        let alpha = 0.37;
        let lhs = model.eigenfunction_eval(&(&z1 * alpha + &z2)).unwrap();
        let p1 = model.eigenfunction_eval(&z1).unwrap();
        let p2 = model.eigenfunction_eval(&z2).unwrap();
        for j in 0..4 {
            let rhs = p1[j] * alpha + p2[j];
            assert!((lhs[j] - rhs).norm() <= 1e-12 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn spectral_expansion_reconstructs_state() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let g = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let model = KoopmanModel::new(
            g.clone(),
            ObservableSpec::identity(5, 0),
            ObservableSpec::identity(5, 0),
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap();
        let z = DVector::from_fn(5, |i, _| (i as f64 + 1.0) * 0.3);

        // Reconstruction: Σ_j (φ_j(z) / <v_j, w_j>) v_j = z.
        let SpectralDecomposition::Eigen {
            right_modes,
            left_modes,
            ..
        } = model.spectral()
        else {
            panic!("square model must have an eigendecomposition");
        };
        let zc: DVector<C64> = z.map(|x| C64::new(x, 0.0));
        let mut rebuilt = DVector::from_element(5, C64::new(0.0, 0.0));
        for j in 0..5 {
            let w = left_modes.column(j);
            let v = right_modes.column(j);
            let coeff = w.dotc(&zc) / w.dotc(&v.into_owned());
            rebuilt += right_modes.column(j) * coeff;
        }
        assert!((&rebuilt - &zc).norm() <= 1e-8 * zc.norm());

        // Stepping through the expansion matches the operator product.
        let direct = &g * &z;
        let expanded = model.spectral_step(&z).unwrap();
        for i in 0..5 {
            assert!((expanded[i] - C64::new(direct[i], 0.0)).norm() <= 1e-8 * direct.norm());
        }
    }

    #[test]
    fn rectangular_spectral_relation_holds() {
        let op = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0]);
        let model = KoopmanModel::new(
            op.clone(),
            ObservableSpec::identity(2, 1),
            ObservableSpec::state_identity(2, 1),
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap();
        let SpectralDecomposition::Singular {
            singular_values,
            left_modes,
            right_modes,
        } = model.spectral()
        else {
            panic!("rectangular model must have singular triplets");
        };
        for j in 0..singular_values.len() {
            let lhs = &op * right_modes.column(j);
            let rhs = left_modes.column(j) * singular_values[j];
            assert!((lhs - rhs).norm() <= 1e-8 * op.norm());
        }
    }

    #[test]
    fn residuals_zero_targets_guarded() {
        let model = square_model(&[1.0, 0.0, 0.0, 1.0], 2);
        let omega = DMatrix::zeros(2, 3);
        let targets = DMatrix::zeros(2, 3);
        let res = model.residual_rows(&omega, &targets).unwrap();
        assert_eq!(res, vec![0.0, 0.0]);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let model = square_model(&[0.1, 0.0, 0.3, 0.0, 1.5, 1.0, 0.0, -1.5, -1.0], 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = KoopmanModel::load(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn load_rejects_unknown_field() {
        let model = square_model(&[1.0, 0.0, 0.0, 1.0], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen(
            "\"schema_version\"",
            "\"surprise\": 1,\n  \"schema_version\"",
            1,
        );
        std::fs::write(&path, text).unwrap();
        match KoopmanModel::load(&path) {
            Err(KoopmanError::ModelFile(msg)) => assert!(msg.contains("surprise"), "{msg}"),
            other => panic!("expected model file error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_version_mismatch() {
        let model = square_model(&[1.0, 0.0, 0.0, 1.0], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replacen(
            "\"schema_version\": 1",
            "\"schema_version\": 2",
            1,
        );
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            KoopmanModel::load(&path),
            Err(KoopmanError::ModelFile(_))
        ));
    }

    #[test]
    fn load_applies_default_diagnostics() {
        let model = square_model(&[1.0, 0.0, 0.0, 1.0], 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("diagnostics");
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
        let back = KoopmanModel::load(&path).unwrap();
        assert_eq!(back.diagnostics(), &Diagnostics::default());
    }

    #[test]
    fn closure_error_names_offending_term() {
        // Input dictionary needs x2, but the output space only exposes x1.
        let input_spec = observables::parse_spec("x1,x1*x2", 2, 0).unwrap();
        let output_spec = observables::parse_spec("x1", 2, 0).unwrap();
        let model = KoopmanModel::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            input_spec,
            output_spec,
            TimeMode::DiscreteMap,
            1.0,
            Diagnostics::default(),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        match model.predict(&x0, None, 2) {
            Err(KoopmanError::Closure { term, .. }) => assert_eq!(term, "x1*x2"),
            other => panic!("expected closure error, got {other:?}"),
        }
    }
}
