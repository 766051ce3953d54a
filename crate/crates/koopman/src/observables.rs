//! Dictionaries of scalar observables g(x, u) used to lift raw data.
//!
//! A spec is an ordered list of terms; the order fixes the row order of every
//! lifted matrix. Input-space and output-space specs are kept separate so an
//! operator can map a rich input dictionary onto a restricted output one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KoopmanError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKind {
    StateIdentity {
        index: usize,
    },
    InputIdentity {
        index: usize,
    },
    Monomial {
        state_powers: Vec<u32>,
        input_powers: Vec<u32>,
    },
}

/// One scalar observable with its display label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableTerm {
    #[serde(flatten)]
    pub kind: TermKind,
    pub label: String,
}

impl ObservableTerm {
    pub fn state(index: usize, label: impl Into<String>) -> Self {
        Self {
            kind: TermKind::StateIdentity { index },
            label: label.into(),
        }
    }

    pub fn input(index: usize, label: impl Into<String>) -> Self {
        Self {
            kind: TermKind::InputIdentity { index },
            label: label.into(),
        }
    }

    pub fn monomial(
        state_powers: Vec<u32>,
        input_powers: Vec<u32>,
        label: impl Into<String>,
    ) -> Self {
        Self {
            kind: TermKind::Monomial {
                state_powers,
                input_powers,
            },
            label: label.into(),
        }
    }

    pub fn touches_input(&self) -> bool {
        match &self.kind {
            TermKind::StateIdentity { .. } => false,
            TermKind::InputIdentity { .. } => true,
            TermKind::Monomial { input_powers, .. } => input_powers.iter().any(|&p| p > 0),
        }
    }

    /// Powers of each state variable in this term.
    pub fn state_powers(&self, n_x: usize) -> Vec<u32> {
        match &self.kind {
            TermKind::StateIdentity { index } => {
                let mut p = vec![0; n_x];
                p[*index] = 1;
                p
            }
            TermKind::InputIdentity { .. } => vec![0; n_x],
            TermKind::Monomial { state_powers, .. } => state_powers.clone(),
        }
    }

    /// Powers of each input variable in this term.
    pub fn input_powers(&self, n_u: usize) -> Vec<u32> {
        match &self.kind {
            TermKind::StateIdentity { .. } => vec![0; n_u],
            TermKind::InputIdentity { index } => {
                let mut p = vec![0; n_u];
                p[*index] = 1;
                p
            }
            TermKind::Monomial { input_powers, .. } => input_powers.clone(),
        }
    }

    /// Evaluate at one sample. Monomials multiply factors in ascending
    /// variable order, states before inputs, one multiply per power step —
    /// the fixed order keeps lifted values bit-reproducible.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match &self.kind {
            TermKind::StateIdentity { index } => x[*index],
            TermKind::InputIdentity { index } => u[*index],
            TermKind::Monomial {
                state_powers,
                input_powers,
            } => {
                let mut acc = 1.0;
                for (i, &p) in state_powers.iter().enumerate() {
                    for _ in 0..p {
                        acc *= x[i];
                    }
                }
                for (j, &p) in input_powers.iter().enumerate() {
                    for _ in 0..p {
                        acc *= u[j];
                    }
                }
                acc
            }
        }
    }
}

/// Ordered observable dictionary over an `n_x`-state, `n_u`-input system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    terms: Vec<ObservableTerm>,
    n_x: usize,
    n_u: usize,
}

impl ObservableSpec {
    pub fn new(terms: Vec<ObservableTerm>, n_x: usize, n_u: usize) -> Result<Self> {
        let spec = Self { terms, n_x, n_u };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for term in &self.terms {
            if !seen.insert(term.label.as_str()) {
                return Err(KoopmanError::Spec(format!(
                    "duplicate term label `{}`",
                    term.label
                )));
            }
            match &term.kind {
                TermKind::StateIdentity { index } if *index >= self.n_x => {
                    return Err(KoopmanError::Spec(format!(
                        "term `{}`: state index {} out of range for n_x = {}",
                        term.label, index, self.n_x
                    )));
                }
                TermKind::InputIdentity { index } if *index >= self.n_u => {
                    return Err(KoopmanError::Spec(format!(
                        "term `{}`: input index {} out of range for n_u = {}",
                        term.label, index, self.n_u
                    )));
                }
                TermKind::Monomial {
                    state_powers,
                    input_powers,
                } => {
                    if state_powers.len() != self.n_x || input_powers.len() != self.n_u {
                        return Err(KoopmanError::Spec(format!(
                            "term `{}`: power vectors must have lengths {} and {}",
                            term.label, self.n_x, self.n_u
                        )));
                    }
                    let degree: u32 =
                        state_powers.iter().sum::<u32>() + input_powers.iter().sum::<u32>();
                    if degree == 0 {
                        return Err(KoopmanError::Spec(format!(
                            "term `{}`: monomial total degree must be at least 1",
                            term.label
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Identity dictionary `x1..x{n_x}, u1..u{n_u}`.
    pub fn identity(n_x: usize, n_u: usize) -> Self {
        let mut terms: Vec<ObservableTerm> = (0..n_x)
            .map(|i| ObservableTerm::state(i, format!("x{}", i + 1)))
            .collect();
        terms.extend((0..n_u).map(|j| ObservableTerm::input(j, format!("u{}", j + 1))));
        Self { terms, n_x, n_u }
    }

    /// Identity dictionary over the states only, in an `n_u`-input context.
    pub fn state_identity(n_x: usize, n_u: usize) -> Self {
        let terms = (0..n_x)
            .map(|i| ObservableTerm::state(i, format!("x{}", i + 1)))
            .collect();
        Self { terms, n_x, n_u }
    }

    pub fn terms(&self) -> &[ObservableTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn touches_input(&self) -> bool {
        self.terms.iter().any(ObservableTerm::touches_input)
    }

    /// Count of plain input-identity terms (the `Υ` block width for identity
    /// layouts).
    pub fn n_input_identity(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| matches!(t.kind, TermKind::InputIdentity { .. }))
            .count()
    }

    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.label == label)
    }

    /// Evaluate every term columnwise: entry (k, t) is term k at sample t.
    pub fn lift(&self, x: &DMatrix<f64>, u: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n_x {
            return Err(KoopmanError::Dimension(format!(
                "state matrix has {} rows but the spec expects {}",
                x.nrows(),
                self.n_x
            )));
        }
        if self.touches_input() {
            match u {
                None => {
                    return Err(KoopmanError::MissingInput(
                        "spec contains input-dependent terms but no input matrix was given".into(),
                    ));
                }
                Some(u) if u.nrows() != self.n_u || u.ncols() != x.ncols() => {
                    return Err(KoopmanError::Dimension(format!(
                        "input matrix is {:?}, expected {:?}",
                        u.shape(),
                        (self.n_u, x.ncols())
                    )));
                }
                _ => {}
            }
        }
        let mut out = DMatrix::zeros(self.len(), x.ncols());
        let zeros = vec![0.0; self.n_u];
        for t in 0..x.ncols() {
            let x_col: Vec<f64> = x.column(t).iter().copied().collect();
            let u_col: Vec<f64> = match u {
                Some(u) => u.column(t).iter().copied().collect(),
                None => zeros.clone(),
            };
            for (k, term) in self.terms.iter().enumerate() {
                out[(k, t)] = term.eval(&x_col, &u_col);
            }
        }
        Ok(out)
    }

    /// Evaluate every term at a single sample.
    pub fn lift_column(&self, x: &DVector<f64>, u: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let um = u.map(|u| DMatrix::from_column_slice(u.len(), 1, u.as_slice()));
        Ok(self.lift(&xm, um.as_ref())?.column(0).into_owned())
    }
}

/// For each output term, its row index in the lifted input matrix (matched
/// by label).
pub fn restriction_indices(
    input_spec: &ObservableSpec,
    output_spec: &ObservableSpec,
) -> Result<Vec<usize>> {
    output_spec
        .terms()
        .iter()
        .map(|t| {
            input_spec.index_of_label(&t.label).ok_or_else(|| {
                KoopmanError::Spec(format!(
                    "output term `{}` does not appear in the input spec",
                    t.label
                ))
            })
        })
        .collect()
}

/// Parse the textual spec grammar: comma-separated terms, each a `*`-joined
/// product of `x<i>` / `u<j>` factors with optional `^<k>` powers.
/// Examples: `x1,x2,x1^2,u1` and `x1*x2`.
pub fn parse_spec(text: &str, n_x: usize, n_u: usize) -> Result<ObservableSpec> {
    let mut terms = Vec::new();
    for raw in text.split(',') {
        let token = raw.trim();
        if token.is_empty() {
            return Err(KoopmanError::Spec("empty term in observable spec".into()));
        }
        terms.push(parse_term(token, n_x, n_u)?);
    }
    ObservableSpec::new(terms, n_x, n_u)
}

fn parse_term(token: &str, n_x: usize, n_u: usize) -> Result<ObservableTerm> {
    let mut state_powers = vec![0u32; n_x];
    let mut input_powers = vec![0u32; n_u];
    let mut factors = 0usize;
    for factor in token.split('*') {
        let factor = factor.trim();
        let (var, power) = match factor.split_once('^') {
            Some((v, p)) => {
                let power: u32 = p.trim().parse().map_err(|_| {
                    KoopmanError::Spec(format!("bad exponent `{p}` in term `{token}`"))
                })?;
                (v.trim(), power)
            }
            None => (factor, 1),
        };
        let bad = || KoopmanError::Spec(format!("unrecognized factor `{var}` in term `{token}`"));
        let (kind, rest) = var.split_at(1.min(var.len()));
        let index: usize = rest.parse().map_err(|_| bad())?;
        if index == 0 {
            return Err(bad());
        }
        match kind {
            "x" if index <= n_x => state_powers[index - 1] += power,
            "u" if index <= n_u => input_powers[index - 1] += power,
            "x" | "u" => {
                return Err(KoopmanError::Spec(format!(
                    "factor `{var}` is out of range (n_x = {n_x}, n_u = {n_u})"
                )));
            }
            _ => return Err(bad()),
        }
        factors += 1;
    }
    if factors == 0 {
        return Err(KoopmanError::Spec(format!("term `{token}` has no factors")));
    }
    let state_degree: u32 = state_powers.iter().sum();
    let input_degree: u32 = input_powers.iter().sum();
    let kind = if state_degree == 1 && input_degree == 0 {
        TermKind::StateIdentity {
            index: state_powers.iter().position(|&p| p == 1).unwrap(),
        }
    } else if state_degree == 0 && input_degree == 1 {
        TermKind::InputIdentity {
            index: input_powers.iter().position(|&p| p == 1).unwrap(),
        }
    } else if state_degree + input_degree == 0 {
        return Err(KoopmanError::Spec(format!(
            "term `{token}` has total degree 0"
        )));
    } else {
        TermKind::Monomial {
            state_powers,
            input_powers,
        }
    };
    Ok(ObservableTerm {
        kind,
        label: token.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lift_identity_returns_raw_states() {
        let spec = ObservableSpec::identity(2, 0);
        let x = DMatrix::from_column_slice(2, 1, &[5.0, 2.0]);
        let lifted = spec.lift(&x, None).unwrap();
        assert_eq!(lifted, x);
    }

    #[test]
    fn lift_slow_manifold_dictionary() {
        // {x1, x2, x1^2, u} at x = (5, 2), u = 0 -> (5, 2, 25, 0).
        let spec = parse_spec("x1,x2,x1^2,u1", 2, 1).unwrap();
        let x = DMatrix::from_column_slice(2, 1, &[5.0, 2.0]);
        let u = DMatrix::from_column_slice(1, 1, &[0.0]);
        let lifted = spec.lift(&x, Some(&u)).unwrap();
        assert_eq!(lifted.as_slice(), &[5.0, 2.0, 25.0, 0.0]);
    }

    #[test]
    fn lift_sir_dictionary() {
        // {S, I, R, S*I, Vacc} at S=0.99, I=0.01, R=0, Vacc=0.003.
        let spec = parse_spec("x1,x2,x3,x1*x2,u1", 3, 1).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.99, 0.01, 0.0]);
        let u = DMatrix::from_column_slice(1, 1, &[0.003]);
        let lifted = spec.lift(&x, Some(&u)).unwrap();
        assert_eq!(lifted.as_slice(), &[0.99, 0.01, 0.0, 0.99 * 0.01, 0.003]);
    }

    #[test]
    fn lift_missing_inputs_errors() {
        let spec = parse_spec("x1,u1", 1, 1).unwrap();
        let x = DMatrix::from_column_slice(1, 1, &[1.0]);
        assert!(matches!(
            spec.lift(&x, None),
            Err(KoopmanError::MissingInput(_))
        ));
    }

    #[test]
    fn restriction_prefix_indices() {
        let input = parse_spec("x1,x2,x3,x1*x2,u1", 3, 1).unwrap();
        let output = parse_spec("x1,x2,x3", 3, 1).unwrap();
        assert_eq!(restriction_indices(&input, &output).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn restriction_identity_map() {
        let spec = parse_spec("x1,x2,u1", 2, 1).unwrap();
        assert_eq!(restriction_indices(&spec, &spec).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn restriction_unmatched_term_errors() {
        let input = parse_spec("x1,x2", 2, 0).unwrap();
        let output = parse_spec("x1,x1^2", 2, 0).unwrap();
        assert!(matches!(
            restriction_indices(&input, &output),
            Err(KoopmanError::Spec(_))
        ));
    }

    #[test]
    fn parse_rejects_unknown_and_out_of_range() {
        assert!(parse_spec("x1,SI", 2, 0).is_err());
        assert!(parse_spec("x3", 2, 0).is_err());
        assert!(parse_spec("u1", 2, 0).is_err());
        assert!(parse_spec("x1^0", 2, 0).is_err());
        assert!(parse_spec("x1,,x2", 2, 0).is_err());
        assert!(parse_spec("x1,x1", 2, 0).is_err());
    }

    #[test]
    fn parse_mixed_monomial() {
        let spec = parse_spec("x1^2*u1", 2, 1).unwrap();
        match &spec.terms()[0].kind {
            TermKind::Monomial {
                state_powers,
                input_powers,
            } => {
                assert_eq!(state_powers, &[2, 0]);
                assert_eq!(input_powers, &[1]);
            }
            other => panic!("expected monomial, got {other:?}"),
        }
        assert!(spec.touches_input());
    }

    #[test]
    fn term_serde_shape_matches_schema() {
        let term = ObservableTerm::monomial(vec![2, 0], vec![1], "x1^2*u1");
        let json = serde_json::to_value(&term).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "kind": "monomial",
                "state_powers": [2, 0],
                "input_powers": [1],
                "label": "x1^2*u1"
            })
        );
        let back: ObservableTerm = serde_json::from_value(json).unwrap();
        assert_eq!(back, term);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn prop_lift_is_columnwise(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = parse_spec("x1,x2,x1^2,x1*x2,u1", 2, 1).unwrap();
            let x = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-2.0..2.0));
            let u = DMatrix::from_fn(1, 5, |_, _| rng.random_range(-2.0..2.0));
            let lifted = spec.lift(&x, Some(&u)).unwrap();

            // Permuting data columns permutes lifted columns identically.
            let perm = [3usize, 0, 4, 1, 2];
            let xp = DMatrix::from_fn(2, 5, |i, j| x[(i, perm[j])]);
            let up = DMatrix::from_fn(1, 5, |i, j| u[(i, perm[j])]);
            let lifted_p = spec.lift(&xp, Some(&up)).unwrap();
            for (j, &src) in perm.iter().enumerate() {
                prop_assert_eq!(lifted_p.column(j), lifted.column(src));
            }
        }

        #[test]
        fn prop_monomial_matches_naive_product(x1 in -3.0f64..3.0, x2 in -3.0f64..3.0, u1 in -3.0f64..3.0) {
            // Degree-4 mixed monomial against explicit ascending-order multiplies.
            let term = ObservableTerm::monomial(vec![2, 1], vec![1], "m");
            let got = term.eval(&[x1, x2], &[u1]);
            let want = x1 * x1 * x2 * u1;
            prop_assert_eq!(got, want);
        }
    }
}
