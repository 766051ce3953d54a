//! Trajectories, snapshot-matrix assembly, and trajectory CSV I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{KoopmanError, Result};

/// One sampled run of a dynamical system: time-ordered state columns
/// `x_0..x_m`, optional input columns `u_0..u_m`, and the sample spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: DMatrix<f64>,
    inputs: Option<DMatrix<f64>>,
    dt: f64,
    id: String,
}

impl Trajectory {
    pub fn new(
        states: DMatrix<f64>,
        inputs: Option<DMatrix<f64>>,
        dt: f64,
        id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(u) = &inputs {
            if u.ncols() != states.ncols() {
                return Err(KoopmanError::Dimension(format!(
                    "states have {} columns but inputs have {}",
                    states.ncols(),
                    u.ncols()
                )));
            }
        }
        if !(dt > 0.0) {
            return Err(KoopmanError::Dimension(format!(
                "dt must be positive, got {dt}"
            )));
        }
        Ok(Self {
            states,
            inputs,
            dt,
            id: id.into(),
        })
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_states(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.as_ref().map_or(0, |u| u.nrows())
    }

    /// Number of sample columns (`m + 1`).
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }
}

/// Paired (or trio) snapshot matrices.
///
/// `Y` and `Z` hold current/future measurement columns; `Upsilon` and `Xi`
/// hold current/future input columns when present. The stacked matrices
/// `Ω = [Y; Υ]` and `Δ = [Z; Ξ]` are assembled on demand, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    y: DMatrix<f64>,
    z: DMatrix<f64>,
    upsilon: Option<DMatrix<f64>>,
    xi: Option<DMatrix<f64>>,
    dt: f64,
}

impl SnapshotSet {
    pub fn new(
        y: DMatrix<f64>,
        z: DMatrix<f64>,
        upsilon: Option<DMatrix<f64>>,
        xi: Option<DMatrix<f64>>,
        dt: f64,
    ) -> Result<Self> {
        if y.shape() != z.shape() {
            return Err(KoopmanError::Dimension(format!(
                "Y is {:?} but Z is {:?}",
                y.shape(),
                z.shape()
            )));
        }
        if y.nrows() == 0 || y.ncols() == 0 {
            return Err(KoopmanError::InsufficientData(
                "snapshot set needs at least one measurement row and one column".into(),
            ));
        }
        match (&upsilon, &xi) {
            (Some(up), Some(xi_m)) if up.shape() != xi_m.shape() => {
                return Err(KoopmanError::Dimension(format!(
                    "Upsilon is {:?} but Xi is {:?}",
                    up.shape(),
                    xi_m.shape()
                )));
            }
            (None, Some(_)) => {
                return Err(KoopmanError::Dimension("Xi present without Upsilon".into()));
            }
            _ => {}
        }
        if let Some(up) = &upsilon {
            if up.ncols() != y.ncols() {
                return Err(KoopmanError::Dimension(format!(
                    "Y has {} columns but Upsilon has {}",
                    y.ncols(),
                    up.ncols()
                )));
            }
        }
        if !(dt > 0.0) {
            return Err(KoopmanError::Dimension(format!(
                "dt must be positive, got {dt}"
            )));
        }
        Ok(Self {
            y,
            z,
            upsilon,
            xi,
            dt,
        })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn upsilon(&self) -> Option<&DMatrix<f64>> {
        self.upsilon.as_ref()
    }

    pub fn xi(&self) -> Option<&DMatrix<f64>> {
        self.xi.as_ref()
    }

    pub fn n_y(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_gamma(&self) -> usize {
        self.upsilon.as_ref().map_or(0, |u| u.nrows())
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `Ω = [Y; Υ]` (just `Y` for pair data).
    pub fn omega(&self) -> DMatrix<f64> {
        match &self.upsilon {
            Some(up) => stack_rows(&self.y, up),
            None => self.y.clone(),
        }
    }

    /// `Δ = [Z; Ξ]`; requires `Xi` whenever `Upsilon` is present.
    pub fn delta(&self) -> Result<DMatrix<f64>> {
        match (&self.upsilon, &self.xi) {
            (None, _) => Ok(self.z.clone()),
            (Some(_), Some(xi)) => Ok(stack_rows(&self.z, xi)),
            (Some(_), None) => Err(KoopmanError::MissingInput(
                "future-input block Xi is absent; rebuild the trio with future inputs".into(),
            )),
        }
    }

    /// Concatenate column blocks of structurally identical sets.
    pub fn concat(sets: &[SnapshotSet]) -> Result<SnapshotSet> {
        let first = sets.first().ok_or_else(|| {
            KoopmanError::InsufficientData("no snapshot sets to concatenate".into())
        })?;
        for s in &sets[1..] {
            if s.n_y() != first.n_y()
                || s.n_gamma() != first.n_gamma()
                || s.xi.is_some() != first.xi.is_some()
            {
                return Err(KoopmanError::Dimension(
                    "snapshot sets have mismatched row structure".into(),
                ));
            }
        }
        let cat = |pick: &dyn Fn(&SnapshotSet) -> &DMatrix<f64>| -> DMatrix<f64> {
            let total: usize = sets.iter().map(|s| pick(s).ncols()).sum();
            let mut out = DMatrix::zeros(pick(first).nrows(), total);
            let mut at = 0;
            for s in sets {
                let block = pick(s);
                out.columns_mut(at, block.ncols()).copy_from(block);
                at += block.ncols();
            }
            out
        };
        SnapshotSet::new(
            cat(&|s| &s.y),
            cat(&|s| &s.z),
            first
                .upsilon
                .as_ref()
                .map(|_| cat(&|s| s.upsilon.as_ref().unwrap())),
            first.xi.as_ref().map(|_| cat(&|s| s.xi.as_ref().unwrap())),
            first.dt,
        )
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

fn require_pairs(traj: &Trajectory) -> Result<usize> {
    if traj.len() < 2 {
        return Err(KoopmanError::InsufficientData(format!(
            "trajectory `{}` has {} column(s); at least 2 are needed to form snapshot pairs",
            traj.id(),
            traj.len()
        )));
    }
    Ok(traj.len() - 1)
}

/// Shifted pair `(Y, Z)` from one trajectory: `Y = x_0..x_{m-1}`, `Z = x_1..x_m`.
pub fn build_pair(traj: &Trajectory) -> Result<SnapshotSet> {
    let m = require_pairs(traj)?;
    SnapshotSet::new(
        traj.states().columns(0, m).into_owned(),
        traj.states().columns(1, m).into_owned(),
        None,
        None,
        traj.dt(),
    )
}

/// Pairs from several trajectories, concatenated without pairing across
/// trajectory boundaries.
pub fn build_pair_many(trajs: &[Trajectory]) -> Result<SnapshotSet> {
    let sets: Vec<SnapshotSet> = trajs.iter().map(build_pair).collect::<Result<_>>()?;
    SnapshotSet::concat(&sets)
}

/// Trio `(Y, Z, Υ)` from one trajectory, with `Ξ = u_1..u_m` included when
/// `include_future_input` is set.
pub fn build_trio(traj: &Trajectory, include_future_input: bool) -> Result<SnapshotSet> {
    let inputs = traj.inputs().ok_or_else(|| {
        KoopmanError::MissingInput(format!("trajectory `{}` carries no inputs", traj.id()))
    })?;
    let m = require_pairs(traj)?;
    SnapshotSet::new(
        traj.states().columns(0, m).into_owned(),
        traj.states().columns(1, m).into_owned(),
        Some(inputs.columns(0, m).into_owned()),
        include_future_input.then(|| inputs.columns(1, m).into_owned()),
        traj.dt(),
    )
}

pub fn build_trio_many(trajs: &[Trajectory], include_future_input: bool) -> Result<SnapshotSet> {
    let sets: Vec<SnapshotSet> = trajs
        .iter()
        .map(|t| build_trio(t, include_future_input))
        .collect::<Result<_>>()?;
    SnapshotSet::concat(&sets)
}

/// Unshifted pair for continuous-time fits: `Y` holds every state column and
/// `Z` the matching derivative columns.
pub fn build_derivative_pair(traj: &Trajectory, derivs: &DMatrix<f64>) -> Result<SnapshotSet> {
    if derivs.shape() != traj.states().shape() {
        return Err(KoopmanError::Dimension(format!(
            "derivative matrix is {:?} but states are {:?}",
            derivs.shape(),
            traj.states().shape()
        )));
    }
    SnapshotSet::new(traj.states().clone(), derivs.clone(), None, None, traj.dt())
}

const REL_DT_TOL: f64 = 1e-9;

fn parse_header(fields: &[String]) -> Result<(usize, usize)> {
    let bad = |msg: String| KoopmanError::Parse { line: 1, msg };
    if fields.first().map(String::as_str) != Some("t") {
        return Err(bad("header must start with column `t`".into()));
    }
    let mut n_x = 0;
    let mut n_u = 0;
    for field in &fields[1..] {
        if n_u == 0 && *field == format!("x{}", n_x + 1) {
            n_x += 1;
        } else if *field == format!("u{}", n_u + 1) {
            n_u += 1;
        } else {
            return Err(bad(format!("unexpected header column `{field}`")));
        }
    }
    if n_x == 0 {
        return Err(bad("header declares no state columns".into()));
    }
    Ok((n_x, n_u))
}

/// Read a trajectory from CSV (`t,x1..xn[,u1..um]`, one row per sample).
/// The time column determines `dt`; nonuniform spacing is rejected.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;

    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let (n_x, n_u) = parse_header(&header)?;
    let width = 1 + n_x + n_u;

    let mut times = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(KoopmanError::Parse {
                line,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| KoopmanError::Parse {
                line,
                msg: format!("non-numeric value `{cell}` in column `{}`", header[col]),
            })?;
            row.push(v);
        }
        times.push(row[0]);
        values.push(row[1..].to_vec());
    }

    if times.len() < 2 {
        return Err(KoopmanError::InsufficientData(format!(
            "{}: need at least 2 samples to infer dt",
            path.display()
        )));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(KoopmanError::Parse {
            line: 3,
            msg: format!("time column must increase; first step is {dt}"),
        });
    }
    for (k, w) in times.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if (gap - dt).abs() > REL_DT_TOL * dt.abs() {
            return Err(KoopmanError::Parse {
                line: k + 3,
                msg: format!("nonuniform sampling: step {gap} differs from dt {dt}"),
            });
        }
    }

    let cols = times.len();
    let states = DMatrix::from_fn(n_x, cols, |i, j| values[j][i]);
    let inputs = (n_u > 0).then(|| DMatrix::from_fn(n_u, cols, |i, j| values[j][n_x + i]));
    let id = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Trajectory::new(states, inputs, dt, id)
}

fn csv_err(e: csv::Error) -> KoopmanError {
    let line = match e.position() {
        Some(p) => p.line() as usize,
        None => 0,
    };
    KoopmanError::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Write a trajectory as CSV with LF line endings and 17 significant digits,
/// so a round trip through `load_csv` reproduces every value bit-exactly.
pub fn save_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "t")?;
    for i in 0..traj.n_states() {
        write!(out, ",x{}", i + 1)?;
    }
    for j in 0..traj.n_inputs() {
        write!(out, ",u{}", j + 1)?;
    }
    out.write_all(b"\n")?;
    for k in 0..traj.len() {
        write!(out, "{:.16e}", k as f64 * traj.dt())?;
        for i in 0..traj.n_states() {
            write!(out, ",{:.16e}", traj.states()[(i, k)])?;
        }
        if let Some(u) = traj.inputs() {
            for j in 0..u.nrows() {
                write!(out, ",{:.16e}", u[(j, k)])?;
            }
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_from(states: DMatrix<f64>, inputs: Option<DMatrix<f64>>) -> Trajectory {
        Trajectory::new(states, inputs, 1.0, "t").unwrap()
    }

    #[test]
    fn build_pair_shifts_columns() {
        let t = traj_from(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), None);
        let ss = build_pair(&t).unwrap();
        assert_eq!(ss.y(), &DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert_eq!(ss.z(), &DMatrix::from_row_slice(1, 2, &[2.0, 3.0]));
        assert!(ss.upsilon().is_none());
    }

    #[test]
    fn build_pair_needs_two_columns() {
        let t = traj_from(DMatrix::from_row_slice(1, 1, &[1.0]), None);
        assert!(matches!(
            build_pair(&t),
            Err(KoopmanError::InsufficientData(_))
        ));
    }

    #[test]
    fn build_pair_many_never_pairs_across_trajectories() {
        let t1 = traj_from(DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]), None);
        let t2 = traj_from(DMatrix::from_row_slice(1, 3, &[10.0, 20.0, 30.0]), None);
        let ss = build_pair_many(&[t1.clone(), t2.clone()]).unwrap();
        assert_eq!(ss.m(), 5);
        // Oracle: enumerate the valid (k, k+1) pairs of each trajectory.
        let mut expected = Vec::new();
        for t in [&t1, &t2] {
            for k in 0..t.len() - 1 {
                expected.push((t.states()[(0, k)], t.states()[(0, k + 1)]));
            }
        }
        for (j, (y, z)) in expected.iter().enumerate() {
            assert_eq!(ss.y()[(0, j)], *y);
            assert_eq!(ss.z()[(0, j)], *z);
        }
    }

    #[test]
    fn build_trio_future_input_switch() {
        let states = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let inputs = DMatrix::from_row_slice(1, 2, &[7.0, 9.0]);
        let t = traj_from(states, Some(inputs));

        let ss = build_trio(&t, false).unwrap();
        assert_eq!(ss.y(), &DMatrix::from_row_slice(1, 1, &[1.0]));
        assert_eq!(ss.z(), &DMatrix::from_row_slice(1, 1, &[2.0]));
        assert_eq!(
            ss.upsilon().unwrap(),
            &DMatrix::from_row_slice(1, 1, &[7.0])
        );
        assert!(ss.xi().is_none());

        let ss = build_trio(&t, true).unwrap();
        assert_eq!(ss.xi().unwrap(), &DMatrix::from_row_slice(1, 1, &[9.0]));
    }

    #[test]
    fn build_trio_requires_inputs() {
        let t = traj_from(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), None);
        assert!(matches!(
            build_trio(&t, false),
            Err(KoopmanError::MissingInput(_))
        ));
    }

    #[test]
    fn derivative_pair_keeps_all_columns() {
        let t = traj_from(DMatrix::from_row_slice(1, 1, &[1.0]), None);
        let ss = build_derivative_pair(&t, &DMatrix::from_row_slice(1, 1, &[2.0])).unwrap();
        assert_eq!(ss.y(), &DMatrix::from_row_slice(1, 1, &[1.0]));
        assert_eq!(ss.z(), &DMatrix::from_row_slice(1, 1, &[2.0]));
    }

    #[test]
    fn derivative_pair_shape_mismatch() {
        let t = traj_from(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), None);
        let bad = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        assert!(matches!(
            build_derivative_pair(&t, &bad),
            Err(KoopmanError::Dimension(_))
        ));
    }

    #[test]
    fn pair_and_last_z_column_reassemble_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = DMatrix::from_fn(3, 7, |_, _| rng.random_range(-1.0..1.0));
        let t = traj_from(states.clone(), None);
        let ss = build_pair(&t).unwrap();
        let mut rebuilt = DMatrix::zeros(3, 7);
        rebuilt.columns_mut(0, 6).copy_from(ss.y());
        rebuilt.column_mut(6).copy_from(&ss.z().column(5));
        assert_eq!(rebuilt, states);
    }

    #[test]
    fn csv_hand_constructed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        std::fs::write(
            &path,
            "t,x1,x2,u1\n0.0,1.0,2.0,0.5\n0.1,1.1,2.1,0.6\n0.2,1.2,2.2,0.7\n0.3,1.3,2.3,0.8\n",
        )
        .unwrap();
        let t = load_csv(&path).unwrap();
        assert_eq!(t.n_states(), 2);
        assert_eq!(t.n_inputs(), 1);
        assert_eq!(t.len(), 4);
        assert!((t.dt() - 0.1).abs() < 1e-15);
        assert_eq!(t.states()[(1, 3)], 2.3);
        assert_eq!(t.id(), "traj");
    }

    #[test]
    fn csv_ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "t,x1\n0.0,1.0\n1.0\n2.0,3.0\n").unwrap();
        match load_csv(&path) {
            Err(KoopmanError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_non_numeric_cell_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,x1\n0.0,1.0\n1.0,oops\n").unwrap();
        match load_csv(&path) {
            Err(KoopmanError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_nonuniform_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jitter.csv");
        std::fs::write(&path, "t,x1\n0.0,1.0\n1.0,2.0\n2.5,3.0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(KoopmanError::Parse { .. })));
    }

    #[test]
    fn csv_crlf_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crlf.csv");
        std::fs::write(&path, "t,x1\r\n0.0,1.0\r\n1.0,2.0\r\n").unwrap();
        let t = load_csv(&path).unwrap();
        assert_eq!(t.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn prop_csv_round_trip_bitwise(seed in 0u64..1000, n_x in 1usize..4, n_u in 0usize..3, cols in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states = DMatrix::from_fn(n_x, cols, |_, _| rng.random_range(-10.0..10.0));
            let inputs = (n_u > 0)
                .then(|| DMatrix::from_fn(n_u, cols, |_, _| rng.random_range(-10.0..10.0)));
            let dt = rng.random_range(1e-3..2.0);
            let t = Trajectory::new(states, inputs, dt, "roundtrip").unwrap();

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.csv");
            save_csv(&t, &path).unwrap();
            let back = load_csv(&path).unwrap();
            prop_assert_eq!(back.states(), t.states());
            prop_assert_eq!(back.inputs(), t.inputs());
            prop_assert_eq!(back.dt(), t.dt());
        }
    }
}
