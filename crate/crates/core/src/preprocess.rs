//! Standardisation, PCA, and flattening of covariate grids into design matrices.

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

/// Column means and sample standard deviations. Columns with no spread get
/// scale 1, so they are only centred.
pub fn standardize_fit(x: &DMatrix<f64>) -> Result<Standardizer> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!("standardize needs n >= 2, got {n}")));
    }
    let mut means = Vec::with_capacity(x.ncols());
    let mut scales = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        means.push(mean);
        scales.push(if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 });
    }
    Ok(Standardizer { means, scales })
}

pub fn standardize_apply(x: &DMatrix<f64>, s: &Standardizer) -> Result<DMatrix<f64>> {
    if x.ncols() != s.means.len() {
        return Err(Error::Dimension(format!(
            "matrix has {} columns, standardizer {}",
            x.ncols(),
            s.means.len()
        )));
    }
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let (m, sc) = (s.means[j], s.scales[j]);
        col.apply(|v| *v = (*v - m) / sc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaConfig {
    /// fraction of total variance the retained components must explain
    pub var_frac: f64,
    /// scale columns to unit variance before the decomposition
    pub standardize: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            var_frac: 0.98,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// `d × p`, orthonormal columns
    #[serde(with = "matrix_serde")]
    pub components: DMatrix<f64>,
    /// explained-variance fraction of every computed component, descending
    pub explained: Vec<f64>,
    pub retained: usize,
}

/// Principal components of `x`, truncated to the smallest count whose
/// cumulative explained variance reaches `cfg.var_frac`. Each component is
/// signed so its largest-magnitude loading is positive.
pub fn pca_fit(x: &DMatrix<f64>, cfg: PcaConfig) -> Result<PcaBasis> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("pca needs n >= 2, got {n}")));
    }
    if !(cfg.var_frac > 0.0 && cfg.var_frac <= 1.0) {
        return Err(Error::Config(format!("var_frac {} outside (0, 1]", cfg.var_frac)));
    }
    let std = standardize_fit(x)?;
    let (means, scales) = if cfg.standardize {
        (std.means, std.scales)
    } else {
        (std.means, vec![1.0; d])
    };
    let xc = standardize_apply(
        x,
        &Standardizer {
            means: means.clone(),
            scales: scales.clone(),
        },
    )?;
    let denom = (n - 1) as f64;

    // eigenpairs of the covariance, through the smaller of the two Gram matrices
    let (mut values, vectors) = if d <= n {
        let cov = xc.transpose() * &xc / denom;
        let eig = SymmetricEigen::new(cov);
        (eig.eigenvalues.as_slice().to_vec(), eig.eigenvectors)
    } else {
        let gram = &xc * xc.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        let mut v = DMatrix::zeros(d, n);
        for i in 0..n {
            let lam = eig.eigenvalues[i].max(0.0);
            if lam > 0.0 {
                let u = xc.transpose() * eig.eigenvectors.column(i) / (lam * denom).sqrt();
                v.set_column(i, &u);
            }
        }
        (eig.eigenvalues.as_slice().to_vec(), v)
    };
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::InsufficientData("data have zero variance".into()));
    }
    let max_rank = n.min(d);
    let explained: Vec<f64> = order.iter().take(max_rank).map(|&i| values[i] / total).collect();
    let rank = explained.iter().filter(|&&f| f > 1e-12).count().max(1);
    let mut cum = 0.0;
    let mut retained = rank;
    for (k, f) in explained.iter().enumerate() {
        cum += f;
        if cum >= cfg.var_frac - 1e-12 {
            retained = (k + 1).min(rank);
            break;
        }
    }

    let mut components = DMatrix::zeros(d, retained);
    for (k, &i) in order.iter().take(retained).enumerate() {
        let mut col = vectors.column(i).clone_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        let (mut best, mut best_abs) = (0, -1.0);
        for (r, v) in col.iter().enumerate() {
            if v.abs() > best_abs + 1e-14 {
                best = r;
                best_abs = v.abs();
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        components.set_column(k, &col);
    }
    Ok(PcaBasis {
        means,
        scales,
        components,
        explained,
        retained,
    })
}

pub fn pca_transform(x: &DMatrix<f64>, basis: &PcaBasis) -> Result<DMatrix<f64>> {
    let xs = standardize_apply(
        x,
        &Standardizer {
            means: basis.means.clone(),
            scales: basis.scales.clone(),
        },
    )?;
    Ok(xs * &basis.components)
}

/// Map scores back to the original covariate space.
pub fn pca_inverse(scores: &DMatrix<f64>, basis: &PcaBasis) -> Result<DMatrix<f64>> {
    if scores.ncols() != basis.retained {
        return Err(Error::Dimension(format!(
            "scores have {} columns, basis retains {}",
            scores.ncols(),
            basis.retained
        )));
    }
    let mut x = scores * basis.components.transpose();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let (m, s) = (basis.means[j], basis.scales[j]);
        col.apply(|v| *v = *v * s + m);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub variable: String,
    pub level: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn everything() -> Self {
        BoundingBox {
            lat_min: f64::NEG_INFINITY,
            lat_max: f64::INFINITY,
            lon_min: f64::NEG_INFINITY,
            lon_max: f64::INFINITY,
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

/// Flattened covariates: one row per day, one column per (variable, level, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub columns: Vec<ColumnDescriptor>,
    pub dates: Vec<NaiveDate>,
}

impl DesignMatrix {
    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            x: self.x.select_rows(rows),
            columns: self.columns.clone(),
            dates: rows.iter().map(|&r| self.dates[r]).collect(),
        }
    }
}

/// Flatten covariate stacks into a design matrix. Columns run over stacks in
/// the given order, then cells inside `bbox` lat-major / lon-minor in storage
/// order. Cells with any missing value are dropped together with their
/// descriptor.
pub fn build_design_matrix(covariates: &[GridStack], bbox: &BoundingBox) -> Result<DesignMatrix> {
    let first = covariates
        .first()
        .ok_or_else(|| Error::InvalidInput("no covariate stacks".into()))?;
    for s in &covariates[1..] {
        first.check_time_aligned(s)?;
    }
    let n = first.n_times();
    let mut cols: Vec<(usize, usize, usize)> = Vec::new();
    let mut columns = Vec::new();
    for (si, s) in covariates.iter().enumerate() {
        let v = s.values();
        for (i, &lat) in s.lats().iter().enumerate() {
            for (j, &lon) in s.lons().iter().enumerate() {
                if !bbox.contains(lat, lon) {
                    continue;
                }
                if (0..n).any(|t| v[[t, i, j]].is_nan()) {
                    continue;
                }
                cols.push((si, i, j));
                columns.push(ColumnDescriptor {
                    variable: s.variable().to_string(),
                    level: s.level().to_string(),
                    lat,
                    lon,
                });
            }
        }
    }
    if cols.is_empty() {
        return Err(Error::InvalidInput("bounding box selects no usable cells".into()));
    }
    let x = DMatrix::from_fn(n, cols.len(), |t, c| {
        let (si, i, j) = cols[c];
        covariates[si].values()[[t, i, j]] as f64
    });
    Ok(DesignMatrix {
        x,
        columns,
        dates: first.dates(),
    })
}

/// Fine-grid precipitation as an `n × K` matrix; cells with missing values are
/// left out and `cells` records which grid cells (lat-major) were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub y: DMatrix<f64>,
    pub cells: Vec<usize>,
    pub dates: Vec<NaiveDate>,
}

impl TargetMatrix {
    pub fn from_stack(stack: &GridStack) -> Result<Self> {
        let tc = stack.as_time_by_cell();
        let n = stack.n_times();
        let cells: Vec<usize> = (0..stack.n_cells())
            .filter(|&c| (0..n).all(|t| !tc[[t, c]].is_nan()))
            .collect();
        if cells.is_empty() {
            return Err(Error::AllMissing);
        }
        let y = DMatrix::from_fn(n, cells.len(), |t, k| tc[[t, cells[k]]] as f64);
        if y.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidStack("targets must be non-negative".into()));
        }
        Ok(TargetMatrix {
            y,
            cells,
            dates: stack.dates(),
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.y.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> TargetMatrix {
        TargetMatrix {
            y: self.y.select_rows(rows),
            cells: self.cells.clone(),
            dates: rows.iter().map(|&r| self.dates[r]).collect(),
        }
    }
}

pub(crate) mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        /// column-major
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom("matrix data length mismatch"));
        }
        Ok(DMatrix::from_column_slice(r.rows, r.cols, &r.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn standardize_simple_column() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let s = standardize_fit(&x).unwrap();
        let z = standardize_apply(&x, &s).unwrap();
        assert_eq!(s.scales[0], 1.0); // sample sd of [1,2,3] is exactly 1
        assert_eq!(z.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_column_gets_unit_scale() {
        let x = DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]);
        let s = standardize_fit(&x).unwrap();
        assert_eq!(s.scales[0], 1.0);
        assert_eq!(standardize_apply(&x, &s).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_is_affine_on_new_rows() {
        let train = rand_matrix(20, 3, 1);
        let test = rand_matrix(5, 3, 2);
        let s = standardize_fit(&train).unwrap();
        let z = standardize_apply(&test, &s).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let expect = (test[(i, j)] - s.means[j]) / s.scales[j];
                assert_eq!(z[(i, j)], expect);
            }
        }
        assert!(standardize_fit(&rand_matrix(1, 3, 0)).is_err());
    }

    #[test]
    fn rank_one_gives_single_component() {
        let u = rand_matrix(30, 1, 3);
        let v = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 3.0]);
        let x = &u * &v;
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 0.98,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(b.retained, 1);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 1.0,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(b.retained, 1);
    }

    #[test]
    fn full_rank_unit_fraction_keeps_rank() {
        let x = rand_matrix(40, 5, 4);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 1.0,
                standardize: true,
            },
        )
        .unwrap();
        assert_eq!(b.retained, 5);
    }

    /// X with orthogonal centred columns scaled so the covariance has
    /// eigenvalues (8, 1, 1), built from a Hadamard-like design.
    fn eig_811() -> DMatrix<f64> {
        // rows of ±1 with mutually orthogonal, zero-mean columns (n = 4)
        let h = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0],
        );
        // column variance is 4/3; scale to 8, 1, 1
        let scale = [(8.0f64 * 0.75).sqrt(), 0.75f64.sqrt(), 0.75f64.sqrt()];
        DMatrix::from_fn(4, 3, |i, j| h[(i, j)] * scale[j])
    }

    #[test]
    fn eigenvalue_811_truncation() {
        // fractions are 0.8, 0.1, 0.1 (worked by hand)
        let x = eig_811();
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 0.98,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(b.retained, 3);
        assert!((b.explained[0] - 0.8).abs() < 1e-12);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 0.80,
                standardize: false,
            },
        )
        .unwrap();
        assert_eq!(b.retained, 1);
    }

    #[test]
    fn sign_convention_and_orthonormality() {
        let x = rand_matrix(50, 6, 5);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 1.0,
                standardize: true,
            },
        )
        .unwrap();
        let gram = b.components.transpose() * &b.components;
        assert!((gram - DMatrix::identity(6, 6)).amax() < 1e-10);
        for col in b.components.column_iter() {
            let m = col
                .iter()
                .copied()
                .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(m > 0.0);
        }
        assert!(b.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(b.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn inverse_reconstructs_at_full_rank() {
        let x = rand_matrix(30, 4, 6);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 1.0,
                standardize: true,
            },
        )
        .unwrap();
        let scores = pca_transform(&x, &b).unwrap();
        let back = pca_inverse(&scores, &b).unwrap();
        assert!((back - &x).amax() < 1e-10);
        // and scores -> x -> scores
        let again = pca_transform(&pca_inverse(&scores, &b).unwrap(), &b).unwrap();
        assert!((again - scores).amax() < 1e-10);
    }

    #[test]
    fn wide_matrix_uses_gram_route() {
        let x = rand_matrix(8, 20, 7);
        let b = pca_fit(
            &x,
            PcaConfig {
                var_frac: 1.0,
                standardize: false,
            },
        )
        .unwrap();
        assert!(b.retained <= 7);
        let gram = b.components.transpose() * &b.components;
        assert!((gram - DMatrix::identity(b.retained, b.retained)).amax() < 1e-8);
        let scores = pca_transform(&x, &b).unwrap();
        assert!((pca_inverse(&scores, &b).unwrap() - &x).amax() < 1e-8);
    }

    fn cov_stack(var: &str, nan_cell: Option<(usize, usize)>) -> GridStack {
        let mut v = Array3::from_shape_fn((4, 3, 3), |(t, i, j)| (t * 9 + i * 3 + j) as f32);
        if let Some((i, j)) = nan_cell {
            for t in 0..4 {
                v[[t, i, j]] = f32::NAN;
            }
        }
        GridStack::new(
            v,
            vec![40.0, 41.0, 42.0],
            vec![280.0, 281.0, 282.0],
            NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            "K",
        )
        .unwrap()
        .with_descriptor(var, "850")
    }

    #[test]
    fn design_matrix_counts_and_order() {
        let stacks = [cov_stack("t", None), cov_stack("q", None)];
        let dm = build_design_matrix(&stacks, &BoundingBox::everything()).unwrap();
        assert_eq!(dm.n_features(), 18);
        assert_eq!(dm.columns[0].variable, "t");
        assert_eq!(dm.columns[9].variable, "q");
        assert_eq!((dm.columns[1].lat, dm.columns[1].lon), (40.0, 281.0));
        assert_eq!(dm.x[(2, 4)], (2 * 9 + 4) as f64);
        let again = build_design_matrix(&stacks, &BoundingBox::everything()).unwrap();
        assert_eq!(dm.columns, again.columns);
    }

    #[test]
    fn design_matrix_drops_missing_cell() {
        let stacks = [cov_stack("t", Some((1, 1))), cov_stack("q", None)];
        let dm = build_design_matrix(&stacks, &BoundingBox::everything()).unwrap();
        assert_eq!(dm.n_features(), 17);
        assert!(dm.x.iter().all(|v| !v.is_nan()));
    }

    #[test]
    fn empty_bbox_rejected() {
        let stacks = [cov_stack("t", None)];
        let bbox = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
        };
        assert!(build_design_matrix(&stacks, &bbox).is_err());
    }

    #[test]
    fn misaligned_axes_rejected() {
        let a = cov_stack("t", None);
        let b = a.time_range(0, 3).unwrap();
        assert!(matches!(
            build_design_matrix(&[a, b], &BoundingBox::everything()),
            Err(Error::Misaligned(_))
        ));
    }
}
