//! Block-mean coarsening and bilinear regridding.

use ndarray::{Array2, Array3, ArrayView2};

use super::GridStack;
use crate::error::{Error, Result};

/// Coarsen by averaging non-missing fine cells in each `factor_lat × factor_lon`
/// block. Coarse coordinates are block-mean coordinates.
pub fn upscale_block_mean(fine: &GridStack, factor_lat: usize, factor_lon: usize) -> Result<GridStack> {
    let (nlat, nlon) = fine.shape();
    if factor_lat == 0 || factor_lon == 0 {
        return Err(Error::InvalidInput("upscale factors must be >= 1".into()));
    }
    if nlat % factor_lat != 0 || nlon % factor_lon != 0 {
        return Err(Error::Dimension(format!(
            "grid {nlat}x{nlon} is not divisible by {factor_lat}x{factor_lon}"
        )));
    }
    let (clat, clon) = (nlat / factor_lat, nlon / factor_lon);
    let block_mean =
        |c: &[f64], f: usize| -> Vec<f64> { c.chunks(f).map(|b| b.iter().sum::<f64>() / f as f64).collect() };
    let lats = block_mean(fine.lats(), factor_lat);
    let lons = block_mean(fine.lons(), factor_lon);
    let t = fine.n_times();
    let fv = fine.values();
    let mut out = Array3::from_elem((t, clat, clon), f32::NAN);
    for ti in 0..t {
        for ci in 0..clat {
            for cj in 0..clon {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for i in ci * factor_lat..(ci + 1) * factor_lat {
                    for j in cj * factor_lon..(cj + 1) * factor_lon {
                        let v = fv[[ti, i, j]];
                        if !v.is_nan() {
                            sum += v as f64;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    out[[ti, ci, cj]] = (sum / n as f64) as f32;
                }
            }
        }
    }
    let coarse = GridStack::new(out, lats, lons, fine.start_date(), fine.units())?;
    Ok(coarse.with_descriptor(fine.variable(), fine.level()))
}

/// Bracketing node pair and fraction along one monotone axis. Queries outside
/// the axis range extrapolate linearly from the edge interval.
fn axis_weights(coords: &[f64], x: f64) -> (usize, usize, f64) {
    let n = coords.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let ascending = coords[1] > coords[0];
    // position of the first node strictly beyond x in the axis direction
    let beyond = |c: f64| if ascending { c > x } else { c < x };
    let k = coords.iter().position(|&c| beyond(c)).unwrap_or(n);
    let i0 = k.saturating_sub(1).min(n - 2);
    let i1 = i0 + 1;
    let t = (x - coords[i0]) / (coords[i1] - coords[i0]);
    (i0, i1, t)
}

/// For every cell, the non-missing cell that supplies its value: itself when
/// present, else the nearest in grid-index distance with ties broken by
/// `(lat, lon)` index order.
fn fill_sources(slice: ArrayView2<'_, f32>) -> Option<Vec<usize>> {
    let (nlat, nlon) = slice.dim();
    let present: Vec<usize> = (0..nlat * nlon)
        .filter(|&c| !slice[[c / nlon, c % nlon]].is_nan())
        .collect();
    if present.is_empty() {
        return None;
    }
    let mut src = Vec::with_capacity(nlat * nlon);
    for c in 0..nlat * nlon {
        let (i, j) = ((c / nlon) as i64, (c % nlon) as i64);
        if !slice[[i as usize, j as usize]].is_nan() {
            src.push(c);
            continue;
        }
        // `present` is already in (lat, lon) order, so min_by_key keeps the first tie
        let best = present
            .iter()
            .copied()
            .min_by_key(|&p| {
                let (pi, pj) = ((p / nlon) as i64, (p % nlon) as i64);
                (pi - i).pow(2) + (pj - j).pow(2)
            })
            .unwrap();
        src.push(best);
    }
    Some(src)
}

/// Replace missing cells in one time slice by their nearest non-missing neighbour.
pub fn fill_missing(slice: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    let (nlat, nlon) = slice.dim();
    let src = fill_sources(slice).ok_or(Error::AllMissing)?;
    Ok(Array2::from_shape_fn((nlat, nlon), |(i, j)| {
        let s = src[i * nlon + j];
        slice[[s / nlon, s % nlon]]
    }))
}

/// Bilinear interpolation from `coarse` onto the `target_lats × target_lons`
/// grid, after filling missing coarse cells from their nearest neighbour.
pub fn bilinear_interpolate(coarse: &GridStack, target_lats: &[f64], target_lons: &[f64]) -> Result<GridStack> {
    let lat_w: Vec<_> = target_lats.iter().map(|&x| axis_weights(coarse.lats(), x)).collect();
    let lon_w: Vec<_> = target_lons.iter().map(|&x| axis_weights(coarse.lons(), x)).collect();
    let t = coarse.n_times();
    let mut out = Array3::zeros((t, target_lats.len(), target_lons.len()));
    let mut cached: Option<(Vec<bool>, Vec<usize>)> = None;
    let nlon_c = coarse.lons().len();
    for ti in 0..t {
        let slice = coarse.slice_time(ti);
        let mask: Vec<bool> = slice.iter().map(|v| v.is_nan()).collect();
        let src = match &cached {
            Some((m, s)) if *m == mask => s.clone(),
            _ => {
                let s = fill_sources(slice).ok_or(Error::AllMissing)?;
                cached = Some((mask, s.clone()));
                s
            }
        };
        let at = |i: usize, j: usize| {
            let s = src[i * nlon_c + j];
            slice[[s / nlon_c, s % nlon_c]] as f64
        };
        for (oi, &(i0, i1, ti_frac)) in lat_w.iter().enumerate() {
            for (oj, &(j0, j1, tj)) in lon_w.iter().enumerate() {
                let v = (1.0 - ti_frac) * (1.0 - tj) * at(i0, j0)
                    + (1.0 - ti_frac) * tj * at(i0, j1)
                    + ti_frac * (1.0 - tj) * at(i1, j0)
                    + ti_frac * tj * at(i1, j1);
                out[[ti, oi, oj]] = v as f32;
            }
        }
    }
    // interpolated precipitation can dip below zero only through extrapolation
    if coarse.is_precip() {
        out.mapv_inplace(|v: f32| v.max(0.0));
    }
    let stack = GridStack::new(
        out,
        target_lats.to_vec(),
        target_lons.to_vec(),
        coarse.start_date(),
        coarse.units(),
    )?;
    Ok(stack.with_descriptor(coarse.variable(), coarse.level()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2000, 1, 1).unwrap()
    }

    fn stack(values: Vec<f32>, nlat: usize, nlon: usize, lats: Vec<f64>, lons: Vec<f64>) -> GridStack {
        let v = Array3::from_shape_vec((1, nlat, nlon), values).unwrap();
        GridStack::new(v, lats, lons, start(), "K").unwrap()
    }

    #[test]
    fn block_mean_of_2x2() {
        let s = stack(vec![1.0, 2.0, 3.0, 4.0], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        let c = upscale_block_mean(&s, 2, 2).unwrap();
        assert_eq!(c.values()[[0, 0, 0]], 2.5);
        assert_eq!(c.lats(), &[0.5]);
    }

    #[test]
    fn block_mean_skips_missing() {
        let s = stack(vec![1.0, f32::NAN, 3.0, f32::NAN], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        let c = upscale_block_mean(&s, 2, 2).unwrap();
        assert_eq!(c.values()[[0, 0, 0]], 2.0);
    }

    #[test]
    fn block_all_missing_is_nan() {
        let s = stack(vec![f32::NAN; 4], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        let c = upscale_block_mean(&s, 2, 1).unwrap();
        assert!(c.values().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn unit_factors_are_identity() {
        let s = stack(vec![1.0, 2.0, 3.0, 4.0], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        assert_eq!(upscale_block_mean(&s, 1, 1).unwrap(), s);
    }

    #[test]
    fn non_divisible_rejected() {
        let s = stack(vec![0.0; 6], 2, 3, vec![0.0, 1.0], vec![0.0, 1.0, 2.0]);
        assert!(matches!(upscale_block_mean(&s, 1, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn bilinear_midpoint() {
        let s = stack(vec![0.0, 1.0, 1.0, 2.0], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        let out = bilinear_interpolate(&s, &[0.5], &[0.5]).unwrap();
        assert_eq!(out.values()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn bilinear_exact_at_nodes() {
        let s = stack(vec![3.0, 5.0, 7.0, 11.0], 2, 2, vec![10.0, 9.0], vec![0.0, 2.0]);
        let out = bilinear_interpolate(&s, &[10.0, 9.0], &[0.0, 2.0]).unwrap();
        assert_eq!(out.values(), s.values());
    }

    #[test]
    fn missing_corner_filled_from_nearest() {
        // (0,0) is missing; its index-distance-1 neighbours are (0,1)=1 and (1,0)=5,
        // the (lat, lon) tie-break picks (0,1)
        let s = stack(vec![f32::NAN, 1.0, 5.0, 2.0], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        let out = bilinear_interpolate(&s, &[0.0], &[0.0]).unwrap();
        assert_eq!(out.values()[[0, 0, 0]], 1.0);
    }

    #[test]
    fn all_missing_is_error() {
        let s = stack(vec![f32::NAN; 4], 2, 2, vec![0.0, 1.0], vec![0.0, 1.0]);
        assert!(matches!(
            bilinear_interpolate(&s, &[0.5], &[0.5]),
            Err(Error::AllMissing)
        ));
    }

    #[test]
    fn upscale_then_interpolate_preserves_bilinear_field() {
        let lats: Vec<f64> = (0..6).map(|i| 40.0 + 0.25 * i as f64).collect();
        let lons: Vec<f64> = (0..4).map(|j| 280.0 + 0.25 * j as f64).collect();
        let f = |la: f64, lo: f64| 2.0 + 0.5 * (la - 40.0) - 0.25 * (lo - 280.0) + 0.75 * (la - 40.0) * (lo - 280.0);
        let v = Array3::from_shape_fn((2, 6, 4), |(_, i, j)| f(lats[i], lons[j]) as f32);
        let fine = GridStack::new(v, lats.clone(), lons.clone(), start(), "K").unwrap();
        let coarse = upscale_block_mean(&fine, 3, 2).unwrap();
        let back = bilinear_interpolate(&coarse, &lats, &lons).unwrap();
        for (a, b) in back.values().iter().zip(fine.values().iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
