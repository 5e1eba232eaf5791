use ndarray::{Array2, Axis};

use super::{BoundaryCurve, RegionMask, ThicknessProfile};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Single foreground run `[start, end)` of a column, or None when the column is empty.
fn column_run(mask: &RegionMask, col: usize) -> Result<Option<(usize, usize)>> {
    let column = mask.mask().index_axis(Axis(1), col);
    let mut run: Option<(usize, usize)> = None;
    let mut prev = false;
    for (r, &v) in column.iter().enumerate() {
        if v && !prev {
            if run.is_some() {
                return Err(Error::Precondition(format!("column {col} has more than one foreground run")));
            }
            run = Some((r, r + 1));
        } else if v {
            if let Some((_, end)) = run.as_mut() {
                *end = r + 1;
            }
        }
        prev = v;
    }
    Ok(run)
}

/// Upper boundary = first foreground row, lower boundary = one past the last foreground row.
pub fn boundary_from_mask<T: Scalar>(mask: &RegionMask) -> Result<(BoundaryCurve<T>, BoundaryCurve<T>)> {
    let w = mask.dim().1;
    let mut upper = Vec::with_capacity(w);
    let mut lower = Vec::with_capacity(w);
    for c in 0..w {
        match column_run(mask, c)? {
            Some((s, e)) => {
                upper.push(T::from_usize_lossy(s));
                lower.push(T::from_usize_lossy(e));
            }
            None => {
                upper.push(BoundaryCurve::<T>::sentinel());
                lower.push(BoundaryCurve::<T>::sentinel());
            }
        }
    }
    Ok((BoundaryCurve { rows: upper }, BoundaryCurve { rows: lower }))
}

/// Fills rows `[round(upper), round(lower))` of every column, clamped to the image.
pub fn mask_from_boundaries<T: Scalar>(
    upper: &BoundaryCurve<T>,
    lower: &BoundaryCurve<T>,
    shape: (usize, usize),
) -> Result<RegionMask> {
    let (h, w) = shape;
    if upper.len() != w || lower.len() != w {
        return Err(Error::shape(&[w, w], &[upper.len(), lower.len()]));
    }
    let mut mask = Array2::from_elem(shape, false);
    for c in 0..w {
        let (u, l) = (upper.rows()[c], lower.rows()[c]);
        let (us, ls) = (BoundaryCurve::is_sentinel(u), BoundaryCurve::is_sentinel(l));
        if us || ls {
            if us != ls {
                return Err(Error::Precondition(format!("column {c}: only one boundary is empty")));
            }
            continue;
        }
        if u > l {
            return Err(Error::Precondition(format!("column {c}: upper boundary {u} below lower boundary {l}")));
        }
        let clamp = |x: T| x.round().max(T::zero()).min(T::from_usize_lossy(h)).to_usize().unwrap_or(0);
        for r in clamp(u)..clamp(l) {
            mask[[r, c]] = true;
        }
    }
    Ok(RegionMask::new(mask))
}

/// Per-column foreground height in pixels; empty columns count as zero.
pub fn column_thickness_px<T: Scalar>(mask: &RegionMask) -> Vec<T> {
    mask.mask()
        .axis_iter(Axis(1))
        .map(|col| T::from_usize_lossy(col.iter().filter(|&&b| b).count()))
        .collect()
}

/// Thickness per column in micrometers; the mean runs over non-empty columns only.
pub fn thickness_from_mask<T: Scalar>(mask: &RegionMask, axial_pitch_um: f64) -> Result<ThicknessProfile<T>> {
    let (upper, lower) = boundary_from_mask::<T>(mask)?;
    thickness_from_boundaries(&upper, &lower, axial_pitch_um)
}

/// Thickness between two curves; a column with equal boundaries has thickness zero.
pub fn thickness_from_boundaries<T: Scalar>(
    upper: &BoundaryCurve<T>,
    lower: &BoundaryCurve<T>,
    axial_pitch_um: f64,
) -> Result<ThicknessProfile<T>> {
    if !(axial_pitch_um.is_finite() && axial_pitch_um > 0.0) {
        return Err(Error::Data(format!("axial pitch {axial_pitch_um} must be positive")));
    }
    if upper.len() != lower.len() {
        return Err(Error::shape(&[upper.len()], &[lower.len()]));
    }
    let pitch = T::lit(axial_pitch_um);
    let per_column = upper
        .rows()
        .iter()
        .zip(lower.rows())
        .map(|(&u, &l)| {
            if BoundaryCurve::is_sentinel(u) || BoundaryCurve::is_sentinel(l) {
                None
            } else {
                Some((l - u) * pitch)
            }
        })
        .collect();
    ThicknessProfile::from_columns(per_column)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oct::DEFAULT_AXIAL_PITCH_UM;
    use proptest::prelude::*;

    fn band(h: usize, w: usize, top: usize, bottom: usize) -> RegionMask {
        let mut m = Array2::from_elem((h, w), false);
        for r in top..bottom {
            for c in 0..w {
                m[[r, c]] = true;
            }
        }
        RegionMask::new(m)
    }

    /// Runs (2..4), (3..5), (4..6) written out pixel by pixel.
    fn three_column_mask() -> RegionMask {
        let mut m = Array2::from_elem((8, 3), false);
        for r in 2..=4 {
            m[[r, 0]] = true;
        }
        for r in 3..=5 {
            m[[r, 1]] = true;
        }
        for r in 4..=6 {
            m[[r, 2]] = true;
        }
        RegionMask::new(m)
    }

    #[test]
    fn uniform_band_boundaries() {
        let (u, l) = boundary_from_mask::<f64>(&band(32, 5, 10, 20)).unwrap();
        assert!(u.rows().iter().all(|&r| r == 10.0));
        assert!(l.rows().iter().all(|&r| r == 20.0));
    }

    #[test]
    fn empty_mask_gives_sentinels() {
        let (u, l) = boundary_from_mask::<f64>(&RegionMask::empty((6, 4))).unwrap();
        assert!(u.rows().iter().chain(l.rows()).all(|&r| r == -1.0));
        assert_eq!(u.valid_columns(), 0);
    }

    #[test]
    fn hand_built_three_columns() {
        let (u, l) = boundary_from_mask::<f64>(&three_column_mask()).unwrap();
        assert_eq!(u.rows(), &[2.0, 3.0, 4.0]);
        assert_eq!(l.rows(), &[5.0, 6.0, 7.0]);
        let back = mask_from_boundaries(&u, &l, (8, 3)).unwrap();
        assert_eq!(back, three_column_mask());
    }

    #[test]
    fn multiple_runs_name_the_column() {
        let mut m = band(10, 3, 1, 3);
        m.mask_mut()[[6, 2]] = true;
        let err = boundary_from_mask::<f64>(&m).unwrap_err().to_string();
        assert!(err.contains("column 2"), "{err}");
    }

    #[test]
    fn full_and_empty_masks_from_boundaries() {
        let h = 9;
        let u = BoundaryCurve::constant(4, 0.0f64);
        let l = BoundaryCurve::constant(4, h as f64);
        assert_eq!(mask_from_boundaries(&u, &l, (h, 4)).unwrap(), RegionMask::full((h, 4)));
        assert_eq!(mask_from_boundaries(&u, &u, (h, 4)).unwrap(), RegionMask::empty((h, 4)));
        assert!(mask_from_boundaries(&l, &u, (h, 4)).is_err());
    }

    #[test]
    fn uniform_band_thickness_in_micrometers() {
        let t = thickness_from_mask::<f64>(&band(40, 6, 10, 20), DEFAULT_AXIAL_PITCH_UM).unwrap();
        let want = 3000.0 / 992.0 * 10.0;
        assert!(t.per_column.iter().all(|c| (c.unwrap() - want).abs() < 1e-9));
        assert!((t.mean - want).abs() < 1e-9);
        assert!((want - 30.241935483870968).abs() < 1e-9);
    }

    #[test]
    fn half_empty_mean_over_valid_columns() {
        let mut m = band(20, 4, 5, 9);
        for r in 0..20 {
            m.mask_mut()[[r, 2]] = false;
            m.mask_mut()[[r, 3]] = false;
        }
        let t = thickness_from_mask::<f64>(&m, 2.0).unwrap();
        assert_eq!(t.valid_columns(), 2);
        assert_eq!(t.mean, 8.0);
        assert_eq!(t.per_column[3], None);
    }

    #[test]
    fn zero_height_band_and_all_empty() {
        let u = BoundaryCurve::constant(3, 4.0f64);
        let t = thickness_from_boundaries(&u, &u, 3.0).unwrap();
        assert_eq!(t.mean, 0.0);
        assert!(thickness_from_mask::<f64>(&RegionMask::empty((8, 3)), 3.0).is_err());
    }

    fn single_run_mask() -> impl Strategy<Value = RegionMask> {
        (1usize..12, 1usize..10).prop_flat_map(|(h, w)| {
            prop::collection::vec((0..=h, 0..=h), w).prop_map(move |runs| {
                let mut m = Array2::from_elem((h, w), false);
                for (c, (a, b)) in runs.into_iter().enumerate() {
                    for r in a.min(b)..a.max(b) {
                        m[[r, c]] = true;
                    }
                }
                RegionMask::new(m)
            })
        })
    }

    proptest! {
        #[test]
        fn mask_boundary_round_trip(mask in single_run_mask()) {
            let (u, l) = boundary_from_mask::<f64>(&mask).unwrap();
            prop_assert_eq!(mask_from_boundaries(&u, &l, mask.dim()).unwrap(), mask);
        }

        #[test]
        fn thickness_linear_in_pitch(mask in single_run_mask(), pitch in 0.1f64..50.0, k in 0.5f64..4.0) {
            if mask.is_empty() {
                return Ok(());
            }
            let a = thickness_from_mask::<f64>(&mask, pitch).unwrap();
            let b = thickness_from_mask::<f64>(&mask, pitch * k).unwrap();
            prop_assert!((b.mean - k * a.mean).abs() <= 1e-9 * (1.0 + b.mean.abs()));
        }
    }
}
