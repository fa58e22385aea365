//! Resampling, patch extraction and augmentation.

use super::volume::{index, voxel_count, Extents, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

fn resampled_extents(ext: Extents, spacing: [f64; 3], target_mm: f64) -> Result<Extents> {
    if !(target_mm > 0.0) {
        return Err(Error::Contract(format!("target spacing must be positive, got {target_mm}")));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (ext[a] as f64 * spacing[a] / target_mm).round() as usize;
    }
    if out.iter().any(|e| *e < 1) {
        return Err(Error::invalid_shape("resample", &out, "output extent below 1"));
    }
    Ok(out)
}

/// Source coordinate of output voxel `j`; voxel 0 of both grids shares its
/// center, clamped to the last input sample.
fn source_coord(j: usize, spacing: f64, target_mm: f64, len: usize) -> f64 {
    (j as f64 * target_mm / spacing).min((len - 1) as f64)
}

/// Trilinear resampling to isotropic `target_mm` spacing.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    let out = resampled_extents(v.extents, v.spacing_mm, target_mm)?;
    if out == v.extents && v.spacing_mm.iter().all(|s| *s == target_mm) {
        return Ok(v.clone());
    }
    let taps = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out[a])
            .map(|j| {
                let x = source_coord(j, v.spacing_mm[a], target_mm, v.extents[a]);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(v.extents[a] - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let (tz, ty, tx) = (taps(0), taps(1), taps(2));
    let mut grid = Vec::with_capacity(voxel_count(out));
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let s = |z, y, x| v.grid[index(v.extents, z, y, x)] as f64;
                let c00 = s(z0, y0, x0) * (1.0 - fx) + s(z0, y0, x1) * fx;
                let c01 = s(z0, y1, x0) * (1.0 - fx) + s(z0, y1, x1) * fx;
                let c10 = s(z1, y0, x0) * (1.0 - fx) + s(z1, y0, x1) * fx;
                let c11 = s(z1, y1, x0) * (1.0 - fx) + s(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                grid.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Volume::new(out, [target_mm; 3], grid)
}

/// Nearest-neighbor resampling of a label map.
pub fn resample_labels(l: &LabelMap, target_mm: f64) -> Result<LabelMap> {
    let out = resampled_extents(l.extents, l.spacing_mm, target_mm)?;
    let near = |a: usize| -> Vec<usize> {
        (0..out[a])
            .map(|j| source_coord(j, l.spacing_mm[a], target_mm, l.extents[a]).round() as usize)
            .collect()
    };
    let (nz, ny, nx) = (near(0), near(1), near(2));
    let mut grid = Vec::with_capacity(voxel_count(out));
    for z in &nz {
        for y in &ny {
            for x in &nx {
                grid.push(l.grid[index(l.extents, *z, *y, *x)]);
            }
        }
    }
    LabelMap::new(out, [target_mm; 3], grid, l.legend.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub volume: Volume,
    pub labels: LabelMap,
    pub origin: [usize; 3],
    /// Whether the draw asked for a tumor-centered patch and a tumor existed.
    pub tumor_centered: bool,
}

fn crop<T: Copy>(grid: &[T], ext: Extents, origin: [usize; 3], size: Extents) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = index(ext, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&grid[start..start + size[2]]);
        }
    }
    out
}

fn check_patch(v: &Volume, l: &LabelMap, patch: Extents) -> Result<()> {
    if v.extents != l.extents {
        return Err(Error::shape("extract_patch", &v.extents, &l.extents));
    }
    if patch.iter().zip(v.extents).any(|(p, e)| *p == 0 || *p > e) {
        return Err(Error::shape("extract_patch", &patch, &v.extents));
    }
    Ok(())
}

/// Crop at an explicit origin.
pub fn crop_patch(v: &Volume, l: &LabelMap, patch: Extents, origin: [usize; 3]) -> Result<Patch> {
    check_patch(v, l, patch)?;
    if (0..3).any(|a| origin[a] + patch[a] > v.extents[a]) {
        return Err(Error::Contract(format!("patch at {origin:?} leaves the volume")));
    }
    Ok(Patch {
        volume: Volume::new(patch, v.spacing_mm, crop(&v.grid, v.extents, origin, patch))?,
        labels: LabelMap::new(patch, l.spacing_mm, crop(&l.grid, l.extents, origin, patch), l.legend.clone())?,
        origin,
        tumor_centered: false,
    })
}

/// Centered crop, used for evaluation.
pub fn center_patch(v: &Volume, l: &LabelMap, patch: Extents) -> Result<Patch> {
    check_patch(v, l, patch)?;
    let origin = [0, 1, 2].map(|a| (v.extents[a] - patch[a]) / 2);
    crop_patch(v, l, patch, origin)
}

/// Draws a patch whose center is a tumor voxel with probability
/// `tumor_fraction`, and uniformly placed otherwise.
pub fn extract_patch(
    v: &Volume,
    l: &LabelMap,
    patch: Extents,
    tumor_fraction: f64,
    rng: &mut CounterRng,
) -> Result<Patch> {
    check_patch(v, l, patch)?;
    let want_tumor = rng.bernoulli(tumor_fraction);
    let mut origin = [0; 3];
    let mut centered = false;
    if want_tumor {
        let target = l.segmentation_target()?;
        let count = target.iter().filter(|t| **t > 0).count();
        if count == 0 {
            log::warn!("no tumor voxels in volume; falling back to a uniform patch");
        } else {
            let pick = rng.below(count);
            let i = target.iter().enumerate().filter(|(_, t)| **t > 0).nth(pick).unwrap().0;
            let e = v.extents;
            let c = [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]];
            for a in 0..3 {
                origin[a] = c[a].saturating_sub(patch[a] / 2).min(e[a] - patch[a]);
            }
            centered = true;
        }
    }
    if !centered {
        for a in 0..3 {
            origin[a] = rng.below(v.extents[a] - patch[a] + 1);
        }
    }
    let mut p = crop_patch(v, l, patch, origin)?;
    p.tumor_centered = centered;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate: true, max_shift: 0.1 }
    }
}

/// Quarter turns of a cubic grid in the plane of axes `(a, b)`.
pub fn rotate90<T: Copy>(grid: &[T], n: usize, axes: (usize, usize), turns: usize) -> Vec<T> {
    let ext = [n; 3];
    let mut cur = grid.to_vec();
    for _ in 0..turns % 4 {
        let mut next = cur.clone();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [z, y, x];
                    let mut q = p;
                    q[axes.0] = n - 1 - p[axes.1];
                    q[axes.1] = p[axes.0];
                    next[index(ext, z, y, x)] = cur[index(ext, q[0], q[1], q[2])];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Random axis-pair quarter rotation (image and labels alike) and an
/// additive intensity shift on the image, clamped to [-1, 1].
pub fn augment(v: &Volume, l: &LabelMap, rng: &mut CounterRng, cfg: &AugmentConfig) -> Result<(Volume, LabelMap)> {
    if v.extents != l.extents {
        return Err(Error::shape("augment", &v.extents, &l.extents));
    }
    let mut vol = v.clone();
    let mut lab = l.clone();
    if cfg.rotate {
        let e = v.extents;
        if e[0] != e[1] || e[1] != e[2] {
            return Err(Error::Contract(format!("rotation needs a cubic patch, got {e:?}")));
        }
        let axes = [(0, 1), (0, 2), (1, 2)][rng.below(3)];
        let turns = rng.below(4);
        vol.grid = rotate90(&v.grid, e[0], axes, turns);
        lab.grid = rotate90(&l.grid, e[0], axes, turns);
    }
    if cfg.max_shift > 0.0 {
        let shift = rng.uniform_range(-cfg.max_shift, cfg.max_shift);
        for g in vol.grid.iter_mut() {
            *g = (*g as f64 + shift).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok((vol, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::volume::Legend;

    fn ramp(n: usize, spacing: f64) -> Volume {
        let g = (0..n * n * n).map(|i| (i % n) as f32 * 0.1).collect();
        Volume::new([n; 3], [spacing; 3], g).unwrap()
    }

    #[test]
    fn resample_identity_and_extents() {
        let v = ramp(4, 1.5);
        assert_eq!(resample_isotropic(&v, 1.5).unwrap(), v);
        let up = resample_isotropic(&ramp(4, 2.0), 1.0).unwrap();
        assert_eq!(up.extents, [8, 8, 8]);
        assert!(matches!(resample_isotropic(&v, 100.0), Err(Error::InvalidShape { .. })));
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn labels_resample_nearest() {
        let l = LabelMap::new([1, 1, 2], [2.0; 3], vec![1, 2], Legend::new(&[1, 2], &[])).unwrap();
        let r = resample_labels(&l, 1.0).unwrap();
        assert_eq!(r.extents, [2, 2, 4]);
        assert!(r.grid.iter().all(|v| *v == 1 || *v == 2));
    }

    #[test]
    fn rotation_has_order_four() {
        let g: Vec<u32> = (0..27).collect();
        for axes in [(0, 1), (0, 2), (1, 2)] {
            let once = rotate90(&g, 3, axes, 1);
            assert_ne!(once, g);
            assert_eq!(rotate90(&once, 3, axes, 3), g);
        }
    }

    #[test]
    fn non_cubic_rotation_is_rejected() {
        let v = Volume::filled([2, 2, 3], [1.0; 3], 0.0);
        let l = LabelMap::new([2, 2, 3], [1.0; 3], vec![0; 12], Legend::new(&[], &[])).unwrap();
        let mut rng = CounterRng::new(0);
        assert!(matches!(augment(&v, &l, &mut rng, &AugmentConfig::default()), Err(Error::Contract(_))));
        let cfg = AugmentConfig { rotate: false, max_shift: 0.1 };
        assert!(augment(&v, &l, &mut rng, &cfg).is_ok());
    }
}
