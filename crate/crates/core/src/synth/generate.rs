//! Procedural phantom generator.

use std::collections::VecDeque;

use super::recipe::{validate, OrganSpec, TumorEdge, TumorRecipe, TumorShape};
use super::volume::{index, organ_label, tumor_label, voxel_count, Extents, LabelMap, Legend, Volume};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Cubic volume extent in voxels.
    pub extent: usize,
    pub spacing_mm: f64,
    pub organs: Vec<OrganSpec>,
    pub background: f32,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Standard deviation of the spatially correlated tumor texture.
    pub texture_sigma: f64,
    /// Organs stay at least this fraction of the extent away from the border.
    pub margin_frac: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            extent: 40,
            spacing_mm: 1.5,
            organs: super::recipe::default_organs(),
            background: -0.7,
            blur_sigma: 1.0,
            noise_sigma: 0.05,
            texture_sigma: 0.04,
            margin_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub volume: Volume,
    pub labels: LabelMap,
    pub class_id: u8,
    pub tumor_center: [usize; 3],
    pub organs: Vec<u8>,
}

pub fn legend_for(organs: &[OrganSpec], recipes: &[TumorRecipe]) -> Legend {
    let o: Vec<u8> = organs.iter().map(|o| o.id).collect();
    let c: Vec<u8> = recipes.iter().map(|r| r.class_id).collect();
    Legend::new(&o, &c)
}

/// Generates one case from a per-case seed.
pub fn generate_case(seed: u64, recipes: &[TumorRecipe], cfg: &GeneratorConfig) -> Result<Case> {
    validate(recipes, &cfg.organs)?;
    if cfg.extent < 16 {
        return Err(Error::Contract(format!("volume extent {} is below 16", cfg.extent)));
    }
    let n = cfg.extent;
    let ext: Extents = [n; 3];
    let mut rng = CounterRng::new(seed);

    let weights: Vec<f64> = recipes.iter().map(|r| r.frequency_weight).collect();
    let recipe = &recipes[rng.weighted_index(&weights)];

    // Host organ plus each other organ with probability 1/2, host drawn last
    // so that it is never overwritten.
    let mut present: Vec<&OrganSpec> = cfg
        .organs
        .iter()
        .filter(|o| o.id != recipe.host_organ)
        .filter(|_| rng.bernoulli(0.5))
        .collect();
    present.push(cfg.organs.iter().find(|o| o.id == recipe.host_organ).expect("validated host"));

    let mut labels = vec![0u8; voxel_count(ext)];
    let margin = (cfg.margin_frac * n as f64).round();
    for organ in &present {
        let mut axes = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let (lo, hi) = organ.semi_axis_frac;
            axes[a] = rng.uniform_range(lo, hi) * n as f64;
            let cmin = margin + axes[a];
            let cmax = n as f64 - 1.0 - margin - axes[a];
            center[a] = if cmax > cmin { rng.uniform_range(cmin, cmax) } else { (n as f64 - 1.0) / 2.0 };
        }
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [z as f64, y as f64, x as f64];
                    let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / axes[a]).powi(2)).sum();
                    if q <= 1.0 {
                        labels[index(ext, z, y, x)] = organ_label(organ.id);
                    }
                }
            }
        }
    }
    let host = organ_label(recipe.host_organ);

    let (center, region) = place_tumor(&mut rng, &labels, ext, host, recipe)?;
    let tl = tumor_label(recipe.class_id);
    for i in &region {
        labels[*i] = tl;
    }

    // Intensities: organ base levels, tumor = host + offset + texture.
    let mut grid = vec![cfg.background; voxel_count(ext)];
    for (g, l) in grid.iter_mut().zip(&labels) {
        if let Some(o) = cfg.organs.iter().find(|o| organ_label(o.id) == *l) {
            *g = o.base_intensity;
        }
    }
    let host_level = present.last().unwrap().base_intensity as f64;
    let offset = rng.uniform_range(recipe.intensity_offset_range.0, recipe.intensity_offset_range.1);
    let mut texture: Vec<f32> = (0..grid.len()).map(|_| rng.normal() as f32).collect();
    blur3d(&mut texture, ext, 1.5);
    let tex_scale = cfg.texture_sigma / texture_std(&texture);
    for i in &region {
        grid[*i] = (host_level + offset + tex_scale * texture[*i] as f64) as f32;
    }
    blur3d(&mut grid, ext, cfg.blur_sigma);
    for g in grid.iter_mut() {
        *g = (*g as f64 + cfg.noise_sigma * rng.normal()).clamp(-1.0, 1.0) as f32;
    }

    let spacing = [cfg.spacing_mm; 3];
    Ok(Case {
        volume: Volume::new(ext, spacing, grid)?,
        labels: LabelMap::new(ext, spacing, labels, legend_for(&cfg.organs, recipes))?,
        class_id: recipe.class_id,
        tumor_center: center,
        organs: present.iter().map(|o| o.id).collect(),
    })
}

fn texture_std(t: &[f32]) -> f64 {
    let n = t.len() as f64;
    let mean = t.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = t.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt().max(1e-12)
}

fn ball_inside(labels: &[u8], ext: Extents, c: [usize; 3], r: f64, host: u8) -> bool {
    let ri = r.ceil() as isize;
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if ((dz * dz + dy * dy + dx * dx) as f64) > r * r {
                    continue;
                }
                let p = [c[0] as isize + dz, c[1] as isize + dy, c[2] as isize + dx];
                if p.iter().zip(ext).any(|(v, e)| *v < 0 || *v >= e as isize) {
                    return false;
                }
                if labels[index(ext, p[0] as usize, p[1] as usize, p[2] as usize)] != host {
                    return false;
                }
            }
        }
    }
    true
}

/// Low-order polynomial in the direction components: a smooth radial
/// perturbation field on the sphere, normalised to a peak of about 1.
struct RadialField {
    coeffs: Vec<f64>,
    degree: u32,
}

impl RadialField {
    fn new(rng: &mut CounterRng, degree: u32) -> Self {
        let n = Self::monomials(degree).len();
        let mut coeffs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
        coeffs.iter_mut().for_each(|c| *c /= norm);
        Self { coeffs, degree }
    }

    fn monomials(degree: u32) -> Vec<[u32; 3]> {
        let mut m = Vec::new();
        for d in 1..=degree {
            for i in 0..=d {
                for j in 0..=d - i {
                    m.push([i, j, d - i - j]);
                }
            }
        }
        m
    }

    fn eval(&self, u: [f64; 3]) -> f64 {
        Self::monomials(self.degree)
            .iter()
            .zip(&self.coeffs)
            .map(|(e, c)| c * u[0].powi(e[0] as i32) * u[1].powi(e[1] as i32) * u[2].powi(e[2] as i32))
            .sum::<f64>()
            * 2.0
    }
}

fn place_tumor(
    rng: &mut CounterRng,
    labels: &[u8],
    ext: Extents,
    host: u8,
    recipe: &TumorRecipe,
) -> Result<([usize; 3], Vec<usize>)> {
    let host_voxels: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| **l == host).map(|(i, _)| i).collect();
    if host_voxels.is_empty() {
        return Err(Error::Generation(format!("host organ {host} has no voxels")));
    }
    let (rmin, rmax) = recipe.size_range_vox;
    let mut radius = rng.uniform_range(rmin, rmax);
    let unflat = |i: usize| [i / (ext[1] * ext[2]), (i / ext[2]) % ext[1], i % ext[2]];
    let center = loop {
        let found = (0..200).map(|_| unflat(host_voxels[rng.below(host_voxels.len())])).find(|c| ball_inside(labels, ext, *c, radius, host));
        if let Some(c) = found {
            break c;
        }
        if radius <= rmin {
            return Err(Error::Generation(format!(
                "class {} tumor of radius {rmin} does not fit in host organ {host}",
                recipe.class_id
            )));
        }
        radius = (radius - 0.5).max(rmin);
    };

    let (amp, degree) = match recipe.shape {
        TumorShape::Spheroid => (0.0, 1),
        TumorShape::Lobulated => (0.3, 3),
        TumorShape::Infiltrative => (0.45, 4),
    };
    let field = RadialField::new(rng, degree);
    let aniso: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.85, 1.15)).collect();
    let jitter = match recipe.edge {
        TumorEdge::Smooth => 0.0,
        TumorEdge::Irregular => 0.7,
    };

    let reach = rmax.ceil() as isize;
    let mut inside = vec![false; labels.len()];
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let p = [center[0] as isize + dz, center[1] as isize + dy, center[2] as isize + dx];
                if p.iter().zip(ext).any(|(v, e)| *v < 0 || *v >= e as isize) {
                    continue;
                }
                let i = index(ext, p[0] as usize, p[1] as usize, p[2] as usize);
                let d = [dz as f64, dy as f64, dx as f64];
                let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let noise = rng.uniform_range(-jitter, jitter);
                if labels[i] != host {
                    continue;
                }
                let thr = if dist == 0.0 {
                    rmin
                } else {
                    let u = [d[0] / dist, d[1] / dist, d[2] / dist];
                    let ell = 1.0 / (0..3).map(|a| (u[a] / aniso[a]).powi(2)).sum::<f64>().sqrt();
                    radius * ell * (1.0 + amp * field.eval(u)) + noise
                };
                inside[i] = dist <= thr.clamp(rmin, rmax);
            }
        }
    }

    // Keep the 6-connected component containing the center.
    let mut region = Vec::new();
    let start = index(ext, center[0], center[1], center[2]);
    let mut queue = VecDeque::from([start]);
    inside[start] = false;
    while let Some(i) = queue.pop_front() {
        region.push(i);
        let p = unflat(i);
        for (a, delta) in [(0, -1isize), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
            let v = p[a] as isize + delta;
            if v < 0 || v >= ext[a] as isize {
                continue;
            }
            let mut q = p;
            q[a] = v as usize;
            let j = index(ext, q[0], q[1], q[2]);
            if inside[j] {
                inside[j] = false;
                queue.push_back(j);
            }
        }
    }
    region.sort_unstable();
    Ok((center, region))
}

/// Separable Gaussian blur with edge clamping.
pub fn blur3d(grid: &mut [f32], ext: Extents, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    let strides = [ext[1] * ext[2], ext[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = ext[axis];
        let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
        for i in 0..ext[others[0]] {
            for j in 0..ext[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..len).map(|k| grid[base + k * strides[axis]] as f64));
                for k in 0..len {
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        let src = (k as isize + t as isize - r).clamp(0, len as isize - 1) as usize;
                        acc += wt * line[src];
                    }
                    grid[base + k * strides[axis]] = acc as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::recipe::{default_recipes, with_weights};

    #[test]
    fn blur_preserves_constants() {
        let mut g = vec![0.25f32; 5 * 6 * 7];
        blur3d(&mut g, [5, 6, 7], 1.0);
        assert!(g.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_case(7, &default_recipes(), &cfg).unwrap();
        let b = generate_case(7, &default_recipes(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_case(8, &default_recipes(), &cfg).unwrap();
        assert_ne!(a.volume.grid, c.volume.grid);
    }

    #[test]
    fn single_class_registry() {
        let cfg = GeneratorConfig::default();
        let recipes = with_weights(default_recipes(), &[0.0, 0.0, 1.0]).unwrap();
        for s in 0..10 {
            assert_eq!(generate_case(s, &recipes, &cfg).unwrap().class_id, 3);
        }
    }

    #[test]
    fn small_extent_is_rejected() {
        let cfg = GeneratorConfig { extent: 15, ..Default::default() };
        assert!(matches!(generate_case(0, &default_recipes(), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn oversized_tumor_fails_to_fit() {
        let mut recipes = default_recipes();
        recipes[0].size_range_vox = (14.0, 15.0);
        let recipes = with_weights(recipes, &[1.0, 0.0, 0.0]).unwrap();
        let r = generate_case(0, &recipes, &GeneratorConfig::default());
        assert!(matches!(r, Err(Error::Generation(_))), "{r:?}");
    }
}
