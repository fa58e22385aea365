//! Organ and tumor-class definitions consumed by the generator.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TumorShape {
    Spheroid,
    Lobulated,
    Infiltrative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TumorEdge {
    Smooth,
    Irregular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganSpec {
    pub id: u8,
    pub name: String,
    pub base_intensity: f32,
    /// Semi-axis range as a fraction of the volume extent.
    pub semi_axis_frac: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumorRecipe {
    pub class_id: u8,
    pub host_organ: u8,
    /// Radius range in voxels; every tumor contains the ball of the minimum
    /// radius and lies within the ball of the maximum radius.
    pub size_range_vox: (f64, f64),
    pub shape: TumorShape,
    pub edge: TumorEdge,
    pub intensity_offset_range: (f64, f64),
    pub frequency_weight: f64,
}

pub fn default_organs() -> Vec<OrganSpec> {
    vec![
        OrganSpec { id: 1, name: "liver".into(), base_intensity: 0.1, semi_axis_frac: (0.2, 0.3) },
        OrganSpec { id: 2, name: "lung".into(), base_intensity: -0.2, semi_axis_frac: (0.18, 0.25) },
        OrganSpec { id: 3, name: "kidney".into(), base_intensity: 0.4, semi_axis_frac: (0.1, 0.15) },
    ]
}

/// Three classes with imbalanced frequencies 0.5 / 0.3 / 0.2. The two liver
/// classes overlap in intensity and differ mainly in shape, size and edge.
pub fn default_recipes() -> Vec<TumorRecipe> {
    vec![
        TumorRecipe {
            class_id: 1,
            host_organ: 1,
            size_range_vox: (3.0, 6.0),
            shape: TumorShape::Lobulated,
            edge: TumorEdge::Irregular,
            intensity_offset_range: (-0.30, -0.12),
            frequency_weight: 0.5,
        },
        TumorRecipe {
            class_id: 2,
            host_organ: 1,
            size_range_vox: (2.0, 5.0),
            shape: TumorShape::Spheroid,
            edge: TumorEdge::Smooth,
            intensity_offset_range: (-0.22, -0.06),
            frequency_weight: 0.3,
        },
        TumorRecipe {
            class_id: 3,
            host_organ: 2,
            size_range_vox: (3.0, 6.0),
            shape: TumorShape::Infiltrative,
            edge: TumorEdge::Irregular,
            intensity_offset_range: (0.12, 0.30),
            frequency_weight: 0.2,
        },
    ]
}

/// Replaces the frequency weights of `recipes` in order.
pub fn with_weights(mut recipes: Vec<TumorRecipe>, weights: &[f64]) -> Result<Vec<TumorRecipe>> {
    if weights.len() != recipes.len() {
        return Err(Error::Registry(format!(
            "{} weights given for {} recipes",
            weights.len(),
            recipes.len()
        )));
    }
    for (r, w) in recipes.iter_mut().zip(weights) {
        r.frequency_weight = *w;
    }
    Ok(recipes)
}

pub fn validate(recipes: &[TumorRecipe], organs: &[OrganSpec]) -> Result<()> {
    if recipes.is_empty() {
        return Err(Error::Registry("at least one tumor recipe is required".into()));
    }
    let total: f64 = recipes.iter().map(|r| r.frequency_weight).sum();
    if (total - 1.0).abs() > 1e-6 || recipes.iter().any(|r| !(r.frequency_weight >= 0.0)) {
        return Err(Error::Registry(format!("frequency weights must be non-negative and sum to 1, got {total}")));
    }
    for (i, r) in recipes.iter().enumerate() {
        if r.class_id == 0 || recipes[..i].iter().any(|o| o.class_id == r.class_id) {
            return Err(Error::Registry(format!("class id {} is zero or duplicated", r.class_id)));
        }
        let (lo, hi) = r.size_range_vox;
        if !(lo >= 2.0 && hi >= lo) {
            return Err(Error::Registry(format!("class {}: size range {lo}..{hi} invalid (min must be >= 2)", r.class_id)));
        }
        if r.intensity_offset_range.0 > r.intensity_offset_range.1 {
            return Err(Error::Registry(format!("class {}: empty intensity offset range", r.class_id)));
        }
        if !organs.iter().any(|o| o.id == r.host_organ) {
            return Err(Error::Registry(format!("class {}: unknown host organ {}", r.class_id, r.host_organ)));
        }
    }
    for (i, o) in organs.iter().enumerate() {
        if o.id == 0 || o.id >= super::volume::TUMOR_LABEL_BASE || organs[..i].iter().any(|p| p.id == o.id) {
            return Err(Error::Registry(format!("organ id {} is out of range or duplicated", o.id)));
        }
    }
    Ok(())
}

pub fn host_of(recipes: &[TumorRecipe], class_id: u8) -> Option<u8> {
    recipes.iter().find(|r| r.class_id == class_id).map(|r| r.host_organ)
}
