//! Diagnostics: KL divergence between spatial grids, weight-norm balance of
//! classifiers, and model-predicted object distribution grids.

use serde::{Deserialize, Serialize};

use crate::data::{
    occurrence_grid, AnnotationTable, ClassFrequencyTable, GridKind, SpatialGrid,
};
use crate::error::{Error, Result};

/// KL divergence `sum P log(P/Q)` between two grids of identical shape.
///
/// Both grids are smoothed by adding `eps` to every cell and renormalizing,
/// so empty cells never produce infinities and two equal grids give exactly
/// zero up to rounding.
pub fn kl_divergence(p: &SpatialGrid, q: &SpatialGrid, eps: f64) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::GridShapeMismatch {
            left_h: p.grid_h,
            left_w: p.grid_w,
            right_h: q.grid_h,
            right_w: q.grid_w,
        });
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::InvalidEpsilon { value: eps });
    }
    let smooth = |cells: &[f64]| -> Vec<f64> {
        let shifted: Vec<f64> = cells.iter().map(|&c| c + eps).collect();
        let total: f64 = shifted.iter().sum();
        shifted.iter().map(|&c| c / total).collect()
    };
    let ps = smooth(&p.cells);
    let qs = smooth(&q.cells);
    Ok(ps.iter().zip(&qs).map(|(&a, &b)| a * (a / b).ln()).sum())
}

/// L2 norm of one class's weight column together with its frequency rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassNorm {
    pub class: usize,
    pub image_count: usize,
    pub norm: f64,
}

/// Per-class weight norms and their coefficient of variation. A small CV
/// means the classifier treats classes evenly; frequency-biased training
/// inflates head-class norms and the CV with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNormReport {
    /// Sorted by image count, most frequent class first.
    pub per_class: Vec<ClassNorm>,
    pub mean: f64,
    pub std_dev: f64,
    /// `std_dev / mean` (population standard deviation).
    pub cv: f64,
}

/// Computes per-class weight norms from a class-major weight buffer
/// (`weights[k*d..(k+1)*d]` is class k's column) and summarizes their spread.
pub fn weight_norm_report(
    weights: &[f64],
    class_count: usize,
    freq: &ClassFrequencyTable,
) -> Result<WeightNormReport> {
    if class_count == 0 || weights.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.len() % class_count != 0 {
        return Err(Error::LengthMismatch { left: weights.len(), right: class_count });
    }
    if freq.len() != class_count {
        return Err(Error::LengthMismatch { left: freq.len(), right: class_count });
    }
    let dim = weights.len() / class_count;
    let norms: Vec<f64> = (0..class_count)
        .map(|k| weights[k * dim..(k + 1) * dim].iter().map(|w| w * w).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / class_count as f64;
    let variance =
        norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / class_count as f64;
    let std_dev = variance.sqrt();
    let cv = if mean == 0.0 { f64::NAN } else { std_dev / mean };

    let mut per_class: Vec<ClassNorm> = norms
        .iter()
        .enumerate()
        .map(|(class, &norm)| ClassNorm {
            class,
            image_count: freq.entry(class).image_count,
            norm,
        })
        .collect();
    per_class.sort_by(|a, b| b.image_count.cmp(&a.image_count).then(a.class.cmp(&b.class)));

    Ok(WeightNormReport { per_class, mean, std_dev, cv })
}

/// Joint distribution grid predicted by a model: each object contributes its
/// predicted probability for `category_id` (instead of a 0/1 membership
/// indicator) to its cell, normalized by the total object count.
///
/// `predict` maps an object's feature vector to per-class probabilities in
/// the order of `table.categories`. Objects without features are an error.
pub fn predicted_joint_grid<F>(
    predict: F,
    table: &AnnotationTable,
    category_id: u64,
    grid_h: usize,
    grid_w: usize,
) -> Result<SpatialGrid>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let class_index = table
        .categories
        .iter()
        .position(|c| c.id == category_id)
        .ok_or(Error::UnknownCategory { category_id })?;
    // Reuses the occurrence pass for table and dimension validation.
    occurrence_grid(table, grid_h, grid_w)?;
    let m = table.objects.len();
    let mut cells = vec![0.0; grid_h * grid_w];
    let dims: std::collections::BTreeMap<u64, (f64, f64)> =
        table.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    for (index, obj) in table.objects.iter().enumerate() {
        let features = obj.features.as_ref().ok_or(Error::MissingFeatures { index })?;
        let probs = predict(features)?;
        if probs.len() != table.categories.len() {
            return Err(Error::LengthMismatch {
                left: probs.len(),
                right: table.categories.len(),
            });
        }
        let (w, h) = dims[&obj.image_id];
        let col = ((obj.center_x / w * grid_w as f64) as usize).min(grid_w - 1);
        let row = ((obj.center_y / h * grid_h as f64) as usize).min(grid_h - 1);
        cells[row * grid_w + col] += probs[class_index];
    }
    for c in &mut cells {
        *c /= m as f64;
    }
    Ok(SpatialGrid { grid_h, grid_w, kind: GridKind::Joint, cells, occupied: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        joint_grid, parse_annotations, GroupThresholds, ObjectRecord,
    };

    fn grid(kind: GridKind, cells: Vec<f64>, w: usize) -> SpatialGrid {
        SpatialGrid { grid_h: cells.len() / w, grid_w: w, kind, cells, occupied: None }
    }

    #[test]
    fn kl_of_identical_grids_is_zero() {
        let p = grid(GridKind::Occurrence, vec![0.25, 0.25, 0.25, 0.25], 2);
        assert!(kl_divergence(&p, &p, 1e-12).unwrap().abs() < 1e-15);
        let p = grid(GridKind::Occurrence, vec![0.7, 0.1, 0.2, 0.0], 2);
        assert!(kl_divergence(&p, &p, 1e-12).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_matches_frozen_point_mass_value() {
        let p = grid(GridKind::Occurrence, vec![1.0, 0.0], 2);
        let q = grid(GridKind::Occurrence, vec![0.5, 0.5], 2);
        let kl = kl_divergence(&p, &q, 1e-12).unwrap();
        assert!((kl - 0.69314718053131429).abs() < 1e-12);
        // Close to ln 2; smoothing pulls it below by ~3e-11.
        assert!((kl - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative_and_asymmetric() {
        let p = grid(GridKind::Occurrence, vec![0.6, 0.3, 0.1, 0.0], 2);
        let q = grid(GridKind::Occurrence, vec![0.1, 0.2, 0.3, 0.4], 2);
        let forward = kl_divergence(&p, &q, 1e-9).unwrap();
        let backward = kl_divergence(&q, &p, 1e-9).unwrap();
        assert!(forward > 0.0);
        assert!(backward > 0.0);
        assert!((forward - backward).abs() > 1e-3);
    }

    #[test]
    fn kl_validates_inputs() {
        let p = grid(GridKind::Occurrence, vec![1.0, 0.0], 2);
        let q = grid(GridKind::Occurrence, vec![0.5, 0.5, 0.0, 0.0], 2);
        assert!(matches!(
            kl_divergence(&p, &q, 1e-9),
            Err(Error::GridShapeMismatch { .. })
        ));
        assert!(matches!(kl_divergence(&p, &p, 0.0), Err(Error::InvalidEpsilon { .. })));
        assert!(matches!(kl_divergence(&p, &p, -1.0), Err(Error::InvalidEpsilon { .. })));
    }

    #[test]
    fn kl_handles_zero_cells_via_smoothing() {
        let p = grid(GridKind::Joint, vec![0.5, 0.5, 0.0, 0.0], 2);
        let q = grid(GridKind::Joint, vec![0.0, 0.0, 0.5, 0.5], 2);
        let kl = kl_divergence(&p, &q, 1e-12).unwrap();
        assert!(kl.is_finite());
        assert!(kl > 0.0);
    }

    fn freq3() -> ClassFrequencyTable {
        ClassFrequencyTable::new(&[(5, 5), (200, 200), (40, 40)], 1000, GroupThresholds::default())
            .unwrap()
    }

    #[test]
    fn weight_norms_match_hand_computation() {
        // Two features per class; columns (1,0), (0,3), (2,2).
        let weights = vec![1.0, 0.0, 0.0, 3.0, 2.0, 2.0];
        let report = weight_norm_report(&weights, 3, &freq3()).unwrap();
        let by_class: Vec<f64> = {
            let mut v = report.per_class.clone();
            v.sort_by_key(|c| c.class);
            v.iter().map(|c| c.norm).collect()
        };
        assert!((by_class[0] - 1.0).abs() < 1e-15);
        assert!((by_class[1] - 3.0).abs() < 1e-15);
        assert!((by_class[2] - 8.0f64.sqrt()).abs() < 1e-15);
        // Most frequent class listed first.
        assert_eq!(report.per_class[0].class, 1);
        assert_eq!(report.per_class[0].image_count, 200);
    }

    #[test]
    fn cv_matches_population_convention() {
        // Norms {1, 3}: mean 2, population std 1, CV 0.5.
        let weights = vec![1.0, 0.0, 0.0, 3.0];
        let freq = ClassFrequencyTable::new(
            &[(10, 10), (20, 20)],
            100,
            GroupThresholds::default(),
        )
        .unwrap();
        let report = weight_norm_report(&weights, 2, &freq).unwrap();
        assert!((report.mean - 2.0).abs() < 1e-15);
        assert!((report.std_dev - 1.0).abs() < 1e-15);
        assert!((report.cv - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_norms_give_zero_cv() {
        let weights = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let report = weight_norm_report(&weights, 3, &freq3()).unwrap();
        assert_eq!(report.cv, 0.0);
    }

    #[test]
    fn weight_norm_report_validates_shapes() {
        assert!(weight_norm_report(&[], 0, &freq3()).is_err());
        assert!(weight_norm_report(&[1.0, 2.0, 3.0], 2, &freq3()).is_err());
        let freq2 = ClassFrequencyTable::new(&[(1, 1), (2, 2)], 10, GroupThresholds::default())
            .unwrap();
        assert!(weight_norm_report(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, &freq2).is_err());
    }

    fn featured_table() -> AnnotationTable {
        let json = r#"{
            "images": [{"id": 1, "width": 100, "height": 100}],
            "categories": [{"id": 7, "name": "a"}, {"id": 8, "name": "b"}],
            "annotations": [
                {"image_id": 1, "category_id": 7, "bbox": [10, 10, 20, 20], "features": [1.0, 0.0]},
                {"image_id": 1, "category_id": 8, "bbox": [60, 60, 20, 20], "features": [0.0, 1.0]},
                {"image_id": 1, "category_id": 7, "bbox": [15, 20, 10, 10], "features": [0.9, 0.1]},
                {"image_id": 1, "category_id": 7, "bbox": [80, 20, 10, 10], "features": [0.8, 0.0]}
            ]
        }"#;
        parse_annotations(json).unwrap()
    }

    #[test]
    fn oracle_predictor_reproduces_joint_grid_exactly() {
        let table = featured_table();
        // Predicts the true class with probability 1 from the feature's
        // argmax, which matches the labels by construction.
        let oracle = |features: &[f64]| -> Result<Vec<f64>> {
            let mut probs = vec![0.0; 2];
            let arg = if features[0] >= features[1] { 0 } else { 1 };
            probs[arg] = 1.0;
            Ok(probs)
        };
        for (idx, &cid) in [7u64, 8].iter().enumerate() {
            let _ = idx;
            let predicted = predicted_joint_grid(oracle, &table, cid, 2, 2).unwrap();
            let truth = joint_grid(&table, cid, 2, 2).unwrap();
            assert_eq!(predicted.cells, truth.cells, "category {cid}");
        }
    }

    #[test]
    fn uniform_predictor_spreads_occurrence_evenly() {
        let table = featured_table();
        let uniform = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.5, 0.5]) };
        let predicted = predicted_joint_grid(uniform, &table, 7, 2, 2).unwrap();
        let occurrence = occurrence_grid(&table, 2, 2).unwrap();
        for (p, o) in predicted.cells.iter().zip(&occurrence.cells) {
            assert!((p - o / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn predicted_grid_requires_features() {
        let mut table = featured_table();
        table.objects.push(ObjectRecord {
            image_id: 1,
            category_id: 7,
            center_x: 50.0,
            center_y: 50.0,
            features: None,
        });
        let uniform = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.5, 0.5]) };
        assert!(matches!(
            predicted_joint_grid(uniform, &table, 7, 2, 2),
            Err(Error::MissingFeatures { index: 4 })
        ));
    }

    #[test]
    fn predicted_grid_mass_stays_at_one_for_normalized_predictors() {
        let table = featured_table();
        let uniform = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![0.25, 0.75]) };
        let a = predicted_joint_grid(uniform, &table, 7, 3, 3).unwrap();
        let b = predicted_joint_grid(uniform, &table, 8, 3, 3).unwrap();
        let mass: f64 = a.cells.iter().sum::<f64>() + b.cells.iter().sum::<f64>();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
