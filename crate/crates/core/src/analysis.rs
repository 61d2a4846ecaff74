//! Layer-wise geometry: PCA of final-token activations, perpendicularity of
//! steering directions, and steering layer sweeps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalplane::{accuracy_with_plans, Dataset};
use crate::model::{forward_with_trace, Parameters};
use crate::steering::{build_pair_set_en, build_pair_set_loc, extract_steering_vector, SteerKind, SteeringPlan, SteeringVector};
use crate::worldgen::{McqItem, Vocab, PIVOT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `k × d`, orthonormal rows.
    pub components: Array2<f64>,
    pub mean: Vec<f64>,
    /// All `d` covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Variance along each kept component.
    pub explained_variance: Vec<f64>,
    /// `explained_variance / Σ eigenvalues`; zero for degenerate data.
    pub explained_ratio: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// `n × k`.
    pub projections: Array2<f64>,
    pub labels: Vec<usize>,
}

impl PcaResult {
    /// Maps projections back to activation space.
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut out = self.projections.dot(&self.components);
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        out
    }

    /// `row,label,pc1,...`
    pub fn projections_csv(&self) -> String {
        let k = self.components.nrows();
        let mut s = String::from("row,label");
        for c in 1..=k {
            s.push_str(&format!(",pc{c}"));
        }
        s.push('\n');
        for (i, row) in self.projections.rows().into_iter().enumerate() {
            let label = self.labels.get(i).map(|l| l.to_string()).unwrap_or_default();
            s.push_str(&format!("{i},{label}"));
            for v in row {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Principal components of the rows of `acts` via eigendecomposition of the
/// sample covariance. Each component's largest-magnitude coordinate is made
/// positive.
pub fn pca_project(acts: &Array2<f64>, k: usize) -> Result<PcaResult> {
    let (n, d) = acts.dim();
    if n < 2 {
        return Err(Error::Precondition(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::Precondition(format!("k = {k} must lie in 1..={}", n.min(d))));
    }
    if acts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| acts.column(j).sum() / n as f64).collect();
    let mut centered = acts.clone();
    for mut row in centered.rows_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance = cov.diag().sum();
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let sum: f64 = eigenvalues.iter().sum();

    let mut components = Array2::zeros((k, d));
    for (r, &i) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[r, j]] = sign * col[j];
        }
    }
    let explained_variance = eigenvalues[..k].to_vec();
    let explained_ratio = explained_variance.iter().map(|&v| if sum > 0.0 { v / sum } else { 0.0 }).collect();
    let projections = centered.dot(&components.t());
    Ok(PcaResult { components, mean, eigenvalues, explained_variance, explained_ratio, total_variance, projections, labels: Vec::new() })
}

/// Angle between two directions folded onto `[0, 90]`: 90 for orthogonal,
/// 0 for parallel or anti-parallel.
pub fn perpendicularity(v1: &[f64], v2: &[f64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::DimensionMismatch { expected: v1.len(), got: v2.len() });
    }
    let n1 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n2 = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm("perpendicularity of a zero vector".into()));
    }
    let cos = (v1.iter().zip(v2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    let deg = cos.acos().to_degrees();
    Ok(90.0 - (deg - 90.0).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerpReport {
    /// `(layer, score in degrees)`, ordered by layer.
    pub scores: Vec<(usize, f64)>,
}

impl PerpReport {
    pub fn from_vectors(pairs: &[(SteeringVector, SteeringVector)]) -> Result<Self> {
        let mut scores = pairs
            .iter()
            .map(|(a, b)| {
                if a.layer != b.layer {
                    return Err(Error::Precondition(format!("vectors from layers {} and {}", a.layer, b.layer)));
                }
                Ok((a.layer, perpendicularity(&a.values, &b.values)?))
            })
            .collect::<Result<Vec<_>>>()?;
        scores.sort_by_key(|s| s.0);
        Ok(Self { scores })
    }

    /// `layer,score_deg`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,score_deg\n");
        for (l, v) in &self.scores {
            s.push_str(&format!("{l},{v:?}\n"));
        }
        s
    }
}

/// EN vs LOC perpendicularity per layer for one target language, vectors from `dev1`.
pub fn perpendicularity_report(params: &Parameters, dev1: &[McqItem], vocab: &Vocab, lang: usize, layers: &[usize]) -> Result<PerpReport> {
    let en = build_pair_set_en(dev1, PIVOT, lang)?;
    let loc = build_pair_set_loc(dev1, lang, vocab)?;
    let pairs = layers
        .iter()
        .map(|&l| Ok((extract_steering_vector(params, &en, l)?, extract_steering_vector(params, &loc, l)?)))
        .collect::<Result<Vec<_>>>()?;
    PerpReport::from_vectors(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// 0 for the unsteered baseline.
    pub layer: usize,
    /// `none`, `en` or `loc`.
    pub kind: String,
    pub dataset: Dataset,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn baseline(&self, dataset: Dataset) -> Option<f64> {
        self.rows.iter().find(|r| r.layer == 0 && r.dataset == dataset).map(|r| r.accuracy)
    }

    /// Best layer for `(kind, dataset)`; ties go to the shallower layer.
    pub fn argmax(&self, kind: SteerKind, dataset: Dataset) -> Option<usize> {
        let mut best: Option<&SweepRow> = None;
        for r in self.rows.iter().filter(|r| r.kind == kind.as_str() && r.dataset == dataset) {
            match best {
                Some(b) if r.accuracy < b.accuracy || (r.accuracy == b.accuracy && r.layer >= b.layer) => {}
                _ => best = Some(r),
            }
        }
        best.map(|r| r.layer)
    }

    /// Every `(kind, dataset)` argmax present in the table.
    pub fn argmax_layers(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for kind in [SteerKind::En, SteerKind::Loc] {
            for ds in [Dataset::Universal, Dataset::Cultural, Dataset::CulturalCtx] {
                if let Some(l) = self.argmax(kind, ds) {
                    out.insert(format!("{}/{}", kind.as_str(), ds.as_str()), l);
                }
            }
        }
        out
    }

    /// `layer,kind,dataset,accuracy`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,dataset,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:?}\n", r.layer, r.kind, r.dataset, r.accuracy));
        }
        s
    }
}

/// Layer sweep with vectors from `provider(kind, lang, layer)`; items of each
/// set are steered with the vector of their own language.
pub fn layer_sweep_with<F>(
    params: &Parameters,
    kinds: &[SteerKind],
    layers: &[usize],
    sets: &[(Dataset, Vec<McqItem>)],
    gamma: f64,
    mut provider: F,
) -> Result<SweepTable>
where
    F: FnMut(SteerKind, usize, usize) -> Result<SteeringVector>,
{
    if sets.is_empty() || sets.iter().any(|(_, items)| items.is_empty()) {
        return Err(Error::Empty("sweep evaluation set".into()));
    }
    for &l in layers {
        params.config().check_layer(l)?;
    }
    let mut rows = Vec::new();
    for (ds, items) in sets {
        let (acc, _) = accuracy_with_plans(params, items, |_| None, false)?;
        rows.push(SweepRow { layer: 0, kind: "none".into(), dataset: *ds, accuracy: acc });
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &layer in &sorted {
        for &kind in kinds {
            let mut plans: BTreeMap<usize, SteeringPlan> = BTreeMap::new();
            for (_, items) in sets {
                for item in items {
                    if let std::collections::btree_map::Entry::Vacant(e) = plans.entry(item.lang) {
                        let v = provider(kind, item.lang, layer)?;
                        e.insert(SteeringPlan::single(&v, gamma)?);
                    }
                }
            }
            for (ds, items) in sets {
                let (acc, _) = accuracy_with_plans(params, items, |i| plans.get(&i.lang), false)?;
                rows.push(SweepRow { layer, kind: kind.as_str().into(), dataset: *ds, accuracy: acc });
            }
        }
    }
    Ok(SweepTable { rows })
}

/// Extracts each vector from `dev1` at the swept layer, applies it there,
/// and scores the dev2 sets. Pivot-language items get a zero EN vector.
pub fn layer_sweep(
    params: &Parameters,
    kinds: &[SteerKind],
    layers: &[usize],
    dev1: &[McqItem],
    sets: &[(Dataset, Vec<McqItem>)],
    vocab: &Vocab,
    gamma: f64,
) -> Result<SweepTable> {
    layer_sweep_with(params, kinds, layers, sets, gamma, |kind, lang, layer| {
        let pairs = match kind {
            SteerKind::En => build_pair_set_en(dev1, PIVOT, lang)?,
            SteerKind::Loc => build_pair_set_loc(dev1, lang, vocab)?,
        };
        extract_steering_vector(params, &pairs, layer)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub layer: usize,
    pub pca: PcaResult,
    /// Mean pairwise distance between language centroids in the top-2 plane.
    pub centroid_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub layers: Vec<LayerOverlap>,
}

impl OverlapReport {
    /// `layer,centroid_distance`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,centroid_distance\n");
        for l in &self.layers {
            s.push_str(&format!("{},{:?}\n", l.layer, l.centroid_distance));
        }
        s
    }
}

/// Mean pairwise Euclidean distance between per-label centroids of `points`.
pub fn mean_centroid_distance(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != points.nrows() {
        return Err(Error::DimensionMismatch { expected: points.nrows(), got: labels.len() });
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &l) in points.rows().into_iter().zip(labels) {
        let e = sums.entry(l).or_insert_with(|| (vec![0.0; points.ncols()], 0));
        for (s, v) in e.0.iter_mut().zip(row) {
            *s += v;
        }
        e.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Precondition("need at least two languages".into()));
    }
    let cents: Vec<Vec<f64>> = sums.into_values().map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..cents.len() {
        for j in i + 1..cents.len() {
            total += cents[i].iter().zip(&cents[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PCA to (at most) two components plus the centroid summary.
pub fn overlap_from_activations(acts: &Array2<f64>, labels: &[usize]) -> Result<(PcaResult, f64)> {
    let k = 2.min(acts.nrows()).min(acts.ncols());
    let mut pca = pca_project(acts, k)?;
    pca.labels = labels.to_vec();
    let dist = mean_centroid_distance(&pca.projections, labels)?;
    Ok((pca, dist))
}

/// Final-token activations of every item at each requested layer.
pub fn language_overlap_report(params: &Parameters, items: &[McqItem], layers: &[usize]) -> Result<OverlapReport> {
    for &l in layers {
        params.config().check_layer(l)?;
    }
    let d = params.config().d_model;
    let mut acts: Vec<Array2<f64>> = layers.iter().map(|_| Array2::zeros((items.len(), d))).collect();
    for (i, item) in items.iter().enumerate() {
        let (_, trace) = forward_with_trace(params, &item.query, None)?;
        for (m, &l) in acts.iter_mut().zip(layers) {
            let row = trace.last_token(l)?;
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    let labels: Vec<usize> = items.iter().map(|i| i.lang).collect();
    let layers = layers
        .iter()
        .zip(&acts)
        .map(|(&layer, a)| {
            let (pca, centroid_distance) = overlap_from_activations(a, &labels)?;
            Ok(LayerOverlap { layer, pca, centroid_distance })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perpendicularity_reference_angles() {
        assert!((perpendicularity(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-9);
        assert!(perpendicularity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap().abs() < 1e-9);
        assert!(perpendicularity(&[1.0, 0.0], &[3.0, 0.0]).unwrap().abs() < 1e-9);
        assert!((perpendicularity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 45.0).abs() < 1e-9);
    }

    #[test]
    fn perpendicularity_rejects_zero_vector() {
        assert!(matches!(perpendicularity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn points_on_a_line_have_one_component() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0], [5.0, 10.0]];
        let p = pca_project(&x, 2).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_ratio[1].abs() < 1e-12);
        assert!(p.components[[0, 1]] > 0.0);
    }

    #[test]
    fn identical_rows_give_zero_variance() {
        let x = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]];
        let p = pca_project(&x, 2).unwrap();
        assert_eq!(p.total_variance, 0.0);
        assert!(p.explained_ratio.iter().all(|&r| r == 0.0));
        assert!(p.projections.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(pca_project(&x, 3).is_err());
        assert!(pca_project(&x, 0).is_err());
        assert!(pca_project(&array![[1.0, 2.0]], 1).is_err());
    }

    #[test]
    fn argmax_prefers_shallower_on_ties() {
        let row = |layer, acc| SweepRow { layer, kind: "loc".into(), dataset: Dataset::Cultural, accuracy: acc };
        let t = SweepTable { rows: vec![row(9, 0.5), row(3, 0.5), row(7, 0.4)] };
        assert_eq!(t.argmax(SteerKind::Loc, Dataset::Cultural), Some(3));
        assert_eq!(t.argmax(SteerKind::En, Dataset::Cultural), None);
    }

    #[test]
    fn centroid_distance_of_identical_groups_is_zero() {
        let x = array![[1.0, 1.0], [2.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        assert_eq!(mean_centroid_distance(&x, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(mean_centroid_distance(&x, &[0, 0, 0, 0]).is_err());
    }
}
