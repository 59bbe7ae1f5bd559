//! Taylor-expansion importance of prunable groups.
//!
//! For a weight slice `θ` with batch gradient `g` and per-sample gradients
//! `g_j`, the removal-loss estimate at vector granularity is
//!
//! ```text
//! |gᵀθ − ½ Σ_j (g_jᵀθ)²|
//! ```
//!
//! where the quadratic Hessian term is replaced by the empirical Fisher. At
//! element granularity each scalar gets `|g_k θ_k − ½ Σ_j (g_{k,j} θ_k)²|`, and
//! the slice score is the sum over its elements. The two granularities are mixed
//! with balance coefficients and magnitude-alignment factors, and slice scores
//! are reduced to one group score by an [`Aggregation`].

use std::fmt;
use std::str::FromStr;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{Slice, StructureGroup};
use crate::model::{GradientStore, TransformerLM, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Prod,
    Max,
    Last,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Sum,
        Aggregation::Prod,
        Aggregation::Max,
        Aggregation::Last,
    ];
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Prod => "prod",
            Aggregation::Max => "max",
            Aggregation::Last => "last",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "prod" => Ok(Aggregation::Prod),
            "max" => Ok(Aggregation::Max),
            "last" => Ok(Aggregation::Last),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// How the alignment factors enter the mixed score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// `α₁·align₁·I_vector + α₂·align₂·I_element`.
    #[default]
    Granularity,
    /// Alignment factors scale the first- and second-order Taylor terms inside
    /// both granularities: `α₁·I_vector(align₁, align₂) + α₂·I_element(align₁, align₂)`.
    Order,
}

/// Importance-estimation metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub align1: f64,
    pub align2: f64,
    pub agg: Aggregation,
    /// Include the empirical-Fisher second-order term.
    #[serde(default = "default_true")]
    pub hessian: bool,
    #[serde(default)]
    pub composition: Composition,
}

fn default_true() -> bool {
    true
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.5,
            align1: 1.0,
            align2: 1.0,
            agg: Aggregation::Sum,
            hessian: true,
            composition: Composition::Granularity,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha1) || !unit(self.alpha2) {
            return Err(Error::Config(format!(
                "balance coefficients must lie in [0, 1], got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.align1 > 0.0 && self.align2 > 0.0) || !self.align1.is_finite() || !self.align2.is_finite() {
            return Err(Error::Config(format!(
                "alignment factors must be positive, got {} and {}",
                self.align1, self.align2
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MetricConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha1={} alpha2={} align1={:e} align2={:e} agg={} hessian={} composition={}",
            self.alpha1,
            self.alpha2,
            self.align1,
            self.align2,
            self.agg,
            self.hessian,
            match self.composition {
                Composition::Granularity => "granularity",
                Composition::Order => "order",
            }
        )
    }
}

/// Reduces slice scores to a group score.
pub fn aggregate(values: &[f64], agg: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    Ok(match agg {
        Aggregation::Sum => values.iter().sum(),
        Aggregation::Prod => values.iter().product(),
        Aggregation::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Last => values[values.len() - 1],
    })
}

/// First-order and Fisher parts of one slice's Taylor estimate, before the
/// absolute value: the estimate is `first − ½·second`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Terms {
    first: f64,
    second: f64,
}

fn samples_for(grads: &GradientStore, hessian: bool) -> Result<&[Weights]> {
    if hessian {
        grads.samples()
    } else {
        Ok(&[])
    }
}

fn vector_terms(model: &TransformerLM, grads: &GradientStore, s: &Slice, hessian: bool) -> Result<Terms> {
    let theta = s.view(&model.weights);
    let first = (&s.view(&grads.batch) * &theta).sum();
    let second = samples_for(grads, hessian)?
        .iter()
        .map(|gj| (&s.view(gj) * &theta).sum().powi(2))
        .sum();
    Ok(Terms { first, second })
}

/// Sum over elements of `|w1·g_k θ_k − w2·½ θ_k² Σ_j g_{k,j}²|`.
fn element_sum(model: &TransformerLM, grads: &GradientStore, s: &Slice, hessian: bool, w1: f64, w2: f64) -> Result<f64> {
    let theta = s.view(&model.weights);
    let g = s.view(&grads.batch);
    let samples = samples_for(grads, hessian)?;
    let mut fisher = ndarray::Array2::<f64>::zeros(theta.raw_dim());
    for gj in samples {
        Zip::from(&mut fisher).and(&s.view(gj)).for_each(|f, &v| *f += v * v);
    }
    let mut total = 0.0;
    Zip::from(&theta).and(&g).and(&fisher).for_each(|&t, &gk, &fk| {
        total += (w1 * gk * t - w2 * 0.5 * t * t * fk).abs();
    });
    Ok(total)
}

/// Vector-granularity importance of each slice in `group`, with the
/// empirical-Fisher second-order term.
pub fn vector_importance(model: &TransformerLM, grads: &GradientStore, group: &StructureGroup) -> Result<Vec<f64>> {
    vector_importance_with(model, grads, group, true)
}

pub fn vector_importance_with(
    model: &TransformerLM,
    grads: &GradientStore,
    group: &StructureGroup,
    hessian: bool,
) -> Result<Vec<f64>> {
    group
        .slices
        .iter()
        .map(|s| vector_terms(model, grads, s, hessian).map(|t| (t.first - 0.5 * t.second).abs()))
        .collect()
}

/// Element-granularity importance summed within each slice of `group`.
pub fn element_importance(model: &TransformerLM, grads: &GradientStore, group: &StructureGroup) -> Result<Vec<f64>> {
    element_importance_with(model, grads, group, true)
}

pub fn element_importance_with(
    model: &TransformerLM,
    grads: &GradientStore,
    group: &StructureGroup,
    hessian: bool,
) -> Result<Vec<f64>> {
    group
        .slices
        .iter()
        .map(|s| element_sum(model, grads, s, hessian, 1.0, 1.0))
        .collect()
}

/// Mixed per-slice scores of one group under `metric`.
pub fn slice_scores(
    model: &TransformerLM,
    grads: &GradientStore,
    group: &StructureGroup,
    metric: &MetricConfig,
) -> Result<Vec<f64>> {
    let h = metric.hessian;
    group
        .slices
        .iter()
        .map(|s| {
            let t = vector_terms(model, grads, s, h)?;
            Ok(match metric.composition {
                Composition::Granularity => {
                    let vector = (t.first - 0.5 * t.second).abs();
                    let element = if metric.alpha2 == 0.0 {
                        0.0
                    } else {
                        element_sum(model, grads, s, h, 1.0, 1.0)?
                    };
                    metric.alpha1 * metric.align1 * vector + metric.alpha2 * metric.align2 * element
                }
                Composition::Order => {
                    let vector = (metric.align1 * t.first - metric.align2 * 0.5 * t.second).abs();
                    let element = if metric.alpha2 == 0.0 {
                        0.0
                    } else {
                        element_sum(model, grads, s, h, metric.align1, metric.align2)?
                    };
                    metric.alpha1 * vector + metric.alpha2 * element
                }
            })
        })
        .collect()
}

/// Per-group importance under one metric and calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// Indexed by group id.
    pub scores: Vec<f64>,
    pub metric: MetricConfig,
    pub calib_fingerprint: String,
}

impl ImportanceReport {
    /// Group ids sorted by ascending score, ties by ascending id.
    pub fn ascending_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scores.len()).collect();
        ids.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]).then(a.cmp(&b)));
        ids
    }

    /// Header echoing the metric, then one `group_id score` line per group.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {} calib={}\n", self.metric, self.calib_fingerprint);
        for (id, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{id} {s:e}\n"));
        }
        out
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint::fingerprint(self.to_text().as_bytes())
    }
}

pub fn combined_importance(
    model: &TransformerLM,
    grads: &GradientStore,
    groups: &[StructureGroup],
    metric: &MetricConfig,
    calib_fingerprint: &str,
) -> Result<ImportanceReport> {
    metric.validate()?;
    let mut scores = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        if g.id != i {
            return Err(Error::StaleGroup(g.id));
        }
        let s = aggregate(&slice_scores(model, grads, g, metric)?, metric.agg)?;
        scores.push(s);
    }
    Ok(ImportanceReport {
        scores,
        metric: *metric,
        calib_fingerprint: calib_fingerprint.to_string(),
    })
}
