//! Ratio-constrained pruning plans and structural removal.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::groups::{build_groups, GroupKind};
use crate::importance::ImportanceReport;
use crate::model::{ModelShape, TransformerLM};

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub target_ratio: f64,
    /// Lowest importance first.
    pub removed: Vec<usize>,
    pub removed_params: usize,
    pub total_params: usize,
    /// `removed_params / total_params`.
    pub achieved_ratio: f64,
    /// Every group was removed and the target was still not reached.
    pub exhausted: bool,
    pub metric_fingerprint: String,
    pub model_fingerprint: String,
}

/// Removes the lowest-scoring groups while the removed fraction of *all* model
/// parameters stays at or below `ratio`. Stops at the first group that would
/// overshoot, so the removed set is always a prefix of the ascending order.
pub fn make_plan(report: &ImportanceReport, model: &TransformerLM, ratio: f64) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("pruning ratio must lie in [0, 1), got {ratio}")));
    }
    let groups = build_groups(model);
    if report.scores.len() != groups.len() {
        return Err(Error::IncompleteReport(report.scores.len().min(groups.len())));
    }
    if let Some(i) = report.scores.iter().position(|s| s.is_nan()) {
        return Err(Error::IncompleteReport(i));
    }
    let total = model.count_params(false);
    let mut removed = Vec::new();
    let mut removed_params = 0usize;
    let mut exhausted = true;
    for id in report.ascending_order() {
        let next = removed_params + groups[id].size;
        if next as f64 / total as f64 > ratio {
            exhausted = false;
            break;
        }
        removed.push(id);
        removed_params = next;
    }
    if exhausted && ratio > 0.0 && (removed_params as f64 / total as f64) < ratio {
        log::warn!(
            "all {} groups removed but ratio {:.4} is below the target {ratio}",
            groups.len(),
            removed_params as f64 / total as f64
        );
    } else {
        exhausted = false;
    }
    Ok(PruningPlan {
        target_ratio: ratio,
        removed,
        removed_params,
        total_params: total,
        achieved_ratio: removed_params as f64 / total as f64,
        exhausted,
        metric_fingerprint: report.fingerprint(),
        model_fingerprint: model.fingerprint(),
    })
}

/// New model whose matrices physically exclude the planned groups.
pub fn apply_plan(model: &TransformerLM, plan: &PruningPlan) -> Result<TransformerLM> {
    if plan.model_fingerprint != model.fingerprint() {
        return Err(Error::PlanMismatch(format!(
            "plan built for model {}, got {}",
            plan.model_fingerprint,
            model.fingerprint()
        )));
    }
    let groups = build_groups(model);
    let mut dropped_heads = vec![BTreeSet::new(); model.config.n_layers];
    let mut dropped_channels = vec![BTreeSet::new(); model.config.n_layers];
    for &id in &plan.removed {
        let g = groups
            .get(id)
            .ok_or_else(|| Error::PlanMismatch(format!("unknown group {id}")))?;
        let fresh = match g.kind {
            GroupKind::AttentionHead => dropped_heads[g.layer].insert(g.index),
            GroupKind::MlpChannel => dropped_channels[g.layer].insert(g.index),
        };
        if !fresh {
            return Err(Error::PlanMismatch(format!("group {id} listed twice")));
        }
    }

    let hd = model.config.head_dim();
    let mut weights = model.weights.clone();
    for (l, lw) in weights.layers.iter_mut().enumerate() {
        if !dropped_heads[l].is_empty() {
            let keep: Vec<usize> = (0..lw.inner_dim() / hd)
                .filter(|h| !dropped_heads[l].contains(h))
                .flat_map(|h| h * hd..(h + 1) * hd)
                .collect();
            lw.wq = lw.wq.select(Axis(0), &keep);
            lw.wk = lw.wk.select(Axis(0), &keep);
            lw.wv = lw.wv.select(Axis(0), &keep);
            lw.wo = lw.wo.select(Axis(1), &keep);
        }
        if !dropped_channels[l].is_empty() {
            let keep: Vec<usize> = (0..lw.d_ff()).filter(|c| !dropped_channels[l].contains(c)).collect();
            lw.w_up = lw.w_up.select(Axis(1), &keep);
            lw.w_down = lw.w_down.select(Axis(0), &keep);
        }
    }
    // `select` may return non-standard layouts for empty selections.
    for lw in weights.layers.iter_mut() {
        for m in [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo, &mut lw.w_up, &mut lw.w_down] {
            if !m.is_standard_layout() {
                *m = m.as_standard_layout().into_owned();
            }
        }
    }
    TransformerLM::from_weights(model.config.clone(), weights)
}

/// Parameter and compute accounting before and after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningStats {
    pub params_before: usize,
    pub params_after: usize,
    /// `(before − after) / before`.
    pub reduction: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub context: usize,
}

pub fn pruning_stats(before: &TransformerLM, after: &TransformerLM) -> PruningStats {
    stats_for_shapes(&before.shape(), &after.shape(), before.config.max_seq_len)
}

pub fn stats_for_shapes(before: &ModelShape, after: &ModelShape, context: usize) -> PruningStats {
    let pb = before.param_count();
    let pa = after.param_count();
    PruningStats {
        params_before: pb,
        params_after: pa,
        reduction: (pb as f64 - pa as f64) / pb as f64,
        macs_before: before.macs_per_token(context),
        macs_after: after.macs_per_token(context),
        context,
    }
}

impl PruningStats {
    pub fn to_text(&self) -> String {
        format!(
            "params_before={}\nparams_after={}\nreduction={}\nreduction_percent={:.4}\nmacs_per_token_before={}\nmacs_per_token_after={}\ncontext={}\n",
            self.params_before,
            self.params_after,
            self.reduction,
            100.0 * self.reduction,
            self.macs_before,
            self.macs_after,
            self.context
        )
    }
}

impl PruningPlan {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# target_ratio={}", self.target_ratio);
        let _ = writeln!(out, "# achieved_ratio={}", self.achieved_ratio);
        let _ = writeln!(out, "# removed_params={}", self.removed_params);
        let _ = writeln!(out, "# total_params={}", self.total_params);
        let _ = writeln!(out, "# exhausted={}", self.exhausted);
        let _ = writeln!(out, "# metric_fingerprint={}", self.metric_fingerprint);
        let _ = writeln!(out, "# model_fingerprint={}", self.model_fingerprint);
        for id in &self.removed {
            let _ = writeln!(out, "{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("pruning plan", m);
        let mut fields = std::collections::HashMap::new();
        let mut removed = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("bad header `{line}`")))?;
                fields.insert(k.to_string(), v.to_string());
            } else {
                removed.push(line.trim().parse().map_err(|_| bad(format!("bad group id `{line}`")))?);
            }
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        Ok(Self {
            target_ratio: num("target_ratio")?,
            achieved_ratio: num("achieved_ratio")?,
            removed_params: int("removed_params")?,
            total_params: int("total_params")?,
            exhausted: get("exhausted")? == "true",
            metric_fingerprint: get("metric_fingerprint")?,
            model_fingerprint: get("model_fingerprint")?,
            removed,
        })
    }
}
