//! Coupled prunable structures.
//!
//! An attention head couples its rows of `wq`, `wk`, `wv` with the matching
//! columns of `wo`; an MLP channel couples one column of `w_up` with one row of
//! `w_down`. Removing a group means removing every slice it lists.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};
use crate::model::{LayerParam, TransformerLM, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    AttentionHead,
    MlpChannel,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::AttentionHead => "attention_head",
            GroupKind::MlpChannel => "mlp_channel",
        })
    }
}

impl FromStr for GroupKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_head" => Ok(GroupKind::AttentionHead),
            "mlp_channel" => Ok(GroupKind::MlpChannel),
            other => Err(Error::format("group list", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    Rows,
    Cols,
}

/// Contiguous block of rows or columns of one layer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub layer: usize,
    pub param: LayerParam,
    pub axis: SliceAxis,
    pub start: usize,
    pub len: usize,
}

impl Slice {
    pub fn view<'a>(&self, w: &'a Weights) -> ArrayView2<'a, f64> {
        let m = w
            .layer_matrix(self.layer, self.param)
            .expect("slices only reference layer matrices");
        let r = self.start..self.start + self.len;
        match self.axis {
            SliceAxis::Rows => m.slice(s![r, ..]),
            SliceAxis::Cols => m.slice(s![.., r]),
        }
    }

    pub fn view_mut<'a>(&self, w: &'a mut Weights) -> ArrayViewMut2<'a, f64> {
        let m = w
            .layer_matrix_mut(self.layer, self.param)
            .expect("slices only reference layer matrices");
        let r = self.start..self.start + self.len;
        match self.axis {
            SliceAxis::Rows => m.slice_mut(s![r, ..]),
            SliceAxis::Cols => m.slice_mut(s![.., r]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureGroup {
    pub id: usize,
    pub layer: usize,
    pub kind: GroupKind,
    /// Head index or channel index within the layer.
    pub index: usize,
    pub slices: Vec<Slice>,
    /// Number of scalar parameters covered by `slices`.
    pub size: usize,
}

/// Enumerates every head and channel group of the prunable layers.
///
/// Ids are dense; within a layer heads come first, then channels.
pub fn build_groups(model: &TransformerLM) -> Vec<StructureGroup> {
    let d = model.config.d_model;
    let hd = model.config.head_dim();
    let mut out = Vec::new();
    for layer in model.config.prune_layers() {
        let lw = &model.weights.layers[layer];
        for h in 0..lw.inner_dim() / hd {
            let rows = |param| Slice {
                layer,
                param,
                axis: SliceAxis::Rows,
                start: h * hd,
                len: hd,
            };
            let slices = vec![
                rows(LayerParam::Query),
                rows(LayerParam::Key),
                rows(LayerParam::Value),
                Slice {
                    layer,
                    param: LayerParam::Output,
                    axis: SliceAxis::Cols,
                    start: h * hd,
                    len: hd,
                },
            ];
            out.push(StructureGroup {
                id: out.len(),
                layer,
                kind: GroupKind::AttentionHead,
                index: h,
                slices,
                size: 4 * hd * d,
            });
        }
        for c in 0..lw.d_ff() {
            let slices = vec![
                Slice {
                    layer,
                    param: LayerParam::Up,
                    axis: SliceAxis::Cols,
                    start: c,
                    len: 1,
                },
                Slice {
                    layer,
                    param: LayerParam::Down,
                    axis: SliceAxis::Rows,
                    start: c,
                    len: 1,
                },
            ];
            out.push(StructureGroup {
                id: out.len(),
                layer,
                kind: GroupKind::MlpChannel,
                index: c,
                slices,
                size: 2 * d,
            });
        }
    }
    out
}

/// Copy of `model` with every slice of `group` set to zero.
pub fn zero_group(model: &TransformerLM, group: &StructureGroup) -> Result<TransformerLM> {
    zero_groups(model, std::slice::from_ref(group))
}

pub fn zero_groups(model: &TransformerLM, groups: &[StructureGroup]) -> Result<TransformerLM> {
    let known = build_groups(model);
    let mut out = model.clone();
    for g in groups {
        if known.get(g.id) != Some(g) {
            return Err(Error::StaleGroup(g.id));
        }
        for s in &g.slices {
            s.view_mut(&mut out.weights).fill(0.0);
        }
    }
    Ok(out)
}

/// One `id kind layer size` line per group.
pub fn format_groups(groups: &[StructureGroup]) -> String {
    groups
        .iter()
        .map(|g| format!("{} {} {} {}\n", g.id, g.kind, g.layer, g.size))
        .collect()
}

/// Summary rows parsed back from [`format_groups`] output.
pub fn parse_group_lines(text: &str) -> Result<Vec<(usize, GroupKind, usize, usize)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format("group list", format!("bad number in `{line}`")))
            };
            match f.as_slice() {
                [id, kind, layer, size] => Ok((num(id)?, kind.parse()?, num(layer)?, num(size)?)),
                _ => Err(Error::format("group list", format!("expected 4 fields in `{line}`"))),
            }
        })
        .collect()
}
