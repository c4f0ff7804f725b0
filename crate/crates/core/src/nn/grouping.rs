//! The parameter-grouping view: which weights of a layer form one group.
//!
//! Biases never belong to a group. Dense weights are stored `[inputs, outputs]`,
//! so a neuron's outgoing weights are a contiguous row and an output unit's
//! incoming weights are a strided column. A conv output channel's kernel
//! stack is a contiguous row of the `[out, in, k, k]` weight.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GroupingMode {
    /// Groups are neurons and channels.
    #[default]
    Structured,
    /// Every weight is its own group.
    Unstructured,
}

/// Which weights of a dense layer make up a neuron's group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DenseGrouping {
    /// One group per input neuron: the row of weights it sends forward.
    #[default]
    Outgoing,
    /// One group per output neuron: the column of weights feeding it.
    Incoming,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(GroupingMode { Structured => "structured", Unstructured => "unstructured" });
text_enum!(DenseGrouping { Outgoing => "outgoing", Incoming => "incoming" });

/// Index pattern of the groups inside one flat weight buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupLayout {
    /// Group `j` is the contiguous run `[j·width, (j+1)·width)`.
    Rows { groups: usize, width: usize },
    /// Group `j` is column `j` of a row-major `rows × groups` matrix.
    Columns { rows: usize, groups: usize },
    /// Group `j` is the single entry `j`.
    Singletons { len: usize },
}

impl GroupLayout {
    pub fn group_count(&self) -> usize {
        match *self {
            GroupLayout::Rows { groups, .. } | GroupLayout::Columns { groups, .. } => groups,
            GroupLayout::Singletons { len } => len,
        }
    }

    pub fn group_size(&self) -> usize {
        match *self {
            GroupLayout::Rows { width, .. } => width,
            GroupLayout::Columns { rows, .. } => rows,
            GroupLayout::Singletons { .. } => 1,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.group_count() * self.group_size()
    }

    pub fn member_indices(&self, j: usize) -> Vec<usize> {
        match *self {
            GroupLayout::Rows { width, .. } => (j * width..(j + 1) * width).collect(),
            GroupLayout::Columns { rows, groups } => (0..rows).map(|r| r * groups + j).collect(),
            GroupLayout::Singletons { .. } => vec![j],
        }
    }

    /// Group index owning flat weight index `i`.
    pub fn group_of(&self, i: usize) -> usize {
        match *self {
            GroupLayout::Rows { width, .. } => i / width,
            GroupLayout::Columns { groups, .. } => i % groups,
            GroupLayout::Singletons { .. } => i,
        }
    }

    /// Per-group ℓ2 norms.
    pub fn norms(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.weight_len());
        match *self {
            GroupLayout::Rows { width, .. } => w
                .chunks_exact(width)
                .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            GroupLayout::Columns { groups, .. } => {
                let mut sq = vec![0.0; groups];
                for row in w.chunks_exact(groups) {
                    for (s, v) in sq.iter_mut().zip(row) {
                        *s += v * v;
                    }
                }
                sq.into_iter().map(f64::sqrt).collect()
            }
            GroupLayout::Singletons { .. } => w.iter().map(|v| v.abs()).collect(),
        }
    }

    /// `out[i] += coef[group_of(i)] · w[i]` for every weight.
    pub fn accumulate(&self, w: &[f64], coef: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coef.len(), self.group_count());
        match *self {
            GroupLayout::Rows { width, .. } => {
                for ((g, o), &c) in w.chunks_exact(width).zip(out.chunks_exact_mut(width)).zip(coef) {
                    if c != 0.0 {
                        for (oi, wi) in o.iter_mut().zip(g) {
                            *oi += c * wi;
                        }
                    }
                }
            }
            GroupLayout::Columns { groups, .. } => {
                for (row, o) in w.chunks_exact(groups).zip(out.chunks_exact_mut(groups)) {
                    for ((oi, wi), c) in o.iter_mut().zip(row).zip(coef) {
                        *oi += c * wi;
                    }
                }
            }
            GroupLayout::Singletons { .. } => {
                for ((oi, wi), c) in out.iter_mut().zip(w).zip(coef) {
                    *oi += c * wi;
                }
            }
        }
    }

    /// Multiplies every weight of group `j` by `factors[j]`.
    pub fn scale_groups(&self, w: &mut [f64], factors: &[f64]) {
        debug_assert_eq!(factors.len(), self.group_count());
        match *self {
            GroupLayout::Rows { width, .. } => {
                for (g, &f) in w.chunks_exact_mut(width).zip(factors) {
                    if f != 1.0 {
                        g.iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            GroupLayout::Columns { groups, .. } => {
                for row in w.chunks_exact_mut(groups) {
                    for (v, f) in row.iter_mut().zip(factors) {
                        *v *= f;
                    }
                }
            }
            GroupLayout::Singletons { .. } => {
                for (v, f) in w.iter_mut().zip(factors) {
                    *v *= f;
                }
            }
        }
    }
}

/// One group: the flat indices of its members inside a layer's weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroupView {
    pub layer_index: usize,
    pub group_index: usize,
    pub member_indices: Vec<usize>,
}

/// Per-group ℓ2 norms of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNormVector {
    pub layer_index: usize,
    pub norms: Tensor,
}
