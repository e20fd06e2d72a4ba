//! Output heads that turn a decoder state plus a corpus-group identity into
//! a distribution over the vocabulary.
//!
//! * `vanilla`: `softmax(W_tᵀ s)`
//! * `domspec`: the state is down-projected by `W_d` to `d' = d_model/(D+1)`
//!   and written into a shared slot and the slot of its group, all other
//!   group slots zero: `[s', 0, .., s', .., 0]`. For two groups this is
//!   `[s', s', 0]` and `[s', 0, s']`.
//! * `domextr`: a learned bias vector per group is added to the logits.
//! * `domspecextr`: both of the above.
//!
//! The slot layout (shared slot first, then groups `1..=D` in order) is part
//! of the checkpoint format and must not change.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Identity of a corpus group, `1..=D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(u16);

impl GroupId {
    pub fn new(g: usize, n_groups: usize) -> Result<Self> {
        if g == 0 || g > n_groups {
            bail!(Group, "group id {g} outside 1..={n_groups}");
        }
        Ok(Self(g as u16))
    }

    /// Unchecked constructor for ids that are validated later.
    pub fn raw(g: u16) -> Self {
        Self(g)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based row/slot index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Vanilla,
    DomSpec,
    DomExtr,
    DomSpecExtr,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Vanilla,
        HeadKind::DomSpec,
        HeadKind::DomExtr,
        HeadKind::DomSpecExtr,
    ];

    pub fn specializes(self) -> bool {
        matches!(self, HeadKind::DomSpec | HeadKind::DomSpecExtr)
    }

    pub fn extremizes(self) -> bool {
        matches!(self, HeadKind::DomExtr | HeadKind::DomSpecExtr)
    }

    pub fn needs_group(self) -> bool {
        self != HeadKind::Vanilla
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Vanilla => "vanilla",
            HeadKind::DomSpec => "domspec",
            HeadKind::DomExtr => "domextr",
            HeadKind::DomSpecExtr => "domspecextr",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head kind `{s}`")))
    }
}

/// Width of the down-projected state, `d_model / (D+1)`.
pub fn slot_width(d_model: usize, n_groups: usize) -> Result<usize> {
    if n_groups == 0 {
        bail!(Config, "at least one group is required");
    }
    if d_model % (n_groups + 1) != 0 {
        bail!(
            Config,
            "d_model {d_model} is not divisible by D+1 = {}",
            n_groups + 1
        );
    }
    Ok(d_model / (n_groups + 1))
}

/// Input width of `W_t`. Equal to `d_model` for every head kind.
pub fn state_width(kind: HeadKind, d_model: usize, n_groups: usize) -> Result<usize> {
    if kind.specializes() {
        Ok((n_groups + 1) * slot_width(d_model, n_groups)?)
    } else {
        Ok(d_model)
    }
}

/// Parameters beyond the vanilla head: `d_model·d'` for `W_d` and `D·|V|`
/// for the bias vectors. `W_t` keeps its shape because `(D+1)·d' = d_model`.
pub fn extra_param_count(kind: HeadKind, d_model: usize, n_groups: usize, vocab: usize) -> Result<usize> {
    let mut extra = 0;
    if kind.specializes() {
        let dp = slot_width(d_model, n_groups)?;
        let w_t_delta = (n_groups + 1) * dp * vocab - d_model * vocab;
        extra += d_model * dp + w_t_delta;
    }
    if kind.extremizes() {
        extra += n_groups * vocab;
    }
    Ok(extra)
}

/// Output-head weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Float = f32> {
    pub kind: HeadKind,
    pub n_groups: usize,
    /// `[state_width × |V|]`
    pub w_t: Tensor<T>,
    /// `[d_model × d']`, specializing heads only.
    pub w_d: Option<Tensor<T>>,
    /// `[D × |V|]`, one row per group, extremizing heads only.
    pub bias: Option<Tensor<T>>,
}

/// Tape handles of the head weights.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub kind: HeadKind,
    pub n_groups: usize,
    pub w_t: Var,
    pub w_d: Option<Var>,
    pub bias: Option<Var>,
}

impl<T: Float> HeadParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> HeadVars {
        HeadVars {
            kind: self.kind,
            n_groups: self.n_groups,
            w_t: tape.leaf(&self.w_t),
            w_d: self.w_d.as_ref().map(|w| tape.leaf(w)),
            bias: self.bias.as_ref().map(|b| tape.leaf(b)),
        }
    }
}

fn group_indices(groups: Option<&[GroupId]>, rows: usize, n_groups: usize) -> Result<Vec<usize>> {
    let Some(groups) = groups else {
        bail!(Group, "this head needs a group id for every state");
    };
    if groups.len() != rows {
        bail!(Shape, "{} group ids for {rows} states", groups.len());
    }
    groups
        .iter()
        .map(|g| {
            if g.get() == 0 || g.get() > n_groups {
                Err(Error::Group(format!("group id {g} outside 1..={n_groups}")))
            } else {
                Ok(g.index())
            }
        })
        .collect()
}

/// Down-projects `[N×d_model]` states with `W_d` and lays them out in the
/// shared slot and the slot of each row's group.
pub fn specialize_on_tape<T: Float>(
    tape: &mut Tape<T>,
    states: Var,
    w_d: Var,
    groups: &[GroupId],
    n_groups: usize,
) -> Result<Var> {
    let rows = tape.shape(states)[0];
    let idx = group_indices(Some(groups), rows, n_groups)?;
    let projected = tape.matmul(states, w_d)?;
    tape.replicate_slots(projected, &idx, n_groups)
}

/// Logits `[N×|V|]` for decoder states `[N×d_model]` under the head.
pub fn head_logits<T: Float>(
    tape: &mut Tape<T>,
    head: &HeadVars,
    states: Var,
    groups: Option<&[GroupId]>,
) -> Result<Var> {
    let rows = tape.shape(states)[0];
    let idx = if head.kind.needs_group() {
        Some(group_indices(groups, rows, head.n_groups)?)
    } else {
        None
    };
    let input = if head.kind.specializes() {
        let w_d = head
            .w_d
            .ok_or_else(|| Error::Config("specializing head without W_d".into()))?;
        let projected = tape.matmul(states, w_d)?;
        tape.replicate_slots(projected, idx.as_deref().unwrap(), head.n_groups)?
    } else {
        states
    };
    let logits = tape.matmul(input, head.w_t)?;
    if head.kind.extremizes() {
        let bias = head
            .bias
            .ok_or_else(|| Error::Group("extremizing head without bias vectors".into()))?;
        tape.add_group_bias(logits, bias, idx.as_deref().unwrap())
    } else {
        Ok(logits)
    }
}

/// `[s', 0, .., s', .., 0]` for a single state vector.
pub fn specialize_state<T: Float>(s: &[T], group: GroupId, w_d: &Tensor<T>, n_groups: usize) -> Result<Vec<T>> {
    let dp = slot_width(s.len(), n_groups)?;
    if w_d.shape() != [s.len(), dp] {
        bail!(Shape, "W_d of shape {:?} for state width {}", w_d.shape(), s.len());
    }
    GroupId::new(group.get(), n_groups)?;
    let mut tape = Tape::new();
    let sv = tape.input(&[1, s.len()], s.to_vec(), false)?;
    let wv = tape.constant(w_d);
    let out = specialize_on_tape(&mut tape, sv, wv, &[group], n_groups)?;
    Ok(tape.value(out).to_vec())
}

/// `W_tᵀ s + b_g`
pub fn extremize_logits<T: Float>(s: &[T], w_t: &Tensor<T>, bias: &Tensor<T>, group: GroupId) -> Result<Vec<T>> {
    if bias.shape().len() != 2 || group.get() == 0 || group.get() > bias.shape()[0] {
        bail!(Group, "no bias vector for group {group}");
    }
    let mut tape = Tape::new();
    let sv = tape.input(&[1, s.len()], s.to_vec(), false)?;
    let wv = tape.constant(w_t);
    let bv = tape.constant(bias);
    let logits = tape.matmul(sv, wv)?;
    let out = tape.add_group_bias(logits, bv, &[group.index()])?;
    Ok(tape.value(out).to_vec())
}

/// Head logits for one state vector.
pub fn logits<T: Float>(head: &HeadParams<T>, s: &[T], group: Option<GroupId>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let vars = HeadVars {
        kind: head.kind,
        n_groups: head.n_groups,
        w_t: tape.constant(&head.w_t),
        w_d: head.w_d.as_ref().map(|w| tape.constant(w)),
        bias: head.bias.as_ref().map(|b| tape.constant(b)),
    };
    let sv = tape.input(&[1, s.len()], s.to_vec(), false)?;
    let groups = group.map(|g| vec![g]);
    let out = head_logits(&mut tape, &vars, sv, groups.as_deref())?;
    Ok(tape.value(out).to_vec())
}

/// Probability vector over the vocabulary for one state.
pub fn output_distribution<T: Float>(head: &HeadParams<T>, s: &[T], group: Option<GroupId>) -> Result<Vec<T>> {
    let mut z = logits(head, s, group)?;
    crate::tensor::kernels::softmax_row(&mut z);
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selector() -> Tensor<f64> {
        // picks coordinates 1 and 2 of a 6-wide state
        let mut w = Tensor::zeros(&[6, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        w
    }

    #[test]
    fn specialize_layout_for_two_groups() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = selector();
        let g1 = specialize_state(&s, GroupId::raw(1), &w, 2).unwrap();
        assert_eq!(g1, vec![1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);
        let g2 = specialize_state(&s, GroupId::raw(2), &w, 2).unwrap();
        assert_eq!(g2, vec![1.0, 2.0, 0.0, 0.0, 1.0, 2.0]);
        let zero = specialize_state(&[0.0; 6], GroupId::raw(2), &w, 2).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn specialize_errors() {
        let w = selector();
        assert!(matches!(
            specialize_state(&[1.0; 6], GroupId::raw(3), &w, 2),
            Err(Error::Group(_))
        ));
        assert!(matches!(
            specialize_state(&[1.0; 7], GroupId::raw(1), &Tensor::zeros(&[7, 2]), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bias_ln2_gives_half_quarter_quarter() {
        let w_t = Tensor::<f64>::zeros(&[2, 3]);
        let bias = Tensor::new(&[1, 3], vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let mut z = extremize_logits(&[0.7, -0.3], &w_t, &bias, GroupId::raw(1)).unwrap();
        crate::tensor::kernels::softmax_row(&mut z);
        assert!((z[0] - 0.5).abs() < 1e-15);
        assert!((z[1] - 0.25).abs() < 1e-15 && (z[2] - 0.25).abs() < 1e-15);
        assert!(matches!(
            extremize_logits(&[0.7, -0.3], &w_t, &bias, GroupId::raw(2)),
            Err(Error::Group(_))
        ));
    }

    #[test]
    fn extra_counts() {
        assert_eq!(extra_param_count(HeadKind::Vanilla, 64, 3, 100).unwrap(), 0);
        assert_eq!(extra_param_count(HeadKind::DomExtr, 64, 2, 100).unwrap(), 200);
        assert_eq!(extra_param_count(HeadKind::DomSpec, 6, 2, 100).unwrap(), 12);
        assert_eq!(extra_param_count(HeadKind::DomSpecExtr, 6, 2, 100).unwrap(), 212);
        assert!(extra_param_count(HeadKind::DomSpec, 13, 2, 100).is_err());
    }

    #[test]
    fn missing_group_is_rejected() {
        let head = HeadParams {
            kind: HeadKind::DomExtr,
            n_groups: 2,
            w_t: Tensor::<f64>::zeros(&[2, 3]),
            w_d: None,
            bias: Some(Tensor::zeros(&[2, 3])),
        };
        assert!(matches!(
            output_distribution(&head, &[1.0, 1.0], None),
            Err(Error::Group(_))
        ));
    }

    #[test]
    fn head_kind_names_roundtrip() {
        for k in HeadKind::ALL {
            assert_eq!(k.name().parse::<HeadKind>().unwrap(), k);
        }
        assert!("spec".parse::<HeadKind>().is_err());
    }
}
