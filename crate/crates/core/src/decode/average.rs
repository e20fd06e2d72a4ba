use crate::error::{bail, Result};
use crate::model::ModelParams;
use crate::tensor::{Float, Tensor};

/// Parameter snapshots in training order.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSet<T: Float = f32> {
    pub snapshots: Vec<(u64, ModelParams<T>)>,
}

impl<T: Float> CheckpointSet<T> {
    pub fn new() -> Self {
        Self { snapshots: Vec::new() }
    }

    /// Appends a snapshot; steps must increase and shapes must agree.
    pub fn push(&mut self, step: u64, params: ModelParams<T>) -> Result<()> {
        if let Some((last, first)) = self.snapshots.last().map(|(s, _)| *s).zip(self.snapshots.first()) {
            if step <= last {
                bail!(Checkpoint, "checkpoint step {step} does not follow step {last}");
            }
            same_shapes(&first.1, &params)?;
        }
        self.snapshots.push((step, params));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last(&self) -> Option<&(u64, ModelParams<T>)> {
        self.snapshots.last()
    }
}

fn same_shapes<T: Float>(a: &ModelParams<T>, b: &ModelParams<T>) -> Result<()> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if a.config != b.config || ta.len() != tb.len() || ta.iter().zip(tb).any(|(x, y)| x.shape() != y.shape()) {
        bail!(Checkpoint, "snapshots have different shapes");
    }
    Ok(())
}

/// Elementwise mean of the last `last_k` snapshots.
///
/// The mean is accumulated incrementally in 64-bit, `m += (x - m) / i`, so
/// averaging identical snapshots returns them bit for bit.
pub fn average_checkpoints<T: Float>(set: &CheckpointSet<T>, last_k: usize) -> Result<ModelParams<T>> {
    if set.is_empty() {
        bail!(Checkpoint, "no checkpoints to average");
    }
    if last_k == 0 || last_k > set.len() {
        bail!(Checkpoint, "cannot average the last {last_k} of {} checkpoints", set.len());
    }
    let chosen = &set.snapshots[set.len() - last_k..];
    let first = &chosen[0].1;
    for (_, p) in &chosen[1..] {
        same_shapes(first, p)?;
    }
    let mut tensors = Vec::with_capacity(first.tensors().len());
    for (ti, t) in first.tensors().iter().enumerate() {
        let mut mean: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
        for (i, (_, p)) in chosen.iter().enumerate().skip(1) {
            let n = (i + 1) as f64;
            for (m, x) in mean.iter_mut().zip(p.tensors()[ti].data()) {
                *m += (x.as_f64() - *m) / n;
            }
        }
        tensors.push(Tensor::new(t.shape(), mean.into_iter().map(T::lit).collect())?);
    }
    ModelParams::from_tensors(&first.config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size: 9,
            head_kind: HeadKind::DomExtr,
            n_groups: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identical_snapshots_average_to_themselves() {
        let p = ModelParams::<f32>::init(&cfg(), 3).unwrap();
        let mut set = CheckpointSet::new();
        for s in 1..=7 {
            set.push(s, p.clone()).unwrap();
        }
        for k in 1..=7 {
            assert!(average_checkpoints(&set, k).unwrap().bitwise_eq(&p));
        }
    }

    #[test]
    fn mean_of_two() {
        let p = ModelParams::<f64>::init(&cfg(), 3).unwrap();
        let mut a = p.clone();
        let mut b = p.clone();
        a.tensors_mut()[0].data_mut()[0] = 0.0;
        b.tensors_mut()[0].data_mut()[0] = 2.0;
        let mut set = CheckpointSet::new();
        set.push(10, a).unwrap();
        set.push(20, b).unwrap();
        assert_eq!(average_checkpoints(&set, 2).unwrap().tensors()[0].data()[0], 1.0);
    }

    #[test]
    fn set_invariants() {
        let p = ModelParams::<f32>::init(&cfg(), 3).unwrap();
        let mut set = CheckpointSet::new();
        set.push(5, p.clone()).unwrap();
        assert!(set.push(5, p.clone()).is_err());
        let mut other = cfg();
        other.vocab_size = 10;
        let q = ModelParams::<f32>::init(&other, 3).unwrap();
        assert!(matches!(set.push(6, q), Err(crate::Error::Checkpoint(_))));
        assert!(average_checkpoints(&set, 2).is_err());
        assert!(average_checkpoints(&CheckpointSet::<f32>::new(), 1).is_err());
    }
}
