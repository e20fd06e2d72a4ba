use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::monitor::ConvergenceMonitor;
use crate::corpus::{make_batches, Example};
use crate::decode::CheckpointSet;
use crate::error::{bail, Result};
use crate::model::{forward_loss, Dropout, ModelParams};
use crate::tensor::{adam_step, noam_lr, AdamConfig, AdamState, Float, Tape};

/// Parameters, optimizer moments and the learning-rate schedule position.
#[derive(Clone, Debug)]
pub struct Trainer<T: Float = f32> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    /// Schedule step of the last update; checkpoints are labeled with it.
    pub step: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(params: ModelParams<T>) -> Self {
        let adam = AdamState::new(params.tensors(), AdamConfig::default());
        Self { params, adam, step: 0 }
    }

    /// Continues from `prev` with new starting weights.
    pub fn resume(prev: &Trainer<T>, params: ModelParams<T>, reset_moments: bool, continue_schedule: bool) -> Self {
        let mut adam = prev.adam.clone();
        if reset_moments {
            adam.reset();
        }
        Self {
            params,
            adam,
            step: if continue_schedule { prev.step } else { 0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOptions {
    pub max_tokens: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub label_smoothing: f64,
    /// Snapshots retained for averaging.
    pub keep_checkpoints: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    BatchCap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub dev_bleu: f64,
    /// Mean training loss since the previous evaluation.
    pub loss: f64,
}

/// `step`, `dev_bleu`, `loss` with a header line.
pub fn trace_tsv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step\tdev_bleu\tloss\n");
    for r in rows {
        s.push_str(&format!("{}\t{:.4}\t{:.6}\n", r.step, r.dev_bleu, r.loss));
    }
    s
}

#[derive(Clone, Debug)]
pub struct StageOutcome<T: Float = f32> {
    /// The most recent `keep_checkpoints` snapshots, one taken per evaluation.
    pub checkpoints: CheckpointSet<T>,
    pub trace: Vec<TraceRow>,
    pub batches: u64,
    pub stop: StopReason,
}

/// Trains until the monitor's plateau rule fires or its batch cap is hit.
///
/// Batches are re-drawn from `train` every epoch with a seeded order; dropout
/// follows `trainer.params.config.dropout`. `dev_bleu` scores the current
/// weights at every evaluation, after which a snapshot is taken.
pub fn train_until_converged<T: Float>(
    trainer: &mut Trainer<T>,
    train: &[Example],
    dev_bleu: &mut dyn FnMut(&ModelParams<T>) -> Result<f64>,
    monitor: &mut ConvergenceMonitor,
    opts: &StageOptions,
    seed: u64,
) -> Result<StageOutcome<T>> {
    if train.is_empty() {
        bail!(Data, "no training examples");
    }
    if opts.keep_checkpoints == 0 {
        bail!(Config, "at least one checkpoint must be kept");
    }
    monitor.reset();
    let d_model = trainer.params.config.d_model;
    let rate = trainer.params.config.dropout;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409);
    let mut checkpoints = CheckpointSet::new();
    let mut trace = Vec::new();
    let (mut batches, mut epoch) = (0u64, 0u64);
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let mut tape = Tape::new();
    loop {
        let order = make_batches(train, opts.max_tokens, seed.wrapping_add(epoch))?;
        epoch += 1;
        for batch in &order {
            tape.truncate(0);
            let bound = trainer.params.bind(&mut tape);
            let loss = forward_loss(&mut tape, &bound, batch, opts.label_smoothing, &mut Dropout::on(rate, &mut drop_rng))?;
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                bail!(Numeric, "training loss became {value} at step {}", trainer.step + 1);
            }
            let vars = bound.vars;
            let grads = tape.backward(loss)?;
            let slices: Vec<&[T]> = vars
                .iter()
                .map(|&v| grads.get(v).ok_or_else(|| crate::Error::Graph("parameter without gradient".into())))
                .collect::<Result<_>>()?;
            trainer.step += 1;
            let lr = opts.lr_scale * noam_lr(trainer.step, d_model, opts.warmup)?;
            adam_step(trainer.params.tensors_mut(), &slices, &mut trainer.adam, T::lit(lr))?;
            if !trainer.params.all_finite() {
                bail!(Numeric, "parameters became non-finite at step {}", trainer.step);
            }
            loss_sum += value;
            loss_n += 1;
            batches += 1;
            if monitor.eval_due(batches) {
                let bleu = dev_bleu(&trainer.params)?;
                trace.push(TraceRow {
                    step: trainer.step,
                    dev_bleu: bleu,
                    loss: loss_sum / loss_n as f64,
                });
                (loss_sum, loss_n) = (0.0, 0);
                checkpoints.push(trainer.step, trainer.params.clone())?;
                if checkpoints.len() > opts.keep_checkpoints {
                    checkpoints.snapshots.remove(0);
                }
                let stop = if monitor.observe(bleu) {
                    Some(StopReason::Converged)
                } else if monitor.at_cap(batches) {
                    Some(StopReason::BatchCap)
                } else {
                    None
                };
                if let Some(stop) = stop {
                    return Ok(StageOutcome {
                        checkpoints,
                        trace,
                        batches,
                        stop,
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::batch::Batch;
    use crate::decode::{bleu4, greedy_decode_batch, DecodeContext};
    use crate::heads::HeadKind;
    use crate::model::{loss_value, ModelConfig};

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_enc_layers: 1,
            n_dec_layers: 1,
            dropout: 0.0,
            max_len: 16,
            vocab_size: vocab,
            head_kind: HeadKind::Vanilla,
            n_groups: 1,
            seed: 1,
        }
    }

    fn copy_examples(n: usize, vocab: u32, seed: u64) -> Vec<Example> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..7);
                let s: Vec<u32> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
                Example {
                    src: s.clone(),
                    tgt: s,
                    group: None,
                }
            })
            .collect()
    }

    fn opts() -> StageOptions {
        StageOptions {
            max_tokens: 256,
            warmup: 100,
            lr_scale: 2.0,
            label_smoothing: 0.0,
            keep_checkpoints: 3,
        }
    }

    fn words(ids: &[u32]) -> Vec<String> {
        ids.iter().map(|i| i.to_string()).collect()
    }

    fn copy_bleu(params: &ModelParams<f32>, dev: &[Example]) -> Result<f64> {
        let srcs: Vec<Vec<u32>> = dev.iter().map(|e| e.src.clone()).collect();
        let ctx = vec![DecodeContext::None; srcs.len()];
        let hyps = greedy_decode_batch(params, &srcs, &ctx, 12)?;
        let hyps: Vec<Vec<String>> = hyps.iter().map(|h| words(h)).collect();
        let refs: Vec<Vec<String>> = dev.iter().map(|e| words(&e.tgt)).collect();
        bleu4(&hyps, &refs)
    }

    #[test]
    fn copy_task_reaches_high_dev_bleu() {
        let train = copy_examples(2000, 14, 1);
        let dev = copy_examples(100, 14, 2);
        let mut trainer = Trainer::new(ModelParams::<f32>::init(&cfg(14), 3).unwrap());
        let mut monitor = ConvergenceMonitor::new(100, 4, 0.05, 3000).unwrap();
        let out = train_until_converged(
            &mut trainer,
            &train,
            &mut |p: &ModelParams<f32>| copy_bleu(p, &dev),
            &mut monitor,
            &opts(),
            7,
        )
        .unwrap();
        let best = out.trace.iter().map(|r| r.dev_bleu).fold(0.0, f64::max);
        assert!(best > 90.0, "best dev BLEU {best}");
        assert_eq!(out.trace.len() as u64, out.batches.div_ceil(100));
        assert!(out.checkpoints.len() <= 3);
        assert_eq!(out.checkpoints.last().unwrap().0, trainer.step);
    }

    #[test]
    fn cap_of_one_eval_gives_one_checkpoint() {
        let train = copy_examples(50, 10, 1);
        let mut trainer = Trainer::new(ModelParams::<f32>::init(&cfg(10), 3).unwrap());
        let mut monitor = ConvergenceMonitor::new(5, 3, 0.05, 5).unwrap();
        let out = train_until_converged(&mut trainer, &train, &mut |_| Ok(1.0), &mut monitor, &opts(), 1).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.stop, StopReason::BatchCap);
        assert_eq!(trainer.step, 5);
    }

    #[test]
    fn flat_dev_trace_stops_on_plateau() {
        let train = copy_examples(50, 10, 1);
        let mut trainer = Trainer::new(ModelParams::<f32>::init(&cfg(10), 3).unwrap());
        let mut monitor = ConvergenceMonitor::new(2, 3, 0.05, 1000).unwrap();
        let scores = [10.0, 10.01, 10.02, 10.03, 11.0];
        let mut i = 0;
        let mut dev = |_: &ModelParams<f32>| {
            i += 1;
            Ok(scores[i - 1])
        };
        let out = train_until_converged(&mut trainer, &train, &mut dev, &mut monitor, &opts(), 1).unwrap();
        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.trace.len(), 4);
        assert_eq!(out.batches, 8);
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let train = copy_examples(60, 10, 1);
        let run = || {
            let mut c = cfg(10);
            c.dropout = 0.2;
            let mut trainer = Trainer::new(ModelParams::<f32>::init(&c, 3).unwrap());
            let mut monitor = ConvergenceMonitor::new(4, 3, 0.05, 8).unwrap();
            train_until_converged(&mut trainer, &train, &mut |_| Ok(0.0), &mut monitor, &opts(), 9).unwrap();
            trainer.params
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let train = copy_examples(20, 10, 1);
        let mut params = ModelParams::<f32>::init(&cfg(10), 3).unwrap();
        params.get_mut("head.w_t").unwrap().data_mut()[0] = f32::NAN;
        let mut trainer = Trainer::new(params);
        let mut monitor = ConvergenceMonitor::new(4, 3, 0.05, 8).unwrap();
        let err = train_until_converged(&mut trainer, &train, &mut |_| Ok(0.0), &mut monitor, &opts(), 1).unwrap_err();
        assert!(matches!(err, crate::Error::Numeric(_)), "{err}");
    }

    #[test]
    fn resume_flags() {
        let train = copy_examples(30, 10, 1);
        let mut trainer = Trainer::new(ModelParams::<f32>::init(&cfg(10), 3).unwrap());
        let mut monitor = ConvergenceMonitor::new(3, 3, 0.05, 3).unwrap();
        train_until_converged(&mut trainer, &train, &mut |_| Ok(0.0), &mut monitor, &opts(), 1).unwrap();
        let p = trainer.params.clone();
        let a = Trainer::resume(&trainer, p.clone(), true, true);
        assert_eq!((a.step, a.adam.t), (3, 0));
        assert!(a.adam.m.iter().flatten().all(|&x| x == 0.0));
        let b = Trainer::resume(&trainer, p.clone(), false, false);
        assert_eq!((b.step, b.adam.t), (0, 3));
        assert_eq!(b.adam, trainer.adam);
        let batch = Batch::from_examples(&train.iter().take(4).collect::<Vec<_>>()).unwrap();
        assert_eq!(
            loss_value(&a.params, &batch, 0.1).unwrap().to_bits(),
            loss_value(&trainer.params, &batch, 0.1).unwrap().to_bits()
        );
        assert!(trace_tsv(&[TraceRow { step: 3, dev_bleu: 1.5, loss: 2.0 }]).starts_with("step\tdev_bleu\tloss\n3\t1.5000\t"));
    }
}
