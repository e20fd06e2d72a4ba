use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::{position_encoding, AttnIdx, FfnIdx, IdMatrix, ModelParams, NormIdx};
use crate::corpus::batch::Batch;
use crate::error::{bail, Result};
use crate::heads::{head_logits, GroupId};
use crate::tensor::{AttnMask, Float, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Parameters recorded on a tape, ready for a forward pass.
pub struct Bound<'p, T: Float> {
    pub params: &'p ModelParams<T>,
    pub vars: Vec<Var>,
}

/// Inverted dropout driven by a caller-owned generator; `off` is the
/// evaluation mode.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn on(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply<T: Float>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let cut = (self.rate * 4_294_967_296.0) as u64;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if (rng.next_u32() as u64) < cut { T::zero() } else { keep })
            .collect();
        tape.mask_scale(x, mask)
    }
}

/// `softmax(QKᵀ/√d_head)V` over `heads` heads followed by the output
/// projection. `weights` are `[W_q, W_k, W_v, W_o]`.
pub fn multi_head_attention<T: Float>(
    tape: &mut Tape<T>,
    query: Var,
    memory: Var,
    weights: [Var; 4],
    mask: &AttnMask,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(query, weights[0])?;
    let k = tape.matmul(memory, weights[1])?;
    let v = tape.matmul(memory, weights[2])?;
    let ctx = tape.attention(q, k, v, mask, heads)?;
    tape.matmul(ctx, weights[3])
}

impl<T: Float> Bound<'_, T> {
    fn norm(&self, tape: &mut Tape<T>, x: Var, idx: NormIdx) -> Result<Var> {
        tape.layer_norm(x, self.vars[idx.gain], self.vars[idx.offset], T::lit(LN_EPS))
    }

    fn attn(&self, tape: &mut Tape<T>, q: Var, kv: Var, idx: AttnIdx, mask: &AttnMask) -> Result<Var> {
        let w = [idx.wq, idx.wk, idx.wv, idx.wo].map(|i| self.vars[i]);
        multi_head_attention(tape, q, kv, w, mask, self.params.config.n_heads)
    }

    fn ffn(&self, tape: &mut Tape<T>, x: Var, idx: FfnIdx) -> Result<Var> {
        let h = tape.matmul(x, self.vars[idx.w1])?;
        let h = tape.add_bias(h, self.vars[idx.b1])?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, self.vars[idx.w2])?;
        tape.add_bias(h, self.vars[idx.b2])
    }

    fn residual(&self, tape: &mut Tape<T>, x: Var, f: Var, drop: &mut Dropout) -> Result<Var> {
        let f = drop.apply(tape, f)?;
        tape.add(x, f)
    }

    fn embed(&self, tape: &mut Tape<T>, ids: &IdMatrix, drop: &mut Dropout) -> Result<Var> {
        let cfg = &self.params.config;
        if ids.cols > cfg.max_len {
            bail!(Length, "sequence length {} exceeds max_len {}", ids.cols, cfg.max_len);
        }
        let d = cfg.d_model;
        let idx: Vec<usize> = ids.ids.iter().map(|&t| t as usize).collect();
        let e = tape.embedding(self.vars[self.params.layout.embed], &idx)?;
        let e = tape.scale(e, T::lit((d as f64).sqrt()))?;
        let pe = position_encoding::<T>(ids.cols, d);
        let pos = tape.input(&[ids.rows * ids.cols, d], pe.repeat(ids.rows), false)?;
        let x = tape.add(e, pos)?;
        drop.apply(tape, x)
    }

    /// Encoder output `[B·S × d_model]`.
    pub fn encode(&self, tape: &mut Tape<T>, src: &IdMatrix, drop: &mut Dropout) -> Result<Var> {
        let layout = &self.params.layout;
        let mut x = self.embed(tape, src, drop)?;
        let mask = AttnMask::new(src.rows, src.cols, src.cols, src.valid.clone(), false)?;
        for layer in &layout.enc {
            let h = self.norm(tape, x, layer.norm1)?;
            let a = self.attn(tape, h, h, layer.attn, &mask)?;
            x = self.residual(tape, x, a, drop)?;
            let h = self.norm(tape, x, layer.norm2)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            x = self.residual(tape, x, f, drop)?;
        }
        self.norm(tape, x, layout.enc_norm)
    }

    /// Decoder states `[B·T × d_model]` for the target prefixes in `tgt_in`,
    /// attending causally to the prefix and to the valid source positions.
    pub fn decode_states(
        &self,
        tape: &mut Tape<T>,
        enc: Var,
        src: &IdMatrix,
        tgt_in: &IdMatrix,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if src.rows != tgt_in.rows {
            bail!(Batch, "{} source rows but {} target rows", src.rows, tgt_in.rows);
        }
        let layout = &self.params.layout;
        let mut y = self.embed(tape, tgt_in, drop)?;
        let self_mask = AttnMask::new(tgt_in.rows, tgt_in.cols, tgt_in.cols, tgt_in.valid.clone(), true)?;
        let cross_mask = AttnMask::new(src.rows, tgt_in.cols, src.cols, src.valid.clone(), false)?;
        for layer in &layout.dec {
            let h = self.norm(tape, y, layer.norm1)?;
            let a = self.attn(tape, h, h, layer.self_attn, &self_mask)?;
            y = self.residual(tape, y, a, drop)?;
            let h = self.norm(tape, y, layer.norm2)?;
            let c = self.attn(tape, h, enc, layer.cross_attn, &cross_mask)?;
            y = self.residual(tape, y, c, drop)?;
            let h = self.norm(tape, y, layer.norm3)?;
            let f = self.ffn(tape, h, layer.ffn)?;
            y = self.residual(tape, y, f, drop)?;
        }
        self.norm(tape, y, layout.dec_norm)
    }

    /// Head logits for the listed state rows, each with its group.
    pub fn logits(&self, tape: &mut Tape<T>, states: Var, groups: Option<&[GroupId]>) -> Result<Var> {
        head_logits(tape, &self.head_vars(), states, groups)
    }
}

/// Mean label-smoothed cross entropy of the batch targets.
pub fn forward_loss<T: Float>(
    tape: &mut Tape<T>,
    model: &Bound<'_, T>,
    batch: &Batch,
    smoothing: f64,
    drop: &mut Dropout,
) -> Result<Var> {
    let kind = model.params.config.head_kind;
    let groups = match (&batch.groups, kind.needs_group()) {
        (None, true) => bail!(Batch, "the {kind} head needs a group id for every sentence"),
        (Some(g), _) if g.len() != batch.src.rows => {
            bail!(Batch, "{} group ids for {} sentences", g.len(), batch.src.rows)
        }
        (g, _) => g.as_deref(),
    };
    let enc = model.encode(tape, &batch.src, drop)?;
    let states = model.decode_states(tape, enc, &batch.src, &batch.tgt_in, drop)?;
    let cols = batch.tgt_out.cols;
    let rows: Vec<usize> = (0..batch.tgt_out.ids.len())
        .filter(|&i| batch.tgt_out.valid[i])
        .collect();
    if rows.is_empty() {
        let zero = tape.input(&[1, 1], vec![T::zero()], false)?;
        return tape.cross_entropy(zero, &[0], &[false], T::lit(smoothing));
    }
    let row_groups: Option<Vec<GroupId>> = groups.map(|g| rows.iter().map(|&i| g[i / cols]).collect());
    let picked = tape.select_rows(states, &rows)?;
    let logits = model.logits(tape, picked, row_groups.as_deref())?;
    let targets: Vec<usize> = rows.iter().map(|&i| batch.tgt_out.ids[i] as usize).collect();
    tape.cross_entropy(logits, &targets, &vec![true; rows.len()], T::lit(smoothing))
}

/// Encoder output for `src` with dropout off.
pub fn encode<T: Float>(params: &ModelParams<T>, src: &IdMatrix) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let model = params.bind_frozen(&mut tape);
    let enc = model.encode(&mut tape, src, &mut Dropout::off())?;
    Ok(tape.to_tensor(enc))
}

/// Decoder states for `tgt_in` given a precomputed encoder output.
pub fn decode_states<T: Float>(
    params: &ModelParams<T>,
    enc: &Tensor<T>,
    src: &IdMatrix,
    tgt_in: &IdMatrix,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let model = params.bind_frozen(&mut tape);
    let e = tape.constant(enc);
    let s = model.decode_states(&mut tape, e, src, tgt_in, &mut Dropout::off())?;
    Ok(tape.to_tensor(s))
}

/// Evaluation-mode loss of one batch.
pub fn loss_value<T: Float>(params: &ModelParams<T>, batch: &Batch, smoothing: f64) -> Result<T> {
    let mut tape = Tape::new();
    let model = params.bind_frozen(&mut tape);
    let loss = forward_loss(&mut tape, &model, batch, smoothing, &mut Dropout::off())?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::corpus::batch::Example;
    use crate::heads::HeadKind;
    use crate::model::ModelConfig;
    use crate::tensor::{grad_check, AdamConfig, AdamState};

    fn config(kind: HeadKind) -> ModelConfig {
        ModelConfig {
            d_model: 12,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            dropout: 0.0,
            max_len: 16,
            vocab_size: 17,
            head_kind: kind,
            n_groups: 2,
            seed: 0,
        }
    }

    fn batch(rows: &[(&[u32], &[u32], u16)], grouped: bool) -> Batch {
        let ex: Vec<Example> = rows
            .iter()
            .map(|(s, t, g)| Example {
                src: s.to_vec(),
                tgt: t.to_vec(),
                group: grouped.then(|| GroupId::raw(*g)),
            })
            .collect();
        Batch::from_examples(&ex.iter().collect::<Vec<_>>()).unwrap()
    }

    fn probe(grouped: bool) -> Batch {
        batch(&[(&[5, 6, 7], &[8, 9], 1), (&[10, 11], &[12, 13, 14], 2)], grouped)
    }

    fn ids(row: &[u32]) -> IdMatrix {
        IdMatrix::from_rows(&[row.to_vec()], 0)
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tq, tk, d, heads) = (3, 4, 6, 2);
        let mut rand_t = |r: usize, c: usize| Tensor::<f64>::from_fn(&[r, c], |_| rng.gen_range(-1.0..1.0));
        let (xq, xk) = (rand_t(tq, d), rand_t(tk, d));
        let w: Vec<Tensor<f64>> = (0..4).map(|_| rand_t(d, d)).collect();
        let mut tape = Tape::new();
        let (q, k) = (tape.constant(&xq), tape.constant(&xk));
        let wv = [0, 1, 2, 3].map(|i| tape.constant(&w[i]));
        let out = multi_head_attention(&mut tape, q, k, wv, &AttnMask::full(1, tq, tk), heads).unwrap();
        let got = tape.value(out).to_vec();

        let mm = |a: &[f64], b: &Tensor<f64>, rows: usize| -> Vec<f64> {
            let mut o = vec![0.0; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    o[i * d + j] = (0..d).map(|k| a[i * d + k] * b.data()[k * d + j]).sum();
                }
            }
            o
        };
        let (qp, kp, vp) = (mm(xq.data(), &w[0], tq), mm(xk.data(), &w[1], tk), mm(xk.data(), &w[2], tk));
        let dh = d / heads;
        let mut ctx = vec![0.0; tq * d];
        for h in 0..heads {
            for i in 0..tq {
                let s: Vec<f64> = (0..tk)
                    .map(|j| (0..dh).map(|c| qp[i * d + h * dh + c] * kp[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for j in 0..tk {
                    for c in 0..dh {
                        ctx[i * d + h * dh + c] += s[j].exp() / z * vp[j * d + h * dh + c];
                    }
                }
            }
        }
        let want = mm(&ctx, &w[3], tq);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn decoder_is_causal() {
        let p = ModelParams::<f64>::init(&config(HeadKind::Vanilla), 1).unwrap();
        let src = ids(&[5, 6, 7]);
        let enc = encode(&p, &src).unwrap();
        let a = decode_states(&p, &enc, &src, &ids(&[1, 8, 9, 10])).unwrap();
        let b = decode_states(&p, &enc, &src, &ids(&[1, 8, 15, 3])).unwrap();
        let d = 12;
        assert_eq!(a.data()[..2 * d], b.data()[..2 * d]);
        assert_ne!(a.data()[2 * d..3 * d], b.data()[2 * d..3 * d]);
    }

    #[test]
    fn padding_does_not_change_states() {
        let p = ModelParams::<f64>::init(&config(HeadKind::Vanilla), 2).unwrap();
        let src = IdMatrix::from_rows(&[vec![5, 6, 7]], 0);
        let tgt = IdMatrix::from_rows(&[vec![1, 8]], 0);
        let enc = encode(&p, &src).unwrap();
        let s = decode_states(&p, &enc, &src, &tgt).unwrap();
        let padded_src = IdMatrix::from_rows(&[vec![5, 6, 7], vec![4, 4, 4, 4, 4, 4]], 0);
        let padded_tgt = IdMatrix::from_rows(&[vec![1, 8], vec![1, 9, 9, 9, 9]], 0);
        let enc2 = encode(&p, &padded_src).unwrap();
        let s2 = decode_states(&p, &enc2, &padded_src, &padded_tgt).unwrap();
        let d = 12;
        for t in 0..2 {
            for c in 0..d {
                let (x, y) = (s.data()[t * d + c], s2.data()[t * d + c]);
                assert!((x - y).abs() < 1e-6, "position {t}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn loss_is_deterministic_and_batch_invariant() {
        let p = ModelParams::<f64>::init(&config(HeadKind::DomExtr), 3).unwrap();
        let b = probe(true);
        let l1 = loss_value(&p, &b, 0.1).unwrap();
        assert_eq!(l1.to_bits(), loss_value(&p, &b, 0.1).unwrap().to_bits());
        let dup = batch(
            &[(&[5, 6, 7], &[8, 9], 1), (&[10, 11], &[12, 13, 14], 2), (&[5, 6, 7], &[8, 9], 1), (&[10, 11], &[12, 13, 14], 2)],
            true,
        );
        let l2 = loss_value(&p, &dup, 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn group_head_requires_groups() {
        let p = ModelParams::<f64>::init(&config(HeadKind::DomSpec), 3).unwrap();
        assert!(matches!(loss_value(&p, &probe(false), 0.1), Err(crate::Error::Batch(_))));
        let v = ModelParams::<f64>::init(&config(HeadKind::Vanilla), 3).unwrap();
        assert!(loss_value(&v, &probe(false), 0.1).is_ok());
    }

    #[test]
    fn overlong_input_is_a_length_error() {
        let p = ModelParams::<f64>::init(&config(HeadKind::Vanilla), 3).unwrap();
        let long: Vec<u32> = vec![5; 17];
        assert!(matches!(encode(&p, &ids(&long)), Err(crate::Error::Length(_))));
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        for kind in HeadKind::ALL {
            let p = ModelParams::<f64>::init(&config(kind), 11).unwrap();
            let b = probe(true);
            let err = grad_check(
                |tape, vars| {
                    let model = Bound { params: &p, vars: vars.to_vec() };
                    forward_loss(tape, &model, &b, 0.1, &mut Dropout::off())
                },
                p.tensors(),
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn copy_task_loss_decreases() {
        let mut cfg = config(HeadKind::Vanilla);
        cfg.d_model = 16;
        let mut p = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let rows: Vec<(Vec<u32>, u16)> = (0..8).map(|i| (vec![4 + i, 5 + i, 6 + (i * 3) % 10], 1)).collect();
        let refs: Vec<(&[u32], &[u32], u16)> = rows.iter().map(|(r, g)| (r.as_slice(), r.as_slice(), *g)).collect();
        let b = batch(&refs, false);
        let start = loss_value(&p, &b, 0.0).unwrap();
        let mut opt = AdamState::new(p.tensors(), AdamConfig::default());
        for _ in 0..100 {
            let mut tape = Tape::new();
            let model = p.bind(&mut tape);
            let loss = forward_loss(&mut tape, &model, &b, 0.0, &mut Dropout::off()).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g: Vec<Vec<f32>> = model.vars.iter().map(|&v| grads.get(v).unwrap().to_vec()).collect();
            let refs: Vec<&[f32]> = g.iter().map(Vec::as_slice).collect();
            crate::tensor::adam_step(p.tensors_mut(), &refs, &mut opt, 3e-3).unwrap();
        }
        let end = loss_value(&p, &b, 0.0).unwrap();
        assert!(end < 0.5 * start, "{start} -> {end}");
    }

    #[test]
    fn dropout_is_seeded() {
        let mut cfg = config(HeadKind::Vanilla);
        cfg.dropout = 0.3;
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let model = p.bind_frozen(&mut tape);
            let l = forward_loss(&mut tape, &model, &probe(false), 0.1, &mut Dropout::on(0.3, &mut rng)).unwrap();
            tape.scalar(l)
        };
        assert_eq!(run(1).to_bits(), run(1).to_bits());
        assert_ne!(run(1).to_bits(), run(2).to_bits());
    }
}
