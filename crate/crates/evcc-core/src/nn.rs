//! Reusable layer bundles: linear, layer norm, attention, transformer and
//! conv blocks. Each bundle owns [`ParamId`]s into a store and applies
//! itself to tensors bound on a tape.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{PadMode, Scalar, Tape, Tensor, TensorId};

/// LayerNorm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;
/// Expansion ratio of transformer-block MLPs and conv pointwise expansions.
pub const MLP_RATIO: usize = 2;

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Linear {
        let w = store.push(
            format!("{name}.w"),
            Tensor::randn(&[d_in, d_out], xavier_std(d_in, d_out), rng),
        );
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        let y = tape.matmul(x, bound[self.w.0])?;
        tape.add_bias(y, bound[self.b.0])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Norm {
        let gain = store.push(format!("{name}.g"), Tensor::full(&[d], T::ONE));
        let bias = store.push(format!("{name}.b"), Tensor::zeros(&[d]));
        Norm { gain, bias }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        tape.layer_norm(x, bound[self.gain.0], bound[self.bias.0], LN_EPS)
    }
}

/// Scaled dot-product attention core shared by self- and cross-attention:
/// projects already-normalized sources, splits heads, applies
/// softmax(QK^T / sqrt(d_head)) V, merges heads, and projects out.
fn attention_core<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    q_src: TensorId,
    kv_src: TensorId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
) -> Result<TensorId> {
    let d = tape.value(q_src).dims()[2];
    let dh = d / heads;
    let q = wq.apply(tape, bound, q_src)?;
    let k = wk.apply(tape, bound, kv_src)?;
    let v = wv.apply(tape, bound, kv_src)?;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let scores = tape.matmul_nt(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax_last(scores)?;
    let ctx = tape.matmul(attn, vh)?;
    let merged = tape.merge_heads(ctx, heads)?;
    wo.apply(tape, bound, merged)
}

/// Cross-attention with its own pre-norms for the query and key/value
/// streams.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub ln_q: Norm,
    pub ln_kv: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> CrossAttention {
        CrossAttention {
            ln_q: Norm::init(store, &format!("{name}.ln_q"), d),
            ln_kv: Norm::init(store, &format!("{name}.ln_kv"), d),
            wq: Linear::init(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::init(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::init(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::init(store, &format!("{name}.wo"), d, d, rng),
            heads,
        }
    }

    /// Queries attend to the key/value stream; output has the query length.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        q_src: TensorId,
        kv_src: TensorId,
    ) -> Result<TensorId> {
        let qn = self.ln_q.apply(tape, bound, q_src)?;
        let kn = self.ln_kv.apply(tape, bound, kv_src)?;
        attention_core(
            tape, bound, qn, kn, self.wq, self.wk, self.wv, self.wo, self.heads,
        )
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
#[derive(Debug, Clone, Copy)]
pub struct SelfBlock {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub heads: usize,
}

impl SelfBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> SelfBlock {
        SelfBlock {
            ln1: Norm::init(store, &format!("{name}.ln1"), d),
            wq: Linear::init(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::init(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::init(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::init(store, &format!("{name}.wo"), d, d, rng),
            ln2: Norm::init(store, &format!("{name}.ln2"), d),
            mlp1: Linear::init(store, &format!("{name}.mlp1"), d, d * MLP_RATIO, rng),
            mlp2: Linear::init(store, &format!("{name}.mlp2"), d * MLP_RATIO, d, rng),
            heads,
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        let n = self.ln1.apply(tape, bound, x)?;
        let attended = attention_core(
            tape, bound, n, n, self.wq, self.wk, self.wv, self.wo, self.heads,
        )?;
        let x = tape.add(x, attended)?;
        let n = self.ln2.apply(tape, bound, x)?;
        let h = self.mlp1.apply(tape, bound, n)?;
        let h = tape.gelu(h)?;
        let h = self.mlp2.apply(tape, bound, h)?;
        tape.add(x, h)
    }
}

/// Depthwise 3x3 -> pointwise expand -> GELU -> pointwise contract, with a
/// residual connection. Operates on a channel-last token grid.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw1: Linear,
    pub pw2: Linear,
}

impl ConvBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut Rng,
    ) -> ConvBlock {
        let dw_w = store.push(
            format!("{name}.dw.w"),
            Tensor::randn(&[c, 9], xavier_std(9, 9), rng),
        );
        let dw_b = store.push(format!("{name}.dw.b"), Tensor::zeros(&[c]));
        ConvBlock {
            dw_w,
            dw_b,
            pw1: Linear::init(store, &format!("{name}.pw1"), c, c * MLP_RATIO, rng),
            pw2: Linear::init(store, &format!("{name}.pw2"), c * MLP_RATIO, c, rng),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        x: TensorId,
        h: usize,
        w: usize,
        pad: PadMode,
    ) -> Result<TensorId> {
        let y = tape.depthwise_conv3x3(x, bound[self.dw_w.0], h, w, pad)?;
        let y = tape.add_bias(y, bound[self.dw_b.0])?;
        let y = self.pw1.apply(tape, bound, y)?;
        let y = tape.gelu(y)?;
        let y = self.pw2.apply(tape, bound, y)?;
        tape.add(x, y)
    }
}

/// One conv stage: patchify-downsample (linear over p x p patches) followed
/// by `depth` conv blocks at the stage width.
pub struct ConvStage {
    pub down: Linear,
    pub blocks: Vec<ConvBlock>,
    pub patch: usize,
    pub dim: usize,
}

impl ConvStage {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        dim: usize,
        depth: usize,
        patch: usize,
        rng: &mut Rng,
    ) -> ConvStage {
        let down = Linear::init(
            store,
            &format!("{name}.down"),
            c_in * patch * patch,
            dim,
            rng,
        );
        let blocks = (0..depth)
            .map(|j| ConvBlock::init(store, &format!("{name}.block{j}"), dim, rng))
            .collect();
        ConvStage { down, blocks, patch, dim }
    }

    /// Input: token grid [B, h*w, c_in]; output: [B, (h/p)*(w/p), dim] plus
    /// the new grid side lengths.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &[TensorId],
        x: TensorId,
        h: usize,
        w: usize,
        pad: PadMode,
    ) -> Result<(TensorId, usize, usize)> {
        let patched = tape.token_patches(x, h, w, self.patch)?;
        let mut y = self.down.apply(tape, bound, patched)?;
        let (nh, nw) = (h / self.patch, w / self.patch);
        for block in &self.blocks {
            y = block.apply(tape, bound, y, nh, nw, pad)?;
        }
        Ok((y, nh, nw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_weights_pass_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let lin = Linear::init(&mut store, "l", 3, 3, &mut rng);
        // overwrite with identity
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        store.get_mut(lin.w).value = Tensor::from_vec(&[3, 3], eye).unwrap();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = lin.apply(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_single_key_is_out_proj_of_value() {
        // With one KV token, softmax weights are exactly 1 for every query.
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(2);
        let attn = CrossAttention::init(&mut store, "a", 4, 2, &mut rng);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(Tensor::randn(&[1, 3, 4], 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(&[1, 1, 4], 1.0, &mut rng));
        let out = attn.apply(&mut tape, &bound, q, kv).unwrap();

        // Oracle: out_proj(value(ln_kv(kv))) for every query row.
        let kn = attn.ln_kv.apply(&mut tape, &bound, kv).unwrap();
        let v = attn.wv.apply(&mut tape, &bound, kn).unwrap();
        let vo = attn.wo.apply(&mut tape, &bound, v).unwrap();
        let expect = tape.value(vo).data().to_vec();
        for row in tape.value(out).data().chunks(4) {
            for (a, e) in row.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn attention_matches_dense_oracle_one_head() {
        // 1-head, 2-query, 3-key case against a hand-rolled dense oracle.
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(3);
        let d = 4;
        let attn = CrossAttention::init(&mut store, "a", d, 1, &mut rng);
        let q0 = Tensor::<f64>::randn(&[1, 2, d], 0.9, &mut rng);
        let kv0 = Tensor::<f64>::randn(&[1, 3, d], 0.9, &mut rng);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(q0.clone());
        let kv = tape.constant(kv0.clone());
        let got = attn.apply(&mut tape, &bound, q, kv).unwrap();
        let got = tape.value(got).data().to_vec();

        // Oracle: plain loops in f64 with the same parameters.
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for (r, row) in x.chunks(d).enumerate() {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
            out
        };
        let mat = |x: &[f64], w: &[f64], b: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for c in 0..d {
                    let mut acc = b[c];
                    for kk in 0..d {
                        acc += x[r * d + kk] * w[kk * d + c];
                    }
                    out[r * d + c] = acc;
                }
            }
            out
        };
        let g = |p: ParamId| store.get(p).value.data().to_vec();
        let qn = ln(q0.data(), &g(attn.ln_q.gain), &g(attn.ln_q.bias));
        let kn = ln(kv0.data(), &g(attn.ln_kv.gain), &g(attn.ln_kv.bias));
        let qm = mat(&qn, &g(attn.wq.w), &g(attn.wq.b), 2);
        let km = mat(&kn, &g(attn.wk.w), &g(attn.wk.b), 3);
        let vm = mat(&kn, &g(attn.wv.w), &g(attn.wv.b), 3);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; 2 * d];
        for qi in 0..2 {
            let mut s = [0.0; 3];
            for ki in 0..3 {
                for j in 0..d {
                    s[ki] += qm[qi * d + j] * km[ki * d + j];
                }
                s[ki] *= scale;
            }
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for ki in 0..3 {
                let w = exps[ki] / denom;
                for j in 0..d {
                    ctx[qi * d + j] += w * vm[ki * d + j];
                }
            }
        }
        let expect = mat(&ctx, &g(attn.wo.w), &g(attn.wo.b), 2);
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn attention_zero_value_projection_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let attn = CrossAttention::init(&mut store, "a", 4, 2, &mut rng);
        store.get_mut(attn.wv.w).value = Tensor::zeros(&[4, 4]);
        store.get_mut(attn.wv.b).value = Tensor::zeros(&[4]);
        store.get_mut(attn.wo.b).value = Tensor::zeros(&[4]);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut rng));
        let out = attn.apply(&mut tape, &bound, q, kv).unwrap();
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1e-12));
    }
}
