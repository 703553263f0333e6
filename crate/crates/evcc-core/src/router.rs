//! Confidence-aware dynamic routing over the three branch features.
//!
//! A shared trunk (one hidden projection feeding both heads) produces
//! routing weights pi and a confidence score; the final weights interpolate
//! between pi and the uniform distribution, so low confidence falls back to
//! equal weighting and no branch is ever fully silenced.

use crate::error::Result;
use crate::nn::{Linear, Norm};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

pub struct RouterParams {
    pub norm: Norm,
    /// Shared trunk projection, 3d -> h; feeds both heads.
    pub w1: Linear,
    /// Routing-weight head, h -> 3.
    pub w2: Linear,
    /// Confidence head, h -> 1.
    pub wc: Linear,
    /// Per-branch output projections, d -> d.
    pub proj: [Linear; 3],
}

impl RouterParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        RouterParams {
            norm: Norm::init(store, "router.ln", 3 * d),
            w1: Linear::init(store, "router.w1", 3 * d, hidden, rng),
            w2: Linear::init(store, "router.w2", hidden, 3, rng),
            wc: Linear::init(store, "router.wc", hidden, 1, rng),
            proj: [
                Linear::init(store, "router.proj0", d, d, rng),
                Linear::init(store, "router.proj1", d, d, rng),
                Linear::init(store, "router.proj2", d, d, rng),
            ],
        }
    }
}

/// Per-sample routing outcome.
pub struct RoutingDecision {
    /// Content-dependent weights on the simplex, [B,3].
    pub pi: TensorId,
    /// Confidence in (0,1), [B,1].
    pub conf: TensorId,
    /// conf * pi + (1-conf)/3, [B,3].
    pub pi_final: TensorId,
    /// Weighted combination of projected branch features, [B,d].
    pub f_final: TensorId,
}

/// pi_final = conf * pi + (1 - conf) * (1/3).
pub fn confidence_interpolate<T: Scalar>(
    tape: &mut Tape<T>,
    pi: TensorId,
    conf: TensorId,
) -> Result<TensorId> {
    let b = tape.value(pi).dims()[0];
    let scaled = tape.row_scale(pi, conf)?;
    // (1 - conf) / 3, broadcast across the three columns
    let uniform_weight = tape.affine(conf, -1.0 / 3.0, 1.0 / 3.0)?;
    let ones = tape.constant(Tensor::full(&[b, 3], T::ONE));
    let uniform_part = tape.row_scale(ones, uniform_weight)?;
    tape.add(scaled, uniform_part)
}

/// Full routing pass: trunk hidden computed once, both heads read it.
pub fn route<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &RouterParams,
    f_v: TensorId,
    f_c: TensorId,
    z_x: TensorId,
) -> Result<RoutingDecision> {
    let cat = tape.concat_last(&[f_v, f_c, z_x])?;
    let normed = params.norm.apply(tape, bound, cat)?;
    let hidden = params.w1.apply(tape, bound, normed)?;
    let hidden = tape.gelu(hidden)?;

    let pi_logits = params.w2.apply(tape, bound, hidden)?;
    let pi = tape.softmax_last(pi_logits)?;
    let conf_logit = params.wc.apply(tape, bound, hidden)?;
    let conf = tape.sigmoid(conf_logit)?;

    let pi_final = confidence_interpolate(tape, pi, conf)?;
    let f_final = aggregate(tape, bound, params, pi_final, f_v, f_c, z_x)?;
    Ok(RoutingDecision { pi, conf, pi_final, f_final })
}

/// F_final = sum_i pi_final[:, i] * Proj_i(feature_i).
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &[TensorId],
    params: &RouterParams,
    pi_final: TensorId,
    f_v: TensorId,
    f_c: TensorId,
    z_x: TensorId,
) -> Result<TensorId> {
    let mut total: Option<TensorId> = None;
    for (i, feat) in [f_v, f_c, z_x].into_iter().enumerate() {
        let projected = params.proj[i].apply(tape, bound, feat)?;
        let weight = tape.slice_cols(pi_final, i, 1)?;
        let term = tape.row_scale(projected, weight)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("three branches"))
}

/// Parameter counts for the shared-trunk design vs duplicating the trunk
/// projection per head. The reduction fraction is computed over the trunk
/// (w1/w2/wc) only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterParamReport {
    pub shared_trunk: usize,
    pub duplicated_trunk: usize,
    pub shared_total: usize,
    pub duplicated_total: usize,
}

impl RouterParamReport {
    pub fn trunk_reduction_fraction(&self) -> f64 {
        1.0 - self.shared_trunk as f64 / self.duplicated_trunk as f64
    }
}

pub fn router_param_report(d: usize, h: usize) -> RouterParamReport {
    let w1 = 3 * d * h + h;
    let w2 = h * 3 + 3;
    let wc = h + 1;
    let projections = 3 * (d * d + d);
    let shared_trunk = w1 + w2 + wc;
    let duplicated_trunk = shared_trunk + w1;
    RouterParamReport {
        shared_trunk,
        duplicated_trunk,
        shared_total: shared_trunk + projections,
        duplicated_total: duplicated_trunk + projections,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize, seed: u64) -> (ParamStore<f64>, RouterParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let params = RouterParams::init(&mut store, d, d, &mut rng);
        (store, params)
    }

    fn random_features(
        tape: &mut Tape<f64>,
        rng: &mut Rng,
        b: usize,
        d: usize,
    ) -> (TensorId, TensorId, TensorId) {
        (
            tape.constant(Tensor::randn(&[b, d], 1.0, rng)),
            tape.constant(Tensor::randn(&[b, d], 1.0, rng)),
            tape.constant(Tensor::randn(&[b, d], 1.0, rng)),
        )
    }

    #[test]
    fn interpolation_worked_example() {
        // conf = 0.5, pi = (0.6, 0.3, 0.1) -> (0.46667, 0.31667, 0.21667)
        let mut tape = Tape::<f64>::new();
        let pi = tape.constant(Tensor::from_vec(&[1, 3], vec![0.6, 0.3, 0.1]).unwrap());
        let conf = tape.constant(Tensor::from_vec(&[1, 1], vec![0.5]).unwrap());
        let got = confidence_interpolate(&mut tape, pi, conf).unwrap();
        let got = tape.value(got).data();
        let expect = [
            0.5 * 0.6 + 0.5 / 3.0,
            0.5 * 0.3 + 0.5 / 3.0,
            0.5 * 0.1 + 0.5 / 3.0,
        ];
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((got[0] - 0.46667).abs() < 1e-5);
        assert!((got[1] - 0.31667).abs() < 1e-5);
        assert!((got[2] - 0.21667).abs() < 1e-5);
    }

    #[test]
    fn saturated_confidence_recovers_pi() {
        let (mut store, params) = setup(6, 1);
        store.get_mut(params.wc.b).value = Tensor::from_vec(&[1], vec![30.0]).unwrap();
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (fv, fc, zx) = random_features(&mut tape, &mut rng, 4, 6);
        let d = route(&mut tape, &bound, &params, fv, fc, zx).unwrap();
        for (a, e) in tape.value(d.pi_final).data().iter().zip(tape.value(d.pi).data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn collapsed_confidence_falls_back_to_uniform() {
        let (mut store, params) = setup(6, 3);
        store.get_mut(params.wc.b).value = Tensor::from_vec(&[1], vec![-30.0]).unwrap();
        let mut rng = Rng::new(4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (fv, fc, zx) = random_features(&mut tape, &mut rng, 4, 6);
        let d = route(&mut tape, &bound, &params, fv, fc, zx).unwrap();
        for &v in tape.value(d.pi_final).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn simplex_and_floor_invariants_on_random_inputs() {
        let (store, params) = setup(8, 5);
        let mut rng = Rng::new(6);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (fv, fc, zx) = random_features(&mut tape, &mut rng, 64, 8);
        let d = route(&mut tape, &bound, &params, fv, fc, zx).unwrap();
        let pi = tape.value(d.pi).data();
        let pf = tape.value(d.pi_final).data();
        let conf = tape.value(d.conf).data();
        for bi in 0..64 {
            let pi_sum: f64 = pi[bi * 3..(bi + 1) * 3].iter().sum();
            let pf_sum: f64 = pf[bi * 3..(bi + 1) * 3].iter().sum();
            assert!((pi_sum - 1.0).abs() < 1e-6);
            assert!((pf_sum - 1.0).abs() < 1e-6);
            assert!(conf[bi] > 0.0 && conf[bi] < 1.0);
            let floor = (1.0 - conf[bi]) / 3.0 - 1e-6;
            for j in 0..3 {
                assert!(pf[bi * 3 + j] >= floor);
            }
        }
    }

    #[test]
    fn aggregate_one_hot_selects_single_projection() {
        let (store, params) = setup(5, 7);
        let mut rng = Rng::new(8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (fv, fc, zx) = random_features(&mut tape, &mut rng, 2, 5);
        let one_hot = tape.constant(
            Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let got = aggregate(&mut tape, &bound, &params, one_hot, fv, fc, zx).unwrap();
        let expect = params.proj[0].apply(&mut tape, &bound, fv).unwrap();
        for (a, e) in tape.value(got).data().iter().zip(tape.value(expect).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_convex_over_identical_features() {
        // same projected feature on every branch: any pi_final returns it
        let (mut store, params) = setup(4, 9);
        // make all three projections identical
        let w = store.get(params.proj[0].w).value.clone();
        let b = store.get(params.proj[0].b).value.clone();
        for i in 1..3 {
            store.get_mut(params.proj[i].w).value = w.clone();
            store.get_mut(params.proj[i].b).value = b.clone();
        }
        let mut rng = Rng::new(10);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let weights = tape.constant(
            Tensor::from_vec(
                &[3, 3],
                vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8],
            )
            .unwrap(),
        );
        let got = aggregate(&mut tape, &bound, &params, weights, f, f, f).unwrap();
        let expect = params.proj[0].apply(&mut tape, &bound, f).unwrap();
        for (a, e) in tape.value(got).data().iter().zip(tape.value(expect).data()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_matches_brute_force_loop() {
        let (store, params) = setup(4, 11);
        let mut rng = Rng::new(12);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (fv, fc, zx) = random_features(&mut tape, &mut rng, 3, 4);
        let d = route(&mut tape, &bound, &params, fv, fc, zx).unwrap();

        // Oracle: per-sample loop over branches on projected features.
        let feats = [fv, fc, zx];
        let mut projected = Vec::new();
        for i in 0..3 {
            let p = params.proj[i].apply(&mut tape, &bound, feats[i]).unwrap();
            projected.push(tape.value(p).data().to_vec());
        }
        let pf = tape.value(d.pi_final).data();
        let got = tape.value(d.f_final).data();
        for bi in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for (i, proj) in projected.iter().enumerate() {
                    acc += pf[bi * 3 + i] * proj[bi * 4 + j];
                }
                assert!((got[bi * 4 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn param_report_arithmetic() {
        let r = router_param_report(4, 4);
        assert_eq!(r.shared_trunk, 72);
        assert_eq!(r.duplicated_trunk, 124);
        assert_eq!(r.shared_total, 72 + 3 * (16 + 4));
        // the full-width report stays consistent
        let full = router_param_report(384, 384);
        assert_eq!(full.shared_trunk, 3 * 384 * 384 + 384 + 384 * 3 + 3 + 384 + 1);
        assert!(full.trunk_reduction_fraction() > 0.0);
    }

    #[test]
    fn route_gradient_wrt_confidence_head_matches_finite_differences() {
        let (mut store, params) = setup(4, 13);
        let mut rng = Rng::new(14);
        let fv0 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let fc0 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let zx0 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);

        let eval = |store: &ParamStore<f64>, grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let fv = tape.constant(fv0.clone());
            let fc = tape.constant(fc0.clone());
            let zx = tape.constant(zx0.clone());
            let d = route(&mut tape, &bound, &params, fv, fc, zx).unwrap();
            let sq = tape.mul(d.f_final, d.f_final).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let lv = tape.value(loss).item();
            if grad {
                tape.backward(loss).unwrap();
                (lv, Some(tape.grad_tensor(bound[params.wc.w.0]).into_data()))
            } else {
                (lv, None)
            }
        };
        let (_, analytic) = eval(&store, true);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for idx in 0..4 {
            let orig = store.get(params.wc.w).value.data()[idx];
            store.get_mut(params.wc.w).value.data_mut()[idx] = orig + h;
            let plus = eval(&store, false).0;
            store.get_mut(params.wc.w).value.data_mut()[idx] = orig - h;
            let minus = eval(&store, false).0;
            store.get_mut(params.wc.w).value.data_mut()[idx] = orig;
            let num = (plus - minus) / (2.0 * h);
            let rel = (analytic[idx] - num).abs() / analytic[idx].abs().max(num.abs()).max(1e-4);
            assert!(rel < 1e-4, "idx {idx}: {} vs {num}", analytic[idx]);
        }
    }
}
