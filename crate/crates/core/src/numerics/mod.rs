//! Dense `f64` tensors, a reverse-mode autodiff tape and a finite-difference
//! gradient oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub(crate) use tape::rope_frequency;
pub use tape::{softmax_masked_rows, Graph, NodeId, RopeTable};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::normal(&[3, 3], 1.0, &mut rng(1));
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        assert!(matches!(g.matmul(x, y), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::normal(&[5, 4], 1.0, &mut r), true);
        let b = Tensor::normal(&[4, 6], 1.0, &mut r);
        let mut g = Graph::new();
        let an = g.param(&store, a);
        let bn = g.constant(b.clone());
        let c = g.matmul(an, bn).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss, &mut store).unwrap();
        let grad = store.get(a).grad.clone().unwrap();
        let expected = Tensor::filled(&[5, 6], 1.0).matmul(&transpose(&b)).unwrap();
        for (x, y) in grad.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let err = finite_diff_check(&mut store, 1e-6, |g, s| {
            let an = g.param(s, a);
            let bn = g.constant(b.clone());
            let c = g.matmul(an, bn)?;
            g.sum(c)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.get(i, j);
            }
        }
        Tensor::matrix(c, r, data).unwrap()
    }

    fn softmax(logits: &[f64], mask: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let n = logits.len();
        let x = g.constant(Tensor::matrix(1, n, logits.to_vec()).unwrap());
        let m = Arc::new(Tensor::matrix(1, n, mask.to_vec()).unwrap());
        let y = g.softmax_masked(x, m).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4], &[0.0; 4]), vec![0.25; 4]);
        assert_eq!(softmax(&[0.0; 3], &[0.0, 0.0, f64::NEG_INFINITY]), vec![0.5, 0.5, 0.0]);

        let direct: Vec<f64> = {
            let e: Vec<f64> = [1.0_f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        for (a, b) in softmax(&[1.0, 2.0, 3.0], &[0.0; 3]).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let m = Arc::new(Tensor::matrix(2, 2, vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
        assert!(matches!(g.softmax_masked(x, m), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn softmax_rejects_non_sentinel_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let m = Arc::new(Tensor::matrix(1, 2, vec![0.0, -1e9]).unwrap());
        assert!(matches!(g.softmax_masked(x, m), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_masked_composite_gradient() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let p = store.add("logits", Tensor::normal(&[4, 5], 1.0, &mut r), true);
        let w = Tensor::normal(&[4, 5], 1.0, &mut r);
        let mut mask = Tensor::zeros(&[4, 5]);
        mask.data_mut()[3] = f64::NEG_INFINITY;
        mask.data_mut()[7] = f64::NEG_INFINITY;
        mask.data_mut()[19] = f64::NEG_INFINITY;
        let mask = Arc::new(mask);
        let err = finite_diff_check(&mut store, 1e-6, |g, s| {
            let x = g.param(s, p);
            let y = g.softmax_masked(x, mask.clone())?;
            let wn = g.constant(w.clone());
            let z = g.mul(y, wn)?;
            g.sum(z)
        })
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::new();
        let scale = store.add("s", Tensor::filled(&[2], 1.0), false);
        let shift = store.add("b", Tensor::zeros(&[2]), false);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![3.0, 3.0]]).unwrap());
        let (s, b) = (g.param(&store, scale), g.param(&store, shift));
        let y = g.layer_norm(x, s, b, 1e-14).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::normal(&[3, 6], 1.0, &mut r), true);
        let s = store.add("s", Tensor::normal(&[6], 1.0, &mut r), true);
        let b = store.add("b", Tensor::normal(&[6], 1.0, &mut r), true);
        let w = Tensor::normal(&[3, 6], 1.0, &mut r);
        let err = finite_diff_check(&mut store, 1e-6, |g, st| {
            let (xn, sn, bn) = (g.param(st, x), g.param(st, s), g.param(st, b));
            let y = g.layer_norm(xn, sn, bn, 1e-5)?;
            let wn = g.constant(w.clone());
            let z = g.mul(y, wn)?;
            g.sum(z)
        })
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn backward_simple_losses() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap(), true);
        let frozen = store.add("f", Tensor::filled(&[3], 2.0), false);

        let mut g = Graph::new();
        let pn = g.param(&store, p);
        let fz = g.param(&store, frozen);
        let z = g.mul(pn, fz).unwrap();
        let y = g.add(pn, z).unwrap();
        let _ = y;
        let loss = g.sum(pn).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_deref(), Some(&[1.0, 1.0, 1.0][..]));
        assert!(store.get(frozen).grad.is_none());

        store.zero_grad();
        let mut g = Graph::new();
        let pn = g.param(&store, p);
        let sq = g.square(pn).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_deref(), Some(store.tensor(p).data()));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[2]), true);
        let mut g = Graph::new();
        let pn = g.param(&store, p);
        assert!(matches!(g.backward(pn, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_quadratic_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap(), true);
        let err = finite_diff_check(&mut store, 1e-4, |g, s| {
            let pn = g.param(s, p);
            let sq = g.square(pn)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn finite_diff_rejects_nondeterministic_f() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[1]), true);
        let mut calls = 0.0;
        let res = finite_diff_check(&mut store, 1e-6, |g, s| {
            calls += 1.0;
            let pn = g.param(s, p);
            let c = g.constant(Tensor::scalar(calls));
            let y = g.add(pn, c)?;
            g.sum(y)
        });
        assert!(matches!(res, Err(Error::OracleInvalid(_))));
        assert!(matches!(
            finite_diff_check(&mut store, 1e-2, |g, s| {
                let pn = g.param(s, p);
                g.sum(pn)
            }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 1], f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    pub(super) fn every_op_loss(
        g: &mut Graph,
        s: &ParamStore,
        ids: &[ParamId],
        mask: &Arc<Tensor>,
    ) -> crate::error::Result<NodeId> {
        let a = g.param(s, ids[0]); // 4x6
        let b = g.param(s, ids[1]); // 6x6
        let v = g.param(s, ids[2]); // 6
        let ab = g.matmul(a, b)?;
        let h = g.add_row_vector_range(ab, v, 1..3)?;
        let act = g.gelu(h)?;
        let act2 = g.silu(act)?;
        let left = g.slice_cols(act2, 0..4)?;
        let right = g.slice_cols(act2, 2..6)?;
        let table = Arc::new(RopeTable::new(&[Some(1), None, Some(3), Some(2)], 2, 10.0)?);
        let rl = g.rope(left, table)?;
        let logits = g.matmul_nt(rl, right)?;
        let p = g.softmax_masked(logits, mask.clone())?;
        let top = g.slice_rows(act2, 0..2)?;
        let delta = g.scale(top, 0.3)?;
        let mixed = g.add_rows(act2, delta, 2)?;
        let cat = g.concat_cols(&[p, mixed])?;
        let stacked = g.concat_rows(&[cat, cat])?;
        let gathered = g.gather_rows(stacked, &[0, 5, 5, 2])?;
        let sq = g.square(gathered)?;
        let d = g.sub(sq, gathered)?;
        g.mean(d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_op_matches_finite_differences(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let ids = vec![
                store.add("a", Tensor::normal(&[4, 6], 0.7, &mut r), true),
                store.add("b", Tensor::normal(&[6, 6], 0.7, &mut r), true),
                store.add("v", Tensor::normal(&[6], 0.7, &mut r), true),
            ];
            let mut mask = Tensor::zeros(&[4, 4]);
            mask.data_mut()[1] = f64::NEG_INFINITY;
            mask.data_mut()[14] = f64::NEG_INFINITY;
            let mask = Arc::new(mask);
            // smaller steps hit roundoff on coordinates with tiny gradients
            let err = finite_diff_check(&mut store, 1e-4, |g, s| every_op_loss(g, s, &ids, &mask)).unwrap();
            prop_assert!(err <= 1e-4, "relative error {}", err);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9) {
            let mut r = rng(seed);
            let logits = Tensor::normal(&[rows, cols], 5.0, &mut r);
            let mut mask = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for j in 1..cols {
                    if rand::Rng::gen_bool(&mut r, 0.4) {
                        mask.data_mut()[i * cols + j] = f64::NEG_INFINITY;
                    }
                }
            }
            let y = softmax_masked_rows(logits.data(), mask.data(), cols).unwrap();
            for i in 0..rows {
                let s: f64 = y[i * cols..(i + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                for j in 0..cols {
                    if mask.data()[i * cols + j] == f64::NEG_INFINITY {
                        prop_assert_eq!(y[i * cols + j], 0.0);
                    }
                }
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..10_000) {
            let mut r = rng(seed);
            let a = Tensor::normal(&[4, 5], 1.0, &mut r);
            let b = Tensor::normal(&[5, 3], 1.0, &mut r);
            let c = Tensor::normal(&[3, 6], 1.0, &mut r);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) / scale <= 1e-10);
        }
    }
}
