use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Double-loop softmax attention in f64, written independently of the kernel.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, vis: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut w = vec![0.0; m];
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            if vis[i * m + j] {
                let s: f64 = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt();
                w[j] = s;
                mx = mx.max(s);
            }
        }
        let mut z = 0.0;
        for j in 0..m {
            if vis[i * m + j] {
                w[j] = (w[j] - mx).exp();
                z += w[j];
            } else {
                w[j] = 0.0;
            }
        }
        for j in 0..m {
            for c in 0..d {
                out[i * d + c] += w[j] / z * v[j * d + c];
            }
        }
    }
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(n: usize, m: usize, r: &mut ChaCha8Rng) -> AttentionMask {
    let mut vis: Vec<bool> = (0..n * m).map(|_| r.random_bool(0.6)).collect();
    for i in 0..n {
        if !(0..m).any(|j| vis[i * m + j]) {
            let j = r.random_range(0..m);
            vis[i * m + j] = true;
        }
    }
    AttentionMask::from_visible(n, m, vis)
}

#[test]
fn single_key_returns_value_row() {
    let q = Tensor::new(vec![1, 3], vec![0.3f32, -1.0, 2.0]).unwrap();
    let k = Tensor::new(vec![1, 3], vec![1.0f32, 1.0, 1.0]).unwrap();
    let v = Tensor::new(vec![1, 3], vec![0.25f32, -7.5, 3.0]).unwrap();
    let out = masked_attention(&q, &k, &v, &AttentionMask::all_visible(1, 1)).unwrap();
    assert!(out.bits_eq(&v));
}

#[test]
fn tied_logits_average_values() {
    let q = Tensor::new(vec![1, 2], vec![1.0f32, 0.0]).unwrap();
    let k = Tensor::new(vec![2, 2], vec![0.5f32, 1.0, 0.5, -3.0]).unwrap();
    let v = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 6.0]).unwrap();
    let out = masked_attention(&q, &k, &v, &AttentionMask::all_visible(1, 2)).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0]);
}

#[test]
fn matches_naive_oracle_on_random_4x4() {
    let mut r = rng(11);
    for _ in 0..20 {
        let q = Tensor::<f32>::randn(&[4, 4], 1.0, &mut r);
        let k = Tensor::<f32>::randn(&[4, 4], 1.0, &mut r);
        let v = Tensor::<f32>::randn(&[4, 4], 1.0, &mut r);
        let mask = random_mask(4, 4, &mut r);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        let f = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        let oracle = naive_attention(&f(&q), &f(&k), &f(&v), 4, 4, 4, mask.as_slice());
        let oracle = Tensor::new(vec![4, 4], oracle).unwrap();
        let err = out.cast::<f64>().rel_error(&oracle);
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn fully_masked_row_is_an_error() {
    let t = Tensor::<f32>::zeros(&[2, 2]);
    let mask = AttentionMask::from_visible(2, 2, vec![true, false, false, false]);
    assert_eq!(
        masked_attention(&t, &t, &t, &mask),
        Err(SubstrateError::FullyMaskedRow(1))
    );
}

#[test]
fn mismatched_mask_is_shape_error() {
    let t = Tensor::<f32>::zeros(&[2, 2]);
    let mask = AttentionMask::all_visible(3, 2);
    assert!(matches!(
        masked_attention(&t, &t, &t, &mask),
        Err(SubstrateError::ShapeMismatch(_))
    ));
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
    let f = |t: &mut Tape<f64>, x: Var| -> Result<Var, SubstrateError> {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(xv).unwrap().data(), &[2.0, 4.0]);
    assert!(grad_check(f, &x, 1e-4).unwrap() <= 1e-6);
}

#[test]
fn grad_check_constant_function() {
    let x = Tensor::new(vec![3], vec![0.5f64, -1.0, 4.0]).unwrap();
    let err = grad_check(
        |t: &mut Tape<f64>, _x| Ok(t.constant(Tensor::scalar(3.0))),
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-8);
}

#[test]
fn grad_check_rejects_bad_step_and_nonfinite() {
    let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    let id = |t: &mut Tape<f64>, x: Var| Ok(t.sum(x));
    assert!(matches!(grad_check(id, &x, 1e-1), Err(SubstrateError::InvalidArgument(_))));
    let blowup = |t: &mut Tape<f64>, x: Var| Ok(t.scale(x, f64::INFINITY));
    assert!(matches!(grad_check(blowup, &x, 1e-4), Err(SubstrateError::NonFiniteValue(_))));
}

#[test]
fn grad_check_masked_attention_sum() {
    let mut r = rng(5);
    let k = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    let v = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    let mask = Arc::new(random_mask(3, 3, &mut r));
    for _ in 0..3 {
        let q = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
        // Differentiate with respect to all three inputs stacked as one point.
        let point = Tensor::concat_rows(&[&q, &k, &v]).unwrap();
        let mask = mask.clone();
        let err = grad_check(
            move |t: &mut Tape<f64>, x: Var| {
                let q = t.slice_rows(x, 0, 3)?;
                let k = t.slice_rows(x, 3, 3)?;
                let v = t.slice_rows(x, 6, 3)?;
                let o = t.attention(q, k, v, 1, mask.clone())?;
                let w = t.constant(Tensor::from_fn(&[3, 3], |i| 0.3 + i as f64 * 0.1));
                let o = t.mul(o, w)?;
                Ok(t.sum(o))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }
}

#[test]
fn grad_check_multihead_attention_and_layer_norm() {
    let mut r = rng(8);
    for seed in 0..3 {
        let x = Tensor::<f64>::randn(&[5, 8], 1.0, &mut r);
        let wq = Tensor::<f64>::randn(&[8, 8], 0.5, &mut r);
        let mask = Arc::new(random_mask(5, 5, &mut rng(seed)));
        let err = grad_check(
            |t: &mut Tape<f64>, x: Var| {
                let g = t.constant(Tensor::full(&[8], 1.3));
                let b = t.constant(Tensor::full(&[8], 0.1));
                let h = t.layer_norm(x, g, b)?;
                let w = t.constant(wq.clone());
                let q = t.matmul(h, w)?;
                let a = t.attention(q, h, x, 2, mask.clone())?;
                let a = t.gelu(a);
                let sq = t.mul(a, a)?;
                Ok(t.mean(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }
}

#[test]
fn grad_check_grouped_linear_and_row_ops() {
    let mut r = rng(3);
    let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut r);
    let w0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    let groups: Arc<[usize]> = Arc::from(vec![0, 1, 1, 0, 2, 1]);
    let err = grad_check(
        |t: &mut Tape<f64>, w1: Var| {
            let xv = t.constant(x.clone());
            let w0v = t.constant(w0.clone());
            let w2 = t.scale(w1, -0.5);
            let y = t.grouped_linear(xv, groups.clone(), &[w0v, w1, w2])?;
            let picked = t.gather_rows(y, Arc::from(vec![1, 4, 5]))?;
            let back = t.scatter_rows(picked, Arc::from(vec![0, 2, 3]), 4)?;
            let b = t.constant(Tensor::full(&[3], 0.2));
            let z = t.add_row(back, b)?;
            let z = t.relu(z);
            let sq = t.mul(z, z)?;
            Ok(t.sum(sq))
        },
        &Tensor::<f64>::randn(&[4, 3], 1.0, &mut r),
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-4, "err {err}");
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::full(&[4], 1.0f32);
    let zeros = Tensor::zeros(&[4]);
    let out = layer_norm(&Tensor::full(&[1, 4], 3.5f32), &ones, &zeros).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let x = Tensor::new(vec![1, 2], vec![1.0f64, -1.0]).unwrap();
    let out = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out.data()[0] - s).abs() < 1e-12 && (out.data()[1] + s).abs() < 1e-12);

    let mut r = rng(1);
    let x = Tensor::<f32>::randn(&[2, 8], 2.0, &mut r);
    let out = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8])).unwrap();
    for row in 0..2 {
        let vals: Vec<f64> = out.row(row).iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "var {var}");
    }
    assert!(matches!(
        layer_norm(&x, &Tensor::full(&[7], 1.0), &Tensor::zeros(&[8])),
        Err(SubstrateError::ShapeMismatch(_))
    ));
}

#[test]
fn all_visible_mask_equals_unmasked_attention() {
    let mut r = rng(21);
    let q = Tensor::<f32>::randn(&[5, 4], 1.0, &mut r);
    let k = Tensor::<f32>::randn(&[6, 4], 1.0, &mut r);
    let v = Tensor::<f32>::randn(&[6, 4], 1.0, &mut r);
    let masked = masked_attention(&q, &k, &v, &AttentionMask::all_visible(5, 6)).unwrap();
    let f = |t: &Tensor<f32>| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    let plain = naive_attention(&f(&q), &f(&k), &f(&v), 5, 6, 4, &[true; 30]);
    assert!(masked.cast::<f64>().rel_error(&Tensor::new(vec![5, 4], plain).unwrap()) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_keys_do_not_influence_output(seed in 0u64..10_000, n in 1usize..6, m in 1usize..7) {
        let mut r = rng(seed);
        let q = Tensor::<f32>::randn(&[n, 4], 1.0, &mut r);
        let k = Tensor::<f32>::randn(&[m, 4], 1.0, &mut r);
        let v = Tensor::<f32>::randn(&[m, 4], 1.0, &mut r);
        let mask = random_mask(n, m, &mut r);
        let base = masked_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..n {
            for j in 0..m {
                if mask.visible(i, j) {
                    continue;
                }
                // Key j is hidden from row i; rewrite it and check row i only.
                let mut k2 = k.clone();
                let mut v2 = v.clone();
                for c in 0..4 {
                    k2.data_mut()[j * 4 + c] = 100.0 * (c as f32 + 1.0);
                    v2.data_mut()[j * 4 + c] = -55.5;
                }
                let out = masked_attention(&q, &k2, &v2, &mask).unwrap();
                let a: Vec<u32> = base.row(i).iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = out.row(i).iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one(seed in 0u64..10_000, n in 1usize..6, m in 1usize..7) {
        let mut r = rng(seed);
        let q = Tensor::<f32>::randn(&[n, 4], 1.0, &mut r);
        let k = Tensor::<f32>::randn(&[m, 4], 1.0, &mut r);
        let mask = random_mask(n, m, &mut r);
        // With all-ones values the output equals the total attention weight.
        let v = Tensor::<f32>::full(&[m, 4], 1.0);
        let out = masked_attention(&q, &k, &v, &mask).unwrap();
        for x in out.data() {
            prop_assert!((*x as f64 - 1.0).abs() <= 1e-6);
        }
    }
}
