use proptest::prelude::*;

use pixseq_core::tensor::{Tape, Tensor};

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-60.0f64..60.0, r * c)))
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in rows(6, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![r, c], data).unwrap(), false);
        let s = tape.softmax(x, 1).unwrap();
        let ls = tape.log_softmax(x, 1).unwrap();
        let s = tape.value(s).data().to_vec();
        let ls = tape.value(ls).data().to_vec();
        for i in 0..r {
            let row = &s[i * c..(i + 1) * c];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            for j in 0..c {
                let (p, lp) = (row[j], ls[i * c + j]);
                if p > 0.0 {
                    prop_assert!((p.ln() - lp).abs() <= 1e-6, "{} vs {}", p.ln(), lp);
                }
            }
        }
    }

    #[test]
    fn softmax_of_f32_rows_sums_to_one((r, c, data) in rows(4, 16)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![r, c], data.iter().map(|&v| v as f32).collect()).unwrap(), false);
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(c) {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reshape_then_inverse_is_bit_exact((r, c, data) in rows(5, 8)) {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![r, c], data).unwrap();
        let x = tape.leaf(t.clone(), false);
        let y = tape.reshape(x, &[r * c]).unwrap();
        let y = tape.reshape(y, &[c, r]).unwrap();
        let y = tape.reshape(y, &[r, c]).unwrap();
        prop_assert_eq!(bits(tape.value(y)), bits(&t));
    }

    #[test]
    fn transpose_twice_is_bit_exact(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let data: Vec<f64> = (0..a * b * c).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0 - 60.0).collect();
        let t = Tensor::new(vec![a, b, c], data).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t.clone(), false);
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let y = tape.transpose(x, p, q).unwrap();
            let y = tape.transpose(y, p, q).unwrap();
            prop_assert_eq!(bits(tape.value(y)), bits(&t));
        }
    }

    #[test]
    fn identical_inputs_give_identical_bytes((r, c, data) in rows(6, 6)) {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(vec![r, c], data.clone()).unwrap(), true);
            let xt = tape.transpose(x, 0, 1).unwrap();
            let g = tape.matmul(x, xt).unwrap();
            let n = tape.layer_norm(g, 1, 1e-5).unwrap();
            let s = tape.softmax(n, 1).unwrap();
            let h = tape.gelu(s).unwrap();
            let l = tape.sum(h, None).unwrap();
            let grads = tape.backward(l).unwrap();
            (bits(tape.value(h)), bits(grads.get(x).unwrap()))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn l2_normalize_ignores_positive_scale((r, c, data) in rows(3, 8), s in 0.01f64..100.0) {
        prop_assume!(data.chunks(c).all(|row| row.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![r, c], data).unwrap(), false);
        let y = tape.scale(x, s).unwrap();
        let a = tape.l2_normalize(x, 1, 0.0).unwrap();
        let b = tape.l2_normalize(y, 1, 0.0).unwrap();
        for (u, v) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }
}
