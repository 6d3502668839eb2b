use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixseq_core::checkpoint::{load_checkpoint, save_checkpoint};
use pixseq_core::contrastive::{build_index, cosine, retrieve_nearest, DualEncoder, DualEncoderConfig};
use pixseq_core::image::Image;
use pixseq_core::inference::guided_logits;
use pixseq_core::metrics::{frechet_distance, gaussian_stats, GaussianStats};
use pixseq_core::par::Exec;
use pixseq_core::params::ParamStore;
use pixseq_core::seq2seq::{build_model, conv_sparse_mask, ModelConfig};
use pixseq_core::tensor::{Tape, Tensor};
use pixseq_core::vq::{quantize, Tokenizer, TokenizerConfig};

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_text(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> Vec<u32> {
    let n = rng.random_range(1..len - 1);
    let mut ids = vec![1];
    ids.extend((0..n).map(|_| rng.random_range(4..vocab)));
    ids.push(2);
    ids
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn logit_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-20.0f64..20.0, n), prop::collection::vec(-20.0f64..20.0, n))
}

proptest! {
    #[test]
    fn guidance_is_affine_in_lambda((u, c) in logit_pair(9), a in 0.0f64..4.0, b in 0.0f64..4.0, t in 0.0f64..1.0) {
        let lam = a + t * (b - a);
        let g = guided_logits(&u, &c, lam).unwrap();
        let ga = guided_logits(&u, &c, a).unwrap();
        let gb = guided_logits(&u, &c, b).unwrap();
        for i in 0..u.len() {
            let lerp = ga[i] + t * (gb[i] - ga[i]);
            prop_assert!((g[i] - lerp).abs() <= 1e-9 * (1.0 + g[i].abs()), "{} vs {}", g[i], lerp);
        }
        prop_assert_eq!(argmax(&guided_logits(&u, &c, 1.0).unwrap()), argmax(&c));
    }

    #[test]
    fn guidance_shift_leaves_distribution((u, c) in logit_pair(7), shift in -50.0f64..50.0, lam in 0.0f64..5.0) {
        let g = guided_logits(&u, &c, lam).unwrap();
        let us: Vec<f64> = u.iter().map(|x| x + shift).collect();
        let cs: Vec<f64> = c.iter().map(|x| x + shift).collect();
        let gs = guided_logits(&us, &cs, lam).unwrap();
        for (x, y) in g.iter().zip(&gs) {
            prop_assert!((y - x - shift).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        for (p, q) in softmax(&g).iter().zip(softmax(&gs)) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(
        d in 1usize..5,
        n in 3usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = |shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + shift).collect()).collect()
        };
        let a = gaussian_stats(&feats(0.0)).unwrap();
        let b = gaussian_stats(&feats(0.5)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8, "{ab} vs {ba}");
        prop_assert!(ab >= 0.0);
        for r in [&a.cov, &b.cov] {
            prop_assert!((r - r.transpose()).amax() <= 1e-8);
        }
    }

    #[test]
    fn diagonal_frechet_matches_closed_form(
        ma in prop::collection::vec(-3.0f64..3.0, 4),
        mb in prop::collection::vec(-3.0f64..3.0, 4),
        sa in prop::collection::vec(0.0f64..2.0, 4),
        sb in prop::collection::vec(0.0f64..2.0, 4),
    ) {
        let stats = |m: &[f64], s: &[f64]| GaussianStats {
            mean: DVector::from_column_slice(m),
            cov: DMatrix::from_diagonal(&DVector::from_iterator(s.len(), s.iter().map(|x| x * x))),
            n: 10,
        };
        let got = frechet_distance(&stats(&ma, &sa), &stats(&mb, &sb)).unwrap();
        let want: f64 = (0..4).map(|i| (ma[i] - mb[i]).powi(2) + (sa[i] - sb[i]).powi(2)).sum();
        prop_assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }

    #[test]
    fn conv_mask_is_inside_causal(h in 1usize..6, w in 1usize..6, half in 0usize..4) {
        let k = 2 * half + 1;
        let m = conv_sparse_mask(h, w, k).unwrap();
        let n = h * w;
        for i in 0..n {
            prop_assert!(m[i * n + i]);
            for j in i + 1..n {
                prop_assert!(!m[i * n + j]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(tensors in prop::collection::vec(prop::collection::vec(any::<u32>(), 1..20), 1..5)) {
        let mut store = ParamStore::new();
        for (i, raw) in tensors.iter().enumerate() {
            let data = raw.iter().map(|&b| f32::from_bits(b)).collect();
            store.insert(format!("t{i}"), Tensor::new(vec![raw.len()], data).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "prop", &(), &store).unwrap();
        let (_, back) = load_checkpoint(dir.path()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((na, a), (nb, b)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            let ba: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ba, bb);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quantization_is_idempotent_on_unit_codes(seed in any::<u64>(), n in 1usize..20) {
        let tok = Tokenizer::new(TokenizerConfig::default(), seed).unwrap();
        let d = tok.codebook().shape()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let z: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut tape = Tape::<f32>::new();
        let cb = tape.constant(tok.codebook().clone());
        let zv = tape.leaf(Tensor::new(vec![n, d], z).unwrap(), true);
        let q = quantize(&mut tape, cb, zv).unwrap();
        let zq = tape.value(q.z_q).clone();
        for row in zq.data().chunks(d) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-5, "{norm}");
        }
        let s = tape.sum(q.z_q, None).unwrap();
        let g = tape.backward(s).unwrap();
        prop_assert!(g.get(zv).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape2 = Tape::<f32>::new();
        let cb2 = tape2.constant(tok.codebook().clone());
        let zq2 = tape2.leaf(zq, false);
        prop_assert_eq!(quantize(&mut tape2, cb2, zq2).unwrap().indices, q.indices);
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        d_mlp: 32,
        heads: 2,
        text_vocab: 20,
        image_vocab: 7,
        text_len: 6,
        grid_h: 3,
        grid_w: 3,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn perturbing_a_token_only_changes_later_logits(seed in any::<u64>(), p in 0usize..9, conv in any::<bool>()) {
        let cfg = ModelConfig { conv_kernel: if conv { 3 } else { 0 }, ..tiny_model() };
        prop_assume!(cfg.validate().is_ok());
        let mut model = build_model(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.jitter(0.3, &mut rng);
        let text = vec![1, rng.random_range(4..20), 2, 0, 0, 0];
        let image: Vec<u32> = (0..9).map(|_| rng.random_range(0..7)).collect();
        let mut other = image.clone();
        other[p] = (other[p] + 1) % 7;
        let a = model.logits(&text, &image).unwrap();
        let b = model.logits(&text, &other).unwrap();
        let k = cfg.image_vocab;
        for i in 0..=p {
            prop_assert_eq!(&a.data()[i * k..(i + 1) * k], &b.data()[i * k..(i + 1) * k], "position {}", i);
        }
        if p + 1 < 9 {
            prop_assert_ne!(&a.data()[(p + 1) * k..], &b.data()[(p + 1) * k..]);
        }
    }
}

fn small_encoder(seed: u64) -> DualEncoder {
    let cfg = DualEncoderConfig { d_model: 16, d_mlp: 32, heads: 2, image_layers: 1, text_layers: 1, embed_dim: 8, text_vocab: 40, text_len: 8, ..Default::default() };
    DualEncoder::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn contrastive_loss_ignores_batch_order(seed in any::<u64>(), b in 2usize..6) {
        let enc = small_encoder(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Image> = (0..b).map(|_| random_image(&mut rng, 32)).collect();
        let texts: Vec<Vec<u32>> = (0..b).map(|_| random_text(&mut rng, 40, 8)).collect();
        let base = enc.batch_loss(&imgs.iter().collect::<Vec<_>>(), &texts.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.rotate_left(1);
        perm.swap(0, b - 1);
        let pi: Vec<&Image> = perm.iter().map(|&i| &imgs[i]).collect();
        let pt: Vec<&[u32]> = perm.iter().map(|&i| texts[i].as_slice()).collect();
        let shuffled = enc.batch_loss(&pi, &pt).unwrap();
        // equal up to f32 summation order
        prop_assert!((base - shuffled).abs() <= 1e-5 * base.abs().max(1.0), "{base} vs {shuffled}");
    }

    #[test]
    fn retrieval_matches_brute_force_scan(seed in any::<u64>(), n in 1usize..12, k in 1usize..5) {
        let enc = small_encoder(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Image> = (0..n).map(|_| random_image(&mut rng, 32)).collect();
        let text = random_text(&mut rng, 40, 8);
        let k = k.min(n);
        let index = build_index(&enc, &imgs, Exec::Sequential).unwrap();
        let got = retrieve_nearest(&enc, &index, &text, k).unwrap();

        let q = &enc.embed_texts(std::slice::from_ref(&text), Exec::Sequential).unwrap()[0];
        let e = enc.embed_images(&imgs, Exec::Sequential).unwrap();
        let mut scored: Vec<(f64, u64)> = e.iter().enumerate().map(|(i, v)| (cosine(v, q), i as u64)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<u64> = scored.iter().take(k).map(|s| s.1).collect();
        prop_assert_eq!(got, want);

        let score = enc.alignment_score(&imgs[0], &text).unwrap();
        prop_assert!((score - cosine(&e[0], q)).abs() <= 1e-12);
    }
}
