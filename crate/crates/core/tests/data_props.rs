use std::sync::OnceLock;

use proptest::prelude::*;

use pixseq_core::metrics::alignment_oracle;
use pixseq_core::par::Exec;
use pixseq_core::synth::{canonical_specs, caption, gen_dataset, parse_caption, render, Color, Shape};
use pixseq_core::textproc::{decode_text, encode_text, train_subword, SubwordVocab};
use pixseq_core::vq::{Tokenizer, TokenizerConfig};

fn corpus() -> Vec<String> {
    canonical_specs().iter().step_by(7).map(caption).collect()
}

fn vocab() -> &'static SubwordVocab {
    static V: OnceLock<SubwordVocab> = OnceLock::new();
    V.get_or_init(|| train_subword(&corpus(), 400).unwrap())
}

proptest! {
    #[test]
    fn decode_inverts_encode(s in "\\PC{0,40}") {
        let v = vocab();
        let ids = encode_text(v, &s, s.len() + 2).unwrap();
        prop_assert!(ids.iter().all(|&i| (i as usize) < v.vocab_size()));
        prop_assert_eq!(decode_text(v, &ids).unwrap(), s);
    }

    #[test]
    fn encode_inverts_decode_on_encoded_ids(s in "[a-z ]{0,60}") {
        let v = vocab();
        let ids = encode_text(v, &s, 64).unwrap();
        let text = decode_text(v, &ids).unwrap();
        prop_assert_eq!(encode_text(v, &text, 64).unwrap(), ids);
    }

    #[test]
    fn truncated_ids_stay_in_vocab(s in "\\PC{0,80}", max_len in 2usize..20) {
        let v = vocab();
        let ids = encode_text(v, &s, max_len).unwrap();
        prop_assert!(ids.len() <= max_len);
        prop_assert!(ids.iter().all(|&i| (i as usize) < v.vocab_size()));
    }

    #[test]
    fn dataset_is_deterministic_and_closed(n in 1usize..40, seed in any::<u64>()) {
        let a = gen_dataset(n, seed);
        prop_assert_eq!(&a, &gen_dataset(n, seed));
        for ex in &a {
            prop_assert!(ex.spec.validate().is_ok());
            for o in &ex.spec.objects {
                prop_assert!(Shape::ALL.contains(&o.shape) && Color::ALL.contains(&o.color));
            }
            prop_assert_eq!(&parse_caption(&ex.caption).unwrap(), &ex.spec);
        }
    }
}

#[test]
fn subword_training_is_deterministic() {
    let again = train_subword(&corpus(), 400).unwrap();
    assert_eq!(vocab(), &again);
    assert_eq!(vocab().to_text(), again.to_text());
}

#[test]
fn caption_grammar_is_a_bijection() {
    let specs = canonical_specs();
    let mut captions: Vec<String> = specs.iter().map(caption).collect();
    for (s, c) in specs.iter().zip(&captions) {
        assert_eq!(&parse_caption(c).unwrap(), s);
    }
    captions.sort();
    captions.dedup();
    assert_eq!(captions.len(), specs.len());
}

#[test]
fn oracle_accepts_every_canonical_render() {
    for s in canonical_specs() {
        assert_eq!(alignment_oracle(&render(&s).unwrap(), &s).unwrap(), 1.0, "{}", caption(&s));
    }
}

#[test]
fn tokenizer_exec_modes_agree() {
    let tok = Tokenizer::new(TokenizerConfig::default(), 4).unwrap();
    let imgs: Vec<_> = gen_dataset(12, 9).into_iter().map(|e| e.image).collect();
    let seq = tok.tokenize_batch(&imgs, Exec::Sequential).unwrap();
    assert_eq!(seq, tok.tokenize_batch(&imgs, Exec::Parallel).unwrap());
    let a = tok.detokenize_batch(&seq, Exec::Sequential).unwrap();
    assert_eq!(a, tok.detokenize_batch(&seq, Exec::Parallel).unwrap());
    assert!(a.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn shapes_are_near_uniform_at_ten_thousand() {
    let data = gen_dataset(10_000, 21);
    let mut counts = [0usize; 3];
    for ex in &data {
        for o in &ex.spec.objects {
            counts[Shape::ALL.iter().position(|&s| s == o.shape).unwrap()] += 1;
        }
    }
    let expected = counts.iter().sum::<usize>() as f64 / 3.0;
    for (s, &c) in Shape::ALL.iter().zip(&counts) {
        let rel = c as f64 / expected - 1.0;
        assert!(rel.abs() <= 0.05, "{s:?}: {c} vs {expected}");
    }
}

#[test]
fn both_cells_of_two_object_renders_hold_ink() {
    for spec in canonical_specs().iter().filter(|s| s.objects.len() == 2) {
        let img = render(spec).unwrap();
        for o in &spec.objects {
            let (r, c) = (o.cell.0 as usize * 16, o.cell.1 as usize * 16);
            let ink = (r..r + 16).flat_map(|y| (c..c + 16).map(move |x| (y, x))).filter(|&(y, x)| img.pixel(y, x) != [1.0, 1.0, 1.0]).count();
            assert!(ink > 16, "{} cell {:?}: {ink}", caption(spec), o.cell);
        }
    }
}
