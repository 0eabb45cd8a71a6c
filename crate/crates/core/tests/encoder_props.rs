use phrasesim::encoder::{forward, EncoderConfig, EncoderParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        embed_dim: 12,
        num_heads: 3,
        num_layers: 2,
        ffn_dim: 24,
        max_len: 40,
        dropout: 0.0,
        seed,
    }
}

#[test]
fn parameter_count_matches_shapes() {
    let cfg = EncoderConfig {
        vocab_size: 100,
        embed_dim: 16,
        num_heads: 2,
        num_layers: 2,
        ffn_dim: 32,
        max_len: 32,
        ..EncoderConfig::default()
    };
    let (v, d, f, l, m) = (100, 16, 32, 2, 32);
    let per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d;
    let expected = v * d + m * d + l * per_layer + d + 1;
    assert_eq!(expected, 6449);
    assert_eq!(EncoderParams::init(&cfg).unwrap().num_params(), expected);
}

#[test]
fn output_length_follows_input_up_to_max_len() {
    let cfg = EncoderConfig {
        vocab_size: 50,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 1,
        ffn_dim: 16,
        ..EncoderConfig::default()
    };
    assert_eq!(cfg.max_len, 400);
    let params = EncoderParams::init(&cfg).unwrap();
    for len in [1, 2, 17, 399, 400] {
        let ids: Vec<u32> = (0..len).map(|i| (i % 50) as u32).collect();
        let out = forward(&params, &ids, &vec![1; len]).unwrap();
        assert_eq!(out.len(), len);
    }
    assert!(forward(&params, &vec![5; 401], &vec![1; 401]).is_err());
}

#[test]
fn swapping_two_tokens_changes_scores() {
    let params = EncoderParams::init(&config(4)).unwrap();
    let ids = vec![2, 7, 8, 9, 3];
    let swapped = vec![2, 9, 8, 7, 3];
    let a = forward(&params, &ids, &[1; 5]).unwrap();
    let b = forward(&params, &swapped, &[1; 5]).unwrap();
    // Position 2 holds the same token in both, so only context differs there.
    assert_ne!(a.as_slice()[2], b.as_slice()[2]);
    assert_ne!(a.as_slice()[1], b.as_slice()[3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pad_content_never_leaks(seed in any::<u64>(), real in 1usize..20, pads in 1usize..10) {
        let params = EncoderParams::init(&config(seed % 1000)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = real + pads;
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let mask: Vec<u8> = (0..len).map(|i| u8::from(i < real)).collect();
        let mut other = ids.clone();
        for id in &mut other[real..] {
            *id = rng.gen_range(0..30);
        }
        let a = forward(&params, &ids, &mask).unwrap();
        let b = forward(&params, &other, &mask).unwrap();
        prop_assert_eq!(&a.as_slice()[..real], &b.as_slice()[..real]);
    }

    #[test]
    fn scores_inside_unit_interval_and_deterministic(seed in any::<u64>(), len in 1usize..40) {
        let params = EncoderParams::init(&config(seed % 1000)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let a = forward(&params, &ids, &vec![1; len]).unwrap();
        prop_assert!(a.as_slice().iter().all(|&p| p > 0.0 && p < 1.0));
        prop_assert_eq!(a, forward(&params, &ids, &vec![1; len]).unwrap());
    }
}
