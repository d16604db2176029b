use hsarnn::stcodec::{StCodec, StCodecConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codec() -> StCodec {
    StCodec::new(StCodecConfig::default()).unwrap()
}

#[test]
fn quantization_error_is_half_a_bin_over_1e5_samples() {
    let codec = codec();
    let half = 0.5 * codec.config().delta();
    assert!((half - 1.0 / 1999.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut buf = vec![0.0f64; codec.config().bins];
    let (mut worst_err, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let x: f64 = rng.random_range(-1.0..=1.0);
        codec.encode_into(x, &mut buf);
        worst_sum = worst_sum.max((buf.iter().sum::<f64>() - 1.0).abs());
        worst_err = worst_err.max((codec.decode_slice(&buf).unwrap() - x).abs());
    }
    assert!(worst_err <= half + 1e-12, "max error {worst_err}");
    assert!(worst_sum <= 1e-6, "sum deviation {worst_sum}");
    assert_eq!(codec.clamped(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip_within_half_bin(x in -1.0f64..=1.0) {
        let c = codec();
        let y = c.decode(&c.encode(x)).unwrap();
        prop_assert!((y - x).abs() <= 0.5 * c.config().delta() + 1e-12);
    }

    #[test]
    fn decode_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let c = codec();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(c.decode(&c.encode(lo)).unwrap() <= c.decode(&c.encode(hi)).unwrap());
    }

    #[test]
    fn out_of_range_decodes_to_the_edge(x in 1.0f64..50.0) {
        let c = codec();
        prop_assert_eq!(c.decode(&c.encode(x)).unwrap(), 1.0);
        prop_assert_eq!(c.decode(&c.encode(-x)).unwrap(), -1.0);
    }

    #[test]
    fn small_codecs_keep_the_bound(bins in 2usize..200, sigma in 0.2f64..20.0, x in -1.0f64..=1.0) {
        let cfg = StCodecConfig { bins, sigma_bins: sigma, ..Default::default() };
        let c = StCodec::new(cfg).unwrap();
        let p = c.encode(x);
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((c.decode(&p).unwrap() - x).abs() <= 0.5 * cfg.delta() + 1e-12);
    }
}
