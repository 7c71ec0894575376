use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::*;
use crate::model::{Model, ModelConfig};

fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Largest violation of `|w - deq| <= s/2 + |z - zhat|` over all weights,
/// with `z` recomputed here as the exact group minimum. Negative means the
/// bound holds with room to spare.
fn worst_bound_violation(values: &[f32], rows: usize, cols: usize, scheme: QuantScheme) -> f64 {
    let q = QuantizedBlock::quantize(values, &[rows, cols], scheme).unwrap();
    let deq = q.dequantize().unwrap();
    let g = scheme.group_size;
    let padded = QuantizedBlock::pad_rows(values, rows, cols, g);
    let zhat = q.dequantized_zeros().unwrap();
    let pc = padded.len() / rows;
    let mut worst = f64::NEG_INFINITY;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * pc + c;
            let grp = &padded[i / g * g..(i / g + 1) * g];
            let z = grp.iter().copied().fold(f32::INFINITY, f32::min) as f64;
            let bound = q.scale_at(i) as f64 / 2.0 + (z - zhat[i / g] as f64).abs();
            let err = (values[r * cols + c] as f64 - deq[r * cols + c] as f64).abs();
            // f32 evaluation of s*code + zhat adds at most a few ulps.
            let slack = 4.0 * f32::EPSILON as f64 * (values[r * cols + c].abs() as f64 + 1.0);
            worst = worst.max(err - bound - slack);
        }
    }
    worst
}

#[test]
fn constant_matrix_is_exact_with_zero_codes() {
    for bits in [2, 3, 4] {
        let scheme = QuantScheme::preset(bits).unwrap();
        let q = QuantizedBlock::quantize(&[5.0; 300], &[3, 100], scheme).unwrap();
        let codes = unpack_codes(q.packed_codes(), bits, 3 * (100 + q.pad_count())).unwrap();
        assert!(codes.iter().all(|&c| c == 0));
        assert!(q.dequantize().unwrap().iter().all(|&v| v == 5.0));
    }
}

#[test]
fn lattice_aligned_values_round_trip_exactly() {
    let q =
        QuantizedBlock::quantize(&[0.0, 1.0, 2.0, 3.0], &[4], QuantScheme::new(2, 4, 4)).unwrap();
    assert_eq!(
        unpack_codes(q.packed_codes(), 2, 4).unwrap(),
        vec![0, 1, 2, 3]
    );
    assert_eq!(q.scale_at(0), 1.0);
    assert_eq!(q.dequantize().unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn error_bound_holds_for_every_scheme() {
    for (bits, g, sg) in [
        (2, 16, 128),
        (3, 64, 128),
        (4, 64, 256),
        (3, 64, 64),
        (2, 8, 8),
    ] {
        let scheme = QuantScheme::new(bits, g, sg);
        for seed in 0..10 {
            let v = uniform(64 * 70, seed);
            assert!(
                worst_bound_violation(&v, 64, 70, scheme) <= 0.0,
                "{scheme:?}"
            );
        }
    }
}

#[test]
fn requantizing_the_dequantized_block_is_a_fixed_point() {
    for bits in [2, 3, 4] {
        let scheme = QuantScheme::preset(bits).unwrap();
        for seed in 0..5 {
            let v: Vec<f32> = uniform(40 * 130, seed)
                .iter()
                .map(|x| x * 3.0 - 0.5)
                .collect();
            let q = QuantizedBlock::quantize(&v, &[40, 130], scheme).unwrap();
            let again =
                QuantizedBlock::quantize(&q.dequantize().unwrap(), &[40, 130], scheme).unwrap();
            assert_eq!(again.to_bytes(), q.to_bytes(), "bits={bits} seed={seed}");
        }
    }
}

#[test]
fn saturated_codes_reach_the_group_maximum() {
    // One group whose range exactly spans the scale: its max gets the top code.
    let v: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
    let q = QuantizedBlock::quantize(&v, &[16], QuantScheme::new(4, 16, 16)).unwrap();
    let codes = unpack_codes(q.packed_codes(), 4, 16).unwrap();
    assert_eq!(codes[15], 15);
    let deq = q.dequantize().unwrap();
    let zerr = (q.dequantized_zeros().unwrap()[0] - 0.0).abs();
    assert!((deq[15] - 1.0).abs() <= zerr + 1e-3);
}

#[test]
fn packing_round_trips_at_every_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bits in 1..=8u8 {
        for n in [0, 1, 7, 8, 9, 63, 100] {
            let codes: Vec<u8> = (0..n)
                .map(|_| rng.gen_range(0..(1u16 << bits)) as u8)
                .collect();
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), (n * bits as usize).div_ceil(8));
            assert_eq!(unpack_codes(&packed, bits, n).unwrap(), codes);
        }
    }
}

#[test]
fn packing_is_lsb_first() {
    assert_eq!(pack_codes(&[1, 2, 3, 0], 2), vec![0b00_11_10_01]);
    // 3-bit codes 5,6,7 occupy bits 0-2, 3-5 and 6-8.
    assert_eq!(pack_codes(&[5, 6, 7], 3), vec![0b11_110_101, 0b1]);
}

#[test]
fn bits_per_param_matches_serialized_bytes() {
    assert_eq!(QuantScheme::fp16().bits_per_param(), 16.0);
    let v = uniform(256 * 512, 7);
    for bits in [2, 3, 4, 16] {
        let scheme = QuantScheme::preset(bits).unwrap();
        let q = QuantizedBlock::quantize(&v, &[256, 512], scheme).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), q.serialized_len());
        let payload = (bytes.len() - header_len(2)) as f64;
        assert_eq!(
            payload * 8.0 / v.len() as f64,
            scheme.bits_per_param(),
            "bits={bits}"
        );
    }
    let two = QuantScheme::preset(2).unwrap().bits_per_param();
    assert_eq!(two, 2.625);
    let four = QuantScheme::preset(4).unwrap().bits_per_param();
    assert!(four > 4.0 && four < 4.5);
}

#[test]
fn blocks_survive_serialization() {
    let v = uniform(33 * 50, 3);
    for bits in [2, 3, 4, 16] {
        let q =
            QuantizedBlock::quantize(&v, &[33, 50], QuantScheme::preset(bits).unwrap()).unwrap();
        let bytes = q.to_bytes();
        let (back, used) = QuantizedBlock::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, q);
        assert!(QuantizedBlock::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn corrupt_headers_are_rejected() {
    let q =
        QuantizedBlock::quantize(&uniform(64, 0), &[64], QuantScheme::preset(3).unwrap()).unwrap();
    let mut bytes = q.to_bytes();
    bytes[0] = 9;
    assert!(QuantizedBlock::from_bytes(&bytes).is_err());
    let mut bytes = q.to_bytes();
    bytes[1] = 5;
    assert!(QuantizedBlock::from_bytes(&bytes).is_err());
}

#[test]
fn bad_input_is_rejected() {
    let s = QuantScheme::preset(2).unwrap();
    assert!(QuantizedBlock::quantize(&[1.0, f32::NAN], &[2], s).is_err());
    assert!(QuantizedBlock::quantize(&[1.0; 3], &[2], s).is_err());
    assert!(QuantizedBlock::quantize(&[1.0; 3], &[3], QuantScheme::new(5, 4, 4)).is_err());
    assert!(QuantizedBlock::quantize(&[1.0; 3], &[3], QuantScheme::new(2, 4, 6)).is_err());
}

#[test]
fn two_bit_regression_checksum() {
    let v = uniform(128 * 128, 2024);
    let q = QuantizedBlock::quantize(&v, &[128, 128], QuantScheme::preset(2).unwrap()).unwrap();
    assert!(worst_bound_violation(&v, 128, 128, QuantScheme::preset(2).unwrap()) <= 0.0);
    let digest = hex::encode(Sha256::digest(q.to_bytes()));
    assert_eq!(&digest[..16], TWO_BIT_DIGEST_PREFIX);
}

const TWO_BIT_DIGEST_PREFIX: &str = "8af9e561a9dad3bf";

#[test]
fn mixtral_size_table() {
    let arch = ArchSpec::mixtral_8x7b();
    assert_eq!(arch.total(), 46_702_792_704);
    assert!((arch.experts_fraction() - 0.966).abs() < 0.003);
    let size = |a, e| {
        model_size_report(&arch, &MixedQuantConfig::from_bits(a, e).unwrap())
            .unwrap()
            .total_gib
    };
    // 46.7e9 parameters at 2 bytes each.
    assert!((size(16, 16) - 86.99).abs() / 86.99 < 0.01);
    assert!(size(16, 16) > size(16, 4) && size(16, 4) > size(16, 3) && size(16, 3) > size(16, 2));
    assert!((size(4, 16) - 85.16).abs() / 85.16 < 0.01);
    for (e, published) in [(4, 25.82), (3, 23.21)] {
        assert!(
            (size(16, e) - published).abs() / published < 0.15,
            "{e}-bit: {}",
            size(16, e)
        );
    }
}

#[test]
fn empty_architecture_has_zero_size() {
    let arch = ArchSpec {
        name: "empty".into(),
        expert_params: 0,
        attention_params: 0,
        embedding_params: 0,
        gate_params: 0,
        norm_params: 0,
    };
    let r = model_size_report(&arch, &MixedQuantConfig::from_bits(16, 2).unwrap()).unwrap();
    assert_eq!(r.total_gib, 0.0);
}

#[test]
fn quantized_checkpoint_round_trip() {
    let cfg = ModelConfig {
        n_layers: 2,
        ..Default::default()
    };
    let model = Model::init(&cfg).unwrap();
    let mixed = MixedQuantConfig::from_bits(4, 2).unwrap();
    let mut buf = Vec::new();
    let by_role = write_quantized_checkpoint(&model, &mixed, &mut buf).unwrap();
    assert!(by_role["experts"] > 0);
    let back = read_quantized_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    let a = model.params().named_tensors();
    let b = back.params().named_tensors();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.name, y.name);
        let worst = x
            .data
            .iter()
            .zip(y.data)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        let limit = match role_of_name(&x.name) {
            "experts" => 1.0,
            "attention" => 0.2,
            _ => 2e-3,
        };
        assert!(worst < limit, "{} {worst}", x.name);
    }
    let arch = ArchSpec::from_model_config(&cfg);
    assert_eq!(arch.total() as usize, model.params().param_count());
    assert!(read_quantized_checkpoint(&buf[..buf.len() - 3]).is_err());
}

fn role_of_name(name: &str) -> &'static str {
    if name.contains(".experts.") {
        "experts"
    } else if [".wq", ".wk", ".wv", ".wo"]
        .iter()
        .any(|s| name.ends_with(s))
    {
        "attention"
    } else {
        "fp16"
    }
}
