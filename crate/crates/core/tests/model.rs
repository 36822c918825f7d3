use bapgan_core::model::{
    attention_params, discriminate_identity, discriminate_image, encode, generate, init_params, self_attention,
    spectral_normalize, ModelParams,
};
use bapgan_core::objectives::one_hot;
use bapgan_core::{AblationRow, Error, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        latent_dim: 8,
        base_channels: 8,
        sa_resolution: 8,
        ..ModelConfig::desk()
    }
}

fn images(b: usize, s: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![b, 1, s, s], (0..b * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let c = ModelConfig::desk();
    let a = init_params::<f32>(&c, 7).unwrap();
    let b = init_params::<f32>(&c, 7).unwrap();
    assert_eq!(a, b);
    let d = init_params::<f32>(&c, 8).unwrap();
    assert_ne!(a.tensors, d.tensors);
    assert!(a.all_finite());
}

#[test]
fn gates_start_closed_and_u_is_unit() {
    let p = init_params::<f32>(&ModelConfig::desk(), 1).unwrap();
    let gates = p.gate_names();
    assert_eq!(gates.len(), 2);
    for g in gates {
        assert_eq!(p.get(&g).unwrap().data(), &[0.0]);
    }
    assert!(!p.spectral.is_empty());
    for s in p.spectral.values() {
        let n: f32 = s.u.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn invalid_size_is_a_configuration_error() {
    let c = ModelConfig {
        image_size: 96,
        ..ModelConfig::desk()
    };
    assert!(matches!(init_params::<f32>(&c, 1), Err(Error::Config(_))));
}

#[test]
fn shapes_and_ranges() {
    let c = small();
    let p = init_params::<f32>(&c, 2).unwrap();
    let x = images(4, 32, 1);
    let z = encode(&p, &x).unwrap();
    assert_eq!(z.shape(), &[4, 8]);
    assert!(z.max_abs() <= 1.0);
    let l = one_hot::<f32>(&[0, 1, 2, 4], 5).unwrap();
    let y = generate(&p, &z, &l).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.max_abs() <= 1.0);
    let s = discriminate_identity(&p, &z).unwrap();
    assert_eq!(s.shape(), &[4]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let d = discriminate_image(&p, &x, &l).unwrap();
    assert_eq!(d.realness.shape(), &[4]);
    assert_eq!(d.age_logits.unwrap().shape(), &[4, 5]);
}

#[test]
fn age_head_absent_without_age_discriminator() {
    let c = small().with_row(AblationRow::Caae);
    let p = init_params::<f32>(&c, 2).unwrap();
    let l = one_hot::<f32>(&[0, 1], 5).unwrap();
    let d = discriminate_image(&p, &images(2, 32, 3), &l).unwrap();
    assert!(d.age_logits.is_none());
    assert!(p.tensors.keys().all(|k| !k.contains("age_head")));
}

#[test]
fn networks_are_pure() {
    let p = init_params::<f32>(&small(), 4).unwrap();
    let before = p.clone();
    let x = images(3, 32, 9);
    assert_eq!(encode(&p, &x).unwrap(), encode(&p, &x).unwrap());
    let z = encode(&p, &x).unwrap();
    assert_eq!(discriminate_identity(&p, &z).unwrap(), discriminate_identity(&p, &z).unwrap());
    assert_eq!(p, before);
}

#[test]
fn shape_mismatches_are_dimension_errors() {
    let p = init_params::<f32>(&small(), 4).unwrap();
    assert!(matches!(encode(&p, &images(2, 16, 0)), Err(Error::Dimension(_))));
    let z = Tensor::<f32>::zeros(vec![3, 8]);
    let l = one_hot::<f32>(&[0, 1], 5).unwrap();
    assert!(matches!(generate(&p, &z, &l), Err(Error::Dimension(_))));
    assert!(matches!(discriminate_image(&p, &images(3, 32, 0), &l), Err(Error::Dimension(_))));
}

fn without_attention(p: &ModelParams<f32>) -> ModelParams<f32> {
    let mut q = p.clone();
    q.config.use_sa = false;
    q.tensors.retain(|k, _| !k.contains(".sa."));
    q.spectral.retain(|k, _| !k.contains(".sa."));
    q
}

#[test]
fn closed_gates_equal_network_without_attention() {
    let p = init_params::<f32>(&small(), 5).unwrap();
    let q = without_attention(&p);
    let x = images(2, 32, 6);
    let l = one_hot::<f32>(&[1, 3], 5).unwrap();
    let z = encode(&p, &x).unwrap();
    let with = generate(&p, &z, &l).unwrap();
    let without = generate(&q, &z, &l).unwrap();
    let diff = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-7, "{diff}");
    let a = discriminate_image(&p, &x, &l).unwrap();
    let b = discriminate_image(&q, &x, &l).unwrap();
    assert_eq!(a.realness, b.realness);
}

#[test]
fn attention_params_are_extractable() {
    let p = init_params::<f32>(&small(), 5).unwrap();
    let sa = attention_params(&p, "gen").unwrap();
    // 16 channels at the generator's 8×8 map
    let feat = Tensor::new(vec![2, 16, 8, 8], (0..2 * 16 * 64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let out = self_attention(&feat, &sa).unwrap();
    assert_eq!(out.output, feat);
}

#[test]
fn spectral_normalize_reaches_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
    let mut u = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut last = None;
    for _ in 0..20 {
        let r = spectral_normalize(&w, &u, 5).unwrap();
        u = r.u.clone();
        last = Some(r);
    }
    let r = last.unwrap();
    let again = spectral_normalize(&r.weight, &u, 20).unwrap();
    assert!((again.sigma - 1.0).abs() < 1e-9, "{}", again.sigma);
}
