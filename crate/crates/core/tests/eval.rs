use std::time::Instant;

use bapgan_core::data::Dataset;
use bapgan_core::diagnostics::tiny_config;
use bapgan_core::eval::{
    ablation_report, affinities, age_invariant_reconstruct, extract_features, frechet_distance, image_fid,
    progress_image, read_tsne_csv, render_tsne_png, tsne_embed, write_tsne_csv, Extractor, FeatureStats, TsneConfig,
    TsnePoint,
};
use bapgan_core::model::init_params;
use bapgan_core::trainer::{save_checkpoint, TrainConfig, TrainState};
use bapgan_core::{AblationRow, Error};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Cyclic Jacobi rotations; returns eigenvalues and column eigenvectors.
fn jacobi(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn sqrt_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (w, v) = jacobi(a);
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| v[i][k] * w[k].max(0.0).sqrt() * v[j][k]).sum()).collect())
        .collect()
}

// Trace term through Σb^{1/2} Σa Σb^{1/2}: the opposite order to the library.
fn oracle_fid(ma: &[f64], ca: &[Vec<f64>], mb: &[f64], cb: &[Vec<f64>]) -> f64 {
    let n = ma.len();
    let diff: f64 = ma.iter().zip(mb).map(|(a, b)| (a - b) * (a - b)).sum();
    let rb = sqrt_psd(cb);
    let m = matmul(&matmul(&rb, ca), &rb);
    let (w, _) = jacobi(&m);
    let cross: f64 = w.iter().map(|v| v.max(0.0).sqrt()).sum();
    let tr: f64 = (0..n).map(|i| ca[i][i] + cb[i][i]).sum();
    diff + tr - 2.0 * cross
}

fn random_cov(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect())
        .collect()
}

fn stats(mean: &[f64], cov: &[Vec<f64>]) -> FeatureStats {
    let n = mean.len();
    FeatureStats::new(
        100,
        DVector::from_column_slice(mean),
        DMatrix::from_fn(n, n, |i, j| cov[i][j]),
    )
    .unwrap()
}

#[test]
fn fid_analytic_cases() {
    let start = Instant::now();
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let a = stats(&[0.0, 0.0], &eye);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let b = stats(&[1.0, 0.0], &eye);
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    let c = stats(&[3.0, 4.0], &eye);
    assert!((frechet_distance(&a, &c).unwrap() - 25.0).abs() < 1e-6);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn fid_matches_jacobi_oracle_on_random_5d_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let ma: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mb: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (ca, cb) = (random_cov(&mut rng, 5), random_cov(&mut rng, 5));
        let expected = oracle_fid(&ma, &ca, &mb, &cb);
        let got = frechet_distance(&stats(&ma, &ca), &stats(&mb, &cb)).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        let swapped = frechet_distance(&stats(&mb, &cb), &stats(&ma, &ca)).unwrap();
        assert!((got - swapped).abs() < 1e-6);
    }
}

#[test]
fn fid_rejects_mismatched_dimensions() {
    let a = stats(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let b = stats(&[0.0], &[vec![1.0]]);
    assert!(matches!(frechet_distance(&a, &b), Err(Error::Dimension(_))));
}

#[test]
fn sample_fid_shrinks_with_more_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    };
    let fid_at = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| {
        frechet_distance(&FeatureStats::from_features(&a).unwrap(), &FeatureStats::from_features(&b).unwrap()).unwrap()
    };
    let small = fid_at(draw(20), draw(20));
    let large = fid_at(draw(4000), draw(4000));
    assert!(large < small, "{large} !< {small}");
    assert!(large < 0.05);
}

fn random_images(n: usize, s: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..s * s).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
}

fn smooth_images(n: usize, s: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (a, b): (f32, f32) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            (0..s * s).map(|p| a * ((p % s) as f32 / s as f32) + b).collect()
        })
        .collect()
}

#[test]
fn untrained_reconstruction_is_far_from_real() {
    let cfg = tiny_config();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let real = smooth_images(40, cfg.image_size, 2);
    let bins: Vec<usize> = (0..40).map(|i| i % cfg.age_bins).collect();
    let recon = age_invariant_reconstruct(&params, &real, &bins).unwrap();
    assert_eq!(recon.len(), real.len());
    assert!(recon.iter().all(|r| r.len() == real[0].len()));
    let same = image_fid(&real, &real, cfg.image_size, &Extractor::Desk).unwrap();
    let far = image_fid(&real, &recon, cfg.image_size, &Extractor::Desk).unwrap();
    assert!(same.abs() < 1e-9);
    assert!(far > 100.0 * same.max(1e-6), "{far}");
}

#[test]
fn progression_range_is_checked() {
    let cfg = tiny_config();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let img = random_images(2, cfg.image_size, 1);
    // tiny config has three bins of 20/3 years; 8 years is not a whole shift
    assert!(matches!(progress_image(&params, &img, &[0, 1], 8), Err(Error::Range(_))));
}

#[test]
fn inception_without_weights_is_an_explicit_error() {
    let img = random_images(2, 8, 1);
    let r = extract_features(&img, 8, &Extractor::Inception { weights: None });
    assert!(matches!(r, Err(Error::MissingWeights(_))));
}

// Plain t-SNE for cross-checking: fixed-iteration bisection on sigma,
// gradient descent with fixed momentum, no gains.
fn reference_tsne(x: &[Vec<f64>], perplexity: f64, steps: usize, seed: u64) -> Vec<[f64; 2]> {
    let n = x.len();
    let d2 = |i: usize, j: usize| -> f64 { x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi) = (1e-6f64, 1e6f64);
        for _ in 0..100 {
            let sigma = (lo * hi).sqrt();
            let w: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { (-d2(i, j) / (2.0 * sigma * sigma)).exp() }).collect();
            let z: f64 = w.iter().sum();
            let h: f64 = if z == 0.0 {
                0.0
            } else {
                -w.iter().filter(|&&v| v > 0.0).map(|v| (v / z) * (v / z).ln()).sum::<f64>()
            };
            if h > perplexity.ln() {
                hi = sigma;
            } else {
                lo = sigma;
            }
            for j in 0..n {
                p[i][j] = if z > 0.0 { w[j] / z } else { 0.0 };
            }
        }
    }
    let sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (p[i][j] + p[j][i]) / (2.0 * n as f64)).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    for step in 0..steps {
        let ex = if step < 100 { 4.0 } else { 1.0 };
        let mut num = vec![vec![0.0; n]; n];
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    num[i][j] = 1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2));
                    z += num[i][j];
                }
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let m = 4.0 * (ex * sym[i][j] - num[i][j] / z) * num[i][j];
                    g[0] += m * (y[i][0] - y[j][0]);
                    g[1] += m * (y[i][1] - y[j][1]);
                }
            }
            for d in 0..2 {
                vel[i][d] = 0.8 * vel[i][d] - 100.0 * g[d];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y
}

fn separation(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let centroid = |c: usize| {
        let members: Vec<_> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
        let k = members.len() as f64;
        let m = [members.iter().map(|p| p[0]).sum::<f64>() / k, members.iter().map(|p| p[1]).sum::<f64>() / k];
        let spread = members.iter().map(|p| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt()).sum::<f64>() / k;
        (m, spread)
    };
    let ((m0, s0), (m1, s1)) = (centroid(0), centroid(1));
    let inter = ((m0[0] - m1[0]).powi(2) + (m0[1] - m1[1]).powi(2)).sqrt();
    inter / ((s0 + s1) / 2.0)
}

fn two_clusters(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            // unit spread inside a cluster, centres 1000 apart
            x.push((0..10).map(|d| if d == 0 { 1000.0 * c as f64 } else { 0.0 } + rng.gen_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    (x, labels)
}

#[test]
fn tsne_separates_two_clusters_like_the_reference() {
    let (x, labels) = two_clusters(90, 4);
    let ours = tsne_embed(&x, &TsneConfig { seed: 2, ..TsneConfig::default() }).unwrap();
    let reference = reference_tsne(&x, 50.0, 500, 2);
    let (a, b) = (separation(&ours.points, &labels), separation(&reference, &labels));
    assert!(b > 5.0, "reference separation {b}");
    assert!(a > 5.0, "separation {a} (reference {b})");
}

#[test]
fn tsne_is_deterministic_given_seed() {
    let (x, _) = two_clusters(80, 1);
    let cfg = TsneConfig { steps: 120, seed: 9, ..TsneConfig::default() };
    let a = tsne_embed(&x, &cfg).unwrap();
    let b = tsne_embed(&x, &cfg).unwrap();
    assert_eq!(a.points, b.points);
    let c = tsne_embed(&x, &TsneConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.points, c.points);
}

#[test]
fn tsne_210_images_within_two_minutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..210).map(|_| (0..4096).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let start = Instant::now();
    let e = tsne_embed(&x, &TsneConfig::default()).unwrap();
    assert!(start.elapsed().as_secs() < 120);
    assert_eq!(e.points.len(), 210);
    assert!(e.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
    for h in &e.affinities.entropies {
        assert!((h - 50f64.ln()).abs() < 1e-3);
    }
}

#[test]
fn affinity_error_for_large_perplexity() {
    let x = vec![vec![0.0; 3]; 100];
    assert!(matches!(affinities(&x, 50.0, 1e-5), Err(Error::Config(_))));
}

#[test]
fn tsne_csv_round_trip_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let pts: Vec<TsnePoint> = (0..12)
        .map(|i| TsnePoint {
            index: i,
            age_bin: i % 5,
            source: ["real", "caae", "bapgan"][i % 3].to_string(),
            x: i as f64 * 0.5,
            y: -(i as f64),
        })
        .collect();
    let csv = dir.path().join("t.csv");
    write_tsne_csv(&csv, &pts).unwrap();
    let head = std::fs::read_to_string(&csv).unwrap();
    assert!(head.starts_with("index,age_bin,source,x,y\n"));
    assert_eq!(read_tsne_csv(&csv).unwrap(), pts);
    let png = dir.path().join("t.png");
    render_tsne_png(&png, &pts, 200).unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (200, 200));
}

fn tiny_dataset(n: usize) -> Dataset {
    let cfg = tiny_config();
    Dataset {
        image_size: cfg.image_size,
        images: smooth_images(n, cfg.image_size, 7),
        bins: (0..n).map(|i| i % cfg.age_bins).collect(),
        ages: (0..n).map(|i| (i % cfg.age_bins) as f64 * 6.0).collect(),
        paths: (0..n).map(|i| format!("p{i}")).collect(),
    }
}

#[test]
fn ablation_report_has_four_rows_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for row in AblationRow::ALL {
        let cfg = TrainConfig {
            model: tiny_config().with_row(row),
            ..TrainConfig::desk()
        };
        let state = TrainState::new(&cfg).unwrap();
        let path = dir.path().join(row.slug());
        save_checkpoint(&state, &cfg, &path).unwrap();
        ckpts.push((row, path));
    }
    let data = tiny_dataset(20);
    let report = ablation_report(&data, &ckpts, &Extractor::Desk, "test split").unwrap();
    assert_eq!(report.entries.len(), 4);
    let rows: Vec<_> = report.entries.iter().map(|e| e.row).collect();
    assert_eq!(rows, AblationRow::ALL.to_vec());
    assert!(report.entries.iter().all(|e| e.fid.is_finite() && e.fid >= 0.0));
    let csv = report.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "Model,D_age,LS,SA,FID");
    assert!(lines[1].starts_with("\"CAAE\",false,false,false,"));
    assert!(lines[2].starts_with("\"+ D_age, LS\",true,true,false,"));
    assert!(lines[3].starts_with("\"+ SA\",false,false,true,"));
    assert!(lines[4].starts_with("\"BAPGAN\",true,true,true,"));
    assert!(report.to_pretty().contains("BAPGAN"));

    ckpts.retain(|(r, _)| *r != AblationRow::Sa);
    match ablation_report(&data, &ckpts, &Extractor::Desk, "test split") {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("+ SA"), "{msg}"),
        other => panic!("{other:?}"),
    }
}
