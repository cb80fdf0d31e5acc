use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use trace_core::numerics::{Rng, Tensor};
use trace_core::synth::baseline::{open3, otsu_threshold, BaselineConfig};
use trace_core::synth::dataset::{load_dataset, read_clip, write_clip, write_dataset};
use trace_core::synth::plume::{jittered_params, MASK_THRESHOLD};
use trace_core::synth::*;

fn small_dims() -> ClipDims {
    ClipDims {
        height: 32,
        width: 32,
        frames: 8,
    }
}

fn traits() -> AnimalTraits {
    AnimalTraits {
        source: (0.2, 0.5),
        head_temp: 0.4,
        spread: 1.0,
        wind_angle: 0.0,
    }
}

#[test]
fn zero_amplitude_gives_empty_masks() {
    let mut p = PlumeParams::for_class(FluxClass::HighFlux);
    p.amplitude = 0.0;
    let (_, _, m) = generate_clip(&p, &traits(), small_dims(), &Rng::new(1)).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn same_seed_is_bitwise_identical() {
    let p = PlumeParams::for_class(FluxClass::Control);
    let a = generate_clip(&p, &traits(), small_dims(), &Rng::new(9)).unwrap();
    let b = generate_clip(&p, &traits(), small_dims(), &Rng::new(9)).unwrap();
    assert!(a.0.bitwise_eq(&b.0) && a.1.bitwise_eq(&b.1) && a.2.bitwise_eq(&b.2));
    let c = generate_clip(&p, &traits(), small_dims(), &Rng::new(10)).unwrap();
    assert!(!a.1.bitwise_eq(&c.1));
}

#[test]
fn gas_noise_does_not_move_the_mask() {
    let mut p = PlumeParams::for_class(FluxClass::HighFlux);
    let (_, g1, m1) = generate_clip(&p, &traits(), small_dims(), &Rng::new(3)).unwrap();
    p.sigma_bg = 0.3;
    let (_, g2, m2) = generate_clip(&p, &traits(), small_dims(), &Rng::new(3)).unwrap();
    assert!(m1.bitwise_eq(&m2));
    assert!(!g1.bitwise_eq(&g2));
}

#[test]
fn values_stay_on_their_grids() {
    let p = PlumeParams::for_class(FluxClass::HighFlux);
    let (f, g, m) = generate_clip(&p, &traits(), small_dims(), &Rng::new(4)).unwrap();
    assert_eq!(f.shape(), &[8, 3, 32, 32]);
    assert!(f.data().iter().all(|&v| (0.0..=1.0).contains(&v) && ((v * 255.0).round() / 255.0) == v));
    assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn short_period_is_a_config_error() {
    let mut p = PlumeParams::for_class(FluxClass::HighFlux);
    p.period = 1.5;
    let e = generate_clip(&p, &traits(), small_dims(), &Rng::new(0)).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(matches!(e, trace_core::Error::Config(_)));
}

#[test]
fn indivisible_size_is_a_geometry_error() {
    let p = PlumeParams::for_class(FluxClass::HighFlux);
    let dims = ClipDims {
        height: 100,
        width: 64,
        frames: 4,
    };
    let e = generate_clip(&p, &traits(), dims, &Rng::new(0)).unwrap_err();
    assert!(matches!(e, trace_core::Error::Geometry(_)));
}

fn quantile(v: &mut [f32], q: f64) -> f32 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn gas_is_informative_but_overlapping() {
    let mut plume = Vec::new();
    let mut bg = Vec::new();
    let dims = small_dims();
    for i in 0..100u64 {
        let class = FluxClass::ALL[(i % 3) as usize];
        let mut r = Rng::new(i).child("p");
        let t = AnimalTraits::draw(&mut r);
        let p = jittered_params(class, &t, &mut r);
        let (_, g, m) = generate_clip(&p, &t, dims, &Rng::new(i)).unwrap();
        for (&gv, &mv) in g.data().iter().zip(m.data()) {
            if mv > 0.5 {
                plume.push(gv)
            } else {
                bg.push(gv)
            }
        }
    }
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    assert!(mean(&plume) > mean(&bg));
    assert!(quantile(&mut plume, 0.1) < quantile(&mut bg, 0.9));
}

#[test]
fn amplitude_orders_plume_area() {
    let mut area = [0.0f64; 3];
    for i in 0..30u64 {
        for class in FluxClass::ALL {
            let mut r = Rng::new(i).child("p");
            let t = AnimalTraits::draw(&mut r);
            let p = jittered_params(class, &t, &mut r);
            let (_, _, m) = generate_clip(&p, &t, small_dims(), &Rng::new(i)).unwrap();
            area[class.index()] += m.sum() as f64;
        }
    }
    assert!(area[0] > area[1] && area[1] > area[2], "{area:?}");
}

#[test]
fn mask_is_the_thresholded_clean_field() {
    let p = PlumeParams::for_class(FluxClass::Control);
    let rng = Rng::new(12);
    let dims = small_dims();
    let conc = plume::concentration(&p, dims, &mut rng.child("plume"));
    let (_, _, m) = generate_clip(&p, &traits(), dims, &rng).unwrap();
    let flat: Vec<f32> = conc
        .iter()
        .flatten()
        .map(|&c| if c > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    assert_eq!(m.data(), &flat[..]);
}

#[test]
fn reference_split_sizes_and_disjoint_animals() {
    let cfg = DatasetConfig {
        clips: 439,
        ..Default::default()
    };
    let plan = plan_dataset(&cfg).unwrap();
    let mut count: HashMap<Split, usize> = HashMap::new();
    let mut herd: HashMap<Split, HashSet<u32>> = HashMap::new();
    let mut labels: HashMap<Split, [usize; 3]> = HashMap::new();
    for s in &plan {
        *count.entry(s.split).or_default() += 1;
        herd.entry(s.split).or_default().insert(s.animal);
        labels.entry(s.split).or_default()[s.label.index()] += 1;
    }
    assert_eq!(count[&Split::Train], 302);
    assert_eq!(count[&Split::Val], 33);
    assert_eq!(count[&Split::Test], 104);
    assert_eq!(herd[&Split::Train].len(), 8);
    assert_eq!(herd[&Split::Val].len(), 1);
    assert_eq!(herd[&Split::Test].len(), 3);
    for a in &Split::ALL {
        for b in &Split::ALL {
            if a != b {
                assert!(herd[a].is_disjoint(&herd[b]));
            }
        }
        let l = labels[a];
        assert!(l.iter().max().unwrap() - l.iter().min().unwrap() <= 1, "{a:?} {l:?}");
    }
    let ids: HashSet<_> = plan.iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids.len(), 439);
}

#[test]
fn infeasible_stratification_is_rejected() {
    let mut cfg = DatasetConfig {
        clips: 4,
        ..Default::default()
    };
    assert_eq!(plan_dataset(&cfg).unwrap_err().exit_code(), 2);
    cfg.clips = 60;
    cfg.animals = 2;
    assert_eq!(plan_dataset(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn smoke_sized_dataset_is_feasible() {
    let cfg = DatasetConfig {
        clips: 24,
        animals: 4,
        dims: small_dims(),
        seed: 5,
    };
    let ds = make_dataset(&cfg).unwrap();
    assert_eq!(ds.len(), 24);
    assert!(!ds.val.is_empty() && !ds.test.is_empty());
}

#[test]
fn disk_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        clips: 12,
        animals: 3,
        dims: small_dims(),
        seed: 8,
    };
    write_dataset(dir.path(), &cfg).unwrap();
    let disk = load_dataset(dir.path()).unwrap();
    let mem = make_dataset(&cfg).unwrap();
    for split in Split::ALL {
        let (a, b) = (disk.split(split), mem.split(split));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.id, x.animal, x.label), (&y.id, y.animal, y.label));
            assert!(x.frames.bitwise_eq(&y.frames));
            assert!(x.gas.bitwise_eq(&y.gas));
            assert!(x.masks.bitwise_eq(&y.masks));
        }
    }
    let clip = &mem.train[0];
    let other = dir.path().join("copy");
    write_clip(&other, clip).unwrap();
    assert!(read_clip(&other).unwrap().gas.bitwise_eq(&clip.gas));
    let text = std::fs::read_to_string(dir.path().join(&clip.id).join("clip.txt")).unwrap();
    assert!(text.starts_with(&format!("label={}\n", clip.label.name())));
}

#[test]
fn bimodal_blocks_segment_exactly() {
    let (w, h) = (8, 8);
    let img: Vec<f32> = (0..64).map(|i| if (i % w) >= 4 { 0.9 } else { 0.1 }).collect();
    let m = otsu_segment(&img, w, h);
    let want: Vec<u8> = (0..64).map(|i| ((i % w) >= 4) as u8).collect();
    assert_eq!(m, want);
    let _ = h;
}

/// Between-class variance at every threshold, computed pixel by pixel.
fn otsu_oracle(img: &[f32]) -> usize {
    let bins: Vec<usize> = img.iter().map(|&v| ((v * 256.0) as usize).min(255)).collect();
    let mut best = (-1.0, 0);
    for t in 0..255 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo = bins.iter().filter(|&&b| b <= t).map(|&b| b as f64).collect();
            let hi = bins.iter().filter(|&&b| b > t).map(|&b| b as f64).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let n = bins.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let v = w0 * w1 * (m0 - m1).powi(2);
        if v > best.0 * (1.0 + 1e-12) {
            best = (v, t);
        }
    }
    best.1
}

#[test]
fn hand_case_matches_exhaustive_scan() {
    let img = [
        0.05, 0.1, 0.12, 0.8, 0.07, 0.11, 0.75, 0.85, 0.09, 0.6, 0.9, 0.95, 0.3, 0.7, 0.88, 0.92f32,
    ];
    assert_eq!(otsu_threshold(&img), Some(otsu_oracle(&img)));
}

proptest! {
    #[test]
    fn otsu_matches_exhaustive_scan(v in proptest::collection::vec(0.0f32..1.0, 2..60)) {
        let distinct: HashSet<usize> = v.iter().map(|&x| ((x * 256.0) as usize).min(255)).collect();
        prop_assume!(distinct.len() >= 2);
        prop_assert_eq!(otsu_threshold(&v), Some(otsu_oracle(&v)));
    }

    #[test]
    fn opening_is_anti_extensive(bits in proptest::collection::vec(0u8..2, 36)) {
        let o = open3(&bits, 6, 6);
        prop_assert!(o.iter().zip(&bits).all(|(&a, &b)| a <= b));
    }
}

#[test]
fn isolated_pixel_does_not_survive() {
    let mut img = vec![0.1f32; 100];
    img[55] = 0.9;
    for i in 0..30 {
        img[i] = 0.9;
    }
    let m = otsu_segment(&img, 10, 10);
    assert_eq!(m[55], 0);
    assert!(m[..20].iter().all(|&v| v == 1));
}

#[test]
fn constant_clip_features() {
    let g = Tensor::full(&[16, 1, 4, 4], 0.3f32);
    let f = psi_stats_features(&g);
    assert!((f[0] - 0.3).abs() < 1e-7);
    assert!(f[1].abs() < 1e-12);
    assert_eq!(f[2], 0.0);
}

#[test]
fn breathing_rate_bin() {
    let g = Tensor::from_fn(&[16, 1, 2, 2], |i| {
        let t = (i / 4) as f64;
        (0.5 + 0.2 * (2.0 * std::f64::consts::PI * t / 8.0).sin()) as f32
    });
    assert_eq!(psi_stats_features(&g)[2], 2.0);
}

#[test]
fn baseline_learns_separable_features() {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30 {
        let l = i % 3;
        feats.push([l as f64 + 0.01 * i as f64, 0.0, 1.0]);
        labels.push(l);
    }
    let cfg = BaselineConfig {
        steps: 300,
        ..Default::default()
    };
    let b = PsiStatsBaseline::fit(&feats, &labels, cfg).unwrap();
    let probs = b.predict_proba(&feats).unwrap();
    for (p, &l) in probs.iter().zip(&labels) {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p[l] > 0.5);
    }
}
