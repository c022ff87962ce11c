use rcdpt::data::{
    flip_horizontal, gen_scene, read_sample, sample_seed, scene_dir, write_dataset, write_sample, Dataset,
    DatasetSpec, SceneConfig,
};
use rcdpt::{Error, Tensor};

fn cfg() -> SceneConfig {
    SceneConfig::default()
}

fn nonzero_fraction(t: &Tensor<f32>) -> f64 {
    t.data().iter().filter(|&&v| v != 0.0).count() as f64 / t.numel() as f64
}

/// Least-squares fit of `y` on `x`; returns R².
fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (my + slope * (a - mx))).powi(2)).sum();
    1.0 - ss_res / syy
}

/// `|∂/∂u| + |∂/∂v|` with forward differences, channel-averaged.
fn grad_mag(t: &Tensor<f32>) -> Vec<f64> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let c = t.numel() / (h * w);
    let at = |y: usize, x: usize, k: usize| t.data()[(y * w + x) * c + k] as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut g = 0.0;
            for k in 0..c {
                if x + 1 < w {
                    g += (at(y, x + 1, k) - at(y, x, k)).abs();
                }
                if y + 1 < h {
                    g += (at(y + 1, x, k) - at(y, x, k)).abs();
                }
            }
            out[y * w + x] = g / c as f64;
        }
    }
    out
}

fn top_decile(v: &[f64]) -> Vec<bool> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let th = s[(s.len() * 9) / 10];
    v.iter().map(|&x| x >= th && x > 0.0).collect()
}

#[test]
fn same_seed_is_bit_identical() {
    let a = gen_scene(11, 48, 48, &cfg()).unwrap();
    let b = gen_scene(11, 48, 48, &cfg()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_scene(12, 48, 48, &cfg()).unwrap());
}

#[test]
fn seed_seven_lidar_density() {
    let s = gen_scene(7, 48, 48, &cfg()).unwrap();
    let f = nonzero_fraction(&s.lidar);
    assert!((0.02..=0.08).contains(&f), "{f}");
}

#[test]
fn densities_and_ranges_over_many_seeds() {
    for seed in 0..200 {
        for (h, w) in [(48, 48), (32, 64), (16, 16)] {
            let s = gen_scene(seed, h, w, &cfg()).unwrap();
            let lf = nonzero_fraction(&s.lidar);
            assert!((0.02..=0.08).contains(&lf), "seed {seed} {h}x{w}: lidar {lf}");
            let r0: Vec<f32> = s.radar.data().iter().step_by(3).copied().collect();
            let rf = r0.iter().filter(|&&v| v != 0.0).count() as f64 / (h * w) as f64;
            assert!((0.001..=0.01).contains(&rf), "seed {seed} {h}x{w}: radar {rf}");
            for t in [&s.lidar, &s.depth, &s.radar] {
                assert!(t.data().iter().all(|&v| v == 0.0 || (v > 0.0 && v <= 80.0)));
            }
            assert!(s.depth.data().iter().all(|&v| v > 0.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // lidar is noiseless
            for (l, d) in s.lidar.data().iter().zip(s.depth.data()) {
                assert!(*l == 0.0 || l == d);
            }
            // raw radar hits land on surfaces, never on the sky
            for (i, &v) in r0.iter().enumerate() {
                if v != 0.0 {
                    assert!(s.depth.data()[i] < 80.0);
                }
            }
        }
    }
}

#[test]
fn radar_explains_depth() {
    for seed in 0..200 {
        let s = gen_scene(seed, 48, 48, &cfg()).unwrap();
        let (mut x, mut y) = (vec![], vec![]);
        for i in 0..48 * 48 {
            let r = s.radar.data()[i * 3];
            if r != 0.0 {
                x.push(r as f64);
                y.push(s.depth.data()[i] as f64);
            }
        }
        let r2 = r_squared(&x, &y);
        assert!(r2 > 0.9, "seed {seed}: R² {r2}");
    }
}

#[test]
fn radar_noise_matches_configured_sigma() {
    let mut res = vec![];
    for seed in 0..300 {
        let s = gen_scene(seed, 48, 48, &cfg()).unwrap();
        for i in 0..48 * 48 {
            let r = s.radar.data()[i * 3];
            let d = s.depth.data()[i];
            // skip hits clamped at the range limits
            if r != 0.0 && d > 2.0 && d < 79.0 {
                res.push((r - d) as f64);
            }
        }
    }
    let n = res.len() as f64;
    let mean = res.iter().sum::<f64>() / n;
    let sd = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(res.len() > 1000);
    assert!(mean.abs() < 0.05, "{mean}");
    assert!((sd - 0.5).abs() < 0.05, "{sd}");
}

#[test]
fn radar_channels_extend_upwards() {
    let s = gen_scene(3, 48, 48, &cfg()).unwrap();
    let count = |c: usize| s.radar.data().iter().skip(c).step_by(3).filter(|&&v| v != 0.0).count();
    assert!(count(0) < count(1) && count(1) < count(2));
    // every upper-channel cell sits at or above a raw hit in its column
    for y in 0..48 {
        for x in 0..48 {
            if s.radar.at(&[y, x, 2]) != 0.0 {
                assert!((y..48).any(|yy| s.radar.at(&[yy, x, 0]) != 0.0));
            }
        }
    }
}

#[test]
fn depth_edges_colocate_with_image_edges() {
    for seed in 0..100 {
        let (h, w) = (48, 48);
        let s = gen_scene(seed, h, w, &cfg()).unwrap();
        let de = top_decile(&grad_mag(&s.depth));
        let ie = top_decile(&grad_mag(&s.image));
        let (mut total, mut near) = (0, 0);
        for y in 0..h {
            for x in 0..w {
                if !de[y * w + x] {
                    continue;
                }
                total += 1;
                let hit = (y.saturating_sub(1)..(y + 2).min(h))
                    .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| ie[yy * w + xx]));
                near += hit as usize;
            }
        }
        let frac = near as f64 / total as f64;
        assert!(frac > 0.7, "seed {seed}: {frac}");
    }
}

#[test]
fn sample_round_trip_and_flip() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_scene(5, 32, 32, &cfg()).unwrap();
    let p = scene_dir(dir.path(), 5);
    write_sample(&p, &s).unwrap();
    assert_eq!(read_sample(&p).unwrap(), s);
    assert_eq!(s.flipped().flipped(), s);
    assert_eq!(s.flipped().depth, flip_horizontal(&s.depth));
}

#[test]
fn corrupt_and_missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let s = gen_scene(1, 16, 16, &cfg()).unwrap();
    let p = scene_dir(dir.path(), 0);
    write_sample(&p, &s).unwrap();
    let f = p.join("depth.rten");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(read_sample(&p), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&f, &bad).unwrap();
    assert!(matches!(read_sample(&p), Err(Error::Format { .. })));
    std::fs::remove_file(&f).unwrap();
    match read_sample(&p) {
        Err(Error::Io { path, .. }) => assert_eq!(path, f),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_directory_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.iter().count(), 0);
    assert!(ds.manifest().unwrap().is_none());
}

#[test]
fn dataset_write_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        count: 3,
        height: 16,
        width: 24,
        seed: 9,
        scene: cfg(),
    };
    write_dataset(dir.path(), &spec).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.len(), 3);
    let all = ds.load_all().unwrap();
    for (i, s) in all.iter().enumerate() {
        assert_eq!(*s, gen_scene(sample_seed(9, i), 16, 24, &cfg()).unwrap());
    }
    let m = ds.manifest().unwrap().unwrap();
    assert_eq!(m.get("count"), Some("3"));
    assert_eq!(m.get("seed"), Some("9"));
    assert_eq!(m.get("generator_version"), Some("1"));
}
