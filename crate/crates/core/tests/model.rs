use rcdpt::data::{gen_scene, SceneConfig};
use rcdpt::harness::gradcheck::gradcheck_model_config;
use rcdpt::kv::KeyValues;
use rcdpt::{DepthModel, FusionMode, ModelConfig};

fn scene(seed: u64, h: usize, w: usize) -> rcdpt::data::SceneSample {
    gen_scene(seed, h, w, &SceneConfig::default()).unwrap()
}

#[test]
fn every_mode_predicts_a_full_resolution_map() {
    let s = scene(1, 48, 48);
    for mode in FusionMode::ALL {
        let m = DepthModel::<f32>::new(&ModelConfig::toy(mode), 0).unwrap();
        let p = m.predict(&s.image, &s.radar).unwrap();
        assert_eq!(p.shape(), &[48, 48], "{mode}");
        assert!(p.data().iter().all(|d| d.is_finite() && *d >= 0.0), "{mode}");
    }
}

#[test]
fn topologies_have_their_own_parameters() {
    let params = |mode| {
        let m = DepthModel::<f32>::new(&ModelConfig::toy(mode), 0).unwrap();
        m.params.names().to_vec()
    };
    let has = |names: &[String], prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    let img = params(FusionMode::ImageOnly);
    assert!(!has(&img, "radar_"));

    let early = DepthModel::<f32>::new(&ModelConfig::toy(FusionMode::Early), 0).unwrap();
    assert_eq!(early.params.by_name("image_encoder.patch_embed.weight").unwrap().shape(), &[8 * 8 * 6, 64]);

    let late = params(FusionMode::Late);
    assert!(has(&late, "radar_encoder.") && has(&late, "radar_decoder.") && has(&late, "late_reduce."));

    let re = DepthModel::<f32>::new(&ModelConfig::toy(FusionMode::RcdptReassemble), 0).unwrap();
    assert!(re.params.by_name("radar_encoder.patch_embed.weight").is_some());
    assert!(re.params.by_name("radar_decoder.blocks.0.rcu1.conv1.weight").is_none());
    assert_eq!(re.params.by_name("reassemble.0.read.fc1.weight").unwrap().shape(), &[128, 64]);
}

#[test]
fn shared_names_start_identical_across_modes() {
    let a = DepthModel::<f32>::new(&ModelConfig::toy(FusionMode::ImageOnly), 5).unwrap();
    let b = DepthModel::<f32>::new(&ModelConfig::toy(FusionMode::RcdptReassemble), 5).unwrap();
    let mut shared = 0;
    for (name, t) in a.params.iter() {
        if let Some(u) = b.params.by_name(name).filter(|u| u.shape() == t.shape()) {
            assert_eq!(t.data(), u.data(), "{name}");
            shared += 1;
        }
    }
    assert!(shared > 20);
}

#[test]
fn construction_is_deterministic_per_seed() {
    let cfg = ModelConfig::toy(FusionMode::Late);
    let a = DepthModel::<f32>::new(&cfg, 3).unwrap();
    let b = DepthModel::<f32>::new(&cfg, 3).unwrap();
    let c = DepthModel::<f32>::new(&cfg, 4).unwrap();
    let same = |x: &DepthModel, y: &DepthModel| x.params.iter().zip(y.params.iter()).all(|((_, p), (_, q))| p.data() == q.data());
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let m = DepthModel::<f32>::new(&ModelConfig::toy(FusionMode::RcdptReassemble), 0).unwrap();
    let small = scene(0, 32, 32);
    assert!(m.predict(&small.image, &small.radar).is_err());
    let s = scene(0, 48, 48);
    let radar2 = rcdpt::Tensor::<f32>::zeros(&[48, 48, 2]);
    assert!(m.predict(&s.image, &radar2).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let s = scene(2, 16, 16);
    for mode in FusionMode::ALL {
        let m = DepthModel::<f32>::new(&gradcheck_model_config(mode), 9).unwrap();
        let path = dir.path().join(mode.to_string());
        m.save(&path).unwrap();
        let back = DepthModel::load(&path).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.predict(&s.image, &s.radar).unwrap(), m.predict(&s.image, &s.radar).unwrap());
    }
}

#[test]
fn checkpoint_with_missing_tensor_fails() {
    let dir = tempfile::tempdir().unwrap();
    let m = DepthModel::<f32>::new(&gradcheck_model_config(FusionMode::Early), 0).unwrap();
    m.save(dir.path()).unwrap();
    let victim = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "rten"))
        .unwrap();
    std::fs::remove_file(victim).unwrap();
    assert!(DepthModel::load(dir.path()).is_err());
}

#[test]
fn config_survives_key_value_round_trip() {
    for mode in FusionMode::ALL {
        let cfg = ModelConfig::paper(mode).with_input(64, 96);
        let text = cfg.to_kv().to_string();
        let back = ModelConfig::from_kv(&KeyValues::parse(&text, std::path::Path::new("cfg")).unwrap(), &ModelConfig::toy(FusionMode::ImageOnly)).unwrap();
        assert_eq!(back, cfg);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(ModelConfig::toy(FusionMode::Early).with_input(50, 48).validate().is_err());
    let mut c = ModelConfig::toy(FusionMode::Late);
    c.radar_channels = 0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy(FusionMode::Late);
    c.reassemble.scales.pop();
    assert!(c.validate().is_err());
}
