#![allow(dead_code)]

use nalgebra::{UnitQuaternion, Vector3};
use pose_forge::evalkit::{generate_scene, SynthGroundTruth, SynthSceneSpec};
use pose_forge::features::{
    build_query_features, template_views, DescriptorProviderSpec, GeoScaleConfig, ProviderKind,
    Providers, QueryFeatureConfig,
};
use pose_forge::{CameraIntrinsics, ObjectModel, Pose, PreparedObject, SceneBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn camera() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(550.0, 550.0, 160.0, 120.0, 320, 240).unwrap()
}

pub fn oracle_spec() -> DescriptorProviderSpec {
    DescriptorProviderSpec::new(ProviderKind::Oracle)
}

pub fn synthetic_spec() -> DescriptorProviderSpec {
    DescriptorProviderSpec::new(ProviderKind::SyntheticGeometric)
}

pub fn prepare(
    object_id: &str,
    model: &ObjectModel<f64>,
    spec: DescriptorProviderSpec,
    seed: u64,
) -> PreparedObject<f64> {
    let providers = Providers::from_spec(&spec).unwrap();
    let cfg = QueryFeatureConfig {
        seed,
        ..QueryFeatureConfig::default()
    };
    let views = template_views(model, cfg.n_views, cfg.n_points).unwrap();
    let q = build_query_features(model, &providers, &views, &cfg).unwrap();
    PreparedObject::new(
        object_id,
        model.clone(),
        q.cloud,
        q.pca,
        spec,
        GeoScaleConfig::default(),
    )
    .unwrap()
}

pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

/// Single instance in front of the camera, fully inside the image.
pub fn random_pose(rng: &mut impl Rng) -> Pose<f64> {
    let t = Vector3::new(
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.02..0.02),
        rng.random_range(0.55..0.7),
    );
    Pose::from_parts(random_rotation(rng), t)
}

pub fn single_scene(
    model: &ObjectModel<f64>,
    seed: u64,
    occlusion: f64,
    noise_sigma: f64,
) -> (SceneBundle<f64>, SynthGroundTruth<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = random_pose(&mut rng);
    let mut spec = SynthSceneSpec::new(model.clone(), vec![gt], camera(), seed);
    spec.occlusion_fraction = occlusion;
    spec.depth_noise_sigma = noise_sigma;
    spec.object_id = "obj".into();
    generate_scene(&spec).unwrap()
}

/// Cheaper query side for integration tests that do not check accuracy.
pub fn prepare_small(
    object_id: &str,
    model: &ObjectModel<f64>,
    spec: DescriptorProviderSpec,
) -> PreparedObject<f64> {
    let providers = Providers::from_spec(&spec).unwrap();
    let cfg = QueryFeatureConfig {
        n_points: 1500,
        n_views: 42,
        min_views: 5,
        ..QueryFeatureConfig::default()
    };
    let views = template_views(model, cfg.n_views, cfg.n_points).unwrap();
    let q = build_query_features(model, &providers, &views, &cfg).unwrap();
    PreparedObject::new(
        object_id,
        model.clone(),
        q.cloud,
        q.pca,
        spec,
        GeoScaleConfig::default(),
    )
    .unwrap()
}

/// Several instances side by side in a wider image, plus background
/// masks at confidence 0.39.
pub fn bin_scene(
    model: &ObjectModel<f64>,
    seed: u64,
    n: usize,
) -> (SceneBundle<f64>, SynthGroundTruth<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = (0..n)
        .map(|i| {
            let x = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.1;
            Pose::from_parts(random_rotation(&mut rng), Vector3::new(x, 0.0, 0.65))
        })
        .collect();
    let camera = CameraIntrinsics::new(550.0, 550.0, 240.0, 120.0, 480, 240).unwrap();
    let mut spec = SynthSceneSpec::new(model.clone(), poses, camera, seed);
    spec.object_id = "obj".into();
    spec.background_depth = Some(0.9);
    spec.outlier_mask_fraction = 1.0;
    spec.outlier_confidence = 0.39;
    generate_scene(&spec).unwrap()
}
