use super::EvalError;
use crate::scalar::Real;
use crate::types::{
    CameraIntrinsics, CandidateMask, DepthImage, MaskSource, ObjectModel, OracleCoordinates, Pixel,
    Pose, SceneBundle,
};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Source id of generated masks.
pub const SYNTH_SOURCE: &str = "synth";

#[derive(Clone, Debug)]
pub struct SynthSceneSpec<T: Real> {
    pub scene_id: String,
    pub object_id: String,
    pub model: ObjectModel<T>,
    /// Model-to-camera poses of the rendered instances.
    pub gt_poses: Vec<Pose<T>>,
    /// Fraction of each instance mask removed by a directional bite.
    pub occlusion_fraction: f64,
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise_sigma: f64,
    /// Outlier masks per instance (rounded up).
    pub outlier_mask_fraction: f64,
    pub outlier_confidence: f64,
    pub camera: CameraIntrinsics<T>,
    /// Depth of a fronto-parallel background plane; `None` leaves the
    /// background invalid (depth 0).
    pub background_depth: Option<f64>,
    pub seed: u64,
}

impl<T: Real> SynthSceneSpec<T> {
    pub fn new(
        model: ObjectModel<T>,
        gt_poses: Vec<Pose<T>>,
        camera: CameraIntrinsics<T>,
        seed: u64,
    ) -> Self {
        Self {
            scene_id: format!("synth-{seed}"),
            object_id: "obj".into(),
            model,
            gt_poses,
            occlusion_fraction: 0.0,
            depth_noise_sigma: 0.0,
            outlier_mask_fraction: 0.0,
            outlier_confidence: 0.2,
            camera,
            background_depth: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance<T: Real> {
    pub object_id: String,
    pub pose: Pose<T>,
    /// Flat index of the instance's mask in the scene.
    pub mask_ref: usize,
    /// Rendered pixels before the occlusion bite.
    pub full_area: usize,
    /// Pixels left in the emitted mask.
    pub visible_area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthGroundTruth<T: Real> {
    pub scene_id: String,
    pub instances: Vec<GtInstance<T>>,
    /// Flat indices of background outlier masks.
    pub outlier_masks: Vec<usize>,
}

/// Nearest-surface render: per pixel depth, instance index and model
/// point.
struct Render<T: Real> {
    depth: Vec<T>,
    instance: Vec<Option<usize>>,
    model_point: Vec<Point3<T>>,
}

/// Exact triangle rasterization: each pixel center inside a projected
/// triangle takes the depth of the ray-plane intersection.
fn rasterize<T: Real>(
    model: &ObjectModel<T>,
    poses: &[Pose<T>],
    k: &CameraIntrinsics<T>,
) -> Result<Render<T>, EvalError> {
    let (w, h) = (k.width, k.height);
    let mut r = Render {
        depth: vec![T::lit(f64::INFINITY); w * h],
        instance: vec![None; w * h],
        model_point: vec![Point3::origin(); w * h],
    };
    let near = T::lit(1e-6);
    for (inst, pose) in poses.iter().enumerate() {
        let cam: Vec<Point3<T>> = model
            .vertices()
            .iter()
            .map(|v| pose.transform_point(v))
            .collect();
        if cam.iter().any(|p| p.z <= near) {
            return Err(EvalError::InstanceOutOfFrame(inst));
        }
        let inv = pose.inverse();
        let mut covered = 0usize;
        for tri in model.triangles() {
            let p = [cam[tri[0]], cam[tri[1]], cam[tri[2]]];
            let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let uv: Vec<(f64, f64)> = p
                .iter()
                .map(|q| {
                    let s = k.project(q).expect("vertex in front of camera");
                    (s.x.as_f64(), s.y.as_f64())
                })
                .collect();
            let area = (uv[1].0 - uv[0].0) * (uv[2].1 - uv[0].1)
                - (uv[2].0 - uv[0].0) * (uv[1].1 - uv[0].1);
            if area.abs() < 1e-12 {
                continue;
            }
            let umin = uv
                .iter()
                .map(|c| c.0)
                .fold(f64::INFINITY, f64::min)
                .ceil()
                .max(0.0) as usize;
            let vmin = uv
                .iter()
                .map(|c| c.1)
                .fold(f64::INFINITY, f64::min)
                .ceil()
                .max(0.0) as usize;
            let umax = uv
                .iter()
                .map(|c| c.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor();
            let vmax = uv
                .iter()
                .map(|c| c.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .floor();
            if umax < 0.0 || vmax < 0.0 {
                continue;
            }
            let (umax, vmax) = ((umax as usize).min(w - 1), (vmax as usize).min(h - 1));
            for v in vmin..=vmax {
                for u in umin..=umax {
                    let (x, y) = (u as f64, v as f64);
                    let e = |a: (f64, f64), b: (f64, f64)| {
                        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                    };
                    let (e0, e1, e2) = (e(uv[0], uv[1]), e(uv[1], uv[2]), e(uv[2], uv[0]));
                    let inside = if area > 0.0 {
                        e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
                    } else {
                        e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
                    };
                    if !inside {
                        continue;
                    }
                    let ray = Vector3::new(
                        (T::lit(x) - k.cx) / k.fx,
                        (T::lit(y) - k.cy) / k.fy,
                        T::one(),
                    );
                    let denom = n.dot(&ray);
                    if denom.abs() <= T::lit(1e-15) * n.norm() {
                        continue;
                    }
                    let z = n.dot(&p[0].coords) / denom;
                    let cell = v * w + u;
                    if z > near && z < r.depth[cell] {
                        r.depth[cell] = z;
                        r.instance[cell] = Some(inst);
                        r.model_point[cell] = inv.transform_point(&Point3::from(ray * z));
                        covered += 1;
                    }
                }
            }
        }
        if covered == 0 {
            return Err(EvalError::InstanceOutOfFrame(inst));
        }
    }
    Ok(r)
}

/// Remove the `fraction` of `pixels` lying furthest along `dir`.
fn bite(pixels: &mut Vec<Pixel>, fraction: f64, dir: (f64, f64)) {
    let remove = (fraction * pixels.len() as f64).round() as usize;
    if remove == 0 {
        return;
    }
    let key = |p: &Pixel| p.u as f64 * dir.0 + p.v as f64 * dir.1;
    pixels.sort_by(|a, b| key(b).total_cmp(&key(a)).then((a.v, a.u).cmp(&(b.v, b.u))));
    pixels.drain(..remove.min(pixels.len()));
}

fn bitmap(w: usize, h: usize, pixels: &[Pixel]) -> Vec<bool> {
    let mut b = vec![false; w * h];
    for p in pixels {
        b[p.v * w + p.u] = true;
    }
    b
}

/// Render a scene with known ground truth.
///
/// Instances are rasterized exactly (nearest surface wins), Gaussian
/// depth noise is added, and each instance mask loses `occlusion_fraction`
/// of its pixels on one side (random direction) while its depth stays.
/// Instance masks carry confidence `1 - occlusion_fraction`; outlier
/// masks are background rectangles at `outlier_confidence`.
pub fn generate_scene<T: Real>(
    spec: &SynthSceneSpec<T>,
) -> Result<(SceneBundle<T>, SynthGroundTruth<T>), EvalError> {
    if spec.gt_poses.is_empty() {
        return Err(EvalError::InvalidSpec("no instances".into()));
    }
    if !(0.0..1.0).contains(&spec.occlusion_fraction) {
        return Err(EvalError::InvalidSpec(format!(
            "occlusion {} outside [0, 1)",
            spec.occlusion_fraction
        )));
    }
    let k = &spec.camera;
    let (w, h) = (k.width, k.height);
    let render = rasterize(&spec.model, &spec.gt_poses, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.depth_noise_sigma.max(0.0))
        .map_err(|e| EvalError::InvalidSpec(e.to_string()))?;
    let mut depth = vec![T::zero(); w * h];
    let mut coords = vec![None; w * h];
    for i in 0..w * h {
        let z = match render.instance[i] {
            Some(_) => {
                coords[i] = Some((spec.object_id.clone(), render.model_point[i]));
                render.depth[i]
            }
            None => match spec.background_depth {
                Some(b) => T::lit(b),
                None => continue,
            },
        };
        let dz = if spec.depth_noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        depth[i] = (z + T::lit(dz)).max(T::zero());
    }

    let mut per_instance: Vec<Vec<Pixel>> = vec![Vec::new(); spec.gt_poses.len()];
    for v in 0..h {
        for u in 0..w {
            if let Some(inst) = render.instance[v * w + u] {
                per_instance[inst].push(Pixel::new(u, v));
            }
        }
    }
    let confidence = 1.0 - spec.occlusion_fraction;
    let mut masks = Vec::new();
    let mut instances = Vec::new();
    for (inst, mut pixels) in per_instance.into_iter().enumerate() {
        let full_area = pixels.len();
        if full_area == 0 {
            return Err(EvalError::InstanceOutOfFrame(inst));
        }
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        bite(
            &mut pixels,
            spec.occlusion_fraction,
            (angle.cos(), angle.sin()),
        );
        instances.push(GtInstance {
            object_id: spec.object_id.clone(),
            pose: spec.gt_poses[inst],
            mask_ref: masks.len(),
            full_area,
            visible_area: pixels.len(),
        });
        masks.push(CandidateMask::new(
            w,
            h,
            bitmap(w, h, &pixels),
            confidence,
            SYNTH_SOURCE,
            &spec.object_id,
        )?);
    }

    let n_outliers = (spec.outlier_mask_fraction * spec.gt_poses.len() as f64).ceil() as usize;
    let side = {
        let mean_area =
            instances.iter().map(|i| i.full_area).sum::<usize>() as f64 / instances.len() as f64;
        (mean_area.sqrt().round() as usize).clamp(4, w.min(h) / 2)
    };
    let mut outlier_masks = Vec::new();
    for _ in 0..n_outliers {
        // Rectangle placed away from rendered instances where possible.
        let mut best: Option<(usize, usize, usize)> = None;
        for _ in 0..64 {
            let u0 = rng.random_range(0..=w - side);
            let v0 = rng.random_range(0..=h - side);
            let overlap = (v0..v0 + side)
                .flat_map(|v| (u0..u0 + side).map(move |u| (u, v)))
                .filter(|&(u, v)| render.instance[v * w + u].is_some())
                .count();
            if best.is_none_or(|b| overlap < b.2) {
                best = Some((u0, v0, overlap));
            }
            if overlap == 0 {
                break;
            }
        }
        let (u0, v0, _) = best.expect("at least one placement");
        let pixels: Vec<Pixel> = (v0..v0 + side)
            .flat_map(|v| (u0..u0 + side).map(move |u| Pixel::new(u, v)))
            .filter(|p| render.instance[p.v * w + p.u].is_none())
            .collect();
        outlier_masks.push(masks.len());
        masks.push(CandidateMask::new(
            w,
            h,
            bitmap(w, h, &pixels),
            spec.outlier_confidence,
            SYNTH_SOURCE,
            &spec.object_id,
        )?);
    }

    let mut scene = SceneBundle::new(
        spec.scene_id.clone(),
        DepthImage::new(w, h, depth)?,
        *k,
        vec![MaskSource {
            source_id: SYNTH_SOURCE.into(),
            masks,
        }],
    )?;
    scene.oracle = Some(OracleCoordinates {
        width: w,
        height: h,
        coords,
    });
    Ok((
        scene,
        SynthGroundTruth {
            scene_id: spec.scene_id.clone(),
            instances,
            outlier_masks,
        },
    ))
}
