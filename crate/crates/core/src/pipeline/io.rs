//! Scene directories, PLY models, prepared query features and the pose CSV.

use super::{EstimateResult, PipelineError, PreparedObject};
use crate::evalkit::GtRecord;
use crate::features::{
    decode_feature_cloud, load_feature_cloud, save_feature_cloud, DescriptorProviderSpec,
    GeoScaleConfig, PcaProjection, PcaRecord,
};
use crate::scalar::Real;
use crate::types::{
    max_pairwise_distance, CameraIntrinsics, CandidateMask, DepthImage, FeatureCloud, MaskSource,
    ObjectModel, OracleCoordinates, Pose, SceneBundle, TargetFeatureSource,
};
use image::{GrayImage, ImageBuffer, Luma};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

fn malformed(msg: impl Into<String>) -> PipelineError {
    PipelineError::MalformedScene(msg.into())
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self, PipelineError> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return Err(malformed(format!("unknown PLY type {s}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
enum PlyProperty {
    Scalar(PlyType, String),
    List(PlyType, PlyType, String),
}

#[derive(Clone, Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

enum PlyBody<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary(&'a [u8]),
}

impl PlyBody<'_> {
    fn value(&mut self, ty: PlyType) -> Result<f64, PipelineError> {
        match self {
            PlyBody::Ascii(tokens) => tokens
                .next()
                .ok_or_else(|| malformed("PLY body ends early"))?
                .parse::<f64>()
                .map_err(|e| malformed(format!("PLY value: {e}"))),
            PlyBody::Binary(bytes) => {
                let n = ty.size();
                if bytes.len() < n {
                    return Err(malformed("PLY body ends early"));
                }
                let (b, rest) = bytes.split_at(n);
                *bytes = rest;
                Ok(match ty {
                    PlyType::I8 => b[0] as i8 as f64,
                    PlyType::U8 => b[0] as f64,
                    PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                    PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
                    PlyType::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
                    PlyType::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
                    PlyType::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    PlyType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                })
            }
        }
    }
}

/// Vertex positions and triangle indices.
pub type Mesh<T> = (Vec<Point3<T>>, Vec<[usize; 3]>);

/// Vertices and triangles of a PLY mesh (ASCII or binary little endian).
/// Polygons are fan-triangulated; other elements are skipped.
pub fn parse_ply<T: Real>(bytes: &[u8]) -> Result<Mesh<T>, PipelineError> {
    let marker = b"end_header";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| malformed("PLY header has no end_header"))?;
    let mut body_start = pos + marker.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header =
        std::str::from_utf8(&bytes[..pos]).map_err(|_| malformed("PLY header is not UTF-8"))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(malformed("missing ply magic"));
    }
    let mut ascii = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", f, ..] => return Err(malformed(format!("unsupported PLY format {f}"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .props
                .push(PlyProperty::List(
                    PlyType::parse(ct)?,
                    PlyType::parse(it)?,
                    name.to_string(),
                )),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .props
                .push(PlyProperty::Scalar(PlyType::parse(ty)?, name.to_string())),
            _ => return Err(malformed(format!("unexpected PLY header line '{line}'"))),
        }
    }
    let ascii = ascii.ok_or_else(|| malformed("PLY format line missing"))?;
    let rest = &bytes[body_start..];
    let mut body = if ascii {
        PlyBody::Ascii(
            std::str::from_utf8(rest)
                .map_err(|_| malformed("ASCII PLY body is not UTF-8"))?
                .split_ascii_whitespace(),
        )
    } else {
        PlyBody::Binary(rest)
    };

    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        let xyz = |axis: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, PlyProperty::Scalar(_, n) if n == axis))
        };
        let (ix, iy, iz) = (xyz("x"), xyz("y"), xyz("z"));
        if el.name == "vertex" && (ix.is_none() || iy.is_none() || iz.is_none()) {
            return Err(malformed("vertex element lacks x, y or z"));
        }
        let mut scalars = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            let mut list: Vec<usize> = Vec::new();
            for (j, prop) in el.props.iter().enumerate() {
                match prop {
                    PlyProperty::Scalar(ty, _) => scalars[j] = body.value(*ty)?,
                    PlyProperty::List(ct, it, name) => {
                        let n = body.value(*ct)? as usize;
                        let is_index = name == "vertex_indices" || name == "vertex_index";
                        for _ in 0..n {
                            let v = body.value(*it)?;
                            if is_index {
                                if v < 0.0 {
                                    return Err(malformed("negative vertex index"));
                                }
                                list.push(v as usize);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Point3::new(
                    T::lit(scalars[ix.unwrap()]),
                    T::lit(scalars[iy.unwrap()]),
                    T::lit(scalars[iz.unwrap()]),
                ));
            } else if el.name == "face" {
                for w in 1..list.len().saturating_sub(1) {
                    triangles.push([list[0], list[w], list[w + 1]]);
                }
            }
        }
    }
    if let Some(t) = triangles
        .iter()
        .find(|t| t.iter().any(|&i| i >= vertices.len()))
    {
        return Err(malformed(format!(
            "face {t:?} indexes past {} vertices",
            vertices.len()
        )));
    }
    Ok((vertices, triangles))
}

/// Write a mesh as PLY with double-precision vertices.
pub fn write_ply<T: Real>(
    path: impl AsRef<Path>,
    model: &ObjectModel<T>,
    binary: bool,
) -> Result<(), PipelineError> {
    let mut out = Vec::new();
    writeln!(out, "ply")?;
    writeln!(
        out,
        "format {} 1.0",
        if binary {
            "binary_little_endian"
        } else {
            "ascii"
        }
    )?;
    writeln!(out, "element vertex {}", model.vertices().len())?;
    for a in ["x", "y", "z"] {
        writeln!(out, "property double {a}")?;
    }
    writeln!(out, "element face {}", model.triangles().len())?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    for v in model.vertices() {
        if binary {
            for c in v.coords.iter() {
                out.extend_from_slice(&c.as_f64().to_le_bytes());
            }
        } else {
            writeln!(out, "{} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64())?;
        }
    }
    for t in model.triangles() {
        if binary {
            out.push(3);
            for &i in t {
                out.extend_from_slice(&(i as i32).to_le_bytes());
            }
        } else {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------- models

/// Rigid transform as stored in JSON files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn new<T: Real>(pose: &Pose<T>) -> Self {
        Self {
            rotation: pose.rotation_row_major().map(|v| v.as_f64()),
            t: [pose.translation.x, pose.translation.y, pose.translation.z].map(|v| v.as_f64()),
        }
    }

    pub fn pose<T: Real>(&self) -> Result<Pose<T>, PipelineError> {
        Ok(Pose::from_row_major(
            &self.rotation.map(T::lit),
            &self.t.map(T::lit),
        )?)
    }
}

/// `models/<id>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub diameter_m: f64,
    #[serde(default)]
    pub symmetries: Vec<PoseRecord>,
}

/// Relative tolerance between the stored and recomputed diameter.
pub const DIAMETER_TOLERANCE: f64 = 0.01;

/// Load `<stem>.ply` together with the sibling `<stem>.json` if present.
/// A stored diameter must agree with the vertex set to 1%.
pub fn load_model<T: Real>(ply: impl AsRef<Path>) -> Result<ObjectModel<T>, PipelineError> {
    let ply = ply.as_ref();
    let (vertices, triangles) = parse_ply::<T>(&std::fs::read(ply)?)?;
    let meta_path = ply.with_extension("json");
    let mut symmetries = Vec::new();
    if meta_path.exists() {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let brute = max_pairwise_distance(&vertices).as_f64();
        if (meta.diameter_m - brute).abs() > DIAMETER_TOLERANCE * brute {
            return Err(malformed(format!(
                "{}: diameter_m {} differs from vertex diameter {brute}",
                meta_path.display(),
                meta.diameter_m
            )));
        }
        symmetries = meta
            .symmetries
            .iter()
            .map(|s| s.pose())
            .collect::<Result<_, _>>()?;
    }
    Ok(ObjectModel::new(vertices, triangles, symmetries)?)
}

/// Write `<stem>.ply` (ASCII) and `<stem>.json`.
pub fn save_model<T: Real>(
    ply: impl AsRef<Path>,
    model: &ObjectModel<T>,
) -> Result<(), PipelineError> {
    let ply = ply.as_ref();
    if let Some(dir) = ply.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_ply(ply, model, false)?;
    let meta = ModelMeta {
        diameter_m: model.diameter().as_f64(),
        symmetries: model.symmetries().iter().map(PoseRecord::new).collect(),
    };
    std::fs::write(
        ply.with_extension("json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------- prepared objects

/// Sidecar stored next to a query `.fcl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub object_id: String,
    pub diameter_m: f64,
    pub provider: DescriptorProviderSpec,
    pub geo: GeoScaleConfig,
    pub pca: PcaRecord,
}

pub fn sidecar_path(fcl: impl AsRef<Path>) -> PathBuf {
    fcl.as_ref().with_extension("json")
}

/// Write the query cloud and its sidecar.
pub fn save_prepared<T: Real>(
    fcl: impl AsRef<Path>,
    obj: &PreparedObject<T>,
) -> Result<(), PipelineError> {
    let fcl = fcl.as_ref();
    if let Some(dir) = fcl.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_feature_cloud(&obj.query, fcl)?;
    let meta = PreparedMeta {
        object_id: obj.object_id.clone(),
        diameter_m: obj.model.diameter().as_f64(),
        provider: obj.spec.clone(),
        geo: obj.geo.clone(),
        pca: obj.pca.to_serde(),
    };
    std::fs::write(sidecar_path(fcl), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Read a query cloud and sidecar; `model` must be the prepared model.
pub fn load_prepared<T: Real>(
    fcl: impl AsRef<Path>,
    model: ObjectModel<T>,
) -> Result<PreparedObject<T>, PipelineError> {
    let fcl = fcl.as_ref();
    let query = load_feature_cloud(fcl)?;
    let meta: PreparedMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(fcl))?)?;
    let d = model.diameter().as_f64();
    if (meta.diameter_m - d).abs() > DIAMETER_TOLERANCE * d {
        return Err(malformed(format!(
            "features prepared for diameter {} but model has {d}",
            meta.diameter_m
        )));
    }
    let pca = PcaProjection::from_serde(&meta.pca)?;
    Ok(PreparedObject::new(
        meta.object_id,
        model,
        query,
        pca,
        meta.provider,
        meta.geo,
    )?)
}

// ---------------------------------------------------------------- scenes

/// `camera.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

/// One entry of `masks/<source>/meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub file: String,
    pub confidence: f64,
    pub object_id: String,
}

/// Meters per stored depth unit used when writing scenes.
pub const DEFAULT_DEPTH_SCALE: f64 = 1e-4;

fn read_depth<T: Real>(dir: &Path, cam: &CameraRecord) -> Result<DepthImage<T>, PipelineError> {
    let path = ["depth.png", "depth.pgm"]
        .iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| malformed(format!("{}: no depth.png or depth.pgm", dir.display())))?;
    let img = image::open(&path)?;
    let raw = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        image::DynamicImage::ImageLuma8(_) => {
            return Err(malformed(format!(
                "{}: depth must be 16-bit",
                path.display()
            )))
        }
        other => other.to_luma16(),
    };
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let scale = T::lit(cam.depth_scale);
    let values = raw
        .pixels()
        .map(|p| T::lit(p.0[0] as f64) * scale)
        .collect();
    Ok(DepthImage::new(w, h, values)?)
}

fn write_depth<T: Real>(
    path: &Path,
    depth: &DepthImage<T>,
    scale: f64,
) -> Result<(), PipelineError> {
    let mut raw = Vec::with_capacity(depth.values().len());
    for &v in depth.values() {
        let q = (v.as_f64() / scale).round();
        if !(0.0..=65535.0).contains(&q) {
            return Err(malformed(format!(
                "depth {v} does not fit 16 bits at scale {scale}"
            )));
        }
        raw.push(q as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .ok_or_else(|| malformed("depth buffer size"))?;
    img.save(path)?;
    Ok(())
}

fn read_masks(dir: &Path, w: usize, h: usize) -> Result<Vec<MaskSource>, PipelineError> {
    let root = dir.join("masks");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut sources = Vec::with_capacity(names.len());
    for name in names {
        let sdir = root.join(&name);
        let records: Vec<MaskRecord> =
            serde_json::from_str(&std::fs::read_to_string(sdir.join("meta.json"))?)?;
        let mut masks = Vec::with_capacity(records.len());
        for r in records {
            let img = image::open(sdir.join(&r.file))?.to_luma8();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(malformed(format!(
                    "mask {name}/{} is {}x{}",
                    r.file,
                    img.width(),
                    img.height()
                )));
            }
            let bitmap = img.pixels().map(|p| p.0[0] != 0).collect();
            masks.push(CandidateMask::new(
                w,
                h,
                bitmap,
                r.confidence,
                name.clone(),
                r.object_id,
            )?);
        }
        sources.push(MaskSource {
            source_id: name,
            masks,
        });
    }
    Ok(sources)
}

/// Per-pixel model coordinates, stored as `oracle/<object_id>.fcl`:
/// points are model coordinates and the 2-d descriptor is `(u, v)`.
fn read_oracle<T: Real>(
    dir: &Path,
    w: usize,
    h: usize,
) -> Result<Option<OracleCoordinates<T>>, PipelineError> {
    let root = dir.join("oracle");
    if !root.exists() {
        return Ok(None);
    }
    let mut coords = vec![None; w * h];
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "fcl"))
        .collect();
    files.sort();
    for f in files {
        let id = f.file_stem().unwrap().to_string_lossy().into_owned();
        let fc: FeatureCloud<T> = decode_feature_cloud(&std::fs::read(&f)?)?;
        if fc.dim() != 2 {
            return Err(malformed(format!(
                "{}: oracle descriptors must be (u, v)",
                f.display()
            )));
        }
        for i in 0..fc.len() {
            let uv = fc.descriptor(i);
            let (u, v) = (uv[0].as_f64() as usize, uv[1].as_f64() as usize);
            if u >= w || v >= h {
                return Err(malformed(format!(
                    "{}: pixel ({u}, {v}) outside the image",
                    f.display()
                )));
            }
            coords[v * w + u] = Some((id.clone(), *fc.point(i)));
        }
    }
    Ok(Some(OracleCoordinates {
        width: w,
        height: h,
        coords,
    }))
}

fn write_oracle<T: Real>(dir: &Path, oracle: &OracleCoordinates<T>) -> Result<(), PipelineError> {
    let mut by_id: BTreeMap<&str, (Vec<Point3<T>>, Vec<T>)> = BTreeMap::new();
    for (i, c) in oracle.coords.iter().enumerate() {
        if let Some((id, p)) = c {
            let e = by_id.entry(id.as_str()).or_default();
            e.0.push(*p);
            e.1.push(T::from_count(i % oracle.width));
            e.1.push(T::from_count(i / oracle.width));
        }
    }
    let root = dir.join("oracle");
    std::fs::create_dir_all(&root)?;
    for (id, (pts, uv)) in by_id {
        save_feature_cloud(
            &FeatureCloud::new(pts, uv, 2)?,
            root.join(format!("{id}.fcl")),
        )?;
    }
    Ok(())
}

fn read_camera<T: Real>(dir: &Path) -> Result<(CameraRecord, CameraIntrinsics<T>), PipelineError> {
    let cam: CameraRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.join("camera.json"))?)?;
    if !(cam.depth_scale > 0.0) {
        return Err(malformed("depth_scale must be positive"));
    }
    let k = CameraIntrinsics::new(
        T::lit(cam.fx),
        T::lit(cam.fy),
        T::lit(cam.cx),
        T::lit(cam.cy),
        cam.width,
        cam.height,
    )?;
    Ok((cam, k))
}

/// Intrinsics from a scene directory's `camera.json`.
pub fn load_camera<T: Real>(dir: impl AsRef<Path>) -> Result<CameraIntrinsics<T>, PipelineError> {
    Ok(read_camera(dir.as_ref())?.1)
}

/// Load a scene directory. The scene id is the directory name.
pub fn load_scene<T: Real>(dir: impl AsRef<Path>) -> Result<SceneBundle<T>, PipelineError> {
    let dir = dir.as_ref();
    let (cam, k) = read_camera(dir)?;
    let depth = read_depth(dir, &cam)?;
    let sources = read_masks(dir, cam.width, cam.height)?;
    let scene_id = dir
        .canonicalize()?
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut scene = SceneBundle::new(scene_id, depth, k, sources)?;
    let targets = dir.join("features").join("targets");
    if targets.exists() {
        for e in std::fs::read_dir(&targets)? {
            let p = e?.path();
            let m = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok());
            if let (Some(m), true) = (m, p.extension().is_some_and(|e| e == "fcl")) {
                scene
                    .precomputed_target_features
                    .insert(m, TargetFeatureSource::File(p));
            }
        }
    }
    scene.oracle = read_oracle(dir, cam.width, cam.height)?;
    Ok(scene)
}

/// Write a scene directory (camera, depth, masks, oracle) readable by
/// [`load_scene`].
pub fn save_scene<T: Real>(
    dir: impl AsRef<Path>,
    scene: &SceneBundle<T>,
    depth_scale: f64,
) -> Result<(), PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let k = &scene.intrinsics;
    let cam = CameraRecord {
        fx: k.fx.as_f64(),
        fy: k.fy.as_f64(),
        cx: k.cx.as_f64(),
        cy: k.cy.as_f64(),
        width: k.width,
        height: k.height,
        depth_scale,
    };
    std::fs::write(dir.join("camera.json"), serde_json::to_string_pretty(&cam)?)?;
    write_depth(&dir.join("depth.png"), &scene.depth, depth_scale)?;
    for src in &scene.sources {
        let sdir = dir.join("masks").join(&src.source_id);
        std::fs::create_dir_all(&sdir)?;
        let mut records = Vec::with_capacity(src.masks.len());
        for (i, m) in src.masks.iter().enumerate() {
            let file = format!("{i:04}.pgm");
            let px = m
                .bitmap()
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect();
            GrayImage::from_raw(m.width() as u32, m.height() as u32, px)
                .ok_or_else(|| malformed("mask buffer size"))?
                .save(sdir.join(&file))?;
            records.push(MaskRecord {
                file,
                confidence: m.confidence,
                object_id: m.object_id.clone(),
            });
        }
        std::fs::write(
            sdir.join("meta.json"),
            serde_json::to_string_pretty(&records)?,
        )?;
    }
    if let Some(o) = &scene.oracle {
        write_oracle(dir, o)?;
    }
    Ok(())
}

pub fn write_gt(dir: impl AsRef<Path>, records: &[GtRecord]) -> Result<(), PipelineError> {
    crate::evalkit::write_gt_json(records, dir.as_ref().join("gt.json"))?;
    Ok(())
}

pub fn read_gt(dir: impl AsRef<Path>) -> Result<Vec<GtRecord>, PipelineError> {
    Ok(crate::evalkit::read_gt_json(dir.as_ref().join("gt.json"))?)
}

// ---------------------------------------------------------------- CSV

/// One output CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRow {
    pub scene_id: String,
    pub object_id: String,
    pub mask_ref: usize,
    pub score_final: f64,
    pub score_coarse: f64,
    pub score_fine: f64,
    pub score_icp: f64,
    pub rotation: [f64; 9],
    pub t: [f64; 3],
    pub time_ms: f64,
}

pub const CSV_HEADER: [&str; 20] = [
    "scene_id",
    "object_id",
    "mask_ref",
    "score_final",
    "score_coarse",
    "score_fine",
    "score_icp",
    "r11",
    "r12",
    "r13",
    "r21",
    "r22",
    "r23",
    "r31",
    "r32",
    "r33",
    "tx",
    "ty",
    "tz",
    "time_ms",
];

impl PoseRow {
    pub fn pose<T: Real>(&self) -> Result<Pose<T>, PipelineError> {
        Ok(Pose::from_row_major(
            &self.rotation.map(T::lit),
            &self.t.map(T::lit),
        )?)
    }
}

/// Rows for one scene; `time_ms` is the object's wall time unless timing
/// is disabled, in which case it is 0.
pub fn result_rows<T: Real>(
    scene_id: &str,
    results: &[EstimateResult<T>],
    timing: bool,
) -> Vec<PoseRow> {
    results
        .iter()
        .flat_map(|r| {
            r.poses.iter().map(move |p| PoseRow {
                scene_id: scene_id.to_string(),
                object_id: r.object_id.clone(),
                mask_ref: p.mask_ref,
                score_final: p.s_final.as_f64(),
                score_coarse: p.s_coarse.as_f64(),
                score_fine: p.s_fine.as_f64(),
                score_icp: p.s_icp.as_f64(),
                rotation: p.pose.rotation_row_major().map(|v| v.as_f64()),
                t: [
                    p.pose.translation.x,
                    p.pose.translation.y,
                    p.pose.translation.z,
                ]
                .map(|v| v.as_f64()),
                time_ms: if timing { r.total_ms } else { 0.0 },
            })
        })
        .collect()
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[PoseRow]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.scene_id.clone(),
            r.object_id.clone(),
            r.mask_ref.to_string(),
        ];
        for v in [r.score_final, r.score_coarse, r.score_fine, r.score_icp]
            .iter()
            .chain(&r.rotation)
            .chain(&r.t)
            .chain(std::iter::once(&r.time_ms))
        {
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<PoseRow>, PipelineError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(malformed("unexpected CSV header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64, PipelineError> {
            rec[i]
                .parse()
                .map_err(|_| malformed(format!("bad number '{}'", &rec[i])))
        };
        let mut rotation = [0.0; 9];
        for (j, v) in rotation.iter_mut().enumerate() {
            *v = f(7 + j)?;
        }
        rows.push(PoseRow {
            scene_id: rec[0].to_string(),
            object_id: rec[1].to_string(),
            mask_ref: rec[2].parse().map_err(|_| malformed("bad mask_ref"))?,
            score_final: f(3)?,
            score_coarse: f(4)?,
            score_fine: f(5)?,
            score_icp: f(6)?,
            rotation,
            t: [f(16)?, f(17)?, f(18)?],
            time_ms: f(19)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    #[test]
    fn ply_roundtrip_ascii_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::asymmetric_blocks::<f64>(0.1).unwrap();
        for binary in [false, true] {
            let p = dir.path().join(format!("m{binary}.ply"));
            write_ply(&p, &m, binary).unwrap();
            let (v, t) = parse_ply::<f64>(&std::fs::read(&p).unwrap()).unwrap();
            assert_eq!(v, m.vertices());
            assert_eq!(t, m.triangles());
        }
    }

    #[test]
    fn ply_quads_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 4\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0 1\n1 0 0 2\n1 1 0 3\n0 1 0 4\n4 0 1 2 3\n";
        let (v, t) = parse_ply::<f32>(text.as_bytes()).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(t, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_ply::<f32>(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
    }

    #[test]
    fn model_diameter_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = shapes::unit_cube::<f64>().unwrap();
        let p = dir.path().join("cube.ply");
        save_model(&p, &m).unwrap();
        let back = load_model::<f64>(&p).unwrap();
        assert_eq!(back.diameter(), m.diameter());
        let meta = ModelMeta {
            diameter_m: m.diameter() * 1.02,
            symmetries: vec![],
        };
        std::fs::write(
            p.with_extension("json"),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            load_model::<f64>(&p),
            Err(PipelineError::MalformedScene(_))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let row = PoseRow {
            scene_id: "s".into(),
            object_id: "o".into(),
            mask_ref: 3,
            score_final: 0.24,
            score_coarse: 0.5,
            score_fine: 0.6,
            score_icp: 0.8,
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.1, -0.2, 1.0 / 3.0],
            time_ms: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
        assert!(
            String::from_utf8_lossy(&buf).starts_with("scene_id,object_id,mask_ref,score_final")
        );
        assert_eq!(read_csv(buf.as_slice()).unwrap(), vec![row]);
    }
}
