//! Cameras, rays and the on-disk scene format.
//!
//! A scene directory holds `scene.json`, `poses.json`, `template.mesh` and
//! 8-bit PNG rasters for images, subject masks and occlusion masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArticulatedMesh, Bone, Vec3};
use crate::motion::PoseFrame;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Name of the manifest inside a scene directory.
pub const MANIFEST_FILE: &str = "scene.json";

/// Pinhole camera. Extrinsics map world to camera coordinates
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    /// Principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::Camera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(intrinsics, rotation, -(rotation * eye), width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera(format!("image size {}x{} is empty", self.width, self.height)));
        }
        if k.iter().chain(self.rotation.iter()).chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Camera("non-finite entry".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Camera(format!("focal lengths ({}, {}) must be positive", k[(0, 0)], k[(1, 1)])));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Camera("intrinsics must be upper triangular with K[2][2] = 1".into()));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err(Error::Camera(format!("principal point ({cx}, {cy}) outside the image")));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Camera(format!("rotation is not orthonormal (max |RtR - I| = {err:e})")));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Continuous pixel coordinates and depth of a world point, or `None`
    /// behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let h = self.intrinsics * (c / c.z);
        Some((h.x, h.y, c.z))
    }
}

/// Ray through continuous pixel coordinates `(u, v)`.
pub fn camera_ray(camera: &Camera, u: f64, v: f64) -> Result<Ray> {
    let (w, h) = (camera.width, camera.height);
    if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
        return Err(Error::PixelOutOfBounds {
            u,
            v,
            width: w,
            height: h,
        });
    }
    let k = &camera.intrinsics;
    let y = (v - k[(1, 2)]) / k[(1, 1)];
    let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
    let d = camera.rotation.transpose() * Vec3::new(x, y, 1.0);
    Ok(Ray {
        origin: camera.center(),
        direction: d / d.norm(),
    })
}

/// Ray through the center of integer pixel `(col, row)`.
pub fn pixel_ray(camera: &Camera, col: usize, row: usize) -> Result<Ray> {
    camera_ray(camera, col as f64 + 0.5, row as f64 + 0.5)
}

/// Row-major RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub image: Image,
    pub subject_mask: Mask,
    /// True where the subject is hidden; excluded from supervision.
    pub occlusion_mask: Mask,
    pub pose: PoseFrame,
}

impl FrameRecord {
    /// `subject & !occluded`.
    pub fn supervision_mask(&self) -> Mask {
        Mask {
            width: self.subject_mask.width,
            height: self.subject_mask.height,
            data: self
                .subject_mask
                .data
                .iter()
                .zip(&self.occlusion_mask.data)
                .map(|(&s, &o)| s && !o)
                .collect(),
        }
    }

    fn validate(&self, camera: &Camera, bones: usize) -> Result<()> {
        let f = self.frame_index;
        let dims = [
            ("image", self.image.width, self.image.height),
            ("subject mask", self.subject_mask.width, self.subject_mask.height),
            ("occlusion mask", self.occlusion_mask.width, self.occlusion_mask.height),
        ];
        for (what, w, h) in dims {
            if (w, h) != (camera.width, camera.height) {
                return Err(Error::frame(
                    f,
                    format!("{what} is {w}x{h} but the camera is {}x{}", camera.width, camera.height),
                ));
            }
        }
        if self.image.data.len() != 3 * camera.width * camera.height
            || self.subject_mask.data.len() != camera.width * camera.height
            || self.occlusion_mask.data.len() != camera.width * camera.height
        {
            return Err(Error::frame(f, "array length does not match its dimensions"));
        }
        if let Some(v) = self.image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::frame(f, format!("pixel value {v} outside [0, 1]")));
        }
        if self.pose.num_bones() != bones {
            return Err(Error::frame(
                f,
                Error::BoneCount {
                    pose: self.pose.num_bones(),
                    template: bones,
                }
                .to_string(),
            ));
        }
        self.pose.validate().map_err(|e| Error::frame(f, e.to_string()))
    }
}

/// A fixed held-out camera with ground truth for some frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalView {
    pub name: String,
    pub camera: Camera,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    /// One camera per training frame.
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameRecord>,
    pub template: ArticulatedMesh,
    pub canonical_pose: PoseFrame,
    pub eval_views: Vec<EvalView>,
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Empty("dataset has no frames".into()));
        }
        if self.cameras.len() != self.frames.len() {
            return Err(Error::LengthMismatch(format!(
                "{} cameras for {} frames",
                self.cameras.len(),
                self.frames.len()
            )));
        }
        let bones = self.template.num_bones();
        if self.canonical_pose.num_bones() != bones {
            return Err(Error::BoneCount {
                pose: self.canonical_pose.num_bones(),
                template: bones,
            });
        }
        self.canonical_pose.validate()?;
        for (cam, fr) in self.cameras.iter().zip(&self.frames) {
            cam.validate().map_err(|e| Error::frame(fr.frame_index, e.to_string()))?;
            fr.validate(cam, bones)?;
        }
        for view in &self.eval_views {
            view.camera.validate()?;
            for fr in &view.frames {
                fr.validate(&view.camera, bones)?;
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    width: usize,
    height: usize,
    intrinsics: [[f64; 3]; 3],
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<&Camera> for CameraEntry {
    fn from(c: &Camera) -> Self {
        let rows = |m: &Matrix3<f64>| [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]);
        Self {
            width: c.width,
            height: c.height,
            intrinsics: rows(&c.intrinsics),
            rotation: rows(&c.rotation),
            translation: c.translation.into(),
        }
    }
}

impl CameraEntry {
    fn to_camera(&self) -> Result<Camera> {
        let m = |a: &[[f64; 3]; 3]| Matrix3::from_fn(|r, c| a[r][c]);
        Camera::new(
            m(&self.intrinsics),
            m(&self.rotation),
            Vec3::from(self.translation),
            self.width,
            self.height,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    index: usize,
    camera: CameraEntry,
    image: String,
    mask: String,
    occlusion: String,
}

#[derive(Serialize, Deserialize)]
struct EvalFrameEntry {
    index: usize,
    image: String,
    mask: String,
}

#[derive(Serialize, Deserialize)]
struct EvalViewEntry {
    name: String,
    camera: CameraEntry,
    frames: Vec<EvalFrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    template: String,
    poses: String,
    frames: Vec<FrameEntry>,
    #[serde(default)]
    eval_views: Vec<EvalViewEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoseEntry {
    rotations: Vec<[f64; 4]>,
    root_translation: [f64; 3],
}

impl From<&PoseFrame> for PoseEntry {
    fn from(p: &PoseFrame) -> Self {
        Self {
            rotations: p.to_wxyz(),
            root_translation: p.root_translation.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    canonical: PoseEntry,
    /// Indexed by frame index.
    frames: Vec<PoseEntry>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn encode_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("manifest types always serialize");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn decode_raster(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn encode_png(path: &Path, width: usize, height: usize, color: image::ExtendedColorType, raw: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        raw,
        width as u32,
        height as u32,
        color,
    )
    .map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_bytes(path, &out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = decode_raster(path)?.to_rgb8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    encode_png(path, img.width, img.height, image::ExtendedColorType::Rgb8, &raw)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = decode_raster(path)?.to_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&b| b >= 128).collect(),
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(path, mask.width, mask.height, image::ExtendedColorType::L8, &raw)
}

/// Single-channel 16-bit PNG of values in [0, 1].
pub fn write_gray16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let raw: Vec<u8> = values
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    encode_png(path, width, height, image::ExtendedColorType::L16, &raw)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a camera stored in the same JSON form as a manifest entry.
pub fn read_camera(path: &Path) -> Result<Camera> {
    decode_json::<CameraEntry>(path)?.to_camera()
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    encode_json(path, &CameraEntry::from(camera))
}

/// Serializes a template in the sectioned text format.
pub fn format_mesh(mesh: &ArticulatedMesh) -> String {
    let mut s = String::new();
    let k = mesh.num_bones();
    let _ = writeln!(s, "VERTICES {}", mesh.vertices.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    let _ = writeln!(s, "FACES {}", mesh.faces.len());
    for f in &mesh.faces {
        let _ = writeln!(s, "{} {} {}", f[0], f[1], f[2]);
    }
    let _ = writeln!(s, "WEIGHTS {} {}", mesh.vertices.len(), k);
    for i in 0..mesh.vertices.len() {
        let row: Vec<String> = mesh.skin_weights(i).iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    let _ = writeln!(s, "BONES {k}");
    for b in &mesh.bones {
        let parent = b.parent.map_or(-1, |p| p as i64);
        let _ = writeln!(s, "{parent} {} {} {}", b.head.x, b.head.y, b.head.z);
    }
    s
}

/// Parses the sectioned text format. Normals are recomputed.
pub fn parse_mesh(text: &str) -> std::result::Result<ArticulatedMesh, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    fn header<'a>(
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
        name: &str,
        fields: usize,
    ) -> std::result::Result<Vec<usize>, String> {
        let (n, l) = lines.next().ok_or_else(|| format!("missing {name} section"))?;
        let mut tok = l.split_whitespace();
        if tok.next() != Some(name) {
            return Err(format!("line {n}: expected {name}"));
        }
        let counts: Vec<usize> = tok
            .map(|t| t.parse().map_err(|_| format!("line {n}: bad count {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if counts.len() != fields {
            return Err(format!("line {n}: {name} takes {fields} count(s)"));
        }
        Ok(counts)
    }

    fn row<'a, T: std::str::FromStr>(
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
        width: usize,
        section: &str,
    ) -> std::result::Result<Vec<T>, String> {
        let (n, l) = lines.next().ok_or_else(|| format!("{section} section is truncated"))?;
        let vals: Vec<T> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| format!("line {n}: cannot parse {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != width {
            return Err(format!("line {n}: expected {width} values, found {}", vals.len()));
        }
        Ok(vals)
    }

    let nv = header(&mut lines, "VERTICES", 1)?[0];
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let r: Vec<f64> = row(&mut lines, 3, "VERTICES")?;
        vertices.push(Vec3::new(r[0], r[1], r[2]));
    }
    let nf = header(&mut lines, "FACES", 1)?[0];
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let r: Vec<usize> = row(&mut lines, 3, "FACES")?;
        faces.push([r[0], r[1], r[2]]);
    }
    let wc = header(&mut lines, "WEIGHTS", 2)?;
    if wc[0] != nv {
        return Err(format!("WEIGHTS has {} rows for {nv} vertices", wc[0]));
    }
    let mut weights = Vec::with_capacity(nv * wc[1]);
    for _ in 0..nv {
        weights.extend(row::<f64>(&mut lines, wc[1], "WEIGHTS")?);
    }
    let nb = header(&mut lines, "BONES", 1)?[0];
    if nb != wc[1] {
        return Err(format!("WEIGHTS has {} columns for {nb} bones", wc[1]));
    }
    let mut bones = Vec::with_capacity(nb);
    for _ in 0..nb {
        let r: Vec<f64> = row(&mut lines, 4, "BONES")?;
        let parent = if r[0] < 0.0 { None } else { Some(r[0] as usize) };
        bones.push(Bone {
            parent,
            head: Vec3::new(r[1], r[2], r[3]),
        });
    }
    if let Some((n, _)) = lines.next() {
        return Err(format!("line {n}: trailing content"));
    }
    ArticulatedMesh::new(vertices, faces, weights, bones).map_err(|e| e.to_string())
}

pub fn read_mesh(path: &Path) -> Result<ArticulatedMesh> {
    parse_mesh(&read_text(path)?).map_err(|message| Error::Decode {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_mesh(path: &Path, mesh: &ArticulatedMesh) -> Result<()> {
    write_bytes(path, format_mesh(mesh).as_bytes())
}

fn frame_paths(index: usize) -> (String, String, String) {
    (
        format!("frames/{index:04}.png"),
        format!("masks/{index:04}.png"),
        format!("occl/{index:04}.png"),
    )
}

fn eval_paths(view: &str, index: usize) -> (String, String) {
    (format!("eval/{view}/frames/{index:04}.png"), format!("eval/{view}/masks/{index:04}.png"))
}

fn lookup_pose(poses: &[PoseFrame], index: usize) -> Result<PoseFrame> {
    poses
        .get(index)
        .cloned()
        .ok_or_else(|| Error::frame(index, format!("no pose (poses.json has {} entries)", poses.len())))
}

fn with_frame<T>(index: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Frame { .. } => e,
        other => Error::frame(index, other.to_string()),
    })
}

/// Loads and validates `scene.json` and everything it references.
pub fn load_manifest(path: &Path) -> Result<SceneDataset> {
    let root = path.parent().unwrap_or(Path::new("."));
    let manifest: Manifest = decode_json(path)?;
    let template = read_mesh(&root.join(&manifest.template))?;
    let poses_file: PosesFile = decode_json(&root.join(&manifest.poses))?;
    let to_pose = |p: &PoseEntry| PoseFrame::from_wxyz(&p.rotations, p.root_translation);
    let poses: Vec<PoseFrame> = poses_file.frames.iter().map(to_pose).collect();

    let mut cameras = Vec::with_capacity(manifest.frames.len());
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for fe in &manifest.frames {
        let i = fe.index;
        let camera = with_frame(i, fe.camera.to_camera())?;
        let record = FrameRecord {
            frame_index: i,
            image: with_frame(i, read_image(&root.join(&fe.image)))?,
            subject_mask: with_frame(i, read_mask(&root.join(&fe.mask)))?,
            occlusion_mask: with_frame(i, read_mask(&root.join(&fe.occlusion)))?,
            pose: lookup_pose(&poses, i)?,
        };
        record.validate(&camera, template.num_bones())?;
        cameras.push(camera);
        frames.push(record);
    }

    let mut eval_views = Vec::with_capacity(manifest.eval_views.len());
    for ve in &manifest.eval_views {
        let camera = ve.camera.to_camera()?;
        let mut vframes = Vec::with_capacity(ve.frames.len());
        for fe in &ve.frames {
            let i = fe.index;
            vframes.push(FrameRecord {
                frame_index: i,
                image: with_frame(i, read_image(&root.join(&fe.image)))?,
                subject_mask: with_frame(i, read_mask(&root.join(&fe.mask)))?,
                occlusion_mask: Mask::new(camera.width, camera.height),
                pose: lookup_pose(&poses, i)?,
            });
        }
        eval_views.push(EvalView {
            name: ve.name.clone(),
            camera,
            frames: vframes,
        });
    }

    let dataset = SceneDataset {
        cameras,
        frames,
        template,
        canonical_pose: to_pose(&poses_file.canonical),
        eval_views,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the dataset under `dir` and returns the path of `scene.json`.
pub fn write_manifest(dataset: &SceneDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    let mut pose_slots: Vec<Option<PoseEntry>> = Vec::new();
    let mut put_pose = |fr: &FrameRecord| {
        if pose_slots.len() <= fr.frame_index {
            pose_slots.resize_with(fr.frame_index + 1, || None);
        }
        pose_slots[fr.frame_index] = Some(PoseEntry::from(&fr.pose));
    };

    let mut frames = Vec::with_capacity(dataset.frames.len());
    for (cam, fr) in dataset.cameras.iter().zip(&dataset.frames) {
        let (image, mask, occlusion) = frame_paths(fr.frame_index);
        write_image(&dir.join(&image), &fr.image)?;
        write_mask(&dir.join(&mask), &fr.subject_mask)?;
        write_mask(&dir.join(&occlusion), &fr.occlusion_mask)?;
        put_pose(fr);
        frames.push(FrameEntry {
            index: fr.frame_index,
            camera: cam.into(),
            image,
            mask,
            occlusion,
        });
    }
    let mut eval_views = Vec::with_capacity(dataset.eval_views.len());
    for view in &dataset.eval_views {
        let mut entries = Vec::with_capacity(view.frames.len());
        for fr in &view.frames {
            let (image, mask) = eval_paths(&view.name, fr.frame_index);
            write_image(&dir.join(&image), &fr.image)?;
            write_mask(&dir.join(&mask), &fr.subject_mask)?;
            put_pose(fr);
            entries.push(EvalFrameEntry {
                index: fr.frame_index,
                image,
                mask,
            });
        }
        eval_views.push(EvalViewEntry {
            name: view.name.clone(),
            camera: (&view.camera).into(),
            frames: entries,
        });
    }

    let canonical = PoseEntry::from(&dataset.canonical_pose);
    let pose_frames = pose_slots
        .into_iter()
        .map(|p| p.unwrap_or_else(|| PoseEntry::from(&dataset.canonical_pose)))
        .collect();
    encode_json(
        &dir.join("poses.json"),
        &PosesFile {
            canonical,
            frames: pose_frames,
        },
    )?;
    write_mesh(&dir.join("template.mesh"), &dataset.template)?;
    let manifest = Manifest {
        template: "template.mesh".into(),
        poses: "poses.json".into(),
        frames,
        eval_views,
    };
    let path = dir.join(MANIFEST_FILE);
    encode_json(&path, &manifest)?;
    Ok(path)
}
