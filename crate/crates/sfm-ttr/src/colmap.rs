//! COLMAP sparse model files (`cameras`, `images`, `points3D`) in the binary
//! and text layouts, read into and written from [`Reconstruction`].
//!
//! Binary files are little-endian. Any negative 2-D observation point id is
//! the "no 3-D point" sentinel; it is written back as `-1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use sfm_ttr_core::recon::{
    normalize_qvec, CameraId, CameraModel, ImageId, IntegrityError, Observation, PointId, TrackEntry,
};
use sfm_ttr_core::{CameraIntrinsics, PosedImage, Reconstruction, ScenePoint};

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("unsupported camera model {0}")]
    UnsupportedCameraModel(String),
    #[error("{0} file is truncated")]
    TruncatedFile(&'static str),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("{0}")]
    InvalidRecord(String),
    #[error("image {image_id} quaternion has norm {norm}, too far from 1 to renormalize")]
    NonUnitQuaternion { image_id: ImageId, norm: f64 },
    #[error("point {point3d_id} has negative reprojection error {error}")]
    NegativeError { point3d_id: PointId, error: f64 },
    #[error("missing model file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("reconstruction fails integrity checks ({} violations), first: {}", .0.len(), .0[0])]
    IntegrityViolation(Vec<IntegrityError>),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl ColmapError {
    fn io(path: &Path, source: io::Error) -> Self {
        ColmapError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Binary,
    Text,
}

impl ModelFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ModelFormat::Binary => "bin",
            ModelFormat::Text => "txt",
        }
    }
}

/// COLMAP's model names by numeric id, used for error messages.
fn model_name(id: i32) -> String {
    const NAMES: [&str; 11] = [
        "SIMPLE_PINHOLE",
        "PINHOLE",
        "SIMPLE_RADIAL",
        "RADIAL",
        "OPENCV",
        "OPENCV_FISHEYE",
        "FULL_OPENCV",
        "FOV",
        "SIMPLE_RADIAL_FISHEYE",
        "RADIAL_FISHEYE",
        "THIN_PRISM_FISHEYE",
    ];
    usize::try_from(id)
        .ok()
        .and_then(|i| NAMES.get(i))
        .map_or_else(|| format!("id {id}"), |n| (*n).to_string())
}

fn invalid(msg: impl Into<String>) -> ColmapError {
    ColmapError::InvalidRecord(msg.into())
}

// ---------------------------------------------------------------------------
// Binary

struct BinReader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> BinReader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    fn u8(&mut self) -> Result<u8, ColmapError> {
        let what = self.what;
        self.buf.read_u8().map_err(|_| ColmapError::TruncatedFile(what))
    }

    fn i32(&mut self) -> Result<i32, ColmapError> {
        let what = self.what;
        self.buf.read_i32::<LittleEndian>().map_err(|_| ColmapError::TruncatedFile(what))
    }

    fn i64(&mut self) -> Result<i64, ColmapError> {
        let what = self.what;
        self.buf.read_i64::<LittleEndian>().map_err(|_| ColmapError::TruncatedFile(what))
    }

    fn u64(&mut self) -> Result<u64, ColmapError> {
        let what = self.what;
        self.buf.read_u64::<LittleEndian>().map_err(|_| ColmapError::TruncatedFile(what))
    }

    fn f64(&mut self) -> Result<f64, ColmapError> {
        let what = self.what;
        self.buf.read_f64::<LittleEndian>().map_err(|_| ColmapError::TruncatedFile(what))
    }

    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], ColmapError> {
        let mut out = [0.0; N];
        let what = self.what;
        self.buf.read_f64_into::<LittleEndian>(&mut out).map_err(|_| ColmapError::TruncatedFile(what))?;
        Ok(out)
    }

    fn cstr(&mut self) -> Result<String, ColmapError> {
        let end = self.buf.iter().position(|&b| b == 0).ok_or(ColmapError::TruncatedFile(self.what))?;
        let s = std::str::from_utf8(&self.buf[..end]).map_err(|_| invalid("image name is not valid UTF-8"))?;
        let s = s.to_string();
        self.buf = &self.buf[end + 1..];
        Ok(s)
    }

    /// Reads a record count and bounds the pre-allocation by what the
    /// remaining bytes could possibly hold.
    fn count(&mut self, min_record: usize) -> Result<(u64, usize), ColmapError> {
        let n = self.u64()?;
        let cap = (n as usize).min(self.buf.len() / min_record.max(1));
        Ok((n, cap))
    }

    fn finish(self) -> Result<(), ColmapError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(invalid(format!("{} trailing bytes after the last {} record", self.buf.len(), self.what)))
        }
    }
}

fn id_u32(v: i32, what: &str) -> Result<u32, ColmapError> {
    u32::try_from(v).map_err(|_| invalid(format!("negative {what} id {v}")))
}

fn parse_cameras_binary(bytes: &[u8]) -> Result<BTreeMap<CameraId, CameraIntrinsics>, ColmapError> {
    let mut r = BinReader::new(bytes, "cameras");
    let n = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let camera_id = id_u32(r.i32()?, "camera")?;
        let model_id = r.i32()?;
        let model = CameraModel::from_id(model_id).ok_or_else(|| ColmapError::UnsupportedCameraModel(model_name(model_id)))?;
        let width = u32::try_from(r.u64()?).map_err(|_| invalid(format!("camera {camera_id} width overflows")))?;
        let height = u32::try_from(r.u64()?).map_err(|_| invalid(format!("camera {camera_id} height overflows")))?;
        let params = (0..model.num_params()).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let cam = CameraIntrinsics::from_params(camera_id, model, width, height, &params).expect("param count matches model");
        if out.insert(camera_id, cam).is_some() {
            return Err(invalid(format!("duplicate camera id {camera_id}")));
        }
    }
    r.finish()?;
    Ok(out)
}

fn parse_images_binary(bytes: &[u8]) -> Result<BTreeMap<ImageId, PosedImage>, ColmapError> {
    let mut r = BinReader::new(bytes, "images");
    let n = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let image_id = id_u32(r.i32()?, "image")?;
        let q = r.f64s::<4>()?;
        let t = r.f64s::<3>()?;
        let camera_id = id_u32(r.i32()?, "camera")?;
        let name = r.cstr()?;
        let (n_obs, cap) = r.count(24)?;
        let mut observations = Vec::with_capacity(cap);
        for _ in 0..n_obs {
            let x = r.f64()?;
            let y = r.f64()?;
            let id = r.i64()?;
            observations.push(Observation { x, y, point3d_id: point_ref(id) });
        }
        let rotation = normalize_qvec(q).map_err(|norm| ColmapError::NonUnitQuaternion { image_id, norm })?;
        let image = PosedImage { image_id, camera_id, name, rotation, translation: Vector3::from(t), observations };
        if out.insert(image_id, image).is_some() {
            return Err(invalid(format!("duplicate image id {image_id}")));
        }
    }
    r.finish()?;
    Ok(out)
}

fn parse_points_binary(bytes: &[u8]) -> Result<BTreeMap<PointId, ScenePoint>, ColmapError> {
    let mut r = BinReader::new(bytes, "points3D");
    let n = r.u64()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let raw_id = r.i64()?;
        let point3d_id = PointId::try_from(raw_id).map_err(|_| invalid(format!("negative point id {raw_id}")))?;
        let xyz = r.f64s::<3>()?;
        let color = [r.u8()?, r.u8()?, r.u8()?];
        let error = r.f64()?;
        let (len, cap) = r.count(8)?;
        let mut track = Vec::with_capacity(cap);
        for _ in 0..len {
            let image_id = id_u32(r.i32()?, "track image")?;
            let point2d_idx = id_u32(r.i32()?, "track observation")?;
            track.push(TrackEntry { image_id, point2d_idx });
        }
        let point = make_point(point3d_id, xyz, color, error, track)?;
        if out.insert(point3d_id, point).is_some() {
            return Err(invalid(format!("duplicate point id {point3d_id}")));
        }
    }
    r.finish()?;
    Ok(out)
}

fn point_ref(id: i64) -> Option<PointId> {
    PointId::try_from(id).ok()
}

fn make_point(point3d_id: PointId, xyz: [f64; 3], color: [u8; 3], error: f64, track: Vec<TrackEntry>) -> Result<ScenePoint, ColmapError> {
    if !(error >= 0.0) {
        return Err(ColmapError::NegativeError { point3d_id, error });
    }
    Ok(ScenePoint { point3d_id, position: Vector3::from(xyz), color, reproj_error: error, track })
}

// ---------------------------------------------------------------------------
// Text

struct Line<'a> {
    number: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Line<'a> {
    fn malformed(&self, reason: impl Into<String>) -> ColmapError {
        ColmapError::MalformedLine { line: self.number, reason: reason.into() }
    }

    fn next<T: std::str::FromStr>(&mut self, field: &str) -> Result<T, ColmapError> {
        let tok = self.tokens.next().ok_or_else(|| self.malformed(format!("missing {field}")))?;
        tok.parse().map_err(|_| self.malformed(format!("bad {field} `{tok}`")))
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.tokens.by_ref().collect()
    }
}

fn text(bytes: &[u8]) -> Result<&str, ColmapError> {
    std::str::from_utf8(bytes).map_err(|e| invalid(format!("text model is not UTF-8: {e}")))
}

/// Non-comment, non-blank lines with 1-based line numbers.
fn records(src: &str) -> impl Iterator<Item = (usize, &str)> {
    src.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_cameras_text(bytes: &[u8]) -> Result<BTreeMap<CameraId, CameraIntrinsics>, ColmapError> {
    let mut out = BTreeMap::new();
    for (number, l) in records(text(bytes)?) {
        let mut line = Line { number, tokens: l.split_whitespace() };
        let camera_id: CameraId = line.next("camera id")?;
        let model_name: String = line.next("camera model")?;
        let model = CameraModel::from_name(&model_name).ok_or(ColmapError::UnsupportedCameraModel(model_name))?;
        let width: u32 = line.next("width")?;
        let height: u32 = line.next("height")?;
        let params = line
            .rest()
            .into_iter()
            .map(|t| t.parse::<f64>().map_err(|_| line.malformed(format!("bad camera parameter `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let cam = CameraIntrinsics::from_params(camera_id, model, width, height, &params).ok_or_else(|| {
            line.malformed(format!("{model} takes {} parameters, found {}", model.num_params(), params.len()))
        })?;
        if out.insert(camera_id, cam).is_some() {
            return Err(line.malformed(format!("duplicate camera id {camera_id}")));
        }
    }
    Ok(out)
}

fn parse_images_text(bytes: &[u8]) -> Result<BTreeMap<ImageId, PosedImage>, ColmapError> {
    let src = text(bytes)?;
    let mut lines = src.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut out = BTreeMap::new();
    while let Some((number, l)) = lines.next() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut line = Line { number, tokens: l.split_whitespace() };
        let image_id: ImageId = line.next("image id")?;
        let mut q = [0.0; 4];
        for (c, field) in q.iter_mut().zip(["qw", "qx", "qy", "qz"]) {
            *c = line.next(field)?;
        }
        let mut t = [0.0; 3];
        for (c, field) in t.iter_mut().zip(["tx", "ty", "tz"]) {
            *c = line.next(field)?;
        }
        let camera_id: CameraId = line.next("camera id")?;
        let name = line.rest().join(" ");
        if name.is_empty() {
            return Err(line.malformed("missing image name"));
        }

        // The observation line always follows, possibly empty.
        let (obs_number, obs_line) = lines.next().unwrap_or((number + 1, ""));
        let toks: Vec<&str> = obs_line.split_whitespace().collect();
        let bad = |reason: String| ColmapError::MalformedLine { line: obs_number, reason };
        if !toks.len().is_multiple_of(3) {
            return Err(bad(format!("{} observation tokens, not a multiple of 3", toks.len())));
        }
        let mut observations = Vec::with_capacity(toks.len() / 3);
        for chunk in toks.chunks(3) {
            let x: f64 = chunk[0].parse().map_err(|_| bad(format!("bad observation x `{}`", chunk[0])))?;
            let y: f64 = chunk[1].parse().map_err(|_| bad(format!("bad observation y `{}`", chunk[1])))?;
            let id: i64 = chunk[2].parse().map_err(|_| bad(format!("bad point id `{}`", chunk[2])))?;
            observations.push(Observation { x, y, point3d_id: point_ref(id) });
        }

        let rotation = normalize_qvec(q).map_err(|norm| ColmapError::NonUnitQuaternion { image_id, norm })?;
        let image = PosedImage { image_id, camera_id, name, rotation, translation: Vector3::from(t), observations };
        if out.insert(image_id, image).is_some() {
            return Err(line.malformed(format!("duplicate image id {image_id}")));
        }
    }
    Ok(out)
}

fn parse_points_text(bytes: &[u8]) -> Result<BTreeMap<PointId, ScenePoint>, ColmapError> {
    let mut out = BTreeMap::new();
    for (number, l) in records(text(bytes)?) {
        let mut line = Line { number, tokens: l.split_whitespace() };
        let point3d_id: PointId = line.next("point id")?;
        let xyz = [line.next("x")?, line.next("y")?, line.next("z")?];
        let color = [line.next("r")?, line.next("g")?, line.next("b")?];
        let error: f64 = line.next("error")?;
        let rest = line.rest();
        if !rest.len().is_multiple_of(2) {
            return Err(line.malformed("odd number of track tokens"));
        }
        let mut track = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let image_id = pair[0].parse().map_err(|_| line.malformed(format!("bad track image id `{}`", pair[0])))?;
            let point2d_idx =
                pair[1].parse().map_err(|_| line.malformed(format!("bad track observation index `{}`", pair[1])))?;
            track.push(TrackEntry { image_id, point2d_idx });
        }
        let point = make_point(point3d_id, xyz, color, error, track)?;
        if out.insert(point3d_id, point).is_some() {
            return Err(line.malformed(format!("duplicate point id {point3d_id}")));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Public parsers

pub fn parse_cameras(bytes: &[u8], format: ModelFormat) -> Result<BTreeMap<CameraId, CameraIntrinsics>, ColmapError> {
    match format {
        ModelFormat::Binary => parse_cameras_binary(bytes),
        ModelFormat::Text => parse_cameras_text(bytes),
    }
}

/// Parses an images file. Quaternions within 1e-3 of unit norm are
/// renormalized; others are rejected.
pub fn parse_images(bytes: &[u8], format: ModelFormat) -> Result<BTreeMap<ImageId, PosedImage>, ColmapError> {
    match format {
        ModelFormat::Binary => parse_images_binary(bytes),
        ModelFormat::Text => parse_images_text(bytes),
    }
}

pub fn parse_points3d(bytes: &[u8], format: ModelFormat) -> Result<BTreeMap<PointId, ScenePoint>, ColmapError> {
    match format {
        ModelFormat::Binary => parse_points_binary(bytes),
        ModelFormat::Text => parse_points_text(bytes),
    }
}

// ---------------------------------------------------------------------------
// Directories

const STEMS: [&str; 3] = ["cameras", "images", "points3D"];

/// Which file backs each part of a model directory, `.bin` first.
pub fn model_files(dir: &Path) -> Result<[(PathBuf, ModelFormat); 3], ColmapError> {
    let pick = |stem: &str| {
        [ModelFormat::Binary, ModelFormat::Text]
            .into_iter()
            .map(|f| (dir.join(format!("{stem}.{}", f.extension())), f))
            .find(|(p, _)| p.is_file())
            .ok_or_else(|| ColmapError::MissingFile(dir.join(format!("{stem}.bin"))))
    };
    Ok([pick(STEMS[0])?, pick(STEMS[1])?, pick(STEMS[2])?])
}

/// Reads a model directory without checking referential integrity.
/// The three files are parsed concurrently.
pub fn read_model(dir: &Path) -> Result<Reconstruction, ColmapError> {
    let [(cp, cf), (ip, imf), (pp, pf)] = model_files(dir)?;
    let read = |p: &Path| fs::read(p).map_err(|e| ColmapError::io(p, e));
    let (cameras, images, points) = std::thread::scope(|s| {
        let c = s.spawn(|| read(&cp).and_then(|b| parse_cameras(&b, cf)));
        let i = s.spawn(|| read(&ip).and_then(|b| parse_images(&b, imf)));
        let p = read(&pp).and_then(|b| parse_points3d(&b, pf));
        (c.join().expect("cameras parser panicked"), i.join().expect("images parser panicked"), p)
    });
    Ok(Reconstruction { cameras: cameras?, images: images?, points: points? })
}

/// Reads a model directory and validates referential integrity.
pub fn load_reconstruction(dir: &Path) -> Result<Reconstruction, ColmapError> {
    let recon = read_model(dir)?;
    let errors = recon.integrity_errors();
    if !errors.is_empty() {
        return Err(ColmapError::IntegrityViolation(errors));
    }
    Ok(recon)
}

/// The model written for a camera: `PINHOLE` whenever the focal lengths
/// differ, whatever the stored model says.
fn written_params(cam: &CameraIntrinsics) -> (CameraModel, Vec<f64>) {
    if cam.fx != cam.fy {
        (CameraModel::Pinhole, vec![cam.fx, cam.fy, cam.cx, cam.cy])
    } else {
        (cam.model, cam.params())
    }
}

fn point_id_out(id: Option<PointId>) -> i64 {
    id.and_then(|p| i64::try_from(p).ok()).unwrap_or(-1)
}

pub fn cameras_text(recon: &Reconstruction) -> String {
    let mut s = String::new();
    s.push_str("# Camera list with one line of data per camera:\n");
    s.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(s, "# Number of cameras: {}", recon.cameras.len());
    for cam in recon.cameras.values() {
        let (model, params) = written_params(cam);
        let _ = write!(s, "{} {} {} {}", cam.camera_id, model, cam.width, cam.height);
        for p in params {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
    }
    s
}

pub fn images_text(recon: &Reconstruction) -> String {
    let mut s = String::new();
    let n_obs: usize = recon.images.values().map(|i| i.observations.len()).sum();
    let mean = if recon.images.is_empty() { 0.0 } else { n_obs as f64 / recon.images.len() as f64 };
    s.push_str("# Image list with two lines of data per image:\n");
    s.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    s.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(s, "# Number of images: {}, mean observations per image: {mean}", recon.images.len());
    for im in recon.images.values() {
        let [qw, qx, qy, qz] = im.qvec();
        let t = &im.translation;
        let _ = writeln!(s, "{} {qw} {qx} {qy} {qz} {} {} {} {} {}", im.image_id, t.x, t.y, t.z, im.camera_id, im.name);
        let obs: Vec<String> =
            im.observations.iter().map(|o| format!("{} {} {}", o.x, o.y, point_id_out(o.point3d_id))).collect();
        s.push_str(&obs.join(" "));
        s.push('\n');
    }
    s
}

pub fn points_text(recon: &Reconstruction) -> String {
    let mut s = String::new();
    let n_track: usize = recon.points.values().map(|p| p.track.len()).sum();
    let mean = if recon.points.is_empty() { 0.0 } else { n_track as f64 / recon.points.len() as f64 };
    s.push_str("# 3D point list with one line of data per point:\n");
    s.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(s, "# Number of points: {}, mean track length: {mean}", recon.points.len());
    for p in recon.points.values() {
        let x = &p.position;
        let [r, g, b] = p.color;
        let _ = write!(s, "{} {} {} {} {r} {g} {b} {}", p.point3d_id, x.x, x.y, x.z, p.reproj_error);
        for t in &p.track {
            let _ = write!(s, " {} {}", t.image_id, t.point2d_idx);
        }
        s.push('\n');
    }
    s
}

fn to_i32(v: u32, what: &str) -> io::Result<i32> {
    i32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} id {v} does not fit in i32")))
}

pub fn cameras_binary(recon: &Reconstruction) -> io::Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(recon.cameras.len() as u64)?;
    for cam in recon.cameras.values() {
        let (model, params) = written_params(cam);
        w.write_i32::<LittleEndian>(to_i32(cam.camera_id, "camera")?)?;
        w.write_i32::<LittleEndian>(model.id())?;
        w.write_u64::<LittleEndian>(u64::from(cam.width))?;
        w.write_u64::<LittleEndian>(u64::from(cam.height))?;
        for p in params {
            w.write_f64::<LittleEndian>(p)?;
        }
    }
    Ok(w)
}

pub fn images_binary(recon: &Reconstruction) -> io::Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(recon.images.len() as u64)?;
    for im in recon.images.values() {
        if im.name.as_bytes().contains(&0) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "image name contains NUL"));
        }
        w.write_i32::<LittleEndian>(to_i32(im.image_id, "image")?)?;
        for c in im.qvec() {
            w.write_f64::<LittleEndian>(c)?;
        }
        for c in im.translation.iter() {
            w.write_f64::<LittleEndian>(*c)?;
        }
        w.write_i32::<LittleEndian>(to_i32(im.camera_id, "camera")?)?;
        w.write_all(im.name.as_bytes())?;
        w.write_u8(0)?;
        w.write_u64::<LittleEndian>(im.observations.len() as u64)?;
        for o in &im.observations {
            w.write_f64::<LittleEndian>(o.x)?;
            w.write_f64::<LittleEndian>(o.y)?;
            w.write_i64::<LittleEndian>(point_id_out(o.point3d_id))?;
        }
    }
    Ok(w)
}

pub fn points_binary(recon: &Reconstruction) -> io::Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(recon.points.len() as u64)?;
    for p in recon.points.values() {
        let id = i64::try_from(p.point3d_id)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "point id does not fit in i64"))?;
        w.write_i64::<LittleEndian>(id)?;
        for c in p.position.iter() {
            w.write_f64::<LittleEndian>(*c)?;
        }
        w.write_all(&p.color)?;
        w.write_f64::<LittleEndian>(p.reproj_error)?;
        w.write_u64::<LittleEndian>(p.track.len() as u64)?;
        for t in &p.track {
            w.write_i32::<LittleEndian>(to_i32(t.image_id, "track image")?)?;
            w.write_i32::<LittleEndian>(to_i32(t.point2d_idx, "track observation")?)?;
        }
    }
    Ok(w)
}

fn write_files(dir: &Path, format: ModelFormat, contents: [Vec<u8>; 3]) -> Result<(), ColmapError> {
    fs::create_dir_all(dir).map_err(|e| ColmapError::io(dir, e))?;
    for (stem, bytes) in STEMS.iter().zip(contents) {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        fs::write(&path, bytes).map_err(|e| ColmapError::io(&path, e))?;
    }
    Ok(())
}

/// Writes `cameras.txt`, `images.txt` and `points3D.txt`. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_reconstruction_text(recon: &Reconstruction, dir: &Path) -> Result<(), ColmapError> {
    write_files(
        dir,
        ModelFormat::Text,
        [cameras_text(recon).into_bytes(), images_text(recon).into_bytes(), points_text(recon).into_bytes()],
    )
}

pub fn write_reconstruction_binary(recon: &Reconstruction, dir: &Path) -> Result<(), ColmapError> {
    let wrap = |r: io::Result<Vec<u8>>| r.map_err(|e| ColmapError::io(dir, e));
    write_files(
        dir,
        ModelFormat::Binary,
        [wrap(cameras_binary(recon))?, wrap(images_binary(recon))?, wrap(points_binary(recon))?],
    )
}
