//! Interchange files between pipeline stages.
//!
//! Floats are written in their shortest round-trip form, so a value read
//! back is bit-identical to the value written.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sfm_ttr_core::metrics::BinMetrics;
use sfm_ttr_core::recon::{ImageId, PointId};
use sfm_ttr_core::refine::LossRecord;
use sfm_ttr_core::{DepthMetrics, ReferenceModel, ScaleAlignment, SparseDepthEntry, SparseDepthFrame};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("input holds no records")]
    EmptyInput,
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV header is `{found}`, expected `{expected}`")]
    BadHeader { found: String, expected: &'static str },
    #[error("not a parameter container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported parameter container version {0}")]
    UnsupportedVersion(u32),
    #[error("parameter container is truncated")]
    Truncated,
    #[error("parameter section `{name}`: {reason}")]
    BadSection { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ---------------------------------------------------------------------------
// Sparse depth frames

pub const FRAME_HEADER: &str = "image_id,point3d_id,u,v,d_sfm,d_nn,reproj_error";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct FrameRow {
    image_id: ImageId,
    point3d_id: PointId,
    u: f64,
    v: f64,
    d_sfm: f64,
    d_nn: f64,
    reproj_error: f64,
}

pub fn write_frames_csv<W: Write>(out: W, frames: &[SparseDepthFrame]) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(FRAME_HEADER.split(','))?;
    for f in frames {
        for e in &f.entries {
            w.serialize(FrameRow {
                image_id: f.image_id,
                point3d_id: e.point3d_id,
                u: e.u,
                v: e.v,
                d_sfm: e.sfm_depth,
                d_nn: e.nn_depth,
                reproj_error: e.reproj_error,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expected: &'static str) -> Result<bool, FormatError> {
    let headers = r.headers()?.clone();
    if headers.is_empty() {
        return Ok(false);
    }
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(FormatError::BadHeader { found, expected });
    }
    Ok(true)
}

/// Reads frames grouped by image id in order of first appearance; entry
/// order within a frame is preserved. An input without any row is
/// [`FormatError::EmptyInput`].
pub fn read_frames_csv<R: Read>(input: R) -> Result<Vec<SparseDepthFrame>, FormatError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    if !check_header(&mut r, FRAME_HEADER)? {
        return Err(FormatError::EmptyInput);
    }
    let mut frames: Vec<SparseDepthFrame> = Vec::new();
    for row in r.deserialize::<FrameRow>() {
        let row = row?;
        let entry = SparseDepthEntry {
            point3d_id: row.point3d_id,
            u: row.u,
            v: row.v,
            sfm_depth: row.d_sfm,
            nn_depth: row.d_nn,
            reproj_error: row.reproj_error,
        };
        match frames.iter_mut().find(|f| f.image_id == row.image_id) {
            Some(f) => f.entries.push(entry),
            None => frames.push(SparseDepthFrame { image_id: row.image_id, entries: vec![entry] }),
        }
    }
    if frames.is_empty() {
        return Err(FormatError::EmptyInput);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Alignments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentRecord {
    pub image_id: ImageId,
    pub scale: f64,
    pub ransac_scale: f64,
    pub stage1_inlier_indices: Vec<usize>,
    pub stage2_inlier_indices: Vec<usize>,
    pub seed: u64,
}

impl From<&ScaleAlignment> for AlignmentRecord {
    fn from(a: &ScaleAlignment) -> Self {
        Self {
            image_id: a.image_id,
            scale: a.scale,
            ransac_scale: a.ransac_scale,
            stage1_inlier_indices: a.stage1_inliers.clone(),
            stage2_inlier_indices: a.stage2_inliers.clone(),
            seed: a.seed,
        }
    }
}

impl AlignmentRecord {
    pub fn to_alignment(&self) -> ScaleAlignment {
        ScaleAlignment {
            image_id: self.image_id,
            scale: self.scale,
            ransac_scale: self.ransac_scale,
            stage1_inliers: self.stage1_inlier_indices.clone(),
            stage2_inliers: self.stage2_inlier_indices.clone(),
            iterations_used: 0,
            seed: self.seed,
        }
    }
}

pub fn alignment_json(a: &ScaleAlignment) -> Result<String, FormatError> {
    Ok(serde_json::to_string_pretty(&AlignmentRecord::from(a))? + "\n")
}

pub fn parse_alignment_json(src: &str) -> Result<ScaleAlignment, FormatError> {
    Ok(serde_json::from_str::<AlignmentRecord>(src)?.to_alignment())
}

// ---------------------------------------------------------------------------
// Parameter container
//
// "SFTR", u32 version, u32 section count, then per section: u32 name length,
// UTF-8 name, u64 element count, f64 values. All little-endian.

pub const PARAMS_MAGIC: [u8; 4] = *b"SFTR";
pub const PARAMS_VERSION: u32 = 1;

pub type ParamSection = (String, Vec<f64>);

pub fn write_param_sections<W: Write>(mut w: W, sections: &[ParamSection]) -> Result<(), FormatError> {
    w.write_all(&PARAMS_MAGIC)?;
    w.write_u32::<LittleEndian>(PARAMS_VERSION)?;
    w.write_u32::<LittleEndian>(sections.len() as u32)?;
    for (name, values) in sections {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(values.len() as u64)?;
        for &v in values {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_param_sections<R: Read>(mut r: R) -> Result<Vec<ParamSection>, FormatError> {
    let eof = |e: io::Error| if e.kind() == io::ErrorKind::UnexpectedEof { FormatError::Truncated } else { e.into() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != PARAMS_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != PARAMS_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.read_u32::<LittleEndian>().map_err(eof)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut name = Vec::new();
        r.by_ref().take(len as u64).read_to_end(&mut name)?;
        if name.len() != len {
            return Err(FormatError::Truncated);
        }
        let name = String::from_utf8(name)
            .map_err(|_| FormatError::BadSection { name: "?".into(), reason: "name is not UTF-8".into() })?;
        let count = r.read_u64::<LittleEndian>().map_err(eof)?;
        let mut values = Vec::new();
        for _ in 0..count {
            values.push(r.read_f64::<LittleEndian>().map_err(eof)?);
        }
        out.push((name, values));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FormatError::BadSection { name: "<end>".into(), reason: "trailing bytes".into() });
    }
    Ok(out)
}

pub fn write_model_params<W: Write>(w: W, model: &ReferenceModel) -> Result<(), FormatError> {
    let sections: Vec<ParamSection> =
        model.named_blocks().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect();
    write_param_sections(w, &sections)
}

/// Loads a reference model; every block must be present exactly once with
/// the right length.
pub fn read_model_params<R: Read>(r: R) -> Result<ReferenceModel, FormatError> {
    let sections = read_param_sections(r)?;
    let mut model = ReferenceModel::new(0);
    let mut seen = Vec::new();
    for (name, values) in &sections {
        if seen.contains(name) {
            return Err(FormatError::BadSection { name: name.clone(), reason: "duplicate".into() });
        }
        if !model.set_block(name, values) {
            return Err(FormatError::BadSection {
                name: name.clone(),
                reason: format!("unknown block or wrong length {}", values.len()),
            });
        }
        seen.push(name.clone());
    }
    if let Some(missing) = sfm_ttr_core::model::PARAM_BLOCKS.iter().find(|b| !seen.iter().any(|s| s == *b)) {
        return Err(FormatError::BadSection { name: (*missing).to_string(), reason: "missing".into() });
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Loss trace

pub const LOSS_HEADER: &str = "step,image_id,loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    image_id: ImageId,
    loss: f64,
}

pub fn write_loss_trace<W: Write>(out: W, trace: &[LossRecord]) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(LOSS_HEADER.split(','))?;
    for r in trace {
        w.serialize(LossRow { step: r.step, image_id: r.image_id, loss: r.loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_trace<R: Read>(input: R) -> Result<Vec<LossRecord>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    if !check_header(&mut r, LOSS_HEADER)? {
        return Ok(Vec::new());
    }
    r.deserialize::<LossRow>()
        .map(|row| row.map(|x| LossRecord { step: x.step, image_id: x.image_id, loss: x.loss }).map_err(Into::into))
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

impl From<&DepthMetrics> for MetricsRecord {
    fn from(m: &DepthMetrics) -> Self {
        Self {
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse: m.rmse,
            rmse_log: m.rmse_log,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
            count: m.valid_pixel_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Pixel-weighted over all images.
    pub aggregate: MetricsRecord,
}

pub const METRICS_HEADER: &str = "image,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,count";

/// One row per image plus a final `all` row with the aggregate, columns in
/// the usual table order.
pub fn write_metrics_csv<W: Write>(out: W, report: &MetricsReport) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER.split(','))?;
    let rows = report.per_image.iter().map(|m| (m.name.as_str(), &m.metrics));
    for (name, m) in rows.chain([("all", &report.aggregate)]) {
        w.serialize((name, m))?;
    }
    w.flush()?;
    Ok(())
}

pub const BINS_HEADER: &str = "bin_lo,bin_hi,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,count";

/// Depth-bin curve. Bins without pixels have empty metric fields and a zero
/// count.
pub fn write_bins_csv<W: Write>(out: W, bins: &[BinMetrics]) -> Result<(), FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(BINS_HEADER.split(','))?;
    for b in bins {
        let mut rec = vec![b.lo.to_string(), b.hi.to_string()];
        match &b.metrics {
            Some(m) => {
                rec.extend(m.as_array().iter().map(f64::to_string));
                rec.push(m.valid_pixel_count.to_string());
            }
            None => {
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push("0".into());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a bin curve written by [`write_bins_csv`].
pub fn read_bins_csv<R: Read>(input: R) -> Result<Vec<BinMetrics>, FormatError> {
    let mut r = csv::Reader::from_reader(input);
    if !check_header(&mut r, BINS_HEADER)? {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, FormatError> {
            rec[i].parse().map_err(|_| FormatError::BadSection { name: "bins".into(), reason: format!("bad number `{}`", &rec[i]) })
        };
        let (lo, hi) = (num(0)?, num(1)?);
        let metrics = if rec[2].is_empty() {
            None
        } else {
            Some(DepthMetrics {
                abs_rel: num(2)?,
                sq_rel: num(3)?,
                rmse: num(4)?,
                rmse_log: num(5)?,
                delta1: num(6)?,
                delta2: num(7)?,
                delta3: num(8)?,
                valid_pixel_count: num(9)? as usize,
            })
        };
        out.push(BinMetrics { lo, hi, metrics });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfm_ttr_core::model::DepthModel;
    use sfm_ttr_core::RefineMode;

    fn frame(id: ImageId, n: usize) -> SparseDepthFrame {
        SparseDepthFrame {
            image_id: id,
            entries: (0..n)
                .map(|i| SparseDepthEntry {
                    point3d_id: 100 + i as u64,
                    u: 0.1 + i as f64 / 3.0,
                    v: 1e-17,
                    sfm_depth: std::f64::consts::PI * (i + 1) as f64,
                    nn_depth: 1.0 / 3.0,
                    reproj_error: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn frames_round_trip_bit_exact() {
        let frames = vec![frame(3, 4), frame(1, 2)];
        let mut buf = Vec::new();
        write_frames_csv(&mut buf, &frames).unwrap();
        assert!(buf.starts_with(FRAME_HEADER.as_bytes()));
        assert_eq!(read_frames_csv(buf.as_slice()).unwrap(), frames);
    }

    #[test]
    fn empty_frames_input() {
        assert!(matches!(read_frames_csv(&b""[..]), Err(FormatError::EmptyInput)));
        let header_only = format!("{FRAME_HEADER}\n");
        assert!(matches!(read_frames_csv(header_only.as_bytes()), Err(FormatError::EmptyInput)));
        assert!(matches!(read_frames_csv(&b"a,b\n1,2\n"[..]), Err(FormatError::BadHeader { .. })));
    }

    #[test]
    fn alignment_json_fields() {
        let a = ScaleAlignment {
            image_id: 2,
            scale: 0.27027027027027023,
            ransac_scale: 0.27,
            stage1_inliers: vec![0, 2],
            stage2_inliers: vec![0, 1, 2],
            iterations_used: 20,
            seed: 9,
        };
        let s = alignment_json(&a).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["image_id", "scale", "ransac_scale", "stage1_inlier_indices", "stage2_inlier_indices", "seed"] {
            assert!(keys.contains(&k), "{k}");
        }
        let back = parse_alignment_json(&s).unwrap();
        assert_eq!(back.scale, a.scale);
        assert_eq!(back.stage2_inliers, a.stage2_inliers);
        assert!(parse_alignment_json(r#"{"image_id":1}"#).is_err());
    }

    #[test]
    fn params_container_layout() {
        let sections = vec![("ab".to_string(), vec![1.5, -2.0])];
        let mut buf = Vec::new();
        write_param_sections(&mut buf, &sections).unwrap();
        let mut expected = b"SFTR".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_param_sections(buf.as_slice()).unwrap(), sections);
        assert!(matches!(read_param_sections(&buf[..buf.len() - 3]), Err(FormatError::Truncated)));
        assert!(matches!(read_param_sections(&b"XXXX"[..]), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn model_params_round_trip() {
        let m = ReferenceModel::new(11);
        let mut buf = Vec::new();
        write_model_params(&mut buf, &m).unwrap();
        let back = read_model_params(buf.as_slice()).unwrap();
        assert_eq!(back.params(RefineMode::FullModel), m.params(RefineMode::FullModel));

        let mut partial = Vec::new();
        let blocks: Vec<ParamSection> =
            m.named_blocks().into_iter().skip(1).map(|(n, v)| (n.to_string(), v.to_vec())).collect();
        write_param_sections(&mut partial, &blocks).unwrap();
        assert!(matches!(read_model_params(partial.as_slice()), Err(FormatError::BadSection { .. })));
    }

    #[test]
    fn loss_trace_round_trip() {
        let t = vec![LossRecord { step: 1, image_id: 4, loss: 0.1 }, LossRecord { step: 2, image_id: 1, loss: 1e-300 }];
        let mut buf = Vec::new();
        write_loss_trace(&mut buf, &t).unwrap();
        assert!(buf.starts_with(b"step,image_id,loss\n1,4,0.1\n"));
        assert_eq!(read_loss_trace(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn bins_round_trip_with_empty_bin() {
        let m = DepthMetrics {
            abs_rel: 0.1,
            sq_rel: 0.2,
            rmse: 0.3,
            rmse_log: 0.4,
            delta1: 0.5,
            delta2: 0.6,
            delta3: 0.7,
            valid_pixel_count: 12,
        };
        let bins = vec![BinMetrics { lo: 1.0, hi: 2.0, metrics: Some(m) }, BinMetrics { lo: 2.0, hi: 3.0, metrics: None }];
        let mut buf = Vec::new();
        write_bins_csv(&mut buf, &bins).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(BINS_HEADER));
        assert!(text.ends_with("2,3,,,,,,,,0\n"), "{text}");
        assert_eq!(read_bins_csv(buf.as_slice()).unwrap(), bins);
    }

    #[test]
    fn metrics_csv_order() {
        let rec = MetricsRecord { abs_rel: 1.0, sq_rel: 2.0, rmse: 3.0, rmse_log: 4.0, delta1: 5.0, delta2: 6.0, delta3: 7.0, count: 8 };
        let report = MetricsReport { per_image: vec![ImageMetrics { name: "a".into(), metrics: rec }], aggregate: rec };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &report).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{METRICS_HEADER}\na,1.0,2.0,3.0,4.0,5.0,6.0,7.0,8\nall,1.0,2.0,3.0,4.0,5.0,6.0,7.0,8\n"));
    }
}
