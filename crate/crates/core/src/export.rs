//! Result files and summary statistics: MetaImage rasters, detection CSV, the raw tensor
//! container, and heatmap histograms.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::patchflow::{Detection, Heatmap};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

/// Single-channel 8-bit raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

pub fn metaimage_header(width: u32, height: u32, raw_name: &str) -> String {
    format!(
        "ObjectType = Image\nNDims = 2\nDimSize = {width} {height}\nElementType = MET_UCHAR\nElementDataFile = {raw_name}\n"
    )
}

/// Writes `<stem>.mhd` and `<stem>.raw` next to each other; `path` names the `.mhd` file.
pub fn export_metaimage(raster: &Raster, path: impl AsRef<Path>) -> Result<(), ExportError> {
    let mhd = path.as_ref();
    if raster.data.len() != raster.width as usize * raster.height as usize {
        return Err(ExportError::Format(format!(
            "{}x{} raster holds {} bytes",
            raster.width,
            raster.height,
            raster.data.len()
        )));
    }
    let raw = mhd.with_extension("raw");
    let raw_name = raw.file_name().and_then(|n| n.to_str()).ok_or_else(|| ExportError::Format("bad path".into()))?;
    fs::write(&raw, &raster.data).map_err(io(&raw))?;
    fs::write(mhd, metaimage_header(raster.width, raster.height, raw_name)).map_err(io(mhd))?;
    Ok(())
}

pub fn import_metaimage(path: impl AsRef<Path>) -> Result<Raster, ExportError> {
    let mhd = path.as_ref();
    let text = fs::read_to_string(mhd).map_err(io(mhd))?;
    let mut dims = None;
    let mut file = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| ExportError::Format(format!("bad header line `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "ObjectType" if v != "Image" => return Err(ExportError::Format(format!("ObjectType {v}"))),
            "NDims" if v != "2" => return Err(ExportError::Format(format!("NDims {v}, only 2 is supported"))),
            "ElementType" if v != "MET_UCHAR" => {
                return Err(ExportError::Format(format!("ElementType {v}, only MET_UCHAR is supported")))
            }
            "DimSize" => {
                let parts: Vec<u32> = v
                    .split_whitespace()
                    .map(|s| s.parse().map_err(|_| ExportError::Format(format!("DimSize `{v}`"))))
                    .collect::<Result<_, _>>()?;
                let [w, h] = parts[..] else {
                    return Err(ExportError::Format(format!("DimSize `{v}` needs two values")));
                };
                dims = Some((w, h));
            }
            "ElementDataFile" => file = Some(v.to_string()),
            _ => {}
        }
    }
    let (width, height) = dims.ok_or_else(|| ExportError::Format("missing DimSize".into()))?;
    let file = file.ok_or_else(|| ExportError::Format("missing ElementDataFile".into()))?;
    let raw = mhd.parent().unwrap_or(Path::new(".")).join(file);
    let data = fs::read(&raw).map_err(io(&raw))?;
    if data.len() != width as usize * height as usize {
        return Err(ExportError::Format(format!(
            "DimSize {width} {height} needs {} bytes, {} holds {}",
            width as usize * height as usize,
            raw.display(),
            data.len()
        )));
    }
    Ok(Raster { width, height, data })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    class: u32,
    score: String,
}

/// Writes `x,y,w,h,class,score` rows: coordinates rounded to whole level-0 pixels, score with
/// six decimals.
pub fn write_detections_csv<S: Scalar, W: Write>(detections: &[Detection<S>], out: W) -> Result<(), ExportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["x", "y", "w", "h", "class", "score"])?;
    for d in detections {
        let r = |v: S| v.as_f64().round() as i64;
        w.serialize(CsvRow {
            x: r(d.x),
            y: r(d.y),
            w: r(d.w),
            h: r(d.h),
            class: d.class_id,
            score: format!("{:.6}", d.score.as_f64()),
        })?;
    }
    w.flush().map_err(|e| ExportError::Io { path: PathBuf::from("<csv>"), source: e })?;
    Ok(())
}

pub fn export_detections_csv<S: Scalar>(detections: &[Detection<S>], path: impl AsRef<Path>) -> Result<(), ExportError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io(path))?;
    write_detections_csv(detections, std::io::BufWriter::new(file))
}

pub fn read_detections_csv<S: Scalar, R: Read>(input: R) -> Result<Vec<Detection<S>>, ExportError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "w", "h", "class", "score"] {
        return Err(ExportError::Format(format!("unexpected header {headers:?}")));
    }
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            let score: f64 =
                row.score.parse().map_err(|_| ExportError::Format(format!("score `{}`", row.score)))?;
            let f = |v: i64| S::from_f64_lossy(v as f64);
            Ok(Detection::new(f(row.x), f(row.y), f(row.w), f(row.h), row.class, S::from_f64_lossy(score)))
        })
        .collect()
}

pub fn import_detections_csv<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Detection<S>>, ExportError> {
    let path = path.as_ref();
    read_detections_csv(fs::File::open(path).map_err(io(path))?)
}

pub const TENSOR_MAGIC: &[u8; 5] = b"PTNS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DType::U8,
            1 => DType::F32,
            2 => DType::F64,
            _ => return None,
        })
    }

    pub fn of<S: Scalar>() -> Self {
        if S::BYTES == 4 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

/// Header-plus-payload tensor file:
///
/// ```text
/// "PTNS1" | dtype u8 | rank u8 | rank x u64 LE dims | row-major little-endian payload
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

impl TensorContainer {
    pub fn new(dtype: DType, shape: Vec<u64>, payload: Vec<u8>) -> Result<Self, ExportError> {
        let t = Self { dtype, shape, payload };
        t.check()?;
        Ok(t)
    }

    pub fn from_u8(shape: Vec<u64>, data: &[u8]) -> Result<Self, ExportError> {
        Self::new(DType::U8, shape, data.to_vec())
    }

    pub fn from_scalars<S: Scalar>(shape: Vec<u64>, data: &[S]) -> Result<Self, ExportError> {
        Self::new(DType::of::<S>(), shape, data.iter().flat_map(|v| v.to_le_vec()).collect())
    }

    pub fn to_scalars<S: Scalar>(&self) -> Result<Vec<S>, ExportError> {
        if self.dtype != DType::of::<S>() {
            return Err(ExportError::Format(format!("payload is {:?}", self.dtype)));
        }
        Ok(self.payload.chunks_exact(S::BYTES).map(S::from_le_slice).collect())
    }

    pub fn element_count(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d))
    }

    fn check(&self) -> Result<(), ExportError> {
        if self.shape.len() > usize::from(u8::MAX) {
            return Err(ExportError::Format("rank above 255".into()));
        }
        let n = self.element_count().ok_or_else(|| ExportError::Format("shape overflows".into()))?;
        if n.checked_mul(self.dtype.size() as u64) != Some(self.payload.len() as u64) {
            return Err(ExportError::Format(format!(
                "shape {:?} of {:?} needs {} elements, payload holds {} bytes",
                self.shape,
                self.dtype,
                n,
                self.payload.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + self.payload.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype as u8);
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ExportError> {
        let bad = |m: &str| ExportError::Format(m.to_string());
        if bytes.len() < 7 || &bytes[..5] != TENSOR_MAGIC {
            return Err(bad("missing PTNS1 magic"));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[6] as usize;
        let body = &bytes[7..];
        if body.len() < rank * 8 {
            return Err(bad("truncated shape"));
        }
        let shape = body[..rank * 8].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(dtype, shape, body[rank * 8..].to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ExportError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(io(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ExportError> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(io(path))?)
    }
}

/// Argmax classes and `round(255 * confidence)` as two patch-grid rasters.
pub fn heatmap_rasters<S: Scalar>(h: &Heatmap<S>) -> (Raster, Raster) {
    let r = |data| Raster { width: h.cols, height: h.rows, data };
    (r(h.class_raster()), r(h.confidence_raster()))
}

/// Per-class counts of the argmax over processed cells.
pub fn class_histogram<S: Scalar>(h: &Heatmap<S>) -> Vec<u64> {
    let mut counts = vec![0u64; h.classes as usize];
    for row in 0..h.rows {
        for col in 0..h.cols {
            if let Some(k) = h.argmax(col, row) {
                counts[k as usize] += 1;
            }
        }
    }
    counts
}

/// Class with the most cells outside `exclude`, lowest id on ties; `None` when no eligible cell
/// exists.
pub fn slide_level_call(histogram: &[u64], exclude: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, u64)> = None;
    for (k, &n) in histogram.iter().enumerate() {
        let k = k as u32;
        if n == 0 || exclude.contains(&k) {
            continue;
        }
        if best.map_or(true, |(_, m)| n > m) {
            best = Some((k, n));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStats {
    pub histogram: Vec<u64>,
    pub processed_cells: u64,
    pub total_cells: u64,
    pub slide_call: Option<u32>,
}

pub fn heatmap_stats<S: Scalar>(h: &Heatmap<S>, exclude: &[u32]) -> HeatmapStats {
    let histogram = class_histogram(h);
    HeatmapStats {
        processed_cells: histogram.iter().sum(),
        total_cells: u64::from(h.cols) * u64::from(h.rows),
        slide_call: slide_level_call(&histogram, exclude),
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchflow::stitch_classification;

    #[test]
    fn metaimage_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.mhd");
        export_metaimage(&Raster { width: 4, height: 2, data: vec![0; 8] }, &path).unwrap();
        let header = fs::read_to_string(&path).unwrap();
        assert_eq!(
            header,
            "ObjectType = Image\nNDims = 2\nDimSize = 4 2\nElementType = MET_UCHAR\nElementDataFile = mask.raw\n"
        );
        assert_eq!(fs::read(dir.path().join("mask.raw")).unwrap().len(), 8);
        assert_eq!(import_metaimage(&path).unwrap().data, vec![0; 8]);
    }

    #[test]
    fn metaimage_rejects_other_types_and_short_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mhd");
        export_metaimage(&Raster { width: 3, height: 3, data: vec![1; 9] }, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("MET_UCHAR", "MET_FLOAT")).unwrap();
        assert!(import_metaimage(&path).unwrap_err().to_string().contains("MET_FLOAT"));
        fs::write(&path, &text).unwrap();
        fs::write(dir.path().join("a.raw"), [1u8; 5]).unwrap();
        assert!(matches!(import_metaimage(&path), Err(ExportError::Format(_))));
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        write_detections_csv::<f64, _>(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,w,h,class,score\n");
        let mut buf = Vec::new();
        let d = Detection::new(3112.0, 2128.0, 40.0, 40.0, 0, 1.0);
        write_detections_csv(&[d], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "x,y,w,h,class,score\n3112,2128,40,40,0,1.000000\n");
        assert_eq!(read_detections_csv::<f64, _>(&buf[..]).unwrap(), vec![d]);
    }

    #[test]
    fn tensor_container_bytes() {
        let t = TensorContainer::from_u8(vec![2, 3], &[1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..7], b"PTNS1\x00\x02");
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 16 + 6);
        assert_eq!(TensorContainer::decode(&bytes).unwrap(), t);
        assert!(TensorContainer::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorContainer::from_u8(vec![2, 2], &[0; 5]).is_err());
        let f = TensorContainer::from_scalars(vec![2], &[0.5f32, -1.25]).unwrap();
        assert_eq!(TensorContainer::decode(&f.encode()).unwrap().to_scalars::<f32>().unwrap(), vec![0.5, -1.25]);
    }

    fn onehot(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[k] = 1.0;
        v
    }

    #[test]
    fn histogram_and_call() {
        let h = stitch_classification(2, 2, 4, [(0, 0, onehot(0)), (1, 0, onehot(0)), (0, 1, onehot(1)), (1, 1, onehot(3))])
            .unwrap();
        assert_eq!(class_histogram(&h), vec![2, 1, 0, 1]);
        let empty = stitch_classification::<f64>(2, 2, 4, []).unwrap();
        assert_eq!(class_histogram(&empty), vec![0; 4]);
        assert_eq!(slide_level_call(&[5, 7], &[]), Some(1));
        assert_eq!(slide_level_call(&[3, 0, 3], &[]), Some(0));
        assert_eq!(slide_level_call(&[9, 0, 1], &[0]), Some(2));
        assert_eq!(slide_level_call(&[9, 0, 0], &[0]), None);
        let s = heatmap_stats(&h, &[]);
        assert_eq!((s.processed_cells, s.slide_call), (4, Some(0)));
    }
}
